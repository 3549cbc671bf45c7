#include "ron/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "ron/compressor.hpp"
#include "ron/errors.hpp"

namespace ron {
namespace {

using u64 = std::uint64_t;

u64 as_u64(Index v) { return static_cast<u64>(v); }

void count_layers(const std::vector<Layer>& layers, const Shape& input, const std::string& prefix,
                  std::vector<FlopEntry>& out) {
  const auto shapes = infer_shapes(layers, input);
  Shape in = input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    const Shape& o = shapes[i];
    const std::string label = prefix + "layer " + std::to_string(i);
    if (const auto* d = std::get_if<DenseLayer>(&l.op)) {
      out.push_back({label, "dense", 2 * as_u64(d->weight.rows()) * as_u64(d->weight.cols()), true});
    } else if (const auto* c = std::get_if<Conv2dLayer>(&l.op)) {
      const Kernel& k = c->kernel;
      out.push_back({label, "conv2d",
                     2 * as_u64(k.height) * as_u64(k.width) * as_u64(k.in_channels) * as_u64(k.out_channels) *
                         as_u64(o.height) * as_u64(o.width),
                     true});
    } else if (std::holds_alternative<BatchNormLayer>(l.op)) {
      out.push_back({label, "batchnorm", 2 * as_u64(o.size()), false});
    } else if (const auto* a = std::get_if<ActivationLayer>(&l.op)) {
      out.push_back({label, a->kind.name(), a->kind.is_identity() ? 0 : as_u64(o.size()), false});
    } else if (std::holds_alternative<MaxPoolLayer>(l.op)) {
      out.push_back({label, "maxpool", as_u64(o.size()), false});
    } else if (const auto* r = std::get_if<ResidualLayer>(&l.op)) {
      for (std::size_t b = 0; b < r->branches.size(); ++b)
        count_layers(r->branches[b], in, label + " branch " + std::to_string(b) + " ", out);
      out.push_back({label, "residual_sum", as_u64(static_cast<Index>(r->branches.size()) - 1) * as_u64(o.size()), false});
    }
    in = o;
  }
}

void count_stage(const StudentStage& s, const std::string& label, std::vector<FlopEntry>& out) {
  out.push_back({label, "dense", 2 * as_u64(s.weight.rows()) * as_u64(s.weight.cols()), true});
  if (!s.activation.is_identity()) out.push_back({label, s.activation.name(), as_u64(s.weight.rows()), false});
  if (s.pool_window > 1) out.push_back({label, "maxpool", as_u64(s.output_dim()), false});
}

}  // namespace

u64 FlopReport::total() const {
  u64 t = 0;
  for (const auto& e : layers) t += e.flops;
  return t;
}

u64 FlopReport::weight_total() const {
  u64 t = 0;
  for (const auto& e : layers)
    if (e.weight) t += e.flops;
  return t;
}

std::string FlopReport::to_tsv() const {
  std::ostringstream os;
  os << "label\tkind\tflops\tweight\n";
  for (const auto& e : layers) os << e.label << '\t' << e.kind << '\t' << e.flops << '\t' << (e.weight ? 1 : 0) << '\n';
  os << "total\t-\t" << total() << "\t-\n";
  os << "weight_total\t-\t" << weight_total() << "\t-\n";
  return os.str();
}

FlopReport flops_teacher(const TeacherNetwork& net) {
  FlopReport r;
  count_layers(net.layers, net.input_shape, "", r.layers);
  return r;
}

FlopReport flops_student(const StudentNetwork& net) {
  FlopReport r;
  count_layers(net.prefix, net.input_shape, "prefix ", r.layers);
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    const std::string label = "block " + std::to_string(i);
    if (const auto* s = std::get_if<StudentStage>(&net.blocks[i].op)) {
      count_stage(*s, label, r.layers);
      continue;
    }
    const auto& res = std::get<StudentResidual>(net.blocks[i].op);
    for (std::size_t b = 0; b < res.branches.size(); ++b) {
      for (std::size_t t = 0; t < res.branches[b].size(); ++t)
        count_stage(res.branches[b][t], label + " branch " + std::to_string(b) + " stage " + std::to_string(t),
                    r.layers);
      r.layers.push_back({label + " merge " + std::to_string(b), "dense",
                          2 * as_u64(res.merges[b].rows()) * as_u64(res.merges[b].cols()), true});
    }
    r.layers.push_back({label, "residual_sum",
                        as_u64(static_cast<Index>(res.branches.size()) - 1) * as_u64(res.output_dim()), false});
    if (!res.activation.is_identity())
      r.layers.push_back({label, res.activation.name(), as_u64(res.output_dim()), false});
  }
  r.layers.push_back({"lift", "dense", 2 * as_u64(net.lift.rows()) * as_u64(net.lift.cols()), true});
  return r;
}

double flop_reduction(const FlopReport& teacher, const FlopReport& student) {
  if (student.total() == 0) throw ShapeError("student FLOP count is zero");
  return static_cast<double>(teacher.total()) / static_cast<double>(student.total());
}

double weight_flop_reduction(const FlopReport& teacher, const FlopReport& student) {
  if (student.weight_total() == 0) throw ShapeError("student weight FLOP count is zero");
  return static_cast<double>(teacher.weight_total()) / static_cast<double>(student.weight_total());
}

Accuracy evaluate(const Matrix& logits, const std::vector<Index>& labels) {
  if (static_cast<Index>(labels.size()) != logits.rows())
    throw ShapeError("evaluate: " + std::to_string(labels.size()) + " labels for " + std::to_string(logits.rows()) +
                     " samples");
  if (logits.rows() == 0) throw ShapeError("evaluate: empty batch");
  Index hit1 = 0, hit5 = 0;
  for (Index i = 0; i < logits.rows(); ++i) {
    const Index y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= logits.cols())
      throw ShapeError("evaluate: label " + std::to_string(y) + " outside [0, " + std::to_string(logits.cols()) + ")");
    const double v = logits(i, y);
    Index rank = 0;
    for (Index j = 0; j < logits.cols(); ++j)
      if (logits(i, j) > v || (logits(i, j) == v && j < y)) ++rank;
    if (rank == 0) ++hit1;
    if (rank < 5) ++hit5;
  }
  const auto n = static_cast<double>(logits.rows());
  return {static_cast<double>(hit1) / n, static_cast<double>(hit5) / n};
}

std::vector<Index> labels_from(const Matrix& column, Index classes) {
  if (column.cols() != 1) throw ShapeError("labels must be a single column, got " + std::to_string(column.cols()));
  std::vector<Index> out;
  out.reserve(static_cast<std::size_t>(column.rows()));
  for (Index i = 0; i < column.rows(); ++i) {
    const double v = column(i, 0);
    if (v != std::floor(v) || v < 0 || v >= static_cast<double>(classes))
      throw ShapeError("label " + std::to_string(v) + " at row " + std::to_string(i) + " is not a class index");
    out.push_back(static_cast<Index>(v));
  }
  return out;
}

double max_relative_error(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("max_relative_error: shape mismatch");
  if (a.size() == 0) return 0.0;
  return (a - b).cwiseAbs().maxCoeff() / std::max(1e-300, b.cwiseAbs().maxCoeff());
}

double median_runtime_ms(const std::function<void()>& fn, int runs) {
  fn();
  std::vector<double> times;
  for (int i = 0; i < std::max(1, runs); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::nth_element(times.begin(), times.begin() + static_cast<std::ptrdiff_t>(times.size() / 2), times.end());
  return times[times.size() / 2];
}

SpectrumReport spectrum(const TeacherNetwork& net, const Matrix& data, const std::vector<std::size_t>& layers,
                        const SpectrumOptions& opts) {
  net.validate();
  if (data.cols() != net.input_dim())
    throw ShapeError("spectrum: data has " + std::to_string(data.cols()) + " features, model expects " +
                     std::to_string(net.input_dim()));
  const auto eligible = eligible_layers(net);
  std::vector<std::size_t> wanted = layers.empty() ? eligible : layers;

  // A layer's output is taken after the layers it absorbs, i.e. just before
  // the next eligible layer.
  auto stage_end = [&](std::size_t pos) {
    const auto next = std::upper_bound(eligible.begin(), eligible.end(), pos);
    return next == eligible.end() ? net.layers.size() - 1 : *next - 1;
  };

  SpectrumReport report;
  std::vector<std::pair<std::size_t, std::size_t>> jobs;  // (end position, entry index)
  for (std::size_t pos : wanted) {
    SpectrumEntry e;
    e.layer = static_cast<Index>(pos);
    if (pos >= net.layers.size()) {
      e.skipped = true;
      e.note = "no such layer";
    } else {
      e.label = "layer " + std::to_string(pos) + " (" + net.layers[pos].tag() + ")";
      if (!std::binary_search(eligible.begin(), eligible.end(), pos)) {
        e.skipped = true;
        e.note = net.layers[pos].tag() + " has no matrix output of its own";
      } else {
        jobs.emplace_back(stage_end(pos), report.layers.size());
      }
    }
    report.layers.push_back(std::move(e));
  }
  std::sort(jobs.begin(), jobs.end());

  const Index n = std::min(data.rows(), std::max<Index>(1, opts.calibration_limit));
  Matrix cur = data.topRows(n);
  Shape shape = net.input_shape;
  std::size_t job = 0;
  for (std::size_t i = 0; i < net.layers.size() && job < jobs.size(); ++i) {
    cur = forward_layers({net.layers[i]}, shape, cur);
    shape = output_shape(net.layers[i], shape);
    for (; job < jobs.size() && jobs[job].first == i; ++job) {
      SpectrumEntry& e = report.layers[jobs[job].second];
      std::vector<double> sv;
      if (cur.rows() <= opts.materialize_cap / std::max<Index>(1, cur.cols())) {
        sv = singular_values(cur);
      } else {
        const Index width = std::min<Index>(2 * cur.cols(), default_sketch_width(256));
        SketchAccumulator acc(cur.cols(), width, opts.seed + i);
        for (Index r = 0; r < cur.rows(); ++r)
          acc.insert(std::span<const double>(cur.row(r).data(), static_cast<std::size_t>(cur.cols())));
        sv = singular_values(acc.buckets());
        e.note = "sketched";
      }
      double total = 0.0;
      for (double s : sv) total += s * s;
      const double top = sv.empty() ? 0.0 : sv.front();
      for (double s : sv) e.values.push_back(top > 0.0 ? s / top : 0.0);
      const auto lead = static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(sv.size())));
      double tail = 0.0;
      for (std::size_t k = lead; k < sv.size(); ++k) tail += sv[k] * sv[k];
      e.tail_mass = total > 0.0 ? tail / total : 0.0;
      e.rank99 = resolve_rank(EnergyThreshold{0.01}, static_cast<Index>(sv.size()), sv);
    }
  }
  return report;
}

std::string SpectrumReport::to_tsv() const {
  std::ostringstream os;
  os.precision(17);
  os << "layer\tindex\tnormalized_sigma\n";
  for (const auto& e : layers) {
    if (e.skipped) continue;
    for (std::size_t i = 0; i < e.values.size(); ++i) os << e.layer << '\t' << i << '\t' << e.values[i] << '\n';
  }
  return os.str();
}

std::string SpectrumReport::summary_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : layers) {
    nlohmann::json j{{"layer", e.layer}, {"label", e.label}, {"skipped", e.skipped}};
    if (!e.note.empty()) j["note"] = e.note;
    if (!e.skipped) {
      j["count"] = e.values.size();
      j["tail_mass"] = e.tail_mass;
      j["rank99"] = e.rank99;
    }
    arr.push_back(std::move(j));
  }
  return nlohmann::json{{"spectra", arr}}.dump(2) + "\n";
}

}  // namespace ron
