#include "ron/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ron/compressor.hpp"
#include "ron/errors.hpp"
#include "ron/metrics.hpp"
#include "ron/model_io.hpp"

namespace ron {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct CompressArgs {
  std::string model, data, plan, out = "ron_out";
  std::optional<double> rank_fraction, energy;
  std::optional<Index> rank, oversampling;
  double oversample_factor = 1.5;
  Index layers_from = 0;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  Index calibration = 2048;
  bool force_sketch = false;
  bool seed_given = false;
};

struct InspectArgs {
  std::string model, data, out;
  std::vector<std::size_t> layers;
  std::uint64_t seed = 0;
  Index calibration = 2048;
};

struct EvalArgs {
  std::string model, student, data, labels;
  bool timing = false;
};

struct MaxvolArgs {
  std::string matrix;
  std::optional<Index> rank;
  Index oversampling = 0;
  double tol = 0.05;
};

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

double round2(double v) { return std::round(v * 100.0) / 100.0; }

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

CompressionPlan plan_from(const CompressArgs& a) {
  CompressionPlan plan;
  if (!a.plan.empty()) {
    plan = load_plan(a.plan);
  } else {
    const int given = int(a.rank_fraction.has_value()) + int(a.energy.has_value()) + int(a.rank.has_value());
    if (given > 1) throw PlanError("choose one of --rank-fraction, --energy, --rank");
    if (a.rank_fraction) plan.default_strategy = RankFraction{*a.rank_fraction};
    if (a.energy) plan.default_strategy = EnergyThreshold{*a.energy};
    if (a.rank) plan.default_strategy = FixedRank{*a.rank};
    plan.first_compressed_layer = a.layers_from;
    plan.oversample_factor = a.oversample_factor;
  }
  // An explicit --seed overrides the plan file.
  if (a.plan.empty() || a.seed_given) plan.seed = a.seed;
  return plan;
}

std::string error_tsv(const ErrorReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << "label\tD\tR\tP\tbound_coefficient\tresidual_rms\tresidual_max\tbound_rms\tempirical_rms\t"
        "empirical_max\tworst_ratio\tbound_holds\tsketched\n";
  for (const auto& e : r.layers)
    os << e.label << '\t' << e.dim << '\t' << e.rank << '\t' << e.oversampling << '\t' << e.bound_coefficient << '\t'
       << e.residual_rms << '\t' << e.residual_max << '\t' << e.bound_rms << '\t' << e.empirical_rms << '\t'
       << e.empirical_max << '\t' << e.worst_ratio << '\t' << (e.bound_holds ? "yes" : "no") << '\t'
       << (e.sketched ? "yes" : "no") << '\n';
  return os.str();
}

int cmd_compress(const CompressArgs& a, std::ostream& out, std::ostream& err) {
  const TeacherNetwork net = load_model(a.model);
  const Matrix data = load_dataset(a.data);
  CompressionPlan plan = plan_from(a);

  // An explicit P applies to every compressed layer.
  if (a.oversampling) {
    const Index k = static_cast<Index>(eligible_layers(net).size());
    for (Index l = plan.first_compressed_layer; l < k; ++l) {
      if (plan.entry(l)) continue;
      plan.layers.push_back({l, plan.default_strategy, a.oversampling, std::nullopt});
    }
  }
  plan.validate();

  CompressOptions opts;
  opts.calibration_limit = a.calibration;
  opts.threads = std::max(1u, a.threads);
  opts.force_sketch = a.force_sketch;
  const CompressionResult res = build_student(net, data, plan, opts);
  for (const auto& w : res.report.warnings) err << "warning: " << w << '\n';

  const FlopReport tf = flops_teacher(net);
  const FlopReport sf = flops_student(res.student);
  const double ratio = flop_reduction(tf, sf);

  const fs::path dir(a.out);
  ensure_dir(dir);
  save_student(res.student, dir / "student.ronm");
  write_file(dir / "error_report.tsv", error_tsv(res.report));
  write_file(dir / "flops.tsv", "# teacher\n" + tf.to_tsv() + "# student\n" + sf.to_tsv());

  json layers = json::array();
  for (const auto& e : res.report.layers)
    layers.push_back({{"label", e.label},
                      {"D", e.dim},
                      {"R", e.rank},
                      {"P", e.oversampling},
                      {"bound_coefficient", e.bound_coefficient},
                      {"residual_rms", e.residual_rms},
                      {"empirical_rms", e.empirical_rms},
                      {"bound_holds", e.bound_holds}});
  json summary{{"plan", json::parse(plan_to_string(plan))},
               {"calibration_rows", res.report.calibration_rows},
               {"holdout_rows", res.report.holdout_rows},
               {"layers", layers},
               {"teacher_flops", tf.total()},
               {"student_flops", sf.total()},
               {"flop_reduction", round2(ratio)},
               {"weight_flop_reduction", round2(weight_flop_reduction(tf, sf))},
               {"flop_convention", "2 FLOPs per multiply-add"},
               {"warnings", res.report.warnings}};
  write_file(dir / "summary.json", summary.dump(2) + "\n");
  write_file(dir / "metadata.json", json{{"created", utc_now()}, {"tool", "ron"}}.dump(2) + "\n");

  char line[128];
  std::snprintf(line, sizeof line, "FLOP reduction %.2f (teacher %llu, student %llu)\n", ratio,
                static_cast<unsigned long long>(tf.total()), static_cast<unsigned long long>(sf.total()));
  out << (dir / "student.ronm").string() << '\n' << line;
  return 0;
}

int cmd_inspect(const InspectArgs& a, std::ostream& out) {
  const TeacherNetwork net = load_model(a.model);
  const Matrix data = load_dataset(a.data);
  SpectrumOptions opts;
  opts.calibration_limit = a.calibration;
  opts.seed = a.seed;
  const SpectrumReport rep = spectrum(net, data, a.layers, opts);

  if (a.out.empty()) {
    out << rep.to_tsv();
    return 0;
  }
  const fs::path dir(a.out);
  ensure_dir(dir);
  for (const auto& e : rep.layers) {
    if (e.skipped) continue;
    std::ostringstream os;
    os.precision(17);
    os << "index\tnormalized_sigma\n";
    for (std::size_t i = 0; i < e.values.size(); ++i) os << i << '\t' << e.values[i] << '\n';
    write_file(dir / ("spectrum_layer" + std::to_string(e.layer) + ".tsv"), os.str());
  }
  write_file(dir / "spectrum.tsv", rep.to_tsv());
  write_file(dir / "spectrum_summary.json", rep.summary_json());
  out << rep.summary_json();
  return 0;
}

json accuracy_json(const Accuracy& acc, std::uint64_t flops) {
  return {{"top1", acc.top1}, {"top5", acc.top5}, {"flops", flops}};
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const Matrix data = load_dataset(a.data);
  const Matrix label_col = load_dataset(a.labels);
  if (label_col.cols() != 1 || label_col.rows() != data.rows())
    throw ShapeError("labels must be one column with one row per sample (" + std::to_string(data.rows()) + ")");

  std::optional<TeacherNetwork> teacher;
  std::optional<StudentNetwork> student;
  if (model_kind(a.model) == "student")
    student = load_student(a.model);
  else
    teacher = load_model(a.model);
  if (!a.student.empty()) {
    if (student) throw ParseError("--model must be a teacher when --student is given");
    student = load_student(a.student);
  }

  json result;
  std::optional<FlopReport> tf, sf;
  Matrix tl, sl;
  if (teacher) {
    tl = forward_teacher(*teacher, data);
    tf = flops_teacher(*teacher);
    result["teacher"] = accuracy_json(evaluate(tl, labels_from(label_col, tl.cols())), tf->total());
    if (a.timing) result["teacher"]["median_ms"] = median_runtime_ms([&] { (void)forward_teacher(*teacher, data); });
  }
  if (student) {
    sl = forward_student(*student, data);
    sf = flops_student(*student);
    result["student"] = accuracy_json(evaluate(sl, labels_from(label_col, sl.cols())), sf->total());
    if (a.timing) result["student"]["median_ms"] = median_runtime_ms([&] { (void)forward_student(*student, data); });
  }
  if (tf && sf) {
    result["flop_reduction"] = round2(flop_reduction(*tf, *sf));
    result["weight_flop_reduction"] = round2(weight_flop_reduction(*tf, *sf));
    if (tl.cols() == sl.cols()) result["max_relative_error"] = max_relative_error(sl, tl);
  } else {
    // A single network is compared with itself.
    result["flop_reduction"] = 1.0;
  }
  result["samples"] = data.rows();
  out << result.dump(2) << '\n';
  return 0;
}

int cmd_maxvol(const MaxvolArgs& a, std::ostream& out) {
  Matrix m = load_dataset(a.matrix);
  if (a.rank) {
    if (*a.rank < 1 || *a.rank > m.cols())
      throw ShapeError("--rank " + std::to_string(*a.rank) + " outside [1, " + std::to_string(m.cols()) + "]");
    m = Matrix(m.leftCols(*a.rank));
  }
  const Index d = m.rows(), r = m.cols();
  const Index p = a.oversampling == 0 ? r : a.oversampling;
  if (p < r || p > d)
    throw PlanError("oversampling P=" + std::to_string(p) + " outside [R, D] = [" + std::to_string(r) + ", " +
                    std::to_string(d) + "]");
  RectMaxvolOptions opts;
  opts.square.tol = a.tol;
  const RowSelection sel = rect_maxvol(m, p, opts);
  const Matrix coef = m * sketched_pinv(m, sel);
  json j{{"D", d},
         {"R", r},
         {"P", p},
         {"indices", sel.indices},
         {"volume", volume(gather_rows(m, sel))},
         {"bound_coefficient", maxvol_bound_coefficient(d, r, p)},
         {"norm", spectral_norm(coef)}};
  out << j.dump(2) << '\n';
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Reduced-order network compression"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML/INI file with option defaults; flags win");

  CompressArgs ca;
  auto* compress = app.add_subcommand("compress", "Build a student network");
  compress->add_option("--model", ca.model, "teacher .ronm")->required()->check(CLI::ExistingFile);
  compress->add_option("--data", ca.data, "calibration .rond")->required()->check(CLI::ExistingFile);
  compress->add_option("--plan", ca.plan, "plan JSON file");
  compress->add_option("--rank-fraction", ca.rank_fraction, "R = ceil(f*D)");
  compress->add_option("--energy", ca.energy, "tail-energy threshold");
  compress->add_option("--rank", ca.rank, "fixed rank for every layer");
  compress->add_option("--oversampling", ca.oversampling, "fixed P for every layer");
  compress->add_option("--oversample-factor", ca.oversample_factor, "P = ceil(factor*R)")->capture_default_str();
  compress->add_option("--layers-from", ca.layers_from, "first compressed eligible layer")->capture_default_str();
  auto* seed_opt = compress->add_option("--seed", ca.seed)->capture_default_str();
  compress->add_option("--out", ca.out, "output directory")->capture_default_str();
  compress->add_option("--threads", ca.threads)->capture_default_str();
  compress->add_option("--calibration", ca.calibration, "calibration sample limit")->capture_default_str();
  compress->add_flag("--force-sketch", ca.force_sketch, "always stream activations through the count sketch");

  InspectArgs ia;
  auto* inspect = app.add_subcommand("inspect", "Normalized singular spectra of layer outputs");
  inspect->add_option("--model", ia.model)->required()->check(CLI::ExistingFile);
  inspect->add_option("--data", ia.data)->required()->check(CLI::ExistingFile);
  inspect->add_option("--layers", ia.layers, "teacher layer positions")->delimiter(',');
  inspect->add_option("--out", ia.out, "output directory; stdout when omitted");
  inspect->add_option("--seed", ia.seed)->capture_default_str();
  inspect->add_option("--calibration", ia.calibration)->capture_default_str();

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Top-1/top-5 accuracy and FLOP summary");
  eval->add_option("--model", ea.model, "teacher or student .ronm")->required()->check(CLI::ExistingFile);
  eval->add_option("--student", ea.student, "student .ronm")->check(CLI::ExistingFile);
  eval->add_option("--data", ea.data)->required()->check(CLI::ExistingFile);
  eval->add_option("--labels", ea.labels, "one-column .rond of class indices")->required()->check(CLI::ExistingFile);
  eval->add_flag("--time", ea.timing, "median forward time over 11 runs");

  MaxvolArgs ma;
  auto* maxvol = app.add_subcommand("maxvol", "Rectangular maxvol row selection");
  maxvol->add_option("--matrix", ma.matrix, "D x R .rond")->required()->check(CLI::ExistingFile);
  maxvol->add_option("--rank", ma.rank, "use the leading R columns");
  maxvol->add_option("--oversampling", ma.oversampling, "P (default R)");
  maxvol->add_option("--tol", ma.tol)->capture_default_str();

  std::vector<const char*> argv;
  argv.push_back("ron");
  for (const auto& s : args) argv.push_back(s.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }

  ca.seed_given = seed_opt->count() > 0;
  try {
    if (compress->parsed()) return cmd_compress(ca, out, err);
    if (inspect->parsed()) return cmd_inspect(ia, out);
    if (eval->parsed()) return cmd_eval(ea, out);
    if (maxvol->parsed()) return cmd_maxvol(ma, out);
  } catch (const Error& e) {
    err << "error (" << to_string(e.kind()) << "): " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 5;
  }
  return 2;
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace ron
