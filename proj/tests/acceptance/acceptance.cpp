// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "../support/oracles.hpp"
#include "ron/cli.hpp"
#include "ron/compressor.hpp"
#include "ron/metrics.hpp"
#include "ron/model_io.hpp"

using namespace ron;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kFixtures = RON_FIXTURES;

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

double max_diff(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

Matrix to_row(const oracle::Vec& v) {
  Matrix m(1, static_cast<Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) m(0, static_cast<Index>(i)) = v[i];
  return m;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

CompressionPlan full_rank() {
  CompressionPlan p;
  p.default_strategy = RankFraction{1.0};
  p.oversample_factor = 1.0;
  return p;
}

Outcome no_truncation() {
  const auto start = std::chrono::steady_clock::now();
  oracle::Rng rng(101);
  const TeacherNetwork mlp = oracle::mlp(rng, {32, 24, 16, 10});
  const TeacherNetwork conv{Shape{3, 8, 8},
                            {oracle::conv_layer(rng, 3, 4, 3, 1, 1), oracle::bn_layer(rng, 4), oracle::relu(),
                             {MaxPoolLayer{}}, oracle::dense_layer(rng, 64, 10)}};
  double worst = 0.0;
  for (const TeacherNetwork* net : {&mlp, &conv}) {
    // Full rank needs at least D fit rows per layer.
    const auto res = build_student(*net, rng.matrix(512, net->input_dim()), full_rank());
    const Matrix x = rng.matrix(256, net->input_dim());
    worst = std::max(worst, max_relative_error(forward_student(res.student, x), oracle::teacher_forward(*net, x)));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {worst <= 1e-8 && secs < 5.0, "max relative error " + fmt(worst) + ", " + fmt(secs) + " s"};
}

Outcome linear_low_rank() {
  oracle::Rng rng(102);
  const TeacherNetwork net = oracle::mlp(rng, {40, 30, 20, 12}, Activation::identity(), 0.0);
  const Matrix span = rng.matrix(6, 40);
  CompressionPlan plan;
  for (Index l = 0; l < 3; ++l) plan.layers.push_back({l, FixedRank{6}, 9, std::nullopt});
  const auto res = build_student(net, rng.matrix(300, 6) * span, plan);
  const Matrix x = rng.matrix(200, 6) * span;
  const double err = max_relative_error(forward_student(res.student, x), oracle::teacher_forward(net, x));
  return {err <= 1e-6, "max relative error " + fmt(err)};
}

Outcome maxvol_bound() {
  oracle::Rng rng(103);
  int violations = 0;
  double worst = 0.0;
  for (int t = 0; t < 200; ++t) {
    const Index r = rng.integer(1, 8);
    const Index p = static_cast<Index>(std::ceil(1.5 * static_cast<double>(r)));
    const Index d = rng.integer(p, 64);
    const Matrix v = oracle::jacobi_svd(rng.matrix(d, r)).u;
    const RowSelection sel = rect_maxvol(v, p);
    const double norm = oracle::spectral_norm(v * sketched_pinv(v, sel));
    const double bound = std::sqrt(1.0 + static_cast<double>((d - p) * r) / static_cast<double>(p + 1 - r));
    worst = std::max(worst, norm / bound);
    if (norm > bound + 1e-9) ++violations;
  }
  return {violations == 0, std::to_string(violations) + " violations in 200 trials, worst norm/bound " + fmt(worst)};
}

Outcome per_layer_bound() {
  oracle::Rng rng(104);
  const TeacherNetwork net = oracle::mlp(rng, {30, 40, 30, 20, 10});
  const Matrix data = rng.matrix(600, 30);
  CompressionPlan plan;
  plan.default_strategy = RankFraction{0.5};
  CompressOptions opts;
  opts.holdout_fraction = 0.0;
  const auto res = build_student(net, data, plan, opts);

  // Independent check with an exact basis of the teacher outputs. The norm
  // of (S V)† S ε does not depend on the choice of orthonormal basis.
  const std::vector<long> output_layer{1, 3, 5, 6};
  long violations = 0, checked = 0;
  double worst = 0.0;
  for (std::size_t k = 0; k < res.layers.size(); ++k) {
    const Matrix z = forward_teacher(net, data, output_layer[k]);
    const LayerCompression& lc = res.layers[k];
    const Index d = z.cols(), r = lc.pinv.rows(), p = lc.selection.size();
    const Matrix v = oracle::leading_left(Matrix(z.transpose()), r);
    Matrix sv(p, r);
    for (Index i = 0; i < p; ++i) sv.row(i) = v.row(lc.selection.indices[static_cast<std::size_t>(i)]);
    const auto svd = oracle::jacobi_svd(sv);
    Matrix pinv = Matrix::Zero(r, p);
    for (Index i = 0; i < r; ++i) pinv += svd.v.col(i) * svd.u.col(i).transpose() / svd.s[static_cast<std::size_t>(i)];
    const double coef = std::sqrt(1.0 + static_cast<double>((d - p) * r) / static_cast<double>(p + 1 - r));
    for (Index n = 0; n < z.rows(); ++n) {
      const ron::Vector zn = z.row(n).transpose();
      const ron::Vector eps = zn - v * (v.transpose() * zn);
      ron::Vector se(p);
      for (Index i = 0; i < p; ++i) se(i) = eps(lc.selection.indices[static_cast<std::size_t>(i)]);
      const double e = (pinv * se).norm(), b = coef * eps.norm();
      worst = std::max(worst, b > 0.0 ? e / b : 0.0);
      if (e > b + 1e-9) ++violations;
      ++checked;
    }
    if (!res.report.layers[k].bound_holds) ++violations;
  }
  return {violations == 0, std::to_string(checked) + " sample-layer pairs, " + std::to_string(violations) +
                               " violations, worst ratio " + fmt(worst)};
}

Outcome maxvol_oracle() {
  const json cases = json::parse(slurp(kFixtures / "maxvol_cases.json"))["cases"];
  int below = 0, not_dominant = 0;
  double worst_ratio = INFINITY, worst_dom = 0.0;
  for (const auto& c : cases) {
    const Index d = c["D"], r = c["R"], p = c["P"];
    Matrix a(d, r);
    for (Index i = 0; i < d; ++i)
      for (Index j = 0; j < r; ++j) a(i, j) = c["matrix"][static_cast<std::size_t>(i * r + j)];
    const RowSelection rect = rect_maxvol(a, p);
    const double ratio = oracle::volume_of(a, rect.indices) / c["rect_optimum"].get<double>();
    worst_ratio = std::min(worst_ratio, ratio);
    if (ratio < 0.5) ++below;

    const RowSelection sq = square_maxvol(a);
    Matrix block(r, r);
    for (Index i = 0; i < r; ++i) block.row(i) = a.row(sq.indices[static_cast<std::size_t>(i)]);
    const double dom = (a * block.inverse()).cwiseAbs().maxCoeff();
    worst_dom = std::max(worst_dom, dom);
    if (dom > 1.05 + 1e-12) ++not_dominant;
  }
  return {below == 0 && not_dominant == 0, std::to_string(cases.size()) + " cases, worst volume ratio " +
                                               fmt(worst_ratio) + ", worst dominance " + fmt(worst_dom)};
}

Outcome conv_lowering() {
  oracle::Rng rng(106);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const Index cin = rng.integer(1, 4), cout = rng.integer(1, 4);
    const Index h = rng.integer(3, 9), w = rng.integer(3, 9);
    const Index k = rng.integer(1, 3), stride = rng.integer(1, 2), pad = rng.integer(0, 1);
    const Layer l = oracle::conv_layer(rng, cin, cout, k, stride, pad);
    const Layer bnl = oracle::bn_layer(rng, cout);
    const auto& c = std::get<Conv2dLayer>(l.op);
    const auto& bn = std::get<BatchNormLayer>(bnl.op);
    const Shape in{cin, h, w};
    const DenseLayer lowered = conv_to_dense(c, in);
    const DenseLayer folded = fold_batchnorm(lowered, bn);
    for (int s = 0; s < 3; ++s) {
      const Matrix x = rng.matrix(1, in.size());
      const oracle::Vec xv(x.data(), x.data() + x.size());
      Shape out;
      const oracle::Vec conv_ref = oracle::conv(c, in, xv, out);
      const oracle::Vec bn_ref = oracle::batchnorm(bn, out, conv_ref);
      Matrix y = x * lowered.weight.transpose() + lowered.bias.transpose();
      Matrix yb = x * folded.weight.transpose() + folded.bias.transpose();
      worst = std::max({worst, max_diff(y, to_row(conv_ref)), max_diff(yb, to_row(bn_ref))});
    }
  }
  return {worst <= 1e-10, "100 shapes, max abs difference " + fmt(worst)};
}

Outcome sketch_fidelity() {
  oracle::Rng rng(107);
  double worst = 0.0;
  CompressOptions opts;
  opts.force_sketch = true;
  for (int t = 0; t < 30; ++t) {
    const Index r = rng.integer(2, 8), d = rng.integer(50, 120), n = 300;
    const Matrix z = rng.matrix(n, r) * rng.matrix(r, d) + rng.matrix(n, d, 1e-3);
    const BasisResult b = collect_basis(z, FixedRank{r}, static_cast<std::uint64_t>(t), opts);
    const Matrix exact = oracle::leading_left(Matrix(z.transpose()), r);
    worst = std::max(worst, oracle::max_principal_angle(b.basis, exact));
  }
  return {worst < 0.2, "30 trials, largest principal angle " + fmt(worst) + " rad"};
}

Outcome flop_accounting() {
  oracle::Rng rng(108);
  const TeacherNetwork net = oracle::mlp(rng, {784, 300, 100, 10});
  CompressionPlan plan;
  plan.oversample_factor = 1.2;
  plan.layers.push_back({0, RankFraction{0.7}, std::nullopt, std::nullopt});
  plan.layers.push_back({1, RankFraction{0.75}, std::nullopt, std::nullopt});
  Matrix data(800, 784);
  for (Index i = 0; i < data.rows(); ++i)
    for (Index j = 0; j < data.cols(); ++j) data(i, j) = rng.uniform();
  const auto res = build_student(net, data, plan);
  const FlopReport tf = flops_teacher(net), sf = flops_student(res.student);
  const double ratio = flop_reduction(tf, sf);
  return {tf.weight_total() == 532400 && ratio > 1.0,
          "teacher weight FLOPs " + std::to_string(tf.weight_total()) + ", FLOP ratio " + fmt(ratio) +
              " (weight layers " + fmt(weight_flop_reduction(tf, sf)) + ")"};
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "ron_acceptance";
  fs::remove_all(root);
  std::string bytes[2];
  for (int i = 0; i < 2; ++i) {
    const fs::path out = root / ("run" + std::to_string(i));
    std::ostringstream o, e;
    const int code = run_cli({"compress", "--model", (kFixtures / "digits_mlp.ronm").string(), "--data",
                              (kFixtures / "digits_calib.rond").string(), "--rank-fraction", "0.5", "--seed", "7",
                              "--force-sketch", "--threads", i == 0 ? "1" : "4", "--out", out.string()},
                             o, e);
    if (code != 0) return {false, "compress exited " + std::to_string(code) + ": " + e.str()};
    bytes[i] = slurp(out / "student.ronm");
  }
  return {!bytes[0].empty() && bytes[0] == bytes[1], std::to_string(bytes[0].size()) + "-byte student files compared"};
}

Outcome spectrum_shape() {
  const TeacherNetwork net = load_model(kFixtures / "digits_mlp.ronm");
  const SpectrumReport rep = spectrum(net, load_dataset(kFixtures / "digits_calib.rond"));
  bool ok = !rep.layers.empty();
  std::string tails;
  for (const auto& e : rep.layers) {
    ok = ok && !e.values.empty() && std::abs(e.values.front() - 1.0) <= 1e-12;
    for (std::size_t i = 1; i < e.values.size(); ++i) ok = ok && e.values[i] <= e.values[i - 1];
    tails += " layer " + std::to_string(e.layer) + " tail " + fmt(e.tail_mass) + ";";
  }
  ok = ok && rep.summary_json().find("tail_mass") != std::string::npos;
  return {ok, "tail mass:" + tails};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"no-truncation exactness", no_truncation},
      {"linear low-rank exactness", linear_low_rank},
      {"maxvol norm bound", maxvol_bound},
      {"per-layer error bound", per_layer_bound},
      {"maxvol oracle fixtures", maxvol_oracle},
      {"conv lowering and batch norm folding", conv_lowering},
      {"sketched SVD fidelity", sketch_fidelity},
      {"FLOP accounting", flop_accounting},
      {"determinism", determinism},
      {"spectrum shape", spectrum_shape},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::cout << "criterion " << i + 1 << " " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << ": "
              << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
