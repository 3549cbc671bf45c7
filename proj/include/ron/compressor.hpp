#pragma once

// Builds a Reduced-Order student from a teacher network and calibration data.
//
// Every compressed stage k keeps an orthonormal basis V_k of its outputs, a
// row selection S_k of V_k and (S_k V_k)†. Student weights are
//   first stage:  S_k W_k
//   later stages: S_k W_k V_{k-1} (S_{k-1} V_{k-1})†
//   lift:         V_K (S_K V_K)†
// with activations applied to the sampled rows.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "ron/linalg.hpp"
#include "ron/netmodel.hpp"

namespace ron {

struct FixedRank {
  Index rank;
};
struct RankFraction {
  double fraction;  // R = ceil(fraction·D), at least 1
};
struct EnergyThreshold {
  double tail;  // smallest R with Σ_{i>R} σ_i² <= tail·Σ σ_i²
};
using RankStrategy = std::variant<FixedRank, RankFraction, EnergyThreshold>;

std::string describe(const RankStrategy& s);

// Rank chosen by `strategy` for a layer of width `dim` with the given
// singular values. Throws PlanError when the strategy is out of domain.
Index resolve_rank(const RankStrategy& strategy, Index dim, const std::vector<double>& spectrum);

// min(D, ceil(factor·R)) clamped to [R, 2R].
Index oversampled_rows(Index rank, Index dim, double factor);

struct PlanEntry {
  Index layer = 0;  // eligible-layer index
  RankStrategy strategy = RankFraction{1.0};
  std::optional<Index> oversampling;  // explicit P
  std::optional<double> oversample_factor;
};

struct CompressionPlan {
  Index first_compressed_layer = 0;  // eligible-layer index where the student head starts
  std::uint64_t seed = 0;
  RankStrategy default_strategy = RankFraction{1.0};
  double oversample_factor = 1.5;
  std::vector<PlanEntry> layers;  // overrides for individual eligible layers

  const PlanEntry* entry(Index layer) const;
  void validate() const;
};

CompressionPlan load_plan(const std::filesystem::path& path);
CompressionPlan parse_plan(const std::string& text);
std::string plan_to_string(const CompressionPlan& plan);

struct CompressOptions {
  Index calibration_limit = 2048;
  double holdout_fraction = 0.1;
  // Largest N×D activation matrix held in memory; above it activations are
  // streamed through the count sketch in chunks.
  Index materialize_cap = Index{1} << 24;
  bool force_sketch = false;
  Index sketch_width = 0;  // 0 selects default_sketch_width(R)
  Index chunk_rows = 256;
  unsigned threads = 1;
  Index conv_cap = Index{1} << 26;
  RectMaxvolOptions maxvol;
};

// Eligible layers (dense, conv2d, residual) of the teacher's top level, as
// layer positions.
std::vector<std::size_t> eligible_layers(const TeacherNetwork& net);

// A teacher stage lowered to explicit matrices:
//   out = pool(ψ(W·in + b)), batch norms folded into W, b.
struct AffineStage {
  Matrix weight;
  Vector bias;
  Activation activation;
  std::optional<Shape> pool_input;  // pre-pool map shape when a 2×2 max pool follows

  Index output_dim() const { return pool_input ? weight.rows() / 4 : weight.rows(); }
};

struct ResidualStage {
  std::vector<std::vector<AffineStage>> branches;  // empty branch = identity
  Activation activation;
  Index dim = 0;

  Index output_dim() const { return dim; }
};

struct LoweredStage {
  std::variant<AffineStage, ResidualStage> op;
  std::size_t first_layer = 0;  // teacher layer positions covered, inclusive
  std::size_t last_layer = 0;
  Shape out_shape;

  Index output_dim() const { return out_shape.size(); }
};

// Lowers teacher layers [from, end) into stages. Conv layers become explicit
// matrices; batch norm folds into the preceding affine map.
std::vector<LoweredStage> lower(const TeacherNetwork& net, std::size_t from, Index conv_cap = Index{1} << 26);

Matrix forward_affine(const AffineStage& stage, const Matrix& batch);
Matrix forward_lowered(const LoweredStage& stage, const Matrix& batch);

// Visits calibration outputs of one layer in row chunks; the callback gets
// the first row index and the chunk.
using ChunkVisitor = std::function<void(const std::function<void(Index, const Matrix&)>&)>;

struct BasisResult {
  Matrix basis;                  // D×R, orthonormal columns
  std::vector<double> spectrum;  // all computed singular values
  Index requested_rank = 0;
  Index rank = 0;
  bool sketched = false;
  std::vector<std::string> warnings;
};

// Leading left singular vectors of the stacked outputs (Zᵀ). Outputs are
// materialized when rows·dim <= materialize_cap, otherwise count-sketched.
BasisResult collect_basis(const ChunkVisitor& outputs, Index rows, Index dim, const RankStrategy& strategy,
                          std::uint64_t seed, const CompressOptions& opts = {});
BasisResult collect_basis(const Matrix& outputs, const RankStrategy& strategy, std::uint64_t seed,
                          const CompressOptions& opts = {});

struct LayerCompression {
  std::string label;
  Matrix basis;           // V_k, D×R
  RowSelection selection; // S_k, P rows
  Matrix pinv;            // (S_k V_k)†, R×P
  std::vector<double> spectrum;
  double residual_norm = 0.0;  // per-sample RMS of ‖ε_k‖₂
  double residual_max = 0.0;   // per-sample max of ‖ε_k‖₂
  bool sketched = false;
  std::vector<std::string> warnings;

  Index dim() const { return basis.rows(); }
  Index rank() const { return basis.cols(); }
  Index oversampling() const { return selection.size(); }
  // V_k (S_k V_k)†, D×P.
  Matrix lift() const { return basis * pinv; }
};

// Fills selection and pinv: S = rect_maxvol(V, P), pinv = (SV)†.
LayerCompression select_rows(LayerCompression lc, Index p, const RectMaxvolOptions& opts = {});

// Pre-pool rows gathered for a pooled selection: for each selected pooled
// coordinate the four rows of its 2×2 window, in window order.
struct PoolPlan {
  Shape pre_pool;
  std::vector<Index> source_rows;  // 4 per selected pooled coordinate
};
PoolPlan compress_maxpool_stage(const RowSelection& pooled_selection, const Shape& pre_pool);

// Residual merge matrices S V_i (S_i V_i)† for each branch; `branch_lifts`
// holds V_i (S_i V_i)† (the identity-branch entry is the block input's lift).
std::vector<Matrix> compress_residual(const std::vector<Matrix>& branch_lifts, const RowSelection& out_selection);

// sqrt(1 + (D−P)R/(P+1−R))·residual_norm.
double error_bound(Index d, Index r, Index p, double residual_norm);

struct LayerErrorEntry {
  std::string label;
  Index dim = 0, rank = 0, oversampling = 0;
  double bound_coefficient = 1.0;
  double residual_rms = 0.0;
  double residual_max = 0.0;
  double bound_rms = 0.0;       // coefficient · residual_rms
  double empirical_rms = 0.0;   // held-out e_k
  double empirical_max = 0.0;
  double worst_ratio = 0.0;     // max over calibration rows of e_k / (coefficient·‖ε_k‖₂)
  bool bound_holds = true;      // e_k <= coefficient·‖ε_k‖₂ on every calibration row
  bool sketched = false;
};

struct ErrorReport {
  std::vector<LayerErrorEntry> layers;
  std::vector<std::string> warnings;
  Index calibration_rows = 0;
  Index holdout_rows = 0;
};

struct CompressionResult {
  StudentNetwork student;
  ErrorReport report;
  std::vector<LayerCompression> layers;  // without bases, for spectra and diagnostics
};

CompressionResult build_student(const TeacherNetwork& net, const Matrix& data, const CompressionPlan& plan,
                                const CompressOptions& opts = {});

}  // namespace ron
