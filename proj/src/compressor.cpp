#include "ron/compressor.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <thread>

#include "ron/errors.hpp"

namespace ron {
namespace {

constexpr double kNumericalRankFloor = 1e-12;
constexpr Index kSketchPartRows = 64;

std::uint64_t site_seed(std::uint64_t seed, std::uint64_t site) {
  std::uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (site + 1);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Count-sketches one chunk. The chunk is cut into fixed-size parts whose
// accumulators are merged in part order, so the result does not depend on
// the number of threads.
void sketch_chunk(SketchAccumulator& acc, Index row0, const Matrix& chunk, unsigned threads) {
  const Index parts = (chunk.rows() + kSketchPartRows - 1) / kSketchPartRows;
  std::vector<SketchAccumulator> partial;
  partial.reserve(static_cast<std::size_t>(parts));
  for (Index p = 0; p < parts; ++p)
    partial.emplace_back(acc.dim(), acc.width(), acc.seed(), static_cast<std::uint64_t>(row0 + p * kSketchPartRows));

  auto work = [&](Index p) {
    const Index begin = p * kSketchPartRows;
    const Index end = std::min(chunk.rows(), begin + kSketchPartRows);
    for (Index i = begin; i < end; ++i)
      partial[static_cast<std::size_t>(p)].insert(std::span<const double>(chunk.row(i).data(), static_cast<std::size_t>(chunk.cols())));
  };
  const unsigned nthreads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(parts)));
  if (nthreads == 1) {
    for (Index p = 0; p < parts; ++p) work(p);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < nthreads; ++t)
      pool.emplace_back([&, t] {
        for (Index p = t; p < parts; p += nthreads) work(p);
      });
  }
  for (const auto& p : partial) acc.merge(p);
}

// Rows [0, limit) of a visitor.
ChunkVisitor head_rows(const ChunkVisitor& all, Index limit) {
  return [all, limit](const std::function<void(Index, const Matrix&)>& fn) {
    all([&](Index row0, const Matrix& chunk) {
      if (row0 >= limit) return;
      const Index take = std::min(chunk.rows(), limit - row0);
      if (take == chunk.rows()) fn(row0, chunk);
      else fn(row0, chunk.topRows(take));
    });
  };
}

}  // namespace

BasisResult collect_basis(const ChunkVisitor& outputs, Index rows, Index dim, const RankStrategy& strategy,
                          std::uint64_t seed, const CompressOptions& opts) {
  if (rows < 1 || dim < 1) throw ShapeError("collect_basis: no calibration outputs");
  BasisResult res;
  Matrix u;

  const bool materialize = !opts.force_sketch && rows <= opts.materialize_cap / dim;
  if (materialize) {
    Matrix z(dim, rows);  // Zᵀ
    outputs([&](Index row0, const Matrix& chunk) {
      if (chunk.cols() != dim) throw ShapeError("collect_basis: output width mismatch");
      z.middleCols(row0, chunk.rows()) = chunk.transpose();
    });
    SvdResult svd = truncated_svd(z, std::min(dim, rows));
    u = std::move(svd.u);
    res.spectrum = std::move(svd.sigma);
  } else {
    // Width follows the requested rank; energy thresholds size it for the
    // full width since the rank is only known after the spectrum.
    const Index hint = std::holds_alternative<EnergyThreshold>(strategy) ? dim : resolve_rank(strategy, dim, {});
    const Index width = opts.sketch_width > 0 ? opts.sketch_width : default_sketch_width(hint);
    SketchAccumulator acc(dim, width, seed);
    outputs([&](Index row0, const Matrix& chunk) {
      if (chunk.cols() != dim) throw ShapeError("collect_basis: output width mismatch");
      sketch_chunk(acc, row0, chunk, opts.threads);
    });
    // The sketch only supplies a range Q. A second pass takes the SVD of the
    // outputs projected onto it, accumulated as a streaming QR of Z·Q.
    const Matrix q = truncated_svd(acc.buckets(), std::min(dim, width)).u;
    const Index k = q.cols();
    Matrix tri(0, k);
    outputs([&](Index, const Matrix& chunk) {
      Matrix stacked(tri.rows() + chunk.rows(), k);
      stacked << tri, chunk * q;
      Eigen::HouseholderQR<Matrix> qr(stacked);
      tri = qr.matrixQR().topRows(std::min(stacked.rows(), k)).triangularView<Eigen::Upper>();
    });
    SvdResult svd = truncated_svd(Matrix(tri.transpose()), std::min(k, tri.rows()));
    u = q * svd.u;
    res.spectrum = std::move(svd.sigma);
    res.sketched = true;
  }

  Index r = resolve_rank(strategy, dim, res.spectrum);
  res.requested_rank = r;
  if (rows < r)
    throw PlanError("insufficient samples: " + std::to_string(rows) + " calibration rows for rank " +
                    std::to_string(r));
  if (r > u.cols())
    throw PlanError("rank " + std::to_string(r) + " exceeds the " + std::to_string(u.cols()) +
                    " directions available from the sketch");

  const double top = res.spectrum.empty() ? 0.0 : res.spectrum.front();
  Index numerical = 0;
  for (double s : res.spectrum)
    if (top > 0.0 && s >= kNumericalRankFloor * top) ++numerical;
  if (numerical < r) {
    if (r < dim) {
      res.warnings.push_back("numerical rank " + std::to_string(numerical) + " below requested rank " +
                             std::to_string(r) + "; rank lowered");
      r = std::max<Index>(1, numerical);
    } else {
      res.warnings.push_back("numerical rank " + std::to_string(numerical) + " below full width " +
                             std::to_string(dim) + "; keeping the full orthonormal basis");
    }
  }
  res.rank = r;
  res.basis = u.leftCols(r);
  return res;
}

BasisResult collect_basis(const Matrix& outputs, const RankStrategy& strategy, std::uint64_t seed,
                          const CompressOptions& opts) {
  const Index chunk = std::max<Index>(1, opts.chunk_rows);
  ChunkVisitor visit = [&](const std::function<void(Index, const Matrix&)>& fn) {
    for (Index r0 = 0; r0 < outputs.rows(); r0 += chunk) {
      const Index n = std::min(chunk, outputs.rows() - r0);
      fn(r0, outputs.middleRows(r0, n));
    }
  };
  return collect_basis(visit, outputs.rows(), outputs.cols(), strategy, seed, opts);
}

LayerCompression select_rows(LayerCompression lc, Index p, const RectMaxvolOptions& opts) {
  if (lc.basis.size() == 0) throw ShapeError("select_rows: basis missing");
  if (p < lc.rank() || p > lc.dim())
    throw PlanError("oversampling P=" + std::to_string(p) + " outside [R, D] = [" + std::to_string(lc.rank()) +
                    ", " + std::to_string(lc.dim()) + "]");
  lc.selection = rect_maxvol(lc.basis, p, opts);
  lc.pinv = sketched_pinv(lc.basis, lc.selection);
  return lc;
}

PoolPlan compress_maxpool_stage(const RowSelection& pooled_selection, const Shape& pre_pool) {
  if (pre_pool.height % 2 != 0 || pre_pool.width % 2 != 0 || pre_pool.height < 2 || pre_pool.width < 2)
    throw UnsupportedError("pooled sampling needs even spatial dimensions, got " + pre_pool.str());
  const Index oh = pre_pool.height / 2, ow = pre_pool.width / 2;
  if (pooled_selection.source_rows != pre_pool.channels * oh * ow)
    throw ShapeError("pooled selection indexes " + std::to_string(pooled_selection.source_rows) +
                     " rows, pooled map has " + std::to_string(pre_pool.channels * oh * ow));
  PoolPlan plan{pre_pool, {}};
  plan.source_rows.reserve(4 * pooled_selection.indices.size());
  for (Index j : pooled_selection.indices) {
    const Index c = j / (oh * ow);
    const Index y = (j % (oh * ow)) / ow;
    const Index x = j % ow;
    const Index base = (c * pre_pool.height + 2 * y) * pre_pool.width + 2 * x;
    plan.source_rows.insert(plan.source_rows.end(), {base, base + 1, base + pre_pool.width, base + pre_pool.width + 1});
  }
  return plan;
}

std::vector<Matrix> compress_residual(const std::vector<Matrix>& branch_lifts, const RowSelection& out_selection) {
  std::vector<Matrix> merges;
  merges.reserve(branch_lifts.size());
  for (std::size_t b = 0; b < branch_lifts.size(); ++b) {
    if (branch_lifts[b].rows() != out_selection.source_rows)
      throw ShapeError("residual branch " + std::to_string(b) + " lifts to " + std::to_string(branch_lifts[b].rows()) +
                       " rows, block output has " + std::to_string(out_selection.source_rows));
    merges.push_back(gather_rows(branch_lifts[b], out_selection));
  }
  return merges;
}

double error_bound(Index d, Index r, Index p, double residual_norm) {
  if (p + 1 <= r) throw PlanError("error bound undefined for P + 1 <= R");
  if (p > d) throw PlanError("error bound needs P <= D");
  return maxvol_bound_coefficient(d, r, p) * residual_norm;
}

namespace {

// Sequential driver for build_student. Holds the calibration inputs of the
// student head, the lowered teacher stages and, while it fits under the
// memory cap, the outputs of the previous stage.
class Builder {
 public:
  Builder(const CompressionPlan& plan, const CompressOptions& opts, std::vector<LoweredStage> stages, Matrix head_input,
          Index fit_rows)
      : plan_(plan), opts_(opts), stages_(std::move(stages)), z0_(std::move(head_input)), fit_rows_(fit_rows) {}

  CompressionResult run(Index first_eligible, StudentNetwork student) {
    CompressionResult out;
    out.report.calibration_rows = fit_rows_;
    out.report.holdout_rows = rows() - fit_rows_;

    std::optional<Matrix> in_lift;  // V_{k-1}(S_{k-1}V_{k-1})†; empty for the first stage
    for (std::size_t k = 0; k < stages_.size(); ++k) {
      const Index layer = first_eligible + static_cast<Index>(k);
      const PlanEntry* entry = plan_.entry(layer);
      const RankStrategy strategy = entry ? entry->strategy : plan_.default_strategy;
      const double factor = entry && entry->oversample_factor ? *entry->oversample_factor : plan_.oversample_factor;
      std::optional<Index> explicit_p;
      if (entry && entry->oversampling) explicit_p = *entry->oversampling;
      const std::string label = "layer " + std::to_string(layer);

      const bool cache_out = cached_in_.has_value() || k == 0
                                 ? rows() <= opts_.materialize_cap / std::max<Index>(1, stages_[k].output_dim())
                                 : false;

      if (const auto* a = std::get_if<AffineStage>(&stages_[k].op)) {
        ChunkVisitor outputs = stage_outputs(k, cache_out);
        LayerCompression lc = compress_site(outputs, a->output_dim(), strategy, factor, explicit_p, label, out);

        RowSelection rows_taken = lc.selection;
        Index window = 1;
        if (a->pool_input) {
          PoolPlan pp = compress_maxpool_stage(lc.selection, *a->pool_input);
          rows_taken = RowSelection{std::move(pp.source_rows), a->weight.rows()};
          window = 4;
        }
        StudentStage st{gather_rows(a->weight, rows_taken), gather(a->bias, rows_taken), a->activation, window};
        if (in_lift) st.weight = st.weight * *in_lift;
        student.blocks.push_back({std::move(st)});
        in_lift = lc.lift();
        keep(std::move(lc), out);
      } else {
        const auto& r = std::get<ResidualStage>(stages_[k].op);
        StudentResidual sr;
        sr.activation = r.activation;
        std::vector<Matrix> branch_lifts;
        for (std::size_t b = 0; b < r.branches.size(); ++b) {
          const auto& branch = r.branches[b];
          if (branch.empty()) {
            branch_lifts.push_back(in_lift ? *in_lift : Matrix(Matrix::Identity(r.dim, r.dim)));
            sr.branches.emplace_back();
            continue;
          }
          std::vector<StudentStage> stages;
          std::optional<Matrix> lift = in_lift;
          for (std::size_t t = 0; t < branch.size(); ++t) {
            const AffineStage& a = branch[t];
            if (a.pool_input) throw UnsupportedError(label + ": pooling inside a residual branch");
            const std::string site = label + " branch " + std::to_string(b) + " stage " + std::to_string(t);
            ChunkVisitor outputs = branch_outputs(k, b, t);
            LayerCompression lc = compress_site(outputs, a.output_dim(), strategy, factor, std::nullopt, site, out);
            StudentStage st{gather_rows(a.weight, lc.selection), gather(a.bias, lc.selection), a.activation, 1};
            if (lift) st.weight = st.weight * *lift;
            stages.push_back(std::move(st));
            lift = lc.lift();
            keep(std::move(lc), out);
          }
          branch_lifts.push_back(std::move(*lift));
          sr.branches.push_back(std::move(stages));
        }
        ChunkVisitor outputs = stage_outputs(k, cache_out);
        LayerCompression lc = compress_site(outputs, r.dim, strategy, factor, explicit_p, label, out);
        sr.merges = compress_residual(branch_lifts, lc.selection);
        student.blocks.push_back({std::move(sr)});
        in_lift = lc.lift();
        keep(std::move(lc), out);
      }

      cached_in_ = std::move(cached_out_);
      cached_out_.reset();
    }
    student.lift = std::move(*in_lift);
    out.student = std::move(student);
    return out;
  }

 private:
  Index rows() const { return z0_.rows(); }

  // Calls fn(row0, input chunk of stage k) over all calibration rows.
  void visit_inputs(std::size_t k, const std::function<void(Index, const Matrix&)>& fn) const {
    const Index chunk = std::max<Index>(1, opts_.chunk_rows);
    const Matrix* cached = k == 0 ? &z0_ : (cached_in_ ? &*cached_in_ : nullptr);
    for (Index r0 = 0; r0 < rows(); r0 += chunk) {
      const Index n = std::min(chunk, rows() - r0);
      if (cached) {
        fn(r0, cached->middleRows(r0, n));
        continue;
      }
      Matrix x = z0_.middleRows(r0, n);
      for (std::size_t t = 0; t < k; ++t) x = forward_lowered(stages_[t], x);
      fn(r0, x);
    }
  }

  ChunkVisitor stage_outputs(std::size_t k, bool cache) {
    if (cache) {
      Matrix full(rows(), stages_[k].output_dim());
      visit_inputs(k, [&](Index r0, const Matrix& in) { full.middleRows(r0, in.rows()) = forward_lowered(stages_[k], in); });
      cached_out_ = std::move(full);
      const Matrix* z = &*cached_out_;
      const Index chunk = std::max<Index>(1, opts_.chunk_rows);
      return [z, chunk](const std::function<void(Index, const Matrix&)>& fn) {
        for (Index r0 = 0; r0 < z->rows(); r0 += chunk) fn(r0, z->middleRows(r0, std::min(chunk, z->rows() - r0)));
      };
    }
    return [this, k](const std::function<void(Index, const Matrix&)>& fn) {
      visit_inputs(k, [&](Index r0, const Matrix& in) { fn(r0, forward_lowered(stages_[k], in)); });
    };
  }

  ChunkVisitor branch_outputs(std::size_t k, std::size_t b, std::size_t t) {
    return [this, k, b, t](const std::function<void(Index, const Matrix&)>& fn) {
      const auto& branch = std::get<ResidualStage>(stages_[k].op).branches[b];
      visit_inputs(k, [&](Index r0, const Matrix& in) {
        Matrix x = in;
        for (std::size_t s = 0; s <= t; ++s) x = forward_affine(branch[s], x);
        fn(r0, x);
      });
    };
  }

  LayerCompression compress_site(const ChunkVisitor& outputs, Index dim, const RankStrategy& strategy, double factor,
                                  std::optional<Index> explicit_p, const std::string& label, CompressionResult& out) {
    BasisResult basis =
        collect_basis(head_rows(outputs, fit_rows_), fit_rows_, dim, strategy, site_seed(plan_.seed, site_++), opts_);
    LayerCompression lc;
    lc.label = label;
    lc.basis = std::move(basis.basis);
    lc.spectrum = std::move(basis.spectrum);
    lc.sketched = basis.sketched;
    for (auto& w : basis.warnings) {
      out.report.warnings.push_back(label + ": " + w);
      lc.warnings.push_back(std::move(w));
    }

    const Index r = lc.rank();
    Index p = 0;
    if (explicit_p) {
      p = *explicit_p;
      if (r < basis.requested_rank) {
        const Index clamped = std::min(std::clamp(p, r, 2 * r), dim);
        if (clamped != p) {
          out.report.warnings.push_back(label + ": oversampling clamped from " + std::to_string(p) + " to " +
                                        std::to_string(clamped) + " after rank reduction");
          p = clamped;
        }
      }
      if (p < r) throw PlanError(label + ": oversampling P=" + std::to_string(p) + " is below rank R=" + std::to_string(r));
      if (p > std::min(2 * r, dim))
        throw PlanError(label + ": oversampling P=" + std::to_string(p) + " exceeds min(2R, D)=" +
                        std::to_string(std::min(2 * r, dim)));
    } else {
      p = oversampled_rows(r, dim, factor);
    }
    lc = select_rows(std::move(lc), p, opts_.maxvol);
    measure(outputs, lc, out);
    return lc;
  }

  // Residual statistics on the fit rows, empirical e_k on the held-out rows
  // and the per-row bound check on every calibration row.
  void measure(const ChunkVisitor& outputs, LayerCompression& lc, CompressionResult& out) const {
    LayerErrorEntry e;
    e.label = lc.label;
    e.dim = lc.dim();
    e.rank = lc.rank();
    e.oversampling = lc.oversampling();
    e.bound_coefficient = maxvol_bound_coefficient(e.dim, e.rank, e.oversampling);
    e.sketched = lc.sketched;

    const bool has_holdout = rows() > fit_rows_;
    double fit_sq = 0.0, hold_sq = 0.0;
    Index hold_count = 0;
    outputs([&](Index r0, const Matrix& z) {
      const Matrix coords = z * lc.basis;
      const Matrix eps = coords * lc.basis.transpose() - z;
      Matrix sampled(eps.rows(), lc.oversampling());
      for (Index j = 0; j < lc.oversampling(); ++j) sampled.col(j) = eps.col(lc.selection.indices[static_cast<std::size_t>(j)]);
      const Matrix err = sampled * lc.pinv.transpose();
      for (Index i = 0; i < z.rows(); ++i) {
        const double eps_norm = eps.row(i).norm();
        const double ek = err.row(i).norm();
        const double bound = e.bound_coefficient * eps_norm;
        const double slack = 1e-12 * (1.0 + z.row(i).norm());
        if (ek > bound * (1.0 + 1e-9) + slack) e.bound_holds = false;
        if (bound > slack) e.worst_ratio = std::max(e.worst_ratio, ek / bound);
        const bool held_out = r0 + i >= fit_rows_;
        if (!held_out) {
          fit_sq += eps_norm * eps_norm;
          e.residual_max = std::max(e.residual_max, eps_norm);
        }
        if (held_out || !has_holdout) {
          hold_sq += ek * ek;
          ++hold_count;
          e.empirical_max = std::max(e.empirical_max, ek);
        }
      }
    });
    e.residual_rms = std::sqrt(fit_sq / static_cast<double>(fit_rows_));
    e.bound_rms = e.bound_coefficient * e.residual_rms;
    e.empirical_rms = hold_count > 0 ? std::sqrt(hold_sq / static_cast<double>(hold_count)) : 0.0;
    lc.residual_norm = e.residual_rms;
    lc.residual_max = e.residual_max;
    if (!e.bound_holds) out.report.warnings.push_back(lc.label + ": per-sample error bound violated");
    out.report.layers.push_back(std::move(e));
  }

  // Only the lift of the newest site is carried forward; the basis itself is
  // dropped once the next stage's weights no longer need it.
  static void keep(LayerCompression lc, CompressionResult& out) {
    lc.basis = Matrix();
    out.layers.push_back(std::move(lc));
  }

  const CompressionPlan& plan_;
  const CompressOptions& opts_;
  std::vector<LoweredStage> stages_;
  Matrix z0_;
  Index fit_rows_;
  std::optional<Matrix> cached_in_;
  std::optional<Matrix> cached_out_;
  std::uint64_t site_ = 0;
};

}  // namespace

CompressionResult build_student(const TeacherNetwork& net, const Matrix& data, const CompressionPlan& plan,
                                const CompressOptions& opts) {
  net.validate();
  plan.validate();
  if (data.cols() != net.input_dim())
    throw ShapeError("calibration data has " + std::to_string(data.cols()) + " features, model expects " +
                     std::to_string(net.input_dim()));
  if (data.rows() < 1) throw ShapeError("calibration data is empty");
  if (!(opts.holdout_fraction >= 0.0 && opts.holdout_fraction < 1.0))
    throw PlanError("holdout fraction must lie in [0, 1)");

  const auto eligible = eligible_layers(net);
  const auto k_total = static_cast<Index>(eligible.size());
  if (plan.first_compressed_layer >= k_total)
    throw PlanError("first_compressed_layer " + std::to_string(plan.first_compressed_layer) + " but the model has " +
                    std::to_string(k_total) + " eligible layers");
  for (const auto& e : plan.layers)
    if (e.layer >= k_total)
      throw PlanError("plan layer " + std::to_string(e.layer) + " but the model has " + std::to_string(k_total) +
                      " eligible layers");

  const std::size_t head = eligible[static_cast<std::size_t>(plan.first_compressed_layer)];
  StudentNetwork student;
  student.input_shape = net.input_shape;
  student.prefix.assign(net.layers.begin(), net.layers.begin() + static_cast<std::ptrdiff_t>(head));

  const Index n = std::min(data.rows(), std::max<Index>(1, opts.calibration_limit));
  const auto holdout = static_cast<Index>(std::floor(opts.holdout_fraction * static_cast<double>(n)));
  const Index fit = n - holdout;

  Matrix head_input = forward_layers(student.prefix, net.input_shape, data.topRows(n));
  Builder builder(plan, opts, lower(net, head, opts.conv_cap), std::move(head_input), fit);
  return builder.run(plan.first_compressed_layer, std::move(student));
}

}  // namespace ron
