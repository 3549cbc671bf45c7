#include "ron/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "ron/errors.hpp"

namespace ron {
namespace {

constexpr double kPivotFloor = 1e-12;

std::string dims(const Matrix& a) {
  return std::to_string(a.rows()) + "x" + std::to_string(a.cols());
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// (ÂᵀÂ)⁻¹ for the selected rows; throws when Â loses column rank.
Eigen::MatrixXd inverse_gram(const Matrix& a, const std::vector<Index>& rows) {
  Matrix sub(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) sub.row(static_cast<Index>(k)) = a.row(rows[k]);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(sub);
  if (qr.rank() < a.cols())
    throw NumericalError("selected submatrix is rank deficient (rank " + std::to_string(qr.rank()) +
                         " < " + std::to_string(a.cols()) + ")");
  // ÂᵀÂ = P Rᵀ R Pᵀ, so (ÂᵀÂ)⁻¹ = P R⁻¹ R⁻ᵀ Pᵀ.
  const Index r = a.cols();
  Eigen::MatrixXd rinv = qr.matrixR().topLeftCorner(r, r).triangularView<Eigen::Upper>().solve(
      Eigen::MatrixXd::Identity(r, r));
  Eigen::MatrixXd inner = rinv * rinv.transpose();
  return qr.colsPermutation() * inner * qr.colsPermutation().transpose();
}

void sort_selection(RowSelection& sel) { std::sort(sel.indices.begin(), sel.indices.end()); }

}  // namespace

Matrix gather_rows(const Matrix& a, const RowSelection& sel) {
  Matrix out(sel.size(), a.cols());
  for (Index k = 0; k < sel.size(); ++k) out.row(k) = a.row(sel.indices[k]);
  return out;
}

Vector gather(const Vector& v, const RowSelection& sel) {
  Vector out(sel.size());
  for (Index k = 0; k < sel.size(); ++k) out(k) = v(sel.indices[k]);
  return out;
}

double volume(const Matrix& a) {
  if (a.rows() < a.cols())
    throw ShapeError("volume requires rows >= cols, got " + dims(a));
  if (a.cols() == 0) return 1.0;
  const Eigen::MatrixXd gram = a.transpose() * a;
  return std::max(0.0, gram.partialPivLu().determinant());
}

double spectral_norm(const Matrix& a) {
  if (a.size() == 0) return 0.0;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(a);
  return svd.singularValues()(0);
}

RowSelection square_maxvol(const Matrix& a, const SquareMaxvolOptions& opts) {
  const Index d = a.rows();
  const Index r = a.cols();
  if (r < 1 || d < r) throw ShapeError("square_maxvol requires D >= R >= 1, got " + dims(a));

  // Partial-pivoted elimination picks a well-conditioned starting set.
  Eigen::MatrixXd work = a;
  std::vector<Index> perm(static_cast<std::size_t>(d));
  std::iota(perm.begin(), perm.end(), Index{0});
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  for (Index j = 0; j < r; ++j) {
    Index piv = j;
    double best = std::abs(work(j, j));
    for (Index i = j + 1; i < d; ++i) {
      if (std::abs(work(i, j)) > best) {
        best = std::abs(work(i, j));
        piv = i;
      }
    }
    if (best < kPivotFloor * scale)
      throw NumericalError("square_maxvol: no non-singular " + std::to_string(r) + "x" +
                           std::to_string(r) + " submatrix (pivot " + std::to_string(best) +
                           " at column " + std::to_string(j) + ")");
    if (piv != j) {
      work.row(piv).swap(work.row(j));
      std::swap(perm[static_cast<std::size_t>(piv)], perm[static_cast<std::size_t>(j)]);
    }
    for (Index i = j + 1; i < d; ++i) {
      const double f = work(i, j) / work(j, j);
      if (f != 0.0) work.row(i).tail(r - j) -= f * work.row(j).tail(r - j);
    }
  }

  RowSelection sel{std::vector<Index>(perm.begin(), perm.begin() + r), d};

  // B = A Â⁻¹; a swap of row i into slot j multiplies the volume by B_ij².
  Eigen::MatrixXd sub = gather_rows(a, sel);
  Eigen::MatrixXd b = sub.transpose().partialPivLu().solve(Eigen::MatrixXd(a.transpose())).transpose();
  const double limit = 1.0 + opts.tol;
  for (int iter = 0; iter < opts.max_iters; ++iter) {
    Index bi = 0, bj = 0;
    double best = -1.0;
    for (Index i = 0; i < d; ++i) {
      for (Index j = 0; j < r; ++j) {
        if (std::abs(b(i, j)) > best) {
          best = std::abs(b(i, j));
          bi = i;
          bj = j;
        }
      }
    }
    if (best <= limit) break;
    sel.indices[static_cast<std::size_t>(bj)] = bi;
    const Eigen::VectorXd col = b.col(bj);
    Eigen::RowVectorXd row = b.row(bi);
    row(bj) -= 1.0;
    b.noalias() -= col * row / b(bi, bj);
  }

  sort_selection(sel);
  return sel;
}

double maxvol_bound_coefficient(Index d, Index r, Index p) {
  if (p + 1 <= r) throw PlanError("bound undefined for P + 1 <= R");
  return std::sqrt(1.0 + static_cast<double>(d - p) * static_cast<double>(r) /
                             static_cast<double>(p + 1 - r));
}

RowSelection rect_maxvol(const Matrix& a, Index p, const RectMaxvolOptions& opts) {
  const Index d = a.rows();
  const Index r = a.cols();
  if (r < 1 || p < r || p > d)
    throw ShapeError("rect_maxvol requires R <= P <= D, got D=" + std::to_string(d) +
                     " R=" + std::to_string(r) + " P=" + std::to_string(p));

  RowSelection sel = square_maxvol(a, opts.square);
  if (p == r) return sel;

  std::vector<char> taken(static_cast<std::size_t>(d), 0);
  for (Index i : sel.indices) taken[static_cast<std::size_t>(i)] = 1;

  // G = (ÂᵀÂ)⁻¹, M = A G; the squared coefficient-row norm of row i is
  // ‖a_i (SA)†‖² = a_i G a_iᵀ = M_i · a_i.
  Eigen::MatrixXd g = inverse_gram(a, sel.indices);
  Eigen::MatrixXd m = a * g;
  Eigen::VectorXd norms = (m.array() * a.array()).rowwise().sum();

  while (sel.size() < p) {
    Index best_i = -1;
    double best = -1.0;
    for (Index i = 0; i < d; ++i) {
      if (!taken[static_cast<std::size_t>(i)] && norms(i) > best) {
        best = norms(i);
        best_i = i;
      }
    }
    if (opts.stop_norm > 0.0 && best <= opts.stop_norm) break;

    // Sherman-Morrison update for appending row a_k.
    const Eigen::VectorXd gk = g * a.row(best_i).transpose();
    const double denom = 1.0 + best;
    const Eigen::VectorXd w = m * a.row(best_i).transpose();
    g.noalias() -= gk * gk.transpose() / denom;
    m.noalias() -= w * gk.transpose() / denom;
    norms.array() -= w.array().square() / denom;

    sel.indices.push_back(best_i);
    taken[static_cast<std::size_t>(best_i)] = 1;
  }

  // Single-row swaps until the selection is locally maximal in volume.
  // Swapping selected slot j for row i scales the volume by
  //   (1 + ‖c_i‖²)(1 - C_{s_j j}) + C_ij²,  C = A (SA)†.
  const Index pp = sel.size();
  for (int swaps = 0; swaps < opts.max_swaps; ++swaps) {
    g = inverse_gram(a, sel.indices);
    m = a * g;
    const Matrix sub = gather_rows(a, sel);
    const Eigen::MatrixXd c = m * sub.transpose();
    norms = (m.array() * a.array()).rowwise().sum();

    Index bi = -1, bj = -1;
    double best = 1.0 + opts.swap_tol;
    for (Index i = 0; i < d; ++i) {
      if (taken[static_cast<std::size_t>(i)]) continue;
      for (Index j = 0; j < pp; ++j) {
        const double h = c(sel.indices[static_cast<std::size_t>(j)], j);
        const double ratio = (1.0 + norms(i)) * (1.0 - h) + c(i, j) * c(i, j);
        if (ratio > best) {
          best = ratio;
          bi = i;
          bj = j;
        }
      }
    }
    if (bi < 0) break;
    taken[static_cast<std::size_t>(sel.indices[static_cast<std::size_t>(bj)])] = 0;
    taken[static_cast<std::size_t>(bi)] = 1;
    sel.indices[static_cast<std::size_t>(bj)] = bi;
  }

  sort_selection(sel);
  return sel;
}

Matrix sketched_pinv(const Matrix& a, const RowSelection& sel) {
  const Index r = a.cols();
  if (sel.size() < r)
    throw ShapeError("sketched_pinv needs at least R=" + std::to_string(r) + " rows, got " +
                     std::to_string(sel.size()));
  for (Index i : sel.indices) {
    if (i < 0 || i >= a.rows())
      throw ShapeError("selection index " + std::to_string(i) + " outside [0, " +
                       std::to_string(a.rows()) + ")");
  }
  const Eigen::MatrixXd sa = gather_rows(a, sel);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(sa);
  if (qr.rank() < r)
    throw NumericalError("sketched_pinv: selected rows have rank " + std::to_string(qr.rank()) +
                         " < " + std::to_string(r));
  return qr.solve(Eigen::MatrixXd::Identity(sel.size(), sel.size()));
}

SketchAccumulator::SketchAccumulator(Index dim, Index width, std::uint64_t seed,
                                     std::uint64_t first_index)
    : buckets_(Matrix::Zero(dim, width)), seed_(seed), first_index_(first_index) {
  if (dim < 1 || width < 1) throw ShapeError("sketch dimensions must be positive");
}

std::pair<Index, double> SketchAccumulator::hash(std::uint64_t seed, std::uint64_t index,
                                                 Index width) {
  const std::uint64_t h = splitmix64(seed ^ splitmix64(index));
  const auto bucket = static_cast<Index>((h & 0xffffffffULL) % static_cast<std::uint64_t>(width));
  const double sign = (h >> 63) != 0 ? -1.0 : 1.0;
  return {bucket, sign};
}

void SketchAccumulator::insert(std::span<const double> column) {
  if (static_cast<Index>(column.size()) != dim())
    throw ShapeError("sketch insert: column length " + std::to_string(column.size()) +
                     " != " + std::to_string(dim()));
  const auto [bucket, sign] = hash(seed_, next_index(), width());
  const Eigen::Map<const Vector> col(column.data(), dim());
  buckets_.col(bucket) += sign * col;
  ++samples_seen_;
}

void SketchAccumulator::merge(const SketchAccumulator& other) {
  if (other.dim() != dim() || other.width() != width() || other.seed_ != seed_)
    throw ShapeError("sketch merge: incompatible accumulators");
  buckets_ += other.buckets_;
  samples_seen_ += other.samples_seen_;
}

Index default_sketch_width(Index rank) { return std::max(4 * rank + 10, 2 * rank); }

SvdResult truncated_svd(const Matrix& m, Index rank, bool want_vt) {
  if (rank < 1 || rank > std::min(m.rows(), m.cols()))
    throw ShapeError("truncated_svd: rank " + std::to_string(rank) + " invalid for " + dims(m));
  unsigned flags = Eigen::ComputeThinU;
  if (want_vt) flags |= Eigen::ComputeThinV;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(m, flags);
  if (svd.info() != Eigen::Success)
    throw NumericalError("truncated_svd: decomposition of " + dims(m) + " did not converge");

  SvdResult out;
  out.u = svd.matrixU().leftCols(rank);
  const auto& s = svd.singularValues();
  out.sigma.assign(s.data(), s.data() + rank);
  if (want_vt) out.vt = svd.matrixV().leftCols(rank).transpose();
  return out;
}

std::vector<double> singular_values(const Matrix& m) {
  if (m.size() == 0) return {};
  Eigen::BDCSVD<Eigen::MatrixXd> svd(m);
  if (svd.info() != Eigen::Success)
    throw NumericalError("singular_values: decomposition of " + dims(m) + " did not converge");
  const auto& s = svd.singularValues();
  return {s.data(), s.data() + s.size()};
}

}  // namespace ron
