#pragma once

// Dense kernels used by the compressor: matrix volume, square and
// rectangular maximum-volume row selection, sketched least squares,
// count-sketch accumulation and truncated SVD.
//
// All matrices are row-major double precision. A batch of samples is stored
// one sample per row.

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace ron {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// Ordered list of distinct row indices into a matrix with `source_rows` rows.
// Applying the selection is row gathering; the 0/1 matrix is never formed.
struct RowSelection {
  std::vector<Index> indices;
  Index source_rows = 0;

  Index size() const { return static_cast<Index>(indices.size()); }
};

// Rows of `a` listed by `sel`, in selection order.
Matrix gather_rows(const Matrix& a, const RowSelection& sel);
Vector gather(const Vector& v, const RowSelection& sel);

// det(AᵀA). Requires rows >= cols.
double volume(const Matrix& a);

// Spectral norm (largest singular value).
double spectral_norm(const Matrix& a);

struct SquareMaxvolOptions {
  // Accept when every |(A Â⁻¹)_ij| <= 1 + tol.
  double tol = 0.05;
  int max_iters = 200;
};

// R rows of a D×R matrix forming a dominant, non-singular R×R submatrix.
// Initial rows come from partial-pivoted Gaussian elimination, followed by a
// dominance sweep of single-row swaps.
RowSelection square_maxvol(const Matrix& a, const SquareMaxvolOptions& opts = {});

struct RectMaxvolOptions {
  SquareMaxvolOptions square;
  // Greedy growth stops early once the largest squared coefficient-row norm
  // falls to this value. Zero keeps growing to exactly P rows.
  double stop_norm = 0.0;
  // After growth, single-row swaps are applied while any swap multiplies the
  // volume by more than 1 + swap_tol. At termination every unselected row of
  // A(SA)† has squared norm <= (R + P·swap_tol)/(P + 1 - R).
  double swap_tol = 1e-12;
  int max_swaps = 10000;
};

// P >= R rows of a D×R matrix grown greedily from square_maxvol. Each step
// adds the row with the largest coefficient-row norm in A(SA)†, lowest index
// on ties.
RowSelection rect_maxvol(const Matrix& a, Index p, const RectMaxvolOptions& opts = {});

// sqrt(1 + (D-P)R/(P+1-R)), the bound on ‖A(SA)†‖₂ for a rectangular
// locally-maximal-volume selection.
double maxvol_bound_coefficient(Index d, Index r, Index p);

// (SA)† for the rows of `a` listed in `sel`, computed by QR of SA.
Matrix sketched_pinv(const Matrix& a, const RowSelection& sel);

// Count-sketch of a stream of D-dimensional columns into an D×m buffer.
// Insertion i is added with a ±1 sign to bucket h(i); h and the sign come
// from a seeded 64-bit mix of the insertion counter.
class SketchAccumulator {
 public:
  SketchAccumulator(Index dim, Index width, std::uint64_t seed, std::uint64_t first_index = 0);

  void insert(std::span<const double> column);
  void insert(const Vector& column) { insert(std::span<const double>(column.data(), static_cast<std::size_t>(column.size()))); }

  // Adds another accumulator's buckets. Both must share dim, width and seed;
  // `other` is expected to have been started at this one's next index.
  void merge(const SketchAccumulator& other);

  const Matrix& buckets() const { return buckets_; }
  Index dim() const { return buckets_.rows(); }
  Index width() const { return buckets_.cols(); }
  std::uint64_t seed() const { return seed_; }
  std::uint64_t samples_seen() const { return samples_seen_; }
  std::uint64_t next_index() const { return first_index_ + samples_seen_; }

  // Bucket and sign of the insertion with global counter `index`.
  static std::pair<Index, double> hash(std::uint64_t seed, std::uint64_t index, Index width);

 private:
  Matrix buckets_;
  std::uint64_t seed_;
  std::uint64_t first_index_;
  std::uint64_t samples_seen_ = 0;
};

// max(4R+10, 2R)
Index default_sketch_width(Index rank);

struct SvdResult {
  Matrix u;                  // D×R, orthonormal columns
  std::vector<double> sigma; // length R, non-increasing
  Matrix vt;                 // R×m; empty when not requested
};

// Rank-R truncated SVD of a D×m matrix.
SvdResult truncated_svd(const Matrix& m, Index rank, bool want_vt = false);

// All min(D, m) singular values, non-increasing.
std::vector<double> singular_values(const Matrix& m);

}  // namespace ron
