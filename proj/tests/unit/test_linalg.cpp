#include <doctest.h>

#include <cmath>
#include <set>

#include "../support/oracles.hpp"
#include "ron/errors.hpp"
#include "ron/linalg.hpp"

using namespace ron;

namespace {

Matrix rows_of(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index i = 0;
  for (const auto& r : rows) {
    Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

double max_abs_coefficient(const Matrix& a, const RowSelection& sel) {
  const Matrix sub = gather_rows(a, sel);
  return (a * sub.inverse()).cwiseAbs().maxCoeff();
}

double coefficient_norm(const Matrix& a, const RowSelection& sel) {
  return oracle::spectral_norm(a * sketched_pinv(a, sel));
}

void check_selection(const RowSelection& sel, Index d, Index p) {
  CHECK(sel.size() == p);
  CHECK(sel.source_rows == d);
  std::set<Index> uniq(sel.indices.begin(), sel.indices.end());
  CHECK(static_cast<Index>(uniq.size()) == p);
  for (Index i : sel.indices) {
    CHECK(i >= 0);
    CHECK(i < d);
  }
}

}  // namespace

TEST_CASE("volume of small matrices") {
  CHECK(volume(Matrix::Identity(2, 2)) == doctest::Approx(1.0));
  CHECK(volume(rows_of({{2, 0}, {0, 3}})) == doctest::Approx(36.0));
  CHECK(volume(rows_of({{1, 0}, {0, 1}, {1, 1}})) == doctest::Approx(3.0));
  CHECK_THROWS_AS(volume(Matrix::Ones(1, 2)), ShapeError);
}

TEST_CASE("volume is non-negative and permutation invariant") {
  oracle::Rng rng(11);
  for (int t = 0; t < 20; ++t) {
    const Matrix a = rng.matrix(7, 3);
    Matrix b = a;
    b.row(0).swap(b.row(5));
    b.row(2).swap(b.row(6));
    CHECK(volume(a) >= 0.0);
    CHECK(volume(b) == doctest::Approx(volume(a)).epsilon(1e-12));
    CHECK(volume(a) == doctest::Approx(oracle::volume_of(a, {0, 1, 2, 3, 4, 5, 6})).epsilon(1e-10));
  }
  // Rank-deficient input rounds to zero, never below.
  CHECK(volume(rows_of({{1, 2}, {2, 4}, {3, 6}})) >= 0.0);
}

TEST_CASE("square maxvol picks an identity block") {
  oracle::Rng rng(3);
  const Index d = 9, r = 4;
  Matrix a = rng.matrix(d, r, 1e-3);
  a.topRows(r) += Matrix::Identity(r, r);
  const RowSelection sel = square_maxvol(a);
  check_selection(sel, d, r);
  CHECK(sel.indices == std::vector<Index>{0, 1, 2, 3});
}

TEST_CASE("square maxvol on a column picks the largest entry") {
  const RowSelection sel = square_maxvol(rows_of({{1}, {3}, {2}}));
  CHECK(sel.indices == std::vector<Index>{1});
}

TEST_CASE("square maxvol is close to the exhaustive optimum on 6x2") {
  oracle::Rng rng(6);
  const Matrix a = rng.matrix(6, 2);
  const RowSelection sel = square_maxvol(a);
  const auto best = oracle::exhaustive_maxvol(a, 2);
  CHECK(oracle::volume_of(a, sel.indices) * std::pow(1.05, 4) >= best.volume * (1 - 1e-12));
}

TEST_CASE("square maxvol over many 6x2 matrices") {
  // Dominance always holds. Being within (1+tol)^(2R) of the optimum is not
  // guaranteed by dominance alone; seed 6 draw 4 is a counterexample. The
  // rate is a regression guard measured at 13/2000.
  oracle::Rng rng(6);
  int outside = 0;
  for (int t = 0; t < 400; ++t) {
    const Matrix a = rng.matrix(6, 2);
    const RowSelection sel = square_maxvol(a);
    const auto best = oracle::exhaustive_maxvol(a, 2);
    if (oracle::volume_of(a, sel.indices) * std::pow(1.05, 4) < best.volume * (1 - 1e-12)) ++outside;
    CHECK(max_abs_coefficient(a, sel) <= 1.05 + 1e-12);
  }
  CHECK(outside <= 8);
}

TEST_CASE("square maxvol dominance over random shapes") {
  oracle::Rng rng(8);
  for (int t = 0; t < 40; ++t) {
    const Index r = rng.integer(1, 6);
    const Index d = rng.integer(r, 30);
    const Matrix a = rng.matrix(d, r);
    const RowSelection sel = square_maxvol(a);
    check_selection(sel, d, r);
    CHECK(max_abs_coefficient(a, sel) <= 1.05 + 1e-10);
  }
}

TEST_CASE("square maxvol rejects rank-deficient input") {
  Matrix a(5, 2);
  for (Index i = 0; i < 5; ++i) a.row(i) << double(i + 1), 2.0 * double(i + 1);
  CHECK_THROWS_AS(square_maxvol(a), NumericalError);
  CHECK_THROWS_AS(square_maxvol(Matrix::Ones(2, 3)), ShapeError);
}

TEST_CASE("rect maxvol degenerate cases") {
  oracle::Rng rng(21);
  const Matrix a = rng.matrix(12, 3);
  SUBCASE("P = R matches square maxvol") {
    CHECK(rect_maxvol(a, 3).indices == square_maxvol(a).indices);
  }
  SUBCASE("P = D selects every row") {
    const RowSelection sel = rect_maxvol(a, 12);
    check_selection(sel, 12, 12);
    CHECK(maxvol_bound_coefficient(12, 3, 12) == 1.0);
    CHECK(coefficient_norm(a, sel) == doctest::Approx(1.0).epsilon(1e-10));
  }
  SUBCASE("P outside [R, D]") {
    CHECK_THROWS_AS(rect_maxvol(a, 2), ShapeError);
    CHECK_THROWS_AS(rect_maxvol(a, 13), ShapeError);
  }
}

TEST_CASE("rect maxvol on 8x2 with P = 3 against exhaustive enumeration") {
  oracle::Rng rng(82);
  for (int t = 0; t < 30; ++t) {
    const Matrix a = rng.matrix(8, 2);
    const RowSelection sel = rect_maxvol(a, 3);
    check_selection(sel, 8, 3);
    CHECK(coefficient_norm(a, sel) <= maxvol_bound_coefficient(8, 2, 3) + 1e-9);
    CHECK(oracle::volume_of(a, sel.indices) >= 0.5 * oracle::exhaustive_maxvol(a, 3).volume);
  }
}

TEST_CASE("rect maxvol bound and volume growth") {
  oracle::Rng rng(5);
  for (int t = 0; t < 30; ++t) {
    const Index r = rng.integer(1, 6);
    const Index d = rng.integer(2 * r, 50);
    const Matrix a = rng.matrix(d, r);
    double last = 0.0;
    for (Index p = r; p <= std::min(d, 2 * r); ++p) {
      const RowSelection sel = rect_maxvol(a, p);
      check_selection(sel, d, p);
      CHECK(coefficient_norm(a, sel) <= maxvol_bound_coefficient(d, r, p) + 1e-9);
      const double v = oracle::volume_of(a, sel.indices);
      CHECK(v >= last * (1 - 1e-10));
      last = v;
    }
  }
}

TEST_CASE("rect maxvol early stop keeps at least R rows") {
  oracle::Rng rng(17);
  const Matrix a = rng.matrix(30, 3);
  RectMaxvolOptions opts;
  opts.stop_norm = 1e6;
  const RowSelection sel = rect_maxvol(a, 6, opts);
  CHECK(sel.size() >= 3);
  CHECK(sel.size() <= 6);
}

TEST_CASE("rect maxvol is deterministic") {
  oracle::Rng rng(44);
  const Matrix a = rng.matrix(40, 5);
  CHECK(rect_maxvol(a, 8).indices == rect_maxvol(a, 8).indices);
}

TEST_CASE("bound coefficient") {
  CHECK(maxvol_bound_coefficient(100, 10, 15) == doctest::Approx(std::sqrt(1.0 + 850.0 / 6.0)));
  CHECK(maxvol_bound_coefficient(100, 10, 15) == doctest::Approx(11.944).epsilon(1e-4));
  CHECK_THROWS_AS(maxvol_bound_coefficient(10, 3, 2), PlanError);
}

TEST_CASE("sketched pinv") {
  oracle::Rng rng(9);
  SUBCASE("identity") {
    RowSelection all{{0, 1, 2, 3}, 4};
    const Matrix p = sketched_pinv(Matrix::Identity(4, 4), all);
    CHECK((p - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("consistent system is solved exactly") {
    const Matrix a = rng.matrix(10, 3);
    const Vector x0 = rng.vector(3);
    const Vector b = a * x0;
    for (const auto& idx : std::vector<std::vector<Index>>{{0, 1, 2}, {9, 4, 2, 7}, {1, 3, 5, 6, 8}}) {
      const RowSelection sel{idx, 10};
      const Vector x = sketched_pinv(a, sel) * gather(b, sel);
      CHECK((x - x0).cwiseAbs().maxCoeff() < 1e-8);
    }
  }
  SUBCASE("matches the normal equations on the selected rows") {
    for (int t = 0; t < 10; ++t) {
      const Matrix a = rng.matrix(10, 3);
      const Vector b = rng.vector(10);
      const RowSelection sel = rect_maxvol(a, 5);
      const Vector x = sketched_pinv(a, sel) * gather(b, sel);
      const auto ref = oracle::normal_equations(a, sel.indices, std::vector<double>(b.data(), b.data() + 10));
      for (Index i = 0; i < 3; ++i) CHECK(x(i) == doctest::Approx(ref[static_cast<std::size_t>(i)]).epsilon(1e-9));
    }
  }
  SUBCASE("left inverse of the selected rows") {
    const Matrix a = rng.matrix(20, 4);
    const RowSelection sel = rect_maxvol(a, 6);
    const Matrix prod = sketched_pinv(a, sel) * gather_rows(a, sel);
    CHECK((prod - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-8);
  }
  SUBCASE("rank deficiency") {
    Matrix a = rng.matrix(6, 2);
    a.row(1) = 2.0 * a.row(0);
    CHECK_THROWS_AS(sketched_pinv(a, RowSelection{{0, 1}, 6}), NumericalError);
    CHECK_THROWS_AS(sketched_pinv(a, RowSelection{{0}, 6}), ShapeError);
  }
}

TEST_CASE("count sketch insertion") {
  SUBCASE("zero column leaves buckets unchanged") {
    SketchAccumulator acc(5, 7, 1);
    acc.insert(Vector::Zero(5));
    CHECK(acc.buckets().cwiseAbs().maxCoeff() == 0.0);
    CHECK(acc.samples_seen() == 1);
  }
  SUBCASE("a single insertion fills one bucket with +-column") {
    oracle::Rng rng(2);
    const Vector col = rng.vector(6);
    SketchAccumulator acc(6, 9, 77);
    acc.insert(col);
    int hit = 0;
    for (Index j = 0; j < 9; ++j) {
      const Vector b = acc.buckets().col(j);
      if (b.cwiseAbs().maxCoeff() == 0.0) continue;
      ++hit;
      CHECK(((b - col).cwiseAbs().maxCoeff() == 0.0 || (b + col).cwiseAbs().maxCoeff() == 0.0));
    }
    CHECK(hit == 1);
    const auto [bucket, sign] = SketchAccumulator::hash(77, 0, 9);
    CHECK((acc.buckets().col(bucket) - sign * col).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("dimension mismatch") {
    SketchAccumulator acc(4, 3, 0);
    CHECK_THROWS_AS(acc.insert(Vector::Zero(5)), ShapeError);
    SketchAccumulator other(4, 5, 0);
    CHECK_THROWS_AS(acc.merge(other), ShapeError);
  }
  SUBCASE("split and merged equals sequential") {
    oracle::Rng rng(4);
    const Matrix cols = rng.matrix(30, 8);
    SketchAccumulator whole(8, 11, 5);
    for (Index i = 0; i < 30; ++i) whole.insert(Vector(cols.row(i).transpose()));
    SketchAccumulator a(8, 11, 5), b(8, 11, 5, 13);
    for (Index i = 0; i < 13; ++i) a.insert(Vector(cols.row(i).transpose()));
    for (Index i = 13; i < 30; ++i) b.insert(Vector(cols.row(i).transpose()));
    a.merge(b);
    CHECK(a.samples_seen() == 30);
    CHECK((a.buckets() - whole.buckets()).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("hash is deterministic and in range") {
    for (std::uint64_t i = 0; i < 1000; ++i) {
      const auto [bucket, sign] = SketchAccumulator::hash(123, i, 17);
      CHECK(bucket >= 0);
      CHECK(bucket < 17);
      CHECK(std::abs(sign) == 1.0);
      CHECK(SketchAccumulator::hash(123, i, 17) == std::make_pair(bucket, sign));
    }
  }
}

TEST_CASE("count sketch preserves an exact low-rank subspace") {
  oracle::Rng rng(31);
  for (int t = 0; t < 5; ++t) {
    const Index d = 40, r = 4, n = 500;
    const Matrix basis = rng.matrix(d, r);
    const Matrix z = basis * rng.matrix(r, n);  // columns are samples
    SketchAccumulator acc(d, default_sketch_width(r), 1000 + t);
    for (Index i = 0; i < n; ++i) acc.insert(Vector(z.col(i)));
    const Matrix sketched = truncated_svd(acc.buckets(), r).u;
    const Matrix exact = oracle::leading_left(z, r);
    CHECK(oracle::max_principal_angle(sketched, exact) < 0.2);
  }
  CHECK(default_sketch_width(5) == 30);
}

TEST_CASE("truncated svd") {
  oracle::Rng rng(12);
  SUBCASE("rank one") {
    const Vector u = rng.vector(7), v = rng.vector(5);
    const Matrix m = u * v.transpose();
    const SvdResult s = truncated_svd(m, 1);
    CHECK(s.sigma[0] == doctest::Approx(u.norm() * v.norm()).epsilon(1e-12));
    const double dot = std::abs(s.u.col(0).dot(u / u.norm()));
    CHECK(dot == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("identity") {
    const SvdResult s = truncated_svd(Matrix::Identity(6, 6), 6);
    for (double x : s.sigma) CHECK(x == doctest::Approx(1.0));
  }
  SUBCASE("random 20x12, rank 5, against the Jacobi oracle") {
    const Matrix m = rng.matrix(20, 12);
    const SvdResult s = truncated_svd(m, 5, true);
    const auto ref = oracle::jacobi_svd(m);
    double tail = 0;
    for (std::size_t i = 5; i < ref.s.size(); ++i) tail += ref.s[i] * ref.s[i];
    Matrix approx = s.u * Eigen::Map<const Eigen::VectorXd>(s.sigma.data(), 5).asDiagonal() * s.vt;
    const double resid = (m - approx).norm();
    CHECK(resid == doctest::Approx(std::sqrt(tail)).epsilon(1e-8));
    for (int i = 0; i < 5; ++i) CHECK(s.sigma[i] == doctest::Approx(ref.s[i]).epsilon(1e-10));
    CHECK((s.u.transpose() * s.u - Matrix::Identity(5, 5)).cwiseAbs().maxCoeff() < 1e-10);
    for (int i = 1; i < 5; ++i) CHECK(s.sigma[i] <= s.sigma[i - 1]);
  }
  SUBCASE("wide input and full spectrum") {
    const Matrix m = rng.matrix(4, 9);
    const auto all = singular_values(m);
    const auto ref = oracle::jacobi_svd(m).s;
    REQUIRE(all.size() == 4);
    for (int i = 0; i < 4; ++i) CHECK(all[i] == doctest::Approx(ref[i]).epsilon(1e-10));
  }
  SUBCASE("invalid rank") {
    CHECK_THROWS_AS(truncated_svd(Matrix::Identity(3, 3), 4), ShapeError);
    CHECK_THROWS_AS(truncated_svd(Matrix::Identity(3, 3), 0), ShapeError);
  }
}
