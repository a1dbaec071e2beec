#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "las/errors.hpp"
#include "las/random.hpp"
#include "las/tensors.hpp"

using las::Matrix;

namespace {

// Independent product: plain vectors, k-outer loop order.
std::vector<double> naive_product(const Matrix& a, const Matrix& b) {
  std::vector<double> out(a.rows() * b.cols(), 0.0);
  for (std::size_t k = 0; k < a.cols(); ++k)
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t j = 0; j < b.cols(); ++j) out[i * b.cols() + j] += a(i, k) * b(k, j);
  return out;
}

}  // namespace

TEST_CASE("matmul by identity is exact") {
  las::Rng rng(11);
  const Matrix m = las::random_normal(5, 3, 1.0, rng);
  CHECK(las::matmul(Matrix::identity(5), m) == m);
  CHECK(las::matmul(m, Matrix::identity(3)) == m);
}

TEST_CASE("matmul hand examples") {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  const Matrix ones = Matrix::from_rows({{1}, {1}});
  CHECK(las::matmul(a, ones) == Matrix::from_rows({{3}, {7}}));
  CHECK_THROWS_AS(las::matmul(a, Matrix(3, 1)), las::ShapeError);
}

TEST_CASE("matmul agrees with an independent triple loop") {
  las::Rng rng(12);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix a = las::random_normal(8, 8, 1.0, rng);
    const Matrix b = las::random_normal(8, 8, 1.0, rng);
    const Matrix ref(8, 8, naive_product(a, b));
    worst = std::max(worst, las::relative_error(las::matmul(a, b), ref));
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("matrix construction checks sizes") {
  CHECK_THROWS_AS(Matrix(2, 2, std::vector<double>{1, 2, 3}), las::ShapeError);
  const Matrix m(2, 3, 0.5);
  CHECK(m.size() == 6);
  CHECK(m(1, 2) == 0.5);
}

TEST_CASE("stats of a constant matrix") {
  const std::array<double, 3> q{0.1, 0.5, 0.9};
  const auto s = las::stats(Matrix(3, 4, 5.0), q);
  CHECK(s.min == 5.0);
  CHECK(s.max == 5.0);
  CHECK(s.mean == 5.0);
  CHECK(s.variance == 0.0);
  for (double p : q) CHECK(s.percentile(p) == 5.0);
}

TEST_CASE("percentile uses linear interpolation between order statistics") {
  std::vector<double> v;
  for (int i = 100; i >= 1; --i) v.push_back(i);
  const std::array<double, 1> q{0.99};
  // position 0.99 * 99 = 98.01 -> 99 + 0.01 * (100 - 99)
  CHECK(las::stats(v, q).percentile(0.99) == doctest::Approx(99.01).epsilon(1e-14));
  CHECK_THROWS_AS(las::stats(v, q).percentile(0.5), las::InputError);
}

TEST_CASE("stats of a singleton") {
  const std::array<double, 3> q{0.0, 0.5, 1.0};
  const auto s = las::stats(Matrix(1, 1, 7.0), q);
  for (double p : q) CHECK(s.percentile(p) == 7.0);
  CHECK(s.variance == 0.0);
}

TEST_CASE("stats rejects empty and non-finite input") {
  const std::array<double, 1> q{0.5};
  CHECK_THROWS_AS(las::stats(Matrix(), q), las::EmptyInputError);
  CHECK_THROWS_AS(las::stats(Matrix(1, 2, std::vector<double>{1.0, NAN}), q), las::InputError);
}

TEST_CASE("percentiles are monotone and bracketed by min and max") {
  las::Rng rng(13);
  std::vector<double> q;
  for (int i = 0; i <= 50; ++i) q.push_back(i / 50.0);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix x = las::random_normal(7, 9, 2.0, rng);
    const auto s = las::stats(x, q);
    CHECK(s.variance >= 0.0);
    double prev = s.min;
    for (double p : q) {
      const double v = s.percentile(p);
      CHECK(v >= prev);
      CHECK(v <= s.max);
      prev = v;
    }
  }
}

TEST_CASE("elementwise helpers") {
  const Matrix m = Matrix::from_rows({{1, -2}, {3.5, 0}});
  CHECK(las::hadamard(m, Matrix(2, 2, 1.0)) == m);
  const auto neg = [](double v) { return -v; };
  CHECK(las::elementwise(las::elementwise(m, neg), neg) == m);
  CHECK(las::rowmax(Matrix::from_rows({{1, 3}, {2, 2}})) == std::vector<double>{3, 2});
  CHECK(las::rowsum(m) == std::vector<double>{-1, 3.5});
  CHECK_THROWS_AS(las::rowmax(Matrix(2, 0)), las::ShapeError);
  CHECK_THROWS_AS(las::hadamard(m, Matrix(1, 2)), las::ShapeError);
}

TEST_CASE("slicing and stacking round-trip") {
  las::Rng rng(14);
  const Matrix m = las::random_uniform(6, 4, -1.0, 1.0, rng);
  const std::vector<Matrix> parts{las::slice_rows(m, 0, 2), las::slice_rows(m, 2, 4)};
  CHECK(las::vstack(parts) == m);
  Matrix rebuilt(6, 4);
  las::set_cols(rebuilt, 0, las::slice_cols(m, 0, 1));
  las::set_cols(rebuilt, 1, las::slice_cols(m, 1, 3));
  CHECK(rebuilt == m);
  CHECK(las::transpose(las::transpose(m)) == m);
}
