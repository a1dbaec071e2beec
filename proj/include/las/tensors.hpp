#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <vector>

namespace las {

/// Dense row-major matrix of doubles. Weights and activations both use it;
/// a vector is a 1 x n matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

Matrix elementwise(const Matrix& x, const std::function<double(double)>& f);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
// Adds a 1 x cols row vector to every row.
Matrix add_row_vector(const Matrix& a, const Matrix& row);

std::vector<double> rowsum(const Matrix& x);
std::vector<double> rowmax(const Matrix& x);

Matrix slice_rows(const Matrix& x, std::size_t begin, std::size_t count);
Matrix slice_cols(const Matrix& x, std::size_t begin, std::size_t count);
void set_cols(Matrix& dst, std::size_t begin, const Matrix& src);
Matrix vstack(std::span<const Matrix> parts);

bool all_finite(const Matrix& x) noexcept;
double frobenius_norm(const Matrix& x) noexcept;
double max_abs(const Matrix& x) noexcept;
double max_abs_diff(const Matrix& a, const Matrix& b);
// ||a - b||_F / ||b||_F; reference norm floored at 1e-300.
double relative_error(const Matrix& approx, const Matrix& reference);

struct ActivationStats {
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
  double variance = 0.0;
  std::map<double, double> percentiles;

  /// Value stored for quantile q; throws InputError if q was not requested.
  double percentile(double q) const;
};

/// Percentile of an already sorted sample by linear interpolation between
/// order statistics at position q * (n - 1).
double sorted_percentile(std::span<const double> sorted, double q);

ActivationStats stats(const Matrix& x, std::span<const double> quantiles);
ActivationStats stats(std::span<const double> values, std::span<const double> quantiles);

}  // namespace las
