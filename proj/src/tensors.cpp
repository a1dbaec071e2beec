#include "las/tensors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "las/errors.hpp"

namespace las {

namespace {

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

template <typename F>
Matrix zip(const Matrix& a, const Matrix& b, const char* op, F f) {
  require_same_shape(a, b, op);
  Matrix out(a.rows(), a.cols());
  auto x = a.data();
  auto y = b.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(x[i], y[i]);
  return out;
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("Matrix: " + std::to_string(data_.size()) + " values for shape " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("Matrix::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a) + " x " + shape_str(b));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto o = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto br = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aik * br[j];
    }
  }
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Matrix elementwise(const Matrix& x, const std::function<double(double)>& f) {
  Matrix out(x.rows(), x.cols());
  auto in = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(in[i]);
  return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  return zip(a, b, "hadamard", [](double x, double y) { return x * y; });
}

Matrix add(const Matrix& a, const Matrix& b) {
  return zip(a, b, "add", [](double x, double y) { return x + y; });
}

Matrix subtract(const Matrix& a, const Matrix& b) {
  return zip(a, b, "subtract", [](double x, double y) { return x - y; });
}

Matrix scale(const Matrix& a, double s) {
  return elementwise(a, [s](double x) { return x * s; });
}

Matrix add_row_vector(const Matrix& a, const Matrix& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row_vector: expected 1x" + std::to_string(a.cols()) + ", got " +
                     shape_str(row));
  }
  Matrix out = a;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto o = out.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) o[j] += row(0, j);
  }
  return out;
}

std::vector<double> rowsum(const Matrix& x) {
  std::vector<double> out(x.rows(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (double v : x.row(i)) out[i] += v;
  return out;
}

std::vector<double> rowmax(const Matrix& x) {
  if (x.cols() == 0 && x.rows() > 0) throw ShapeError("rowmax: empty rows");
  std::vector<double> out(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    out[i] = *std::max_element(r.begin(), r.end());
  }
  return out;
}

Matrix slice_rows(const Matrix& x, std::size_t begin, std::size_t count) {
  if (begin + count > x.rows()) throw ShapeError("slice_rows: out of range");
  auto d = x.data().subspan(begin * x.cols(), count * x.cols());
  return Matrix(count, x.cols(), std::vector<double>(d.begin(), d.end()));
}

Matrix slice_cols(const Matrix& x, std::size_t begin, std::size_t count) {
  if (begin + count > x.cols()) throw ShapeError("slice_cols: out of range");
  Matrix out(x.rows(), count);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = x(i, begin + j);
  return out;
}

void set_cols(Matrix& dst, std::size_t begin, const Matrix& src) {
  if (src.rows() != dst.rows() || begin + src.cols() > dst.cols()) {
    throw ShapeError("set_cols: " + shape_str(src) + " does not fit in " + shape_str(dst));
  }
  for (std::size_t i = 0; i < src.rows(); ++i)
    for (std::size_t j = 0; j < src.cols(); ++j) dst(i, begin + j) = src(i, j);
}

Matrix vstack(std::span<const Matrix> parts) {
  if (parts.empty()) return {};
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  std::vector<double> data;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("vstack: column mismatch");
    rows += p.rows();
    data.insert(data.end(), p.values().begin(), p.values().end());
  }
  return Matrix(rows, cols, std::move(data));
}

bool all_finite(const Matrix& x) noexcept {
  return std::all_of(x.values().begin(), x.values().end(), [](double v) { return std::isfinite(v); });
}

double frobenius_norm(const Matrix& x) noexcept {
  double s = 0.0;
  for (double v : x.values()) s += v * v;
  return std::sqrt(s);
}

double max_abs(const Matrix& x) noexcept {
  double m = 0.0;
  for (double v : x.values()) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

double relative_error(const Matrix& approx, const Matrix& reference) {
  require_same_shape(approx, reference, "relative_error");
  double num = 0.0;
  for (std::size_t i = 0; i < approx.size(); ++i) {
    const double d = approx.values()[i] - reference.values()[i];
    num += d * d;
  }
  return std::sqrt(num) / std::max(frobenius_norm(reference), 1e-300);
}

double ActivationStats::percentile(double q) const {
  auto it = percentiles.find(q);
  if (it == percentiles.end()) {
    throw InputError("ActivationStats: quantile " + std::to_string(q) + " was not computed");
  }
  return it->second;
}

double sorted_percentile(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw EmptyInputError("percentile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw InputError("quantile outside [0,1]: " + std::to_string(q));
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

ActivationStats stats(std::span<const double> values, std::span<const double> quantiles) {
  if (values.empty()) throw EmptyInputError("stats: empty input");
  std::vector<double> sorted(values.begin(), values.end());
  for (double v : sorted) {
    if (!std::isfinite(v)) throw InputError("stats: non-finite sample");
  }
  std::sort(sorted.begin(), sorted.end());

  ActivationStats s;
  s.min = sorted.front();
  s.max = sorted.back();
  double sum = 0.0;
  for (double v : sorted) sum += v;
  s.mean = sum / static_cast<double>(sorted.size());
  double ss = 0.0;
  for (double v : sorted) ss += (v - s.mean) * (v - s.mean);
  s.variance = ss / static_cast<double>(sorted.size());
  for (double q : quantiles) s.percentiles[q] = sorted_percentile(sorted, q);
  return s;
}

ActivationStats stats(const Matrix& x, std::span<const double> quantiles) {
  return stats(x.data(), quantiles);
}

}  // namespace las
