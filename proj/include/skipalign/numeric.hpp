#pragma once

// Dense kernels shared by every other module. All reals are double.

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace skipalign {

using Vec = std::vector<double>;

/// Row-major dense matrix.
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Mat(std::size_t rows, std::size_t cols, std::vector<double> data);

  /// Builds a matrix from nested rows; all rows must share a length.
  static Mat from_rows(const std::vector<std::vector<double>>& rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  /// Copies rows [begin, begin + count).
  Mat slice_rows(std::size_t begin, std::size_t count) const;
  /// Copies the listed rows in order.
  Mat gather_rows(std::span<const std::size_t> indices) const;
  /// Overwrites rows starting at `begin` with `block`.
  void set_rows(std::size_t begin, const Mat& block);

  friend bool operator==(const Mat&, const Mat&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Stacks matrices with equal column counts on top of each other.
Mat vstack(std::span<const Mat> blocks);

// Norms below this are rejected as degenerate rather than clamped
// (std::domain_error: the direction is undefined).
inline constexpr double kDegenerateNorm = 1e-30;

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
/// a / ‖a‖; throws on a degenerate vector.
Vec normalized(std::span<const double> a);

double cosine_sim(std::span<const double> a, std::span<const double> b);

/// Temperature-scaled softmax, max-shifted.
Vec softmax(std::span<const double> logits, double temperature = 1.0);

/// Row-wise softmax of a B×K logit matrix.
Mat softmax_rows(const Mat& logits, double temperature = 1.0);

double log_sum_exp(std::span<const double> values);

/// Numerically stable logistic function.
double sigmoid(double x);

/// (I − ẑẑᵀ)v: removes the component of v along z.
Vec tangential_project(std::span<const double> z, std::span<const double> v);

using ScalarField = std::function<double(std::span<const double>)>;

/// Central-difference gradient of f at x with step h.
Vec finite_diff_grad(const ScalarField& f, std::span<const double> x, double h = 1e-5);

/// ‖a − b‖ / max(‖a‖, ‖b‖, floor). Zero when both vectors are below the floor.
double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-12);

bool all_finite(std::span<const double> values);

}  // namespace skipalign
