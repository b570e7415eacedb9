#include "skipalign/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace skipalign {

namespace {

void require_same_dim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("dimension mismatch: " + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
  }
  if (a.empty()) throw std::invalid_argument("empty vector");
}

}  // namespace

Mat::Mat(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw std::invalid_argument("matrix data length does not match rows*cols");
  }
}

Mat Mat::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return {};
  const std::size_t cols = rows.front().size();
  Mat m(rows.size(), cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != cols) throw std::invalid_argument("ragged rows");
    std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
  }
  return m;
}

Mat Mat::slice_rows(std::size_t begin, std::size_t count) const {
  if (begin + count > rows_) throw std::out_of_range("slice_rows past end");
  Mat out(count, cols_);
  std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_), count * cols_,
              out.data_.begin());
  return out;
}

Mat Mat::gather_rows(std::span<const std::size_t> indices) const {
  Mat out(indices.size(), cols_);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows_) throw std::out_of_range("gather_rows index");
    auto src = row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

void Mat::set_rows(std::size_t begin, const Mat& block) {
  if (block.cols_ != cols_ || begin + block.rows_ > rows_) {
    throw std::invalid_argument("set_rows shape mismatch");
  }
  std::copy(block.data_.begin(), block.data_.end(),
            data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_));
}

Mat vstack(std::span<const Mat> blocks) {
  if (blocks.empty()) return {};
  std::size_t rows = 0;
  const std::size_t cols = blocks.front().cols();
  for (const auto& b : blocks) {
    if (b.cols() != cols) throw std::invalid_argument("vstack column mismatch");
    rows += b.rows();
  }
  Mat out(rows, cols);
  std::size_t at = 0;
  for (const auto& b : blocks) {
    out.set_rows(at, b);
    at += b.rows();
  }
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  require_same_dim(a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

Vec normalized(std::span<const double> a) {
  const double n = norm(a);
  if (!(n >= kDegenerateNorm)) throw std::domain_error("degenerate vector");
  Vec out(a.begin(), a.end());
  for (double& v : out) v /= n;
  return out;
}

double cosine_sim(std::span<const double> a, std::span<const double> b) {
  require_same_dim(a, b);
  const double na = norm(a);
  const double nb = norm(b);
  if (!(na >= kDegenerateNorm) || !(nb >= kDegenerateNorm)) {
    throw std::domain_error("degenerate vector");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] / na) * (b[i] / nb);
  return std::clamp(s, -1.0, 1.0);
}

Vec softmax(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("softmax temperature must be positive");
  if (logits.empty()) throw std::invalid_argument("empty logits");
  const double mx = *std::max_element(logits.begin(), logits.end());
  Vec out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((logits[i] - mx) / temperature);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

Mat softmax_rows(const Mat& logits, double temperature) {
  Mat out(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const Vec p = softmax(logits.row(r), temperature);
    std::copy(p.begin(), p.end(), out.row(r).begin());
  }
  return out;
}

double log_sum_exp(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("log_sum_exp of empty range");
  const double mx = *std::max_element(values.begin(), values.end());
  double s = 0.0;
  for (double v : values) s += std::exp(v - mx);
  return mx + std::log(s);
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Vec tangential_project(std::span<const double> z, std::span<const double> v) {
  require_same_dim(z, v);
  const Vec zh = normalized(z);
  const double radial = dot(zh, v);
  Vec out(v.begin(), v.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= radial * zh[i];
  return out;
}

Vec finite_diff_grad(const ScalarField& f, std::span<const double> x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite difference step must be positive");
  Vec probe(x.begin(), x.end());
  Vec grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + h;
    const double fp = f(probe);
    probe[i] = saved - h;
    const double fm = f(probe);
    probe[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::domain_error("non-finite function value at coordinate " + std::to_string(i));
    }
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

double relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  require_same_dim(a, b);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
  const double scale = std::max({norm(a), norm(b)});
  if (scale < floor) return 0.0;
  return std::sqrt(diff) / scale;
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace skipalign
