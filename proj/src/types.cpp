#include "skipalign/types.hpp"

#include <algorithm>

namespace skipalign {

PrototypeSet PrototypeSet::from_directions(const Mat& mu) {
  PrototypeSet p;
  p.mu = mu;
  p.mu_l = mu;
  p.mu_u = Mat(mu.rows(), mu.cols());
  p.n_l.assign(mu.rows(), 1);
  p.n_u.assign(mu.rows(), 0);
  p.w_l_norm.assign(mu.rows(), 1.0);
  p.w_u_norm.assign(mu.rows(), 0.0);
  return p;
}

std::size_t GateMask::accepted() const {
  return static_cast<std::size_t>(std::count(phi.begin(), phi.end(), 1));
}

std::optional<double> LossReport::value(const std::string& name) const {
  for (const auto& t : terms) {
    if (t.name == name) return t.value;
  }
  return std::nullopt;
}

std::optional<double> LossReport::weight(const std::string& name) const {
  for (const auto& t : terms) {
    if (t.name == name) return t.weight;
  }
  return std::nullopt;
}

double LossReport::recomposed_total() const {
  double s = 0.0;
  for (const auto& t : terms) s += t.weight * t.value;
  return s;
}

}  // namespace skipalign
