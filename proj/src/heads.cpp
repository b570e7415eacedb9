#include "skipalign/heads.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace skipalign {

namespace {

double flog(double p) { return std::log(std::max(p, kProbFloor)); }

void check_labels(std::span<const ClassIndex> labels, std::size_t rows, std::size_t classes) {
  if (labels.size() != rows) throw std::invalid_argument("one label per row required");
  for (ClassIndex y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw std::invalid_argument("label " + std::to_string(y) + " out of range");
    }
  }
}

void check_same_shape(const Mat& a, const Mat& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch");
  }
}

OvaGrad zero_grad(const OvaOutput& out) {
  return {Mat(out.batch(), out.classes()), Mat(out.batch(), out.classes())};
}

// Adds g·∂d/∂(s_id, s_ood) where d = s_id − s_ood.
void add_pair_grad(OvaGrad& g, std::size_t i, std::size_t k, double d_loss_d_diff) {
  g.d_id(i, k) += d_loss_d_diff;
  g.d_ood(i, k) -= d_loss_d_diff;
}

std::size_t argmax(std::span<const double> p) {
  return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

}  // namespace

OvaOutput OvaOutput::from_logits(Mat id_logits, Mat ood_logits) {
  check_same_shape(id_logits, ood_logits, "ova logits");
  OvaOutput out;
  out.id_probs = Mat(id_logits.rows(), id_logits.cols());
  out.ood_probs = Mat(id_logits.rows(), id_logits.cols());
  for (std::size_t i = 0; i < id_logits.rows(); ++i) {
    for (std::size_t k = 0; k < id_logits.cols(); ++k) {
      const double d = id_logits(i, k) - ood_logits(i, k);
      out.id_probs(i, k) = sigmoid(d);
      out.ood_probs(i, k) = sigmoid(-d);
    }
  }
  out.id_logits = std::move(id_logits);
  out.ood_logits = std::move(ood_logits);
  return out;
}

OvaOutput OvaOutput::from_id_probs(const Mat& id_probs) {
  OvaOutput out;
  out.id_probs = id_probs;
  out.ood_probs = Mat(id_probs.rows(), id_probs.cols());
  out.id_logits = Mat(id_probs.rows(), id_probs.cols());
  out.ood_logits = Mat(id_probs.rows(), id_probs.cols());
  for (std::size_t i = 0; i < id_probs.rows(); ++i) {
    for (std::size_t k = 0; k < id_probs.cols(); ++k) {
      const double p = id_probs(i, k);
      if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("ID probability outside [0,1]");
      out.ood_probs(i, k) = 1.0 - p;
      out.id_logits(i, k) = flog(p) - flog(1.0 - p);
    }
  }
  return out;
}

OvaOutput OvaOutput::slice_rows(std::size_t begin, std::size_t count) const {
  return {id_logits.slice_rows(begin, count), ood_logits.slice_rows(begin, count),
          id_probs.slice_rows(begin, count), ood_probs.slice_rows(begin, count)};
}

double ce_loss(const Mat& probs, std::span<const ClassIndex> labels) {
  check_labels(labels, probs.rows(), probs.cols());
  if (probs.rows() == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    s -= flog(probs(i, static_cast<std::size_t>(labels[i])));
  }
  return s / static_cast<double>(probs.rows());
}

WithGrad<Mat> ce_loss_logits(const Mat& logits, std::span<const ClassIndex> labels) {
  check_labels(labels, logits.rows(), logits.cols());
  WithGrad<Mat> out{0.0, Mat(logits.rows(), logits.cols())};
  if (logits.rows() == 0) return out;
  const double inv = 1.0 / static_cast<double>(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    const double lse = log_sum_exp(logits.row(i));
    out.value += inv * (lse - logits(i, y));
    for (std::size_t k = 0; k < logits.cols(); ++k) {
      out.grad(i, k) = inv * (std::exp(logits(i, k) - lse) - (k == y ? 1.0 : 0.0));
    }
  }
  return out;
}

Vec ce_feature_grad_linear(const Mat& weights, std::span<const double> bias,
                           std::span<const double> feature, ClassIndex label) {
  if (weights.cols() != feature.size() || bias.size() != weights.rows()) {
    throw std::invalid_argument("linear head shape mismatch");
  }
  check_labels(std::span<const ClassIndex>(&label, 1), 1, weights.rows());
  Vec logits(weights.rows());
  for (std::size_t j = 0; j < weights.rows(); ++j) logits[j] = dot(weights.row(j), feature) + bias[j];
  const Vec alpha = softmax(logits);
  Vec g(feature.size(), 0.0);
  for (std::size_t j = 0; j < weights.rows(); ++j) {
    const double c = alpha[j] - (static_cast<ClassIndex>(j) == label ? 1.0 : 0.0);
    for (std::size_t d = 0; d < g.size(); ++d) g[d] += c * weights(j, d);
  }
  return g;
}

ConsistencyResult consistency_loss(const Mat& weak_probs, const Mat& strong_probs, double tau_pl) {
  check_same_shape(weak_probs, strong_probs, "consistency_loss");
  ConsistencyResult r;
  const std::size_t n = weak_probs.rows();
  if (n == 0) return r;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = argmax(weak_probs.row(i));
    if (weak_probs(i, k) > tau_pl) {
      ++r.accepted;
      r.loss -= flog(strong_probs(i, k));
    }
  }
  r.loss /= static_cast<double>(n);
  return r;
}

ConsistencyResult consistency_loss_logits(const Mat& weak_probs, const Mat& strong_logits,
                                          double tau_pl) {
  check_same_shape(weak_probs, strong_logits, "consistency_loss");
  ConsistencyResult r;
  const std::size_t n = weak_probs.rows();
  r.grad = Mat(n, strong_logits.cols());
  if (n == 0) return r;
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = argmax(weak_probs.row(i));
    if (!(weak_probs(i, y) > tau_pl)) continue;
    ++r.accepted;
    const double lse = log_sum_exp(strong_logits.row(i));
    r.loss += inv * (lse - strong_logits(i, y));
    for (std::size_t k = 0; k < strong_logits.cols(); ++k) {
      r.grad(i, k) = inv * (std::exp(strong_logits(i, k) - lse) - (k == y ? 1.0 : 0.0));
    }
  }
  return r;
}

WithGrad<OvaGrad> ova_loss_with_grad(const OvaOutput& out, std::span<const ClassIndex> labels) {
  check_labels(labels, out.batch(), out.classes());
  WithGrad<OvaGrad> r{0.0, zero_grad(out)};
  if (out.batch() == 0) return r;
  const double inv = 1.0 / static_cast<double>(out.batch());
  for (std::size_t i = 0; i < out.batch(); ++i) {
    for (std::size_t k = 0; k < out.classes(); ++k) {
      if (static_cast<std::size_t>(labels[i]) == k) {
        r.value -= flog(out.id_probs(i, k));
        add_pair_grad(r.grad, i, k, -inv * out.ood_probs(i, k));
      } else {
        r.value -= flog(out.ood_probs(i, k));
        add_pair_grad(r.grad, i, k, inv * out.id_probs(i, k));
      }
    }
  }
  r.value *= inv;
  return r;
}

double ova_loss(const OvaOutput& out, std::span<const ClassIndex> labels) {
  return ova_loss_with_grad(out, labels).value;
}

WithGrad<OvaGrad> em_loss_with_grad(const OvaOutput& out) {
  WithGrad<OvaGrad> r{0.0, zero_grad(out)};
  if (out.batch() == 0) return r;
  const double inv = 1.0 / static_cast<double>(out.batch());
  for (std::size_t i = 0; i < out.batch(); ++i) {
    for (std::size_t k = 0; k < out.classes(); ++k) {
      const double p = out.id_probs(i, k);
      const double q = out.ood_probs(i, k);
      // 0·log 0 := 0 falls out of the floor: 0 * log(1e-30) == 0.
      r.value -= p * flog(p) + q * flog(q);
      add_pair_grad(r.grad, i, k, -inv * p * q * (flog(p) - flog(q)));
    }
  }
  r.value *= inv;
  return r;
}

double em_loss(const OvaOutput& out) { return em_loss_with_grad(out).value; }

WithGrad<std::pair<OvaGrad, OvaGrad>> socr_loss_with_grad(const OvaOutput& out_w,
                                                          const OvaOutput& out_w2,
                                                          SocrTarget target) {
  check_same_shape(out_w.id_logits, out_w2.id_logits, "socr_loss");
  WithGrad<std::pair<OvaGrad, OvaGrad>> r{0.0, {zero_grad(out_w), zero_grad(out_w2)}};
  if (out_w.batch() == 0) return r;
  const double inv = 1.0 / static_cast<double>(out_w.batch());
  for (std::size_t i = 0; i < out_w.batch(); ++i) {
    for (std::size_t k = 0; k < out_w.classes(); ++k) {
      if (target == SocrTarget::Logits) {
        const double diff = out_w.id_logits(i, k) - out_w2.id_logits(i, k);
        r.value += diff * diff;
        r.grad.first.d_id(i, k) += 2.0 * inv * diff;
        r.grad.second.d_id(i, k) -= 2.0 * inv * diff;
      } else {
        const double p1 = out_w.id_probs(i, k);
        const double p2 = out_w2.id_probs(i, k);
        const double diff = p1 - p2;
        r.value += diff * diff;
        add_pair_grad(r.grad.first, i, k, 2.0 * inv * diff * p1 * out_w.ood_probs(i, k));
        add_pair_grad(r.grad.second, i, k, -2.0 * inv * diff * p2 * out_w2.ood_probs(i, k));
      }
    }
  }
  r.value *= inv;
  return r;
}

double socr_loss(const OvaOutput& out_w, const OvaOutput& out_w2, SocrTarget target) {
  return socr_loss_with_grad(out_w, out_w2, target).value;
}

WithGrad<OvaGrad> neg_loss_with_grad(const OvaOutput& out, double eta_neg) {
  if (!(eta_neg > 0.0 && eta_neg < 1.0)) throw std::invalid_argument("eta_neg must lie in (0,1)");
  WithGrad<OvaGrad> r{0.0, zero_grad(out)};
  if (out.batch() == 0) return r;
  const double inv = 1.0 / static_cast<double>(out.batch());
  for (std::size_t i = 0; i < out.batch(); ++i) {
    std::size_t selected = 0;
    for (std::size_t k = 0; k < out.classes(); ++k) {
      if (out.id_probs(i, k) < eta_neg) ++selected;
    }
    if (selected == 0) continue;
    const double scale = inv / static_cast<double>(selected);
    for (std::size_t k = 0; k < out.classes(); ++k) {
      if (!(out.id_probs(i, k) < eta_neg)) continue;
      r.value -= scale * flog(out.ood_probs(i, k));
      add_pair_grad(r.grad, i, k, scale * out.id_probs(i, k));
    }
  }
  return r;
}

double neg_loss(const OvaOutput& out, double eta_neg) {
  return neg_loss_with_grad(out, eta_neg).value;
}

std::size_t neg_selected_count(const OvaOutput& out, double eta_neg) {
  std::size_t n = 0;
  for (double p : out.id_probs.data()) {
    if (p < eta_neg) ++n;
  }
  return n;
}

LossReport total_loss(const CcTerms& cc, const OdTerms& od, double sna, const HeadWeights& w) {
  LossReport r;
  r.terms = {
      {"x", cc.x, w.lambda_cc},
      {"u", cc.u, w.lambda_cc * w.lambda_u},
      {"ova", od.ova, w.lambda_od},
      {"em", od.em, w.lambda_od * w.lambda_em},
      {"socr", od.socr, w.lambda_od * w.lambda_socr},
      {"neg", od.neg, w.lambda_od * w.lambda_neg},
      {"sna", sna, w.lambda_sna},
  };
  for (const auto& t : r.terms) {
    if (!std::isfinite(t.value)) throw std::domain_error("non-finite loss term: " + t.name);
  }
  const double l_cc = cc.x + w.lambda_u * cc.u;
  const double l_od = od.ova + w.lambda_em * od.em + w.lambda_socr * od.socr + w.lambda_neg * od.neg;
  r.total = w.lambda_cc * l_cc + w.lambda_od * l_od + w.lambda_sna * sna;
  return r;
}

}  // namespace skipalign
