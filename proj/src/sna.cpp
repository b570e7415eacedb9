#include "skipalign/sna.hpp"

#include <cmath>
#include <stdexcept>

namespace skipalign {

namespace {

Mat normalized_rows(const Mat& m) {
  Mat out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const Vec u = normalized(m.row(r));
    std::copy(u.begin(), u.end(), out.row(r).begin());
  }
  return out;
}

void check_class(ClassIndex k, std::size_t num_classes) {
  if (k < 0 || static_cast<std::size_t>(k) >= num_classes) {
    throw std::invalid_argument("class index " + std::to_string(k) + " out of range");
  }
}

void check_temperature(double t) {
  if (!(t > 0.0)) throw std::invalid_argument("temperature must be positive");
}

// Loss and (optionally) gradient of the gated prototype loss for one z,
// given pre-normalized prototype rows.
double gated_proto_loss(std::span<const double> z, const Mat& mu_hat, int phi, ClassIndex k,
                        double t, Vec* grad) {
  check_temperature(t);
  check_class(k, mu_hat.rows());
  if (z.size() != mu_hat.cols()) throw std::invalid_argument("dimension mismatch");
  const double zn = norm(z);
  if (!(zn >= kDegenerateNorm)) throw std::domain_error("degenerate vector");
  Vec zh(z.begin(), z.end());
  for (double& v : zh) v /= zn;

  const std::size_t num = mu_hat.rows();
  Vec s(num);
  for (std::size_t j = 0; j < num; ++j) s[j] = dot(zh, mu_hat.row(j)) / t;
  const double lse = log_sum_exp(s);
  const double loss = -static_cast<double>(phi) * s[static_cast<std::size_t>(k)] + lse;

  if (grad != nullptr) {
    Vec target(z.size(), 0.0);
    for (std::size_t j = 0; j < num; ++j) {
      const double alpha = std::exp(s[j] - lse);
      for (std::size_t c = 0; c < target.size(); ++c) target[c] += alpha * mu_hat(j, c);
    }
    if (phi != 0) {
      for (std::size_t c = 0; c < target.size(); ++c) {
        target[c] -= mu_hat(static_cast<std::size_t>(k), c);
      }
    }
    const double radial = dot(zh, target);
    grad->assign(z.size(), 0.0);
    for (std::size_t c = 0; c < z.size(); ++c) {
      (*grad)[c] = (target[c] - radial * zh[c]) / (t * zn);
    }
  }
  return loss;
}

void check_protos(const PrototypeSet& protos) {
  if (protos.num_classes() == 0) throw std::invalid_argument("empty prototype set");
}

}  // namespace

GateMask dual_gate(const Mat& cc_probs, const Mat& od_id_probs, double tau_id, double eta_id) {
  if (cc_probs.rows() != od_id_probs.rows() || cc_probs.cols() != od_id_probs.cols()) {
    throw std::invalid_argument("dual_gate: shape mismatch between classifier and detector");
  }
  GateMask mask;
  mask.tau_id = tau_id;
  mask.eta_id = eta_id;
  const std::size_t n = cc_probs.rows();
  mask.phi.resize(n);
  mask.cc_conf.resize(n);
  mask.od_conf.resize(n);
  mask.pred_class.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto p = cc_probs.row(i);
    std::size_t best = 0;
    for (std::size_t k = 1; k < p.size(); ++k) {
      if (p[k] > p[best]) best = k;
    }
    mask.pred_class[i] = static_cast<ClassIndex>(best);
    mask.cc_conf[i] = p[best];
    mask.od_conf[i] = od_id_probs(i, best);
    mask.phi[i] = (mask.cc_conf[i] > tau_id && mask.od_conf[i] > eta_id) ? 1 : 0;
  }
  return mask;
}

double usna_loss(std::span<const double> z, const PrototypeSet& protos, int phi,
                 ClassIndex k_hat, double temperature) {
  check_protos(protos);
  return gated_proto_loss(z, normalized_rows(protos.mu), phi, k_hat, temperature, nullptr);
}

Vec usna_grad(std::span<const double> z, const PrototypeSet& protos, int phi, ClassIndex k_hat,
              double temperature) {
  check_protos(protos);
  Vec g;
  gated_proto_loss(z, normalized_rows(protos.mu), phi, k_hat, temperature, &g);
  return g;
}

double pa_loss(std::span<const double> z, const PrototypeSet& protos, ClassIndex y,
               double temperature) {
  return usna_loss(z, protos, 1, y, temperature);
}

Vec pa_grad(std::span<const double> z, const PrototypeSet& protos, ClassIndex y,
            double temperature) {
  return usna_grad(z, protos, 1, y, temperature);
}

namespace {

double ia_impl(const EmbeddingBatch& batch, double t, IaResult* result, Mat* grad) {
  check_temperature(t);
  const std::size_t n = batch.size();
  if (n < 2) throw std::invalid_argument("instance alignment needs at least two samples");
  if (batch.labels.size() != n) throw std::invalid_argument("instance alignment needs labels");

  const Mat u = normalized_rows(batch.z);
  Mat s(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) s(i, j) = dot(u.row(i), u.row(j)) / t;
  }

  std::size_t anchors = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i && batch.labels[j] == batch.labels[i]) {
        ++anchors;
        break;
      }
    }
  }
  if (result != nullptr) {
    result->anchors = anchors;
    result->has_positive_pairs = anchors > 0;
  }
  Mat gu(n, batch.dim());
  double total = 0.0;
  if (anchors > 0) {
    const double inv_a = 1.0 / static_cast<double>(anchors);
    Vec others;
    others.reserve(n - 1);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t positives = 0;
      double pos_sum = 0.0;
      others.clear();
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        others.push_back(s(i, j));
        if (batch.labels[j] == batch.labels[i]) {
          ++positives;
          pos_sum += s(i, j);
        }
      }
      if (positives == 0) continue;
      const double inv_p = 1.0 / static_cast<double>(positives);
      const double lse = log_sum_exp(others);
      total += inv_a * (lse - inv_p * pos_sum);

      if (grad == nullptr) continue;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double q = std::exp(s(i, j) - lse);
        const double pos = batch.labels[j] == batch.labels[i] ? inv_p : 0.0;
        const double coef = inv_a * (q - pos) / t;
        for (std::size_t c = 0; c < batch.dim(); ++c) {
          gu(i, c) += coef * u(j, c);
          gu(j, c) += coef * u(i, c);
        }
      }
    }
  }
  if (grad != nullptr) {
    *grad = Mat(n, batch.dim());
    for (std::size_t i = 0; i < n; ++i) {
      const double zn = norm(batch.z.row(i));
      const double radial = dot(u.row(i), gu.row(i));
      for (std::size_t c = 0; c < batch.dim(); ++c) {
        (*grad)(i, c) = (gu(i, c) - radial * u(i, c)) / zn;
      }
    }
  }
  if (result != nullptr) result->loss = total;
  return total;
}

}  // namespace

IaResult ia_loss(const EmbeddingBatch& batch, double temperature) {
  IaResult r;
  ia_impl(batch, temperature, &r, nullptr);
  return r;
}

Mat ia_grad(const EmbeddingBatch& batch, double temperature) {
  Mat g;
  ia_impl(batch, temperature, nullptr, &g);
  return g;
}

namespace {

SnaGradResult sna_impl(const EmbeddingBatch& labeled, const EmbeddingBatch& unlabeled,
                       const PrototypeSet& protos, const GateMask& mask, const SnaWeights& w,
                       bool want_grad) {
  check_protos(protos);
  if (mask.size() != unlabeled.size()) {
    throw std::invalid_argument("gate mask size does not match unlabeled batch");
  }
  if (labeled.labels.size() != labeled.size()) {
    throw std::invalid_argument("labeled batch needs one label per row");
  }
  const Mat mu_hat = normalized_rows(protos.mu);
  SnaGradResult out;
  out.d_labeled = Mat(labeled.size(), labeled.dim());
  out.d_unlabeled = Mat(unlabeled.size(), unlabeled.dim());

  double usna = 0.0;
  if (unlabeled.size() > 0) {
    const double inv = 1.0 / static_cast<double>(unlabeled.size());
    Vec g;
    for (std::size_t i = 0; i < unlabeled.size(); ++i) {
      usna += inv * gated_proto_loss(unlabeled.z.row(i), mu_hat, mask.phi[i], mask.pred_class[i],
                                     w.t_usna, want_grad ? &g : nullptr);
      if (want_grad) {
        for (std::size_t c = 0; c < g.size(); ++c) {
          out.d_unlabeled(i, c) = w.lambda_usna * inv * g[c];
        }
      }
    }
  }

  double ia = 0.0;
  if (labeled.size() >= 2) {
    if (want_grad) {
      IaResult r;
      Mat g;
      ia_impl(labeled, w.t_ia, &r, &g);
      ia = r.loss;
      for (std::size_t i = 0; i < g.rows(); ++i) {
        for (std::size_t c = 0; c < g.cols(); ++c) out.d_labeled(i, c) += w.lambda_ia * g(i, c);
      }
    } else {
      ia = ia_loss(labeled, w.t_ia).loss;
    }
  }

  double pa = 0.0;
  if (labeled.size() > 0) {
    const double inv = 1.0 / static_cast<double>(labeled.size());
    Vec g;
    for (std::size_t i = 0; i < labeled.size(); ++i) {
      pa += inv * gated_proto_loss(labeled.z.row(i), mu_hat, 1, labeled.labels[i], w.t_pa,
                                   want_grad ? &g : nullptr);
      if (want_grad) {
        for (std::size_t c = 0; c < g.size(); ++c) out.d_labeled(i, c) += w.lambda_pa * inv * g[c];
      }
    }
  }

  out.report.terms = {{"usna", usna, w.lambda_usna}, {"ia", ia, w.lambda_ia}, {"pa", pa, w.lambda_pa}};
  out.report.total = w.lambda_usna * usna + w.lambda_ia * ia + w.lambda_pa * pa;
  return out;
}

}  // namespace

LossReport sna_total(const EmbeddingBatch& labeled, const EmbeddingBatch& unlabeled,
                     const PrototypeSet& protos, const GateMask& mask, const SnaWeights& w) {
  return sna_impl(labeled, unlabeled, protos, mask, w, false).report;
}

SnaGradResult sna_total_with_grad(const EmbeddingBatch& labeled, const EmbeddingBatch& unlabeled,
                                  const PrototypeSet& protos, const GateMask& mask,
                                  const SnaWeights& w) {
  return sna_impl(labeled, unlabeled, protos, mask, w, true);
}

}  // namespace skipalign
