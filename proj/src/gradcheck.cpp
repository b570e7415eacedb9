#include "skipalign/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>

#include "skipalign/heads.hpp"
#include "skipalign/net.hpp"
#include "skipalign/sna.hpp"
#include "skipalign/trainer.hpp"

namespace skipalign {

namespace {

using Clock = std::chrono::steady_clock;

struct Timer {
  Clock::time_point t0 = Clock::now();
  double seconds() const { return std::chrono::duration<double>(Clock::now() - t0).count(); }
};

Mat random_mat(std::size_t r, std::size_t c, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Mat m(r, c);
  for (double& v : m.data()) v = scale * n01(rng);
  return m;
}

Vec random_vec(std::size_t d, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Vec v(d);
  for (double& x : v) x = scale * n01(rng);
  return v;
}

std::size_t uniform(std::size_t lo, std::size_t hi, std::mt19937_64& rng) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

double uniform_real(double lo, double hi, std::mt19937_64& rng) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Vec flatten(const Mat& a, const Mat& b) {
  Vec v(a.data().begin(), a.data().end());
  v.insert(v.end(), b.data().begin(), b.data().end());
  return v;
}

/// A threshold in the widest gap around the middle of `values`, so that an
/// O(h) perturbation cannot move any value across it.
double gap_threshold(Vec values, double fallback) {
  std::sort(values.begin(), values.end());
  if (values.size() < 2) return fallback;
  const std::size_t lo = values.size() / 4, hi = std::max(lo + 1, 3 * values.size() / 4);
  std::size_t best = lo;
  for (std::size_t i = lo; i < hi && i + 1 < values.size(); ++i) {
    if (values[i + 1] - values[i] > values[best + 1] - values[best]) best = i;
  }
  return 0.5 * (values[best] + values[best + 1]);
}

double min_gap_to(const Vec& values, double threshold) {
  double g = INFINITY;
  for (double v : values) g = std::min(g, std::abs(v - threshold));
  return g;
}

}  // namespace

CheckResult check_usna_grad(std::size_t cases, std::uint64_t seed, double tol) {
  Timer timer;
  std::mt19937_64 rng(seed);
  CheckResult r{"usna_grad vs finite differences", true, cases, 0.0, tol, 0.0, ""};
  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t d = uniform(2, 16, rng), k = uniform(2, 8, rng);
    const double t = uniform_real(0.1, 2.0, rng);
    const PrototypeSet protos = PrototypeSet::from_directions(random_mat(k, d, 1.0, rng));
    const Vec z = random_vec(d, uniform_real(0.5, 3.0, rng), rng);
    const int phi = static_cast<int>(uniform(0, 1, rng));
    const auto k_hat = static_cast<ClassIndex>(uniform(0, k - 1, rng));
    const Vec g = usna_grad(z, protos, phi, k_hat, t);
    const Vec fd = finite_diff_grad(
        [&](std::span<const double> x) { return usna_loss(x, protos, phi, k_hat, t); }, z,
        1e-5 * norm(z));
    const double e = relative_error(g, fd);
    if (e > r.worst) {
      r.worst = e;
      r.detail = "d=" + std::to_string(d) + " K=" + std::to_string(k) + " T=" + std::to_string(t) +
                 " phi=" + std::to_string(phi);
    }
  }
  r.pass = r.worst <= tol;
  r.seconds = timer.seconds();
  return r;
}

CheckResult check_angular_purity(std::size_t cases, std::uint64_t seed, double radial_tol,
                                 double scale_tol) {
  Timer timer;
  std::mt19937_64 rng(seed);
  CheckResult r{"usna angular purity and scale invariance", true, cases, 0.0, radial_tol, 0.0, ""};
  double worst_scale = 0.0;
  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t d = uniform(2, 16, rng), k = uniform(2, 8, rng);
    const double t = uniform_real(0.1, 2.0, rng);
    const PrototypeSet protos = PrototypeSet::from_directions(random_mat(k, d, 1.0, rng));
    const Vec z = random_vec(d, uniform_real(0.1, 10.0, rng), rng);
    const auto k_hat = static_cast<ClassIndex>(uniform(0, k - 1, rng));
    const Vec zh = normalized(z);
    for (int phi : {0, 1}) {
      const Vec g = usna_grad(z, protos, phi, k_hat, t);
      const double gn = norm(g);
      if (gn > 0.0) r.worst = std::max(r.worst, std::abs(dot(zh, g)) / gn);
      const double base = usna_loss(z, protos, phi, k_hat, t);
      for (double scale : {1e-3, 1.0, 1e3}) {
        Vec zc = z;
        for (double& v : zc) v *= scale;
        worst_scale = std::max(worst_scale, std::abs(usna_loss(zc, protos, phi, k_hat, t) - base));
      }
    }
  }
  r.pass = r.worst <= radial_tol && worst_scale <= scale_tol;
  char buf[128];
  std::snprintf(buf, sizeof buf, "max |loss(cz)-loss(z)| = %.3g (tol %.0e)", worst_scale, scale_tol);
  r.detail = buf;
  r.seconds = timer.seconds();
  return r;
}

CheckResult check_ce_linear_identity(std::size_t cases, std::uint64_t seed, double tol) {
  Timer timer;
  std::mt19937_64 rng(seed);
  CheckResult r{"CE feature gradient under a linear head", true, cases, 0.0, tol, 0.0, ""};
  double worst_fd = 0.0;
  for (std::size_t c = 0; c < cases; ++c) {
    NetSpec spec;
    spec.input_dim = uniform(2, 6, rng);
    spec.num_classes = uniform(2, 8, rng);
    spec.backbone_widths = {uniform(3, 8, rng)};
    spec.feature_dim = uniform(2, 12, rng);
    spec.cc_hidden = 0;
    spec.seed = rng();
    const Network net(spec);
    ParamState state = net.init();
    for (double& p : state.params) p += 0.1 * random_vec(1, 1.0, rng)[0];
    const std::size_t n = uniform(1, 6, rng);
    const Mat x = random_mat(n, spec.input_dim, 1.0, rng);
    std::vector<ClassIndex> labels(n);
    for (auto& y : labels) y = static_cast<ClassIndex>(uniform(0, spec.num_classes - 1, rng));

    // Backpropagated feature gradient of the mean CE through the network.
    Network::Trace trace;
    const ForwardOutput out = net.forward(state, x, &trace);
    OutputGrad up;
    up.d_cc = ce_loss_logits(out.cc_logits, labels).grad;
    const Mat df = net.feature_grad(state, trace, up);

    // Closed form from the classifier's weight rows.
    const LayerInfo& head = net.layer("cc.out");
    const std::size_t k = spec.num_classes, d = spec.feature_dim;
    Mat w(k, d);
    std::copy_n(state.params.begin() + static_cast<long>(head.w_offset), k * d, w.data().begin());
    const Vec b(state.params.begin() + static_cast<long>(head.b_offset),
                state.params.begin() + static_cast<long>(head.b_offset + k));
    for (std::size_t i = 0; i < n; ++i) {
      Vec logits(k);
      for (std::size_t j = 0; j < k; ++j) logits[j] = dot(w.row(j), out.f.row(i)) + b[j];
      const Vec alpha = softmax(logits, 1.0);
      Vec expect(d, 0.0);
      for (std::size_t j = 0; j < k; ++j) {
        const double coef = alpha[j] - (static_cast<ClassIndex>(j) == labels[i] ? 1.0 : 0.0);
        for (std::size_t m = 0; m < d; ++m) expect[m] += coef * w(j, m) / static_cast<double>(n);
      }
      r.worst = std::max(r.worst, relative_error(df.row(i), expect));

      // The library's closed form against central differences of −log softmax_y.
      const Vec lib = ce_feature_grad_linear(w, b, out.f.row(i), labels[i]);
      const Vec fd = finite_diff_grad(
          [&](std::span<const double> f) {
            Vec l(k);
            for (std::size_t j = 0; j < k; ++j) l[j] = dot(w.row(j), f) + b[j];
            return log_sum_exp(l) - l[static_cast<std::size_t>(labels[i])];
          },
          out.f.row(i));
      worst_fd = std::max(worst_fd, relative_error(lib, fd));
    }
  }
  r.pass = r.worst <= tol && worst_fd <= 1e-6;
  char buf[96];
  std::snprintf(buf, sizeof buf, "closed form vs finite differences %.3g", worst_fd);
  r.detail = buf;
  r.seconds = timer.seconds();
  return r;
}

CheckResult check_alignment_grads(std::size_t cases, std::uint64_t seed, double tol) {
  Timer timer;
  std::mt19937_64 rng(seed);
  CheckResult r{"IA and PA gradients vs finite differences", true, cases, 0.0, tol, 0.0, ""};
  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t d = uniform(2, 10, rng), k = uniform(2, 4, rng), n = uniform(3, 8, rng);
    const double t = uniform_real(0.2, 1.5, rng);
    EmbeddingBatch batch{random_mat(n, d, 1.0, rng), {}, {}};
    for (std::size_t i = 0; i < n; ++i) batch.labels.push_back(static_cast<ClassIndex>(uniform(0, k - 1, rng)));
    batch.labels[1] = batch.labels[0];  // at least one positive pair
    const Mat g = ia_grad(batch, t);
    const Vec fd = finite_diff_grad(
        [&](std::span<const double> x) {
          EmbeddingBatch b = batch;
          std::copy(x.begin(), x.end(), b.z.data().begin());
          return ia_loss(b, t).loss;
        },
        batch.z.data());
    r.worst = std::max(r.worst, relative_error(g.data(), fd));

    const PrototypeSet protos = PrototypeSet::from_directions(random_mat(k, d, 1.0, rng));
    const Vec z = random_vec(d, 1.0, rng);
    const auto y = static_cast<ClassIndex>(uniform(0, k - 1, rng));
    const Vec pg = pa_grad(z, protos, y, t);
    const Vec pfd = finite_diff_grad(
        [&](std::span<const double> x) { return pa_loss(x, protos, y, t); }, z);
    r.worst = std::max(r.worst, relative_error(pg, pfd));
  }
  r.pass = r.worst <= tol;
  r.seconds = timer.seconds();
  return r;
}

CheckResult check_head_grads(std::size_t cases, std::uint64_t seed, double tol) {
  Timer timer;
  std::mt19937_64 rng(seed);
  CheckResult r{"head losses vs finite differences in the logits", true, cases, 0.0, tol, 0.0, ""};
  auto record = [&](const char* what, double e) {
    if (e > r.worst) {
      r.worst = e;
      r.detail = what;
    }
  };
  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t n = uniform(1, 5, rng), k = uniform(2, 5, rng);
    std::vector<ClassIndex> labels(n);
    for (auto& y : labels) y = static_cast<ClassIndex>(uniform(0, k - 1, rng));
    const Mat id_l = random_mat(n, k, 2.0, rng), ood_l = random_mat(n, k, 2.0, rng);
    const Vec packed = flatten(id_l, ood_l);
    auto unpack = [n, k](std::span<const double> x) {
      Mat a(n, k), b(n, k);
      std::copy(x.begin(), x.begin() + static_cast<long>(n * k), a.data().begin());
      std::copy(x.begin() + static_cast<long>(n * k), x.end(), b.data().begin());
      return OvaOutput::from_logits(std::move(a), std::move(b));
    };
    const OvaOutput out = OvaOutput::from_logits(id_l, ood_l);

    const auto ova = ova_loss_with_grad(out, labels);
    record("ova", relative_error(flatten(ova.grad.d_id, ova.grad.d_ood),
                                 finite_diff_grad([&](auto x) { return ova_loss(unpack(x), labels); },
                                                  packed)));
    const auto em = em_loss_with_grad(out);
    record("em", relative_error(flatten(em.grad.d_id, em.grad.d_ood),
                                finite_diff_grad([&](auto x) { return em_loss(unpack(x)); }, packed)));

    Vec phis(out.id_probs.data().begin(), out.id_probs.data().end());
    const double eta = std::clamp(gap_threshold(phis, 0.5), 1e-3, 1.0 - 1e-3);
    if (min_gap_to(phis, eta) > 1e-3) {
      const auto neg = neg_loss_with_grad(out, eta);
      record("neg", relative_error(flatten(neg.grad.d_id, neg.grad.d_ood),
                                   finite_diff_grad([&](auto x) { return neg_loss(unpack(x), eta); },
                                                    packed)));
    }

    const Mat id2 = random_mat(n, k, 2.0, rng), ood2 = random_mat(n, k, 2.0, rng);
    const OvaOutput out2 = OvaOutput::from_logits(id2, ood2);
    for (auto target : {SocrTarget::Logits, SocrTarget::Probabilities}) {
      const auto s = socr_loss_with_grad(out, out2, target);
      Vec both = flatten(s.grad.first.d_id, s.grad.first.d_ood);
      const Vec second = flatten(s.grad.second.d_id, s.grad.second.d_ood);
      both.insert(both.end(), second.begin(), second.end());
      Vec x0 = packed;
      const Vec p2 = flatten(id2, ood2);
      x0.insert(x0.end(), p2.begin(), p2.end());
      const Vec fd = finite_diff_grad(
          [&](std::span<const double> x) {
            return socr_loss(unpack(x.subspan(0, 2 * n * k)), unpack(x.subspan(2 * n * k)), target);
          },
          x0);
      record(target == SocrTarget::Logits ? "socr(logits)" : "socr(probabilities)",
             relative_error(both, fd));
    }

    const auto ce = ce_loss_logits(id_l, labels);
    record("ce", relative_error(ce.grad.data(),
                                finite_diff_grad(
                                    [&](std::span<const double> x) {
                                      Mat l(n, k);
                                      std::copy(x.begin(), x.end(), l.data().begin());
                                      return ce_loss_logits(l, labels).value;
                                    },
                                    id_l.data())));

    const Mat weak = softmax_rows(random_mat(n, k, 3.0, rng));
    Vec conf;
    for (std::size_t i = 0; i < n; ++i) {
      auto p = weak.row(i);
      conf.push_back(*std::max_element(p.begin(), p.end()));
    }
    const double tau = gap_threshold(conf, 0.5);
    const auto cons = consistency_loss_logits(weak, ood_l, tau);
    if (cons.accepted > 0) {
      record("consistency", relative_error(cons.grad.data(),
                                           finite_diff_grad(
                                               [&](std::span<const double> x) {
                                                 Mat l(n, k);
                                                 std::copy(x.begin(), x.end(), l.data().begin());
                                                 return consistency_loss_logits(weak, l, tau).loss;
                                               },
                                               ood_l.data())));
    }
  }
  r.pass = r.worst <= tol;
  r.seconds = timer.seconds();
  return r;
}

CheckResult check_model_grad(std::size_t cases, std::uint64_t seed, double tol) {
  Timer timer;
  std::mt19937_64 rng(seed);
  CheckResult r{"full objective through backward() vs finite differences", true, 0, 0.0, tol, 0.0,
                ""};
  std::size_t max_params = 0;
  std::size_t attempts = 0;
  while (r.cases < cases) {
    if (++attempts > 50 * cases) {
      r.pass = false;
      r.detail = "could not draw kink-free instances";
      break;
    }
    NetSpec spec;
    spec.input_dim = uniform(2, 5, rng);
    spec.num_classes = uniform(2, 3, rng);
    spec.backbone_widths = {uniform(4, 12, rng)};
    spec.feature_dim = uniform(4, 8, rng);
    spec.proj_hidden = uniform(0, 1, rng) == 0 ? 0 : 5;
    spec.proj_dim = 4;
    spec.proj_nonlinear = uniform(0, 1, rng) == 1;
    spec.cc_hidden = uniform(0, 1, rng) == 0 ? 0 : 6;
    spec.od_hidden = {uniform(3, 6, rng)};
    spec.seed = rng();
    const Network net(spec);
    if (net.param_count() > 500) continue;
    ParamState state = net.init();
    // Nonzero biases and larger weights spread the scores apart.
    for (double& p : state.params) p = 1.5 * p + 0.2 * random_vec(1, 1.0, rng)[0];

    const BatchLayout layout{3, 3};
    const Mat x = random_mat(layout.rows(), spec.input_dim, 1.5, rng);
    std::vector<ClassIndex> labels(layout.labeled);
    for (auto& y : labels) y = static_cast<ClassIndex>(uniform(0, spec.num_classes - 1, rng));
    labels[1] = labels[0];
    const PrototypeSet protos =
        PrototypeSet::from_directions(random_mat(spec.num_classes, spec.proj_dim, 1.0, rng));

    Network::Trace trace;
    const ForwardOutput out = net.forward(state, x, &trace);
    double kink = INFINITY;
    for (std::size_t l = 0; l < net.layers().size(); ++l) {
      if (net.layers()[l].act != Activation::Relu) continue;
      for (double v : trace.pre[l].data()) kink = std::min(kink, std::abs(v));
    }
    if (kink < 1e-3) continue;

    // Every threshold sits in a gap of the unperturbed scores.
    const ForwardOutput uw = out.slice_rows(layout.uw(), layout.unlabeled);
    const ForwardOutput us = out.slice_rows(layout.us(), layout.unlabeled);
    const Mat weak = softmax_rows(uw.cc_logits);
    Vec cc_conf, od_conf, phis, margins;
    for (std::size_t i = 0; i < layout.unlabeled; ++i) {
      auto p = weak.row(i);
      Vec sorted(p.begin(), p.end());
      std::sort(sorted.rbegin(), sorted.rend());
      margins.push_back(sorted[0] - sorted[1]);
      const auto kh = std::max_element(p.begin(), p.end()) - p.begin();
      cc_conf.push_back(sorted[0]);
      od_conf.push_back(uw.ova.id_probs(i, static_cast<std::size_t>(kh)));
    }
    for (const Mat* m : {&uw.ova.id_probs, &us.ova.id_probs}) {
      phis.insert(phis.end(), m->data().begin(), m->data().end());
    }
    if (*std::min_element(margins.begin(), margins.end()) < 1e-3) continue;
    TrainConfig cfg;
    cfg.tau_id = gap_threshold(cc_conf, 0.5);
    cfg.head.tau_pl = cfg.tau_id;
    cfg.eta_id = gap_threshold(od_conf, 0.5);
    cfg.head.eta_neg = std::clamp(gap_threshold(phis, 0.5), 1e-3, 1.0 - 1e-3);
    cfg.head.lambda_sna = 0.7;
    cfg.head.lambda_em = 0.3;
    cfg.sna.t_usna = 0.5;
    cfg.sna.t_ia = 0.7;
    cfg.sna.t_pa = 0.9;
    if (std::min({min_gap_to(cc_conf, cfg.tau_id), min_gap_to(od_conf, cfg.eta_id),
                  min_gap_to(phis, cfg.head.eta_neg)}) < 1e-4) {
      continue;
    }

    const LossClosure closure = [&](const ForwardOutput& o) {
      return batch_objective(o, layout, labels, protos, cfg);
    };
    const BackwardResult br = backward(net, state, x, closure);
    const Vec fd = finite_diff_grad(
        [&](std::span<const double> p) {
          ParamState probe = state;
          std::copy(p.begin(), p.end(), probe.params.begin());
          return batch_objective(net.forward(probe, x), layout, labels, protos, cfg).loss;
        },
        state.params);
    const double e = relative_error(br.grad, fd);
    ++r.cases;
    max_params = std::max(max_params, net.param_count());
    if (e > r.worst) r.worst = e;
  }
  r.pass = r.pass && r.worst <= tol;
  if (r.detail.empty()) r.detail = "largest net " + std::to_string(max_params) + " params";
  r.seconds = timer.seconds();
  return r;
}

std::vector<CheckResult> run_oracle_suite(std::uint64_t seed) {
  return {
      check_usna_grad(200, seed),
      check_angular_purity(1000, seed + 1),
      check_ce_linear_identity(200, seed + 2),
      check_alignment_grads(100, seed + 3),
      check_head_grads(100, seed + 4),
      check_model_grad(20, seed + 5),
  };
}

std::string format_result(const CheckResult& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s  %s  cases=%zu worst=%.3g tol=%.0e  %.2fs", r.pass ? "ok  " : "FAIL",
                r.name.c_str(), r.cases, r.worst, r.tolerance, r.seconds);
  std::string s = buf;
  if (!r.detail.empty()) s += "  (" + r.detail + ")";
  return s;
}

}  // namespace skipalign
