#include <doctest.h>

#include <cmath>
#include <limits>

#include "skipalign/gradcheck.hpp"
#include "skipalign/heads.hpp"
#include "support.hpp"

using namespace skipalign;
using doctest::Approx;

namespace {

const double kLn2 = std::log(2.0);

OvaOutput random_ova(std::size_t b, std::size_t k, std::mt19937_64& rng) {
  return OvaOutput::from_logits(testing::gaussian_mat(b, k, rng, 2.0), testing::gaussian_mat(b, k, rng, 2.0));
}

// Flattened (id, ood) logits and back.
Vec flatten(const OvaOutput& o) {
  Vec v(o.id_logits.data().begin(), o.id_logits.data().end());
  v.insert(v.end(), o.ood_logits.data().begin(), o.ood_logits.data().end());
  return v;
}

OvaOutput unflatten(std::span<const double> v, std::size_t b, std::size_t k) {
  Mat id(b, k), ood(b, k);
  std::copy(v.begin(), v.begin() + static_cast<long>(b * k), id.data().begin());
  std::copy(v.begin() + static_cast<long>(b * k), v.end(), ood.data().begin());
  return OvaOutput::from_logits(id, ood);
}

Vec flatten(const OvaGrad& g) {
  Vec v(g.d_id.data().begin(), g.d_id.data().end());
  v.insert(v.end(), g.d_ood.data().begin(), g.d_ood.data().end());
  return v;
}

}  // namespace

TEST_CASE("ce loss hand cases") {
  const std::vector<ClassIndex> y0 = {0};
  CHECK(ce_loss(Mat::from_rows({{1, 0, 0}}), y0) == 0.0);
  CHECK(ce_loss(Mat::from_rows({{0.5, 0.5}}), y0) == Approx(kLn2).epsilon(1e-14));
  const std::vector<ClassIndex> y1 = {1};
  CHECK(ce_loss(Mat::from_rows({{0.73106, 0.26894}}), y1) == Approx(1.31326).epsilon(1e-5));
  // The same case from logits (1, 0).
  CHECK(ce_loss_logits(Mat::from_rows({{1, 0}}), y1).value ==
        Approx(std::log(1.0 + std::exp(1.0))).epsilon(1e-14));
  CHECK_THROWS(ce_loss(Mat::from_rows({{0.5, 0.5}}), std::vector<ClassIndex>{2}));
  CHECK(std::isfinite(ce_loss(Mat::from_rows({{1, 0}}), y1)));
}

TEST_CASE("consistency loss hand cases") {
  const Mat weak = Mat::from_rows({{0.99, 0.01}});
  ConsistencyResult r = consistency_loss(Mat::from_rows({{0.6, 0.4}, {0.5, 0.5}}),
                                         Mat::from_rows({{0.1, 0.9}, {0.2, 0.8}}), 0.95);
  CHECK(r.loss == 0.0);
  CHECK(r.accepted == 0);
  r = consistency_loss(weak, weak, 0.95);
  CHECK(r.accepted == 1);
  CHECK(r.loss == Approx(-std::log(0.99)).epsilon(1e-14));
  CHECK(r.loss == Approx(0.01005).epsilon(1e-3));
  CHECK(consistency_loss(weak, Mat::from_rows({{0.5, 0.5}}), 0.95).loss == Approx(kLn2).epsilon(1e-14));
  // Two samples, one accepted: the mean runs over the whole batch.
  r = consistency_loss(Mat::from_rows({{0.99, 0.01}, {0.5, 0.5}}),
                       Mat::from_rows({{0.5, 0.5}, {0.5, 0.5}}), 0.95);
  CHECK(r.loss == Approx(kLn2 / 2).epsilon(1e-14));
  CHECK_THROWS(consistency_loss(weak, Mat(1, 3), 0.95));
}

TEST_CASE("consistency loss from logits matches the probability form") {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 50; ++t) {
    const Mat weak = softmax_rows(testing::gaussian_mat(6, 3, rng, 4.0));
    const Mat strong = testing::gaussian_mat(6, 3, rng, 2.0);
    const auto a = consistency_loss(weak, softmax_rows(strong), 0.8);
    const auto b = consistency_loss_logits(weak, strong, 0.8);
    CHECK(a.accepted == b.accepted);
    CHECK(b.loss == Approx(a.loss).epsilon(1e-12));
  }
}

TEST_CASE("ova loss hand cases") {
  const std::vector<ClassIndex> y = {0};
  CHECK(ova_loss(OvaOutput::from_id_probs(Mat::from_rows({{1.0, 0.0, 0.0}})), y) == Approx(0.0).epsilon(1e-12));
  CHECK(ova_loss(OvaOutput::from_id_probs(Mat::from_rows({{0.5}})), y) == Approx(kLn2).epsilon(1e-12));
  // σ(s₁^ID) = 0.9, σ(s₂^OOD) = 0.8.
  const double v = ova_loss(OvaOutput::from_id_probs(Mat::from_rows({{0.9, 0.2}})), y);
  CHECK(v == Approx(-std::log(0.9) - std::log(0.8)).epsilon(1e-12));
  CHECK(v == Approx(0.32850).epsilon(1e-4));
}

TEST_CASE("em loss hand cases") {
  CHECK(em_loss(OvaOutput::from_id_probs(Mat::from_rows({{1, 0}, {0, 1}}))) == 0.0);
  CHECK(em_loss(OvaOutput::from_id_probs(Mat::from_rows({{0.5}}))) == Approx(kLn2).epsilon(1e-14));
  const double v = em_loss(OvaOutput::from_id_probs(Mat::from_rows({{0.9}})));
  CHECK(v == Approx(-(0.9 * std::log(0.9) + 0.1 * std::log(0.1))).epsilon(1e-12));
  CHECK(v == Approx(0.32508).epsilon(1e-4));
}

TEST_CASE("socr loss hand cases") {
  std::mt19937_64 rng(22);
  const OvaOutput o = random_ova(4, 3, rng);
  CHECK(socr_loss(o, o) == 0.0);
  CHECK(socr_loss(o, o, SocrTarget::Probabilities) == 0.0);
  const auto one = [](std::vector<double> s) {
    return OvaOutput::from_logits(Mat::from_rows({s}), Mat(1, s.size()));
  };
  CHECK(socr_loss(one({1.0}), one({0.0})) == 1.0);
  CHECK(socr_loss(one({0.5, -0.5}), one({0.0, 0.0})) == 0.5);
  CHECK_THROWS(socr_loss(one({1.0}), one({1.0, 2.0})));
  // The probability form compares φ^ID rather than s^ID.
  const double p = sigmoid(1.0) - 0.5;
  CHECK(socr_loss(one({1.0}), one({0.0}), SocrTarget::Probabilities) == Approx(p * p).epsilon(1e-14));
}

TEST_CASE("neg loss hand cases") {
  CHECK(neg_loss(OvaOutput::from_id_probs(Mat::from_rows({{0.5, 0.7}})), 0.05) == 0.0);
  CHECK(neg_loss(OvaOutput::from_id_probs(Mat::from_rows({{0.5}})), 0.6) == Approx(kLn2).epsilon(1e-12));
  // φ^ID = (0.1, 0.9) with η = 0.5: only the first class is selected.
  const OvaOutput o = OvaOutput::from_id_probs(Mat::from_rows({{0.1, 0.9}}));
  CHECK(neg_loss(o, 0.5) == Approx(-std::log(0.9)).epsilon(1e-12));
  CHECK(neg_loss(o, 0.5) == Approx(0.10536).epsilon(1e-4));
  CHECK(neg_selected_count(o, 0.5) == 1);
  CHECK_THROWS(neg_loss(o, 0.0));
  CHECK_THROWS(neg_loss(o, 1.0));
}

TEST_CASE("total loss weights") {
  HeadWeights zero{0, 0, 0, 0, 0, 0, 0, 0.95, 0.05};
  CHECK(total_loss({1, 2}, {3, 4, 5, 6}, 7, zero).total == 0.0);

  HeadWeights cc_only = zero;
  cc_only.lambda_cc = 1.0;
  const std::vector<ClassIndex> y = {1};
  const double ce = ce_loss(Mat::from_rows({{0.3, 0.7}}), y);
  CHECK(total_loss({ce, 5.0}, {3, 4, 5, 6}, 7, cc_only).total == ce);

  // L_CC = 1, L_OD = 2, L_SNA = 3 with (λ_CC, λ_OD, λ_SNA) = (0.5, 0.25, 0.01).
  HeadWeights w = zero;
  w.lambda_cc = 0.5;
  w.lambda_od = 0.25;
  w.lambda_sna = 0.01;
  const LossReport r = total_loss({1, 0}, {2, 0, 0, 0}, 3, w);
  CHECK(r.total == Approx(1.03).epsilon(1e-14));
  CHECK(r.terms.size() == 7);
  CHECK(r.recomposed_total() == Approx(r.total).epsilon(1e-14));

  const double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(total_loss({1, 0}, {2, nan, 0, 0}, 3, w), "non-finite loss term: em",
                       std::domain_error);
}

TEST_CASE("total loss report recomposes under default weights") {
  std::mt19937_64 rng(23);
  for (int t = 0; t < 100; ++t) {
    HeadWeights w;
    w.lambda_u = testing::pick_real(0, 2, rng);
    w.lambda_em = testing::pick_real(0, 2, rng);
    w.lambda_od = testing::pick_real(0, 2, rng);
    w.lambda_sna = testing::pick_real(0, 2, rng);
    const LossReport r = total_loss({testing::pick_real(0, 3, rng), testing::pick_real(0, 3, rng)},
                                    {testing::pick_real(0, 3, rng), testing::pick_real(0, 3, rng),
                                     testing::pick_real(0, 3, rng), testing::pick_real(0, 3, rng)},
                                    testing::pick_real(0, 3, rng), w);
    CHECK(std::abs(r.recomposed_total() - r.total) <= 1e-12);
  }
}

TEST_CASE("detector losses are non-negative and em peaks at one half") {
  std::mt19937_64 rng(24);
  for (int t = 0; t < 300; ++t) {
    const std::size_t b = testing::pick(1, 6, rng), k = testing::pick(1, 5, rng);
    const OvaOutput o = random_ova(b, k, rng), o2 = random_ova(b, k, rng);
    std::vector<ClassIndex> y(b);
    for (auto& v : y) v = static_cast<ClassIndex>(testing::pick(0, k - 1, rng));
    CHECK(ova_loss(o, y) >= 0.0);
    CHECK(em_loss(o) >= 0.0);
    CHECK(socr_loss(o, o2) >= 0.0);
    CHECK(neg_loss(o, testing::pick_real(0.01, 0.99, rng)) >= 0.0);
    CHECK(em_loss(o) <= static_cast<double>(k) * kLn2 + 1e-12);
    for (std::size_t i = 0; i < b * k; ++i) {
      CHECK(std::abs(o.id_probs.data()[i] + o.ood_probs.data()[i] - 1.0) <= 1e-12);
    }
  }
  const double mid = em_loss(OvaOutput::from_id_probs(Mat::from_rows({{0.5}})));
  for (double p = 0.01; p < 1.0; p += 0.01) {
    if (std::abs(p - 0.5) < 1e-9) continue;
    CHECK(em_loss(OvaOutput::from_id_probs(Mat::from_rows({{p}}))) < mid);
  }
}

TEST_CASE("ova gradient matches finite differences") {
  std::mt19937_64 rng(25);
  for (int t = 0; t < 50; ++t) {
    const std::size_t b = testing::pick(1, 4, rng), k = testing::pick(1, 4, rng);
    const OvaOutput o = random_ova(b, k, rng);
    std::vector<ClassIndex> y(b);
    for (auto& v : y) v = static_cast<ClassIndex>(testing::pick(0, k - 1, rng));
    const Vec fd = finite_diff_grad(
        [&](std::span<const double> x) { return ova_loss(unflatten(x, b, k), y); }, flatten(o));
    CHECK(relative_error(flatten(ova_loss_with_grad(o, y).grad), fd) <= 1e-6);
    const Vec fd_em = finite_diff_grad(
        [&](std::span<const double> x) { return em_loss(unflatten(x, b, k)); }, flatten(o));
    CHECK(relative_error(flatten(em_loss_with_grad(o).grad), fd_em) <= 1e-6);
  }
}

TEST_CASE("every head gradient passes the oracle suite") {
  const CheckResult r = check_head_grads(200, 26);
  INFO(format_result(r));
  CHECK(r.pass);
  CHECK(r.worst <= 1e-6);
}

TEST_CASE("ce feature gradient equals the linear-head identity") {
  const CheckResult r = check_ce_linear_identity(200, 27);
  INFO(format_result(r));
  CHECK(r.pass);
  const Mat w = Mat::from_rows({{1, 0}, {0, 1}});
  const Vec b = {0, 0};
  // Logits (1, 0) for label 0: (α₀ − 1)w₀ + α₁w₁.
  const Vec g = ce_feature_grad_linear(w, b, Vec{1, 0}, 0);
  const double a1 = 1.0 / (1.0 + std::exp(1.0));
  CHECK(g[0] == Approx(-a1).epsilon(1e-14));
  CHECK(g[1] == Approx(a1).epsilon(1e-14));
}
