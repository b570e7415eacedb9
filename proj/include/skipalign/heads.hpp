#pragma once

// Closed-set classifier losses, the four one-vs-all detector losses, and the
// weighted total objective. Losses that the trainer backpropagates come in a
// `_with_grad` form returning the gradient with respect to the raw logits.

#include <span>
#include <utility>

#include "skipalign/numeric.hpp"
#include "skipalign/types.hpp"

namespace skipalign {

// Every log() in this module floors its argument here.
inline constexpr double kProbFloor = 1e-30;

/// Per-(sample, class) ID/OOD logit pairs and their two-way softmax.
struct OvaOutput {
  Mat id_logits;
  Mat ood_logits;
  Mat id_probs;
  Mat ood_probs;

  std::size_t batch() const { return id_logits.rows(); }
  std::size_t classes() const { return id_logits.cols(); }

  static OvaOutput from_logits(Mat id_logits, Mat ood_logits);
  /// Hand-built outputs: ID probabilities given directly, OOD = 1 − ID,
  /// logits chosen so the pair softmax reproduces them.
  static OvaOutput from_id_probs(const Mat& id_probs);
  OvaOutput slice_rows(std::size_t begin, std::size_t count) const;
};

struct OvaGrad {
  Mat d_id;
  Mat d_ood;
};

template <class G>
struct WithGrad {
  double value = 0.0;
  G grad;
};

struct HeadWeights {
  double lambda_u = 1.0;
  double lambda_em = 0.1;
  double lambda_socr = 0.5;
  double lambda_neg = 1.0;
  double lambda_cc = 1.0;
  double lambda_od = 1.0;
  double lambda_sna = 0.01;
  double tau_pl = 0.95;
  double eta_neg = 0.05;
};

enum class SocrTarget { Logits, Probabilities };

/// Mean −log p_{i,y_i}.
double ce_loss(const Mat& probs, std::span<const ClassIndex> labels);
/// Cross-entropy evaluated from logits; gradient is (softmax − onehot)/B.
WithGrad<Mat> ce_loss_logits(const Mat& logits, std::span<const ClassIndex> labels);

/// A.2-style feature gradient of CE under a linear head ℓ = W f:
/// Σ_j (α_j − δ_jk) w_j, with W stored K×d_f.
Vec ce_feature_grad_linear(const Mat& weights, std::span<const double> bias,
                           std::span<const double> feature, ClassIndex label);

struct ConsistencyResult {
  double loss = 0.0;
  std::size_t accepted = 0;
  Mat grad;  // w.r.t. strong logits; empty for the probability form
};

/// Hard pseudo-labels from weak probabilities above tau_pl; cross-entropy of
/// the strong view against them, averaged over the whole batch.
ConsistencyResult consistency_loss(const Mat& weak_probs, const Mat& strong_probs, double tau_pl);
ConsistencyResult consistency_loss_logits(const Mat& weak_probs, const Mat& strong_logits,
                                          double tau_pl);

double ova_loss(const OvaOutput& out, std::span<const ClassIndex> labels);
WithGrad<OvaGrad> ova_loss_with_grad(const OvaOutput& out, std::span<const ClassIndex> labels);

double em_loss(const OvaOutput& out);
WithGrad<OvaGrad> em_loss_with_grad(const OvaOutput& out);

double socr_loss(const OvaOutput& out_w, const OvaOutput& out_w2,
                 SocrTarget target = SocrTarget::Logits);
WithGrad<std::pair<OvaGrad, OvaGrad>> socr_loss_with_grad(const OvaOutput& out_w,
                                                          const OvaOutput& out_w2,
                                                          SocrTarget target = SocrTarget::Logits);

double neg_loss(const OvaOutput& out, double eta_neg);
WithGrad<OvaGrad> neg_loss_with_grad(const OvaOutput& out, double eta_neg);
/// Number of (sample, class) pairs with φ^ID below eta_neg.
std::size_t neg_selected_count(const OvaOutput& out, double eta_neg);

struct CcTerms {
  double x = 0.0;
  double u = 0.0;
};

struct OdTerms {
  double ova = 0.0;
  double em = 0.0;
  double socr = 0.0;
  double neg = 0.0;
};

/// λ_CC(L_x + λ_u L_u) + λ_OD(L_ova + λ_em L_em + λ_socr L_socr + λ_neg L_neg) + λ_SNA L_SNA.
/// The report lists the seven leaves with their effective weights.
LossReport total_loss(const CcTerms& cc, const OdTerms& od, double sna, const HeadWeights& w);

}  // namespace skipalign
