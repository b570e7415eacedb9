#pragma once

// Selective non-alignment losses: dual-gate ID selection, the gated
// unlabeled loss, the labeled instance/prototype alignment losses, and the
// weighted combination. Every loss has an analytic gradient with respect to
// the projection embeddings; prototypes are constants within a batch.

#include <span>

#include "skipalign/numeric.hpp"
#include "skipalign/types.hpp"

namespace skipalign {

struct SnaWeights {
  double lambda_usna = 1.0;
  double lambda_ia = 1.0;
  double lambda_pa = 1.0;
  // One temperature per term; configs set all three from a shared value
  // unless a term overrides it.
  double t_usna = 0.5;
  double t_ia = 0.5;
  double t_pa = 0.5;
};

/// Confident-ID mask: phi_i = 1 iff the closed-set confidence at the argmax
/// class exceeds tau_id and the detector's ID probability for that class
/// exceeds eta_id. Argmax ties go to the lowest class index.
GateMask dual_gate(const Mat& cc_probs, const Mat& od_id_probs, double tau_id, double eta_id);

/// −phi·sim(z, μ_k̂)/T + log Σ_j exp(sim(z, μ_j)/T).
double usna_loss(std::span<const double> z, const PrototypeSet& protos, int phi,
                 ClassIndex k_hat, double temperature);

/// Analytic gradient of usna_loss with respect to z. Orthogonal to z.
Vec usna_grad(std::span<const double> z, const PrototypeSet& protos, int phi, ClassIndex k_hat,
              double temperature);

double pa_loss(std::span<const double> z, const PrototypeSet& protos, ClassIndex y,
               double temperature);
Vec pa_grad(std::span<const double> z, const PrototypeSet& protos, ClassIndex y,
            double temperature);

struct IaResult {
  double loss = 0.0;
  /// False when no anchor has a same-class partner; loss is then 0.
  bool has_positive_pairs = false;
  std::size_t anchors = 0;
};

/// Supervised contrastive alignment on unit-normalized embeddings, averaged
/// over anchors that have at least one positive.
IaResult ia_loss(const EmbeddingBatch& batch, double temperature);

/// Gradient of ia_loss(batch).loss with respect to every row of batch.z.
Mat ia_grad(const EmbeddingBatch& batch, double temperature);

struct SnaGradResult {
  LossReport report;  // terms "usna", "ia", "pa"
  Mat d_labeled;      // ∂total/∂z for labeled rows
  Mat d_unlabeled;    // ∂total/∂z for unlabeled rows
};

/// λ_USNA·mean USNA(unlabeled) + λ_IA·IA(labeled) + λ_PA·mean PA(labeled).
LossReport sna_total(const EmbeddingBatch& labeled, const EmbeddingBatch& unlabeled,
                     const PrototypeSet& protos, const GateMask& mask, const SnaWeights& w);

SnaGradResult sna_total_with_grad(const EmbeddingBatch& labeled, const EmbeddingBatch& unlabeled,
                                  const PrototypeSet& protos, const GateMask& mask,
                                  const SnaWeights& w);

}  // namespace skipalign
