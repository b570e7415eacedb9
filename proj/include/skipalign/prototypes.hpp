#pragma once

// Adaptive class prototypes: a count-weighted fusion of the labeled class
// mean and the mean of gated unlabeled embeddings assigned to the class.
//
//   w_l = gamma * n_l,  w_u = r_u * n_u,  mu = (w_l mu_l + w_u mu_u) / (w_l + w_u)

#include <iosfwd>

#include "skipalign/numeric.hpp"
#include "skipalign/types.hpp"

namespace skipalign {

/// `labeled` must carry labels and cover every class 0..num_classes-1.
/// Unlabeled contributors are rows with mask.phi == 1, grouped by
/// mask.pred_class.
PrototypeSet refresh_prototypes(const EmbeddingBatch& labeled, const EmbeddingBatch& unlabeled,
                                const GateMask& mask, double gamma, double r_u,
                                std::size_t num_classes);

/// Entry (i, k) = cosine_sim(z_i, mu_k).
Mat proto_similarity_profile(const EmbeddingBatch& batch, const PrototypeSet& protos);

/// Text format with hex floats, so a reload is bit-exact.
void save_prototypes(std::ostream& os, const PrototypeSet& protos);
PrototypeSet load_prototypes(std::istream& is);

}  // namespace skipalign
