#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "skipalign/numeric.hpp"

namespace skipalign {

/// Class indices are zero-based throughout: 0 .. K-1.
using ClassIndex = int;

/// Rows of feature or projection vectors with per-row metadata.
/// `labels` is either empty or one entry per row.
struct EmbeddingBatch {
  Mat z;
  std::vector<ClassIndex> labels;
  std::vector<long> ids;

  std::size_t size() const { return z.rows(); }
  std::size_t dim() const { return z.cols(); }
};

/// K prototype directions plus the counts and weights that produced them.
/// Prototypes are stored unnormalized; similarity code normalizes on use.
struct PrototypeSet {
  Mat mu;
  Mat mu_l;
  Mat mu_u;  // zero row where n_u[k] == 0
  std::vector<std::size_t> n_l;
  std::vector<std::size_t> n_u;
  std::vector<double> w_l_norm;
  std::vector<double> w_u_norm;
  double gamma = 1.0;
  double r_u = 0.0;

  std::size_t num_classes() const { return mu.rows(); }
  std::size_t dim() const { return mu.cols(); }

  /// Prototypes given directly as rows, with no labeled/unlabeled provenance.
  static PrototypeSet from_directions(const Mat& mu);
};

/// Dual-gate selection result for a batch of unlabeled samples.
struct GateMask {
  std::vector<int> phi;  // 0 or 1
  std::vector<double> cc_conf;
  std::vector<double> od_conf;
  std::vector<ClassIndex> pred_class;
  double tau_id = 0.0;
  double eta_id = 0.0;

  std::size_t size() const { return phi.size(); }
  std::size_t accepted() const;
};

struct LossTerm {
  std::string name;
  double value = 0.0;
  /// Effective multiplier of this leaf in the report total.
  double weight = 0.0;
};

/// Named scalar loss terms, their weights, and the weighted total.
struct LossReport {
  std::vector<LossTerm> terms;
  double total = 0.0;

  std::optional<double> value(const std::string& name) const;
  std::optional<double> weight(const std::string& name) const;
  /// Σ weight·value over terms, in term order.
  double recomposed_total() const;
};

}  // namespace skipalign
