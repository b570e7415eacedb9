#pragma once

// The training loop. Each iteration draws B labeled and gamma·B unlabeled
// samples, builds three augmented views of each, runs one forward pass over
// the stacked views, evaluates every loss term, backpropagates the weighted
// total, and takes a momentum SGD step on a half-cosine schedule. Prototypes
// are refreshed at every epoch boundary.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "skipalign/heads.hpp"
#include "skipalign/metrics.hpp"
#include "skipalign/net.hpp"
#include "skipalign/sna.hpp"
#include "skipalign/synthdata.hpp"
#include "skipalign/types.hpp"

namespace skipalign {

struct TrainConfig {
  std::size_t epochs = 24;
  std::size_t iters_per_epoch = 48;
  std::size_t batch_size = 16;
  std::size_t gamma = 2;  // unlabeled rows per labeled row
  double lr0 = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;

  HeadWeights head;
  SnaWeights sna;

  double tau_id = 0.99;
  double eta_id = 0.5;
  /// Temperature of the classifier softmax feeding the dual gate.
  double gate_temperature = 1.0;
  double tau_proto = 0.99;
  double eta_proto = 0.5;
  double r_u = 0.5;

  SocrTarget socr_target = SocrTarget::Logits;
  /// Apply the pseudo-negative term to the strong unlabeled view as well.
  bool neg_both_views = true;

  AugmentSpec augment;
  std::uint64_t seed = 0;
  /// Evaluate every N epochs through the eval hook; 0 disables mid-run evals.
  std::size_t eval_every = 0;
  /// Keep each iteration's full gate mask in the run log.
  bool log_gate_detail = false;
};

/// Half-cosine decay from lr0 at step 0 to 0 at total_steps.
double lr_at(std::int64_t step, std::int64_t total_steps, double lr0);

struct PrototypeAudit {
  std::int64_t epoch = 0;  // -1 for the initial labeled-only prototypes
  std::vector<std::size_t> n_l;
  std::vector<std::size_t> n_u;
  std::vector<double> w_l_norm;
  std::vector<double> w_u_norm;
};

struct IterationRecord {
  std::int64_t epoch = 0;
  std::int64_t iter = 0;
  std::int64_t step = 0;
  double lr = 0.0;
  LossReport report;      // the seven leaves of the total objective
  LossReport sna_report;  // usna / ia / pa inside the SNA leaf
  std::size_t gate_accepted = 0;
  std::size_t pl_accepted = 0;
  std::size_t negatives = 0;
  std::size_t proto_pool_added = 0;
  std::optional<GateMask> gate;
};

struct EpochRecord {
  std::int64_t epoch = 0;
  PrototypeAudit audit;
  nlohmann::json metrics;  // null unless evaluated this epoch
};

struct RunLog {
  PrototypeAudit initial;
  std::vector<IterationRecord> iterations;
  std::vector<EpochRecord> epochs;
};

nlohmann::json to_json(const IterationRecord& r);
nlohmann::json to_json(const EpochRecord& r);
/// One JSON object per line: the initial audit, every iteration, every epoch.
void write_jsonl(std::ostream& os, const RunLog& log);

struct TrainResult {
  ParamState params;
  PrototypeSet protos;
  RunLog log;
};

/// Raised when the total loss or an intermediate becomes non-finite.
class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, std::optional<LossReport> last)
      : std::runtime_error(what), last_report(std::move(last)) {}
  std::optional<LossReport> last_report;
};

using EvalHook =
    std::function<nlohmann::json(const ParamState&, const PrototypeSet&, std::int64_t epoch)>;

struct TrainHooks {
  EvalHook on_eval;
  /// Receives each run-log record as a JSON line when it is produced.
  std::ostream* stream = nullptr;
};

/// Row ranges of the six stacked views in one forward pass.
struct BatchLayout {
  std::size_t labeled = 0;    // B
  std::size_t unlabeled = 0;  // gamma·B

  std::size_t lw() const { return 0; }
  std::size_t lw2() const { return labeled; }
  std::size_t ls() const { return 2 * labeled; }
  std::size_t uw() const { return 3 * labeled; }
  std::size_t uw2() const { return 3 * labeled + unlabeled; }
  std::size_t us() const { return 3 * labeled + 2 * unlabeled; }
  std::size_t rows() const { return 3 * labeled + 3 * unlabeled; }
};

struct BatchDiagnostics {
  LossReport report;
  LossReport sna_report;
  GateMask gate;
  GateMask proto_gate;
  std::size_t pl_accepted = 0;
  std::size_t negatives = 0;
};

/// Every loss term for one stacked batch and its gradient with respect to the
/// forward outputs. Gate masks and pseudo-labels are piecewise constant in the
/// outputs and carry no gradient.
LossEval batch_objective(const ForwardOutput& out, const BatchLayout& layout,
                         std::span<const ClassIndex> labels, const PrototypeSet& protos,
                         const TrainConfig& cfg, BatchDiagnostics* diag = nullptr);

/// Labeled-only prototypes (the initial set) from the clean labeled inputs.
PrototypeSet initial_prototypes(const Network& net, const ParamState& params,
                                const TrainingView& data, const TrainConfig& cfg);

TrainResult train(const TrainingView& data, const NetSpec& spec, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});

/// Convenience overload: trains on the split's training view and, when
/// cfg.eval_every > 0, snapshots test metrics through the metrics module.
TrainResult train(const Split& split, const NetSpec& spec, const TrainConfig& cfg,
                  OodScoreKind score = OodScoreKind::OvaAtArgmax, std::ostream* stream = nullptr);

}  // namespace skipalign
