#pragma once

// Experiment plumbing: one full run (scenario, training, evaluation) and its
// on-disk artifacts, ablation sweeps, and golden metrics.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "skipalign/config.hpp"
#include "skipalign/metrics.hpp"
#include "skipalign/synthdata.hpp"
#include "skipalign/trainer.hpp"

namespace skipalign {

std::string version_tag();

struct RunOutcome {
  Split split;
  TrainResult train;
  Evaluation eval;
  double seconds = 0.0;
};

/// Runs everything in memory. `runlog` receives the JSONL run log as it is
/// produced.
RunOutcome execute(const ExperimentConfig& cfg, std::ostream* runlog = nullptr);

/// "<name>-<first 12 hex of config_hash>", the run directory's name.
std::string run_dir_name(const ExperimentConfig& cfg);

/// Artifacts written into every run directory.
namespace artifact {
constexpr const char* kManifest = "manifest.json";
constexpr const char* kRunLog = "runlog.jsonl";
constexpr const char* kCheckpoint = "checkpoint.txt";
constexpr const char* kPrototypes = "prototypes.txt";
constexpr const char* kEval = "eval.json";
constexpr const char* kMetrics = "metrics.csv";
constexpr const char* kEmbeddings = "embeddings.csv";
constexpr const char* kSplit = "split.csv";
constexpr const char* kScenario = "scenario.json";
}  // namespace artifact

struct RunArtifacts {
  std::filesystem::path dir;
  RunOutcome outcome;
};

/// Executes and writes a fresh run directory under `out_root`. An existing
/// directory for the same config is an error unless `overwrite`.
RunArtifacts write_run(const ExperimentConfig& cfg, const std::filesystem::path& out_root,
                       bool overwrite = false);

nlohmann::json run_manifest(const ExperimentConfig& cfg, const std::filesystem::path& dir,
                            double seconds);

/// Rebuilds the config stored in a run manifest.
ExperimentConfig config_from_manifest(const std::filesystem::path& manifest_path);

/// Re-scores a saved checkpoint on the test split regenerated from its
/// manifest. Prototypes are read from beside the checkpoint.
EvalReport rescore_checkpoint(const std::filesystem::path& checkpoint, OodScoreKind score);

// Sweeps.

enum class SweepAxis { EtaId, RU, LossCombo, LambdaSna };

/// Throws ConfigError on an unknown axis.
SweepAxis parse_sweep_axis(const std::string& name);
std::string axis_name(SweepAxis axis);

/// Loss combinations: "none", "ia+pa", "usna", "all".
ExperimentConfig with_loss_combo(const ExperimentConfig& cfg, const std::string& combo);

/// One config per value; each differs from `base` only in the swept field.
std::vector<ExperimentConfig> sweep_configs(const ExperimentConfig& base, SweepAxis axis,
                                            const std::vector<std::string>& values);

struct SweepRow {
  std::string value;
  EvalReport report;
};

/// Runs every config in memory, or through write_run when out_root is set.
std::vector<SweepRow> run_sweep(const ExperimentConfig& base, SweepAxis axis,
                                const std::vector<std::string>& values,
                                const std::filesystem::path* out_root = nullptr);

/// value,acc,seen_auc,unseen_auc,overall_auc
std::string sweep_csv(const std::vector<SweepRow>& rows);

/// Metrics CSV of the reference run for a config.
std::string golden_metrics(const ExperimentConfig& cfg);

}  // namespace skipalign
