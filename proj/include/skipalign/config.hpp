#pragma once

// Experiment configuration: one JSON document with sections scenario, net,
// train, heads, sna, augment and eval. Every field is optional except
// "name"; omitted fields take the built-in defaults. Unknown fields are
// rejected. Scalar fields can be overridden from the environment with
// SKIPALIGN__<section>__<key>=<value> (top-level keys: SKIPALIGN__<key>).

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "skipalign/metrics.hpp"
#include "skipalign/net.hpp"
#include "skipalign/synthdata.hpp"
#include "skipalign/trainer.hpp"

namespace skipalign {

/// A validation failure; `field` is the dotted path of the offending key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field(std::move(field)) {}
  std::string field;
};

struct ExperimentConfig {
  std::string name;
  /// Run seed: network initialization and batch sampling. The scenario has
  /// its own seed so that runs can be repeated on one fixed split.
  std::uint64_t seed = 0;
  ScenarioSpec scenario;
  NetSpec net;  // input_dim, num_classes and seed are derived, not read
  TrainConfig train;
  OodScoreKind ood_score = OodScoreKind::OvaAtArgmax;

  /// NetSpec with the derived fields filled in.
  NetSpec net_spec() const;
  /// TrainConfig with the derived seed filled in.
  TrainConfig train_config() const;
};

constexpr const char* kEnvPrefix = "SKIPALIGN__";

/// Every field, defaults materialized.
nlohmann::json to_json(const ExperimentConfig& cfg);
/// Validates against the schema and applies defaults; throws ConfigError.
ExperimentConfig parse_config(const nlohmann::json& j);
/// Applies SKIPALIGN__ overrides from `env` (name -> value) onto a raw
/// config document before parsing.
nlohmann::json apply_env_overrides(nlohmann::json j, const std::map<std::string, std::string>& env);
/// The SKIPALIGN__ entries of the process environment.
std::map<std::string, std::string> environment_overrides();
/// Reads, overrides from the process environment, and parses.
ExperimentConfig load_config(const std::string& path);

/// Sets one field by dotted path ("train.eta_id") on a resolved config.
ExperimentConfig with_field(const ExperimentConfig& cfg, const std::string& path,
                            const nlohmann::json& value);

/// 64-bit FNV-1a over the canonical JSON of the resolved config.
std::uint64_t config_hash(const ExperimentConfig& cfg);

}  // namespace skipalign
