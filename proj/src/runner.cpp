#include "skipalign/runner.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>

#include "skipalign/prototypes.hpp"

#ifndef SKIPALIGN_VERSION
#define SKIPALIGN_VERSION "0.0.0"
#endif

namespace skipalign {

namespace fs = std::filesystem;
using nlohmann::json;

std::string version_tag() { return SKIPALIGN_VERSION; }

RunOutcome execute(const ExperimentConfig& cfg, std::ostream* runlog) {
  const auto t0 = std::chrono::steady_clock::now();
  RunOutcome o;
  o.split = generate(cfg.scenario);
  const NetSpec spec = cfg.net_spec();
  const TrainConfig tc = cfg.train_config();
  o.train = train(o.split, spec, tc, cfg.ood_score, runlog);
  const Network net(spec);
  o.eval = evaluate(net, o.train.params, o.train.protos, o.split.test_x, o.split.test_cat,
                    o.split.test_ids, cfg.ood_score);
  o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return o;
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  return os;
}

std::ifstream open_in(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  return is;
}

}  // namespace

std::string run_dir_name(const ExperimentConfig& cfg) {
  return cfg.name + "-" + hex64(config_hash(cfg)).substr(0, 12);
}

json run_manifest(const ExperimentConfig& cfg, const fs::path& dir, double seconds) {
  json outputs = json::object();
  for (const char* name : {artifact::kRunLog, artifact::kCheckpoint, artifact::kPrototypes,
                           artifact::kEval, artifact::kMetrics, artifact::kEmbeddings,
                           artifact::kSplit, artifact::kScenario}) {
    outputs[name] = (dir / name).string();
  }
  return {{"config", to_json(cfg)},
          {"config_hash", hex64(config_hash(cfg))},
          {"version", version_tag()},
          {"seeds",
           {{"run", cfg.seed},
            {"scenario", cfg.scenario.seed},
            {"batch_sampling", cfg.train_config().seed}}},
          {"outputs", outputs},
          {"wall_clock", {{"finished_utc", utc_now()}, {"seconds", seconds}}}};
}

RunArtifacts write_run(const ExperimentConfig& cfg, const fs::path& out_root, bool overwrite) {
  RunArtifacts a;
  a.dir = out_root / run_dir_name(cfg);
  if (fs::exists(a.dir / artifact::kManifest) && !overwrite) {
    throw std::runtime_error("run directory already exists: " + a.dir.string());
  }
  fs::create_directories(a.dir);
  {
    std::ofstream log = open_out(a.dir / artifact::kRunLog);
    a.outcome = execute(cfg, &log);
  }
  const RunOutcome& o = a.outcome;
  {
    std::ofstream os = open_out(a.dir / artifact::kCheckpoint);
    save_checkpoint(os, o.train.params);
  }
  {
    std::ofstream os = open_out(a.dir / artifact::kPrototypes);
    save_prototypes(os, o.train.protos);
  }
  open_out(a.dir / artifact::kEval) << to_json(o.eval.report).dump(2) << '\n';
  open_out(a.dir / artifact::kMetrics) << metrics_csv(o.eval.report);
  {
    std::ofstream os = open_out(a.dir / artifact::kEmbeddings);
    write_embedding_dump(os, o.eval);
  }
  {
    std::ofstream os = open_out(a.dir / artifact::kSplit);
    write_split_csv(os, o.split);
  }
  open_out(a.dir / artifact::kScenario) << manifest_json(o.split) << '\n';
  // The manifest goes last: its presence marks a complete run.
  open_out(a.dir / artifact::kManifest) << run_manifest(cfg, a.dir, o.seconds).dump(2) << '\n';
  return a;
}

ExperimentConfig config_from_manifest(const fs::path& manifest_path) {
  std::ifstream is = open_in(manifest_path);
  const json j = json::parse(is, nullptr, false);
  if (j.is_discarded() || !j.contains("config")) {
    throw std::runtime_error("not a run manifest: " + manifest_path.string());
  }
  return parse_config(j.at("config"));
}

EvalReport rescore_checkpoint(const fs::path& checkpoint, OodScoreKind score) {
  const fs::path dir = checkpoint.parent_path();
  const ExperimentConfig cfg = config_from_manifest(dir / artifact::kManifest);
  std::ifstream cs = open_in(checkpoint);
  const ParamState state = load_checkpoint(cs);
  std::ifstream ps = open_in(dir / artifact::kPrototypes);
  const PrototypeSet protos = load_prototypes(ps);
  const Split split = generate(cfg.scenario);
  const Network net(state.spec);
  return evaluate(net, state, protos, split.test_x, split.test_cat, split.test_ids, score).report;
}

SweepAxis parse_sweep_axis(const std::string& name) {
  for (auto a : {SweepAxis::EtaId, SweepAxis::RU, SweepAxis::LossCombo, SweepAxis::LambdaSna}) {
    if (axis_name(a) == name) return a;
  }
  throw ConfigError("axis", "unknown sweep axis '" + name +
                                "' (eta_id, r_u, loss_combo, lambda_sna)");
}

std::string axis_name(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::EtaId:
      return "eta_id";
    case SweepAxis::RU:
      return "r_u";
    case SweepAxis::LossCombo:
      return "loss_combo";
    case SweepAxis::LambdaSna:
      return "lambda_sna";
  }
  return "?";
}

ExperimentConfig with_loss_combo(const ExperimentConfig& cfg, const std::string& combo) {
  double usna = 1.0, align = 1.0;
  if (combo == "none") usna = align = 0.0;
  else if (combo == "ia+pa") usna = 0.0;
  else if (combo == "usna") align = 0.0;
  else if (combo != "all") {
    throw ConfigError("values", "unknown loss combination '" + combo + "' (none, ia+pa, usna, all)");
  }
  ExperimentConfig c = cfg;
  c.train.sna.lambda_usna = usna;
  c.train.sna.lambda_ia = align;
  c.train.sna.lambda_pa = align;
  return c;
}

std::vector<ExperimentConfig> sweep_configs(const ExperimentConfig& base, SweepAxis axis,
                                            const std::vector<std::string>& values) {
  std::vector<ExperimentConfig> out;
  for (const auto& v : values) {
    if (axis == SweepAxis::LossCombo) {
      out.push_back(with_loss_combo(base, v));
      continue;
    }
    std::size_t used = 0;
    double x = 0.0;
    try {
      x = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || v.empty()) {
      throw ConfigError("values", "'" + v + "' is not a number");
    }
    const char* path = axis == SweepAxis::EtaId ? "train.eta_id"
                       : axis == SweepAxis::RU  ? "train.r_u"
                                                : "heads.lambda_sna";
    out.push_back(with_field(base, path, x));
  }
  return out;
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& base, SweepAxis axis,
                                const std::vector<std::string>& values, const fs::path* out_root) {
  const auto configs = sweep_configs(base, axis, values);
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    if (out_root != nullptr) {
      rows.push_back({values[i], write_run(configs[i], *out_root, true).outcome.eval.report});
    } else {
      rows.push_back({values[i], execute(configs[i]).eval.report});
    }
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "value,acc,seen_auc,unseen_auc,overall_auc\n";
  for (const auto& r : rows) {
    os << r.value << ',' << r.report.accuracy << ',' << r.report.seen_auc << ','
       << r.report.unseen_auc << ',' << r.report.overall_auc << '\n';
  }
  return os.str();
}

std::string golden_metrics(const ExperimentConfig& cfg) {
  return metrics_csv(execute(cfg).eval.report);
}

}  // namespace skipalign
