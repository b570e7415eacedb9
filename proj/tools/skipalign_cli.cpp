// skipalign: run, sweep, eval, gradcheck, golden.
//
// Exit codes: 0 success, 1 runtime failure, 2 invalid config or usage,
// 3 training aborted on a non-finite loss or a degenerate embedding.

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "skipalign/config.hpp"
#include "skipalign/gradcheck.hpp"
#include "skipalign/runner.hpp"

namespace fs = std::filesystem;
using namespace skipalign;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNonFinite = 3;

std::vector<std::string> split_values(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

ExperimentConfig resolve(const std::string& path, const std::optional<std::uint64_t>& seed) {
  ExperimentConfig cfg = load_config(path);
  if (seed) cfg.seed = *seed;
  return cfg;
}

void print_report(const EvalReport& r) {
  std::cout << "ood score " << r.score_tag << "\n";
  std::cout << "accuracy " << r.accuracy << "  seen auc " << r.seen_auc << "  unseen auc "
            << r.unseen_auc << "  overall auc " << r.overall_auc << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-set semi-supervised training with selective non-alignment"};
  app.require_subcommand(1);

  std::string config_path = "configs/default.json";
  std::optional<std::uint64_t> seed;
  std::string out_dir = "runs";
  bool dry_run = false, force = false;
  std::string axis, values, checkpoint, score, golden_dir = "tests/golden";

  auto* run = app.add_subcommand("run", "Train and evaluate one configuration");
  run->add_option("--config", config_path, "JSON config file")->capture_default_str();
  run->add_option("--seed", seed, "Override the run seed");
  run->add_option("--out", out_dir, "Root directory for run directories")->capture_default_str();
  run->add_flag("--dry-run", dry_run, "Print the resolved config and exit");
  run->add_flag("--force", force, "Overwrite an existing run directory");

  auto* sweep = app.add_subcommand("sweep", "Ablation sweep over one axis");
  sweep->add_option("--config", config_path, "Base JSON config")->capture_default_str();
  sweep->add_option("--seed", seed, "Override the shared run seed");
  sweep->add_option("--axis", axis, "eta_id, r_u, loss_combo or lambda_sna")->required();
  sweep->add_option("--values", values, "Comma-separated values")->required();
  auto* sweep_out = sweep->add_option("--out", out_dir, "Also write per-run directories here");

  auto* eval = app.add_subcommand("eval", "Re-score a saved checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint.txt inside a run directory")
      ->required();
  eval->add_option("--score", score, "OOD score (default: the one in the run's config)");
  auto* eval_out = eval->add_option("--out", out_dir, "Write the report JSON to this file");

  auto* gradcheck = app.add_subcommand("gradcheck", "Run the finite-difference oracle suite");
  gradcheck->add_option("--seed", seed, "Seed for the random instances");

  auto* golden = app.add_subcommand("golden", "Regenerate the golden metrics file");
  golden->add_option("--config", config_path, "Reference config")->capture_default_str();
  golden->add_option("--out", golden_dir, "Golden directory")->capture_default_str();
  golden->add_flag("--force", force, "Required: confirms the overwrite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*run) {
      const ExperimentConfig cfg = resolve(config_path, seed);
      if (dry_run) {
        std::cout << to_json(cfg).dump(2) << "\n";
        return 0;
      }
      const RunArtifacts a = write_run(cfg, out_dir, force);
      std::cout << "run directory " << a.dir.string() << "\n";
      print_report(a.outcome.eval.report);
      return 0;
    }
    if (*sweep) {
      const ExperimentConfig base = resolve(config_path, seed);
      const SweepAxis ax = parse_sweep_axis(axis);
      const auto vals = split_values(values);
      const fs::path root = out_dir;
      const auto rows = run_sweep(base, ax, vals, sweep_out->count() > 0 ? &root : nullptr);
      const std::string table = sweep_csv(rows);
      std::cout << table;
      if (sweep_out->count() > 0) {
        std::ofstream(root / ("sweep_" + axis_name(ax) + ".csv")) << table;
      }
      return 0;
    }
    if (*eval) {
      OodScoreKind kind = config_from_manifest(fs::path(checkpoint).parent_path() /
                                               artifact::kManifest)
                              .ood_score;
      if (!score.empty()) kind = parse_score_tag(score);
      const EvalReport r = rescore_checkpoint(checkpoint, kind);
      const std::string text = to_json(r).dump(2);
      if (eval_out->count() > 0) std::ofstream(out_dir) << text << "\n";
      else std::cout << text << "\n";
      return 0;
    }
    if (*gradcheck) {
      bool ok = true;
      for (const auto& r : run_oracle_suite(seed.value_or(0))) {
        std::cout << format_result(r) << "\n";
        ok = ok && r.pass;
      }
      return ok ? 0 : kExitRuntime;
    }
    if (*golden) {
      if (!force) {
        std::cerr << "golden: refusing to overwrite golden files without --force\n";
        return kExitConfig;
      }
      const ExperimentConfig cfg = resolve(config_path, seed);
      fs::create_directories(golden_dir);
      const fs::path target = fs::path(golden_dir) / "default_seed0_metrics.csv";
      std::ofstream(target) << golden_metrics(cfg);
      std::cout << "wrote " << target.string() << "\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "invalid config: " << e.what() << "\n";
    return kExitConfig;
  } catch (const TrainingAborted& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    if (e.last_report) {
      for (const auto& t : e.last_report->terms) std::cerr << "  " << t.name << " = " << t.value << "\n";
    }
    return kExitNonFinite;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
