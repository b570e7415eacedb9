#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(SKIPALIGN_CLI) + " " + args + " 2>&1";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), p) != nullptr) r.out += buf.data();
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("skipalign_cli_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter()++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int n = 0;
    return n;
  }
};

// A run small enough for a test: one short epoch on tiny pools.
fs::path write_tiny_config(const fs::path& dir, json extra_train = json::object()) {
  json train = {{"epochs", 1}, {"iters_per_epoch", 3}, {"batch_size", 4}};
  for (auto& [k, v] : extra_train.items()) train[k] = v;
  const json j = {{"name", "tiny"},
                  {"scenario",
                   {{"input_dim", 6},
                    {"num_classes", 2},
                    {"labeled_per_class", 4},
                    {"unlabeled_id_per_class", 10},
                    {"unlabeled_ood_per_cluster", 5},
                    {"test_id_per_class", 5},
                    {"test_ood_per_cluster", 5},
                    {"seen_ood_clusters", 1},
                    {"unseen_ood_clusters", 2}}},
                  {"net", {{"backbone_widths", {8}}, {"feature_dim", 6}, {"proj_hidden", 4}, {"proj_dim", 4},
                           {"cc_hidden", 4}, {"od_hidden", {4}}}},
                  {"train", train}};
  const fs::path p = dir / "tiny.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

}  // namespace

TEST_CASE("dry run prints the resolved config and writes nothing") {
  TempDir t;
  const fs::path cfg = write_tiny_config(t.path);
  const fs::path out = t.path / "runs";
  const Result r = run("run --config " + cfg.string() + " --out " + out.string() + " --dry-run");
  CHECK(r.code == 0);
  const json j = json::parse(r.out);
  CHECK(j.at("name") == "tiny");
  CHECK(j.at("train").at("epochs") == 1);
  CHECK(j.at("train").contains("eta_id"));
  CHECK_FALSE(fs::exists(out));
}

TEST_CASE("invalid configs exit 2 naming the field") {
  TempDir t;
  std::ofstream(t.path / "noname.json") << R"({"train": {"epochs": 1}})";
  Result r = run("run --config " + (t.path / "noname.json").string() + " --dry-run");
  CHECK(r.code == 2);
  CHECK(r.out.find("name: missing required field") != std::string::npos);
  std::ofstream(t.path / "bad.json") << R"({"name": "b", "train": {"eta_id": 2}})";
  r = run("run --config " + (t.path / "bad.json").string() + " --dry-run");
  CHECK(r.code == 2);
  CHECK(r.out.find("train.eta_id") != std::string::npos);
  CHECK(run("run --config " + (t.path / "absent.json").string()).code == 2);
  CHECK(run("frobnicate").code == 2);
}

TEST_CASE("environment overrides reach the resolved config") {
  TempDir t;
  const fs::path cfg = write_tiny_config(t.path);
  const Result r = run("run --config " + cfg.string() + " --dry-run --seed 17");
  CHECK(json::parse(r.out).at("seed") == 17);
  const std::string env = "SKIPALIGN__train__eta_id=0.25 ";
  const std::string cmd = env + SKIPALIGN_CLI + " run --config " + cfg.string() + " --dry-run";
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::string out;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), p) != nullptr) out += buf.data();
  CHECK(pclose(p) == 0);
  CHECK(json::parse(out).at("train").at("eta_id") == 0.25);
}

TEST_CASE("run writes a complete directory and eval reproduces it") {
  TempDir t;
  const fs::path cfg = write_tiny_config(t.path);
  const fs::path out = t.path / "runs";
  Result r = run("run --config " + cfg.string() + " --out " + out.string());
  REQUIRE(r.code == 0);
  REQUIRE(std::distance(fs::directory_iterator(out), fs::directory_iterator{}) == 1);
  const fs::path dir = fs::directory_iterator(out)->path();
  CHECK(dir.filename().string().rfind("tiny-", 0) == 0);
  for (const char* f : {"manifest.json", "runlog.jsonl", "checkpoint.txt", "prototypes.txt", "eval.json",
                        "metrics.csv", "embeddings.csv", "split.csv", "scenario.json"}) {
    CHECK_MESSAGE(fs::exists(dir / f), f);
  }
  const json manifest = json::parse(slurp(dir / "manifest.json"));
  CHECK(manifest.at("config").at("name") == "tiny");
  CHECK(manifest.contains("config_hash"));
  CHECK(manifest.at("seeds").contains("batch_sampling"));

  // An existing run is not overwritten silently.
  CHECK(run("run --config " + cfg.string() + " --out " + out.string()).code == 1);
  CHECK(run("run --config " + cfg.string() + " --out " + out.string() + " --force").code == 0);

  r = run("eval --checkpoint " + (dir / "checkpoint.txt").string() + " --out " + (t.path / "re.json").string());
  CHECK(r.code == 0);
  CHECK(json::parse(slurp(t.path / "re.json")) == json::parse(slurp(dir / "eval.json")));
  r = run("eval --checkpoint " + (dir / "checkpoint.txt").string() + " --score max_softmax");
  CHECK(r.code == 0);
  CHECK(json::parse(r.out).at("ood_score") == "max_softmax");
  CHECK(run("eval --checkpoint " + (dir / "checkpoint.txt").string() + " --score energy").code == 2);
}

TEST_CASE("sweep tables and isolation") {
  TempDir t;
  const fs::path cfg = write_tiny_config(t.path);
  Result r = run("sweep --config " + cfg.string() + " --axis nope --values 1");
  CHECK(r.code == 2);
  CHECK(r.out.find("axis") != std::string::npos);

  r = run("sweep --config " + cfg.string() + " --axis eta_id --values \"\"");
  CHECK(r.code == 0);
  CHECK(r.out == "value,acc,seen_auc,unseen_auc,overall_auc\n");

  CHECK(run("sweep --config " + cfg.string() + " --axis eta_id --values 0.3,abc").code == 2);
  CHECK(run("sweep --config " + cfg.string() + " --axis loss_combo --values all,most").code == 2);

  const fs::path out = t.path / "sweep";
  r = run("sweep --config " + cfg.string() + " --axis eta_id --values 0.3,0.7 --out " + out.string());
  REQUIRE(r.code == 0);
  CHECK(std::count(r.out.begin(), r.out.end(), '\n') == 3);
  CHECK(slurp(out / "sweep_eta_id.csv") == r.out);
  std::vector<json> configs;
  for (const auto& e : fs::directory_iterator(out)) {
    if (e.is_directory()) configs.push_back(json::parse(slurp(e.path() / "manifest.json")).at("config"));
  }
  REQUIRE(configs.size() == 2);
  const json diff = json::diff(configs[0], configs[1]);
  REQUIRE(diff.size() == 1);
  CHECK(diff[0].at("path") == "/train/eta_id");
}

TEST_CASE("loss combo sweep has one row per combination") {
  TempDir t;
  const fs::path cfg = write_tiny_config(t.path);
  const Result r = run("sweep --config " + cfg.string() + " --axis loss_combo --values none,ia+pa,usna,all");
  CHECK(r.code == 0);
  std::istringstream is(r.out);
  std::string line;
  std::vector<std::string> first;
  while (std::getline(is, line)) first.push_back(line.substr(0, line.find(',')));
  CHECK(first == std::vector<std::string>{"value", "none", "ia+pa", "usna", "all"});
}

TEST_CASE("a diverging run exits 3") {
  TempDir t;
  const fs::path cfg = write_tiny_config(t.path, {{"lr0", 1e150}, {"momentum", 0.0}});
  const Result r = run("run --config " + cfg.string() + " --out " + (t.path / "runs").string());
  CHECK(r.code == 3);
  CHECK(r.out.find("training aborted") != std::string::npos);
}

TEST_CASE("golden refuses to write without --force") {
  TempDir t;
  const Result r = run("golden --out " + t.path.string());
  CHECK(r.code == 2);
  CHECK(fs::is_empty(t.path));
}

TEST_CASE("gradcheck verb runs the oracle suite") {
  const Result r = run("gradcheck --seed 3");
  CHECK(r.code == 0);
  CHECK(r.out.find("usna") != std::string::npos);
}
