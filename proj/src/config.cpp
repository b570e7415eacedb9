#include "skipalign/config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>

extern char** environ;

namespace skipalign {

using nlohmann::json;

NetSpec ExperimentConfig::net_spec() const {
  NetSpec s = net;
  s.input_dim = scenario.input_dim;
  s.num_classes = scenario.num_classes;
  s.seed = seed;
  return s;
}

TrainConfig ExperimentConfig::train_config() const {
  TrainConfig t = train;
  // Offset so batch sampling does not replay the initialization stream.
  t.seed = seed + 0x9E3779B97F4A7C15ULL;
  return t;
}

namespace {

using Check = std::function<std::optional<std::string>(const json&)>;

struct Field {
  std::string key;
  std::function<json(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const json&, const std::string& path)> set;
};

struct Section {
  std::string name;  // empty for top-level keys
  std::vector<Field> fields;
};

template <class T>
T read_as(const json& v, const std::string& path) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError(path, "expected a boolean");
    return v.get<bool>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw ConfigError(path, "expected a string");
    return v.get<std::string>();
  } else if constexpr (std::is_same_v<T, double>) {
    if (!v.is_number()) throw ConfigError(path, "expected a number");
    return v.get<double>();
  } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
    if (!v.is_array()) throw ConfigError(path, "expected an array of non-negative integers");
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      out.push_back(read_as<std::size_t>(v[i], path + "[" + std::to_string(i) + "]"));
    }
    return out;
  } else {
    static_assert(std::is_unsigned_v<T>);
    // Literals built in C++ are signed even when non-negative.
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      throw ConfigError(path, "expected a non-negative integer");
    }
    return v.get<T>();
  }
}

template <class Acc>
Field field(std::string key, Acc acc, Check check = {}) {
  using T = std::remove_reference_t<decltype(acc(std::declval<ExperimentConfig&>()))>;
  Field f;
  f.key = key;
  f.get = [acc](const ExperimentConfig& c) {
    return json(acc(const_cast<ExperimentConfig&>(c)));
  };
  f.set = [acc, check](ExperimentConfig& c, const json& v, const std::string& path) {
    T value = read_as<T>(v, path);
    if (check) {
      if (auto msg = check(json(value))) throw ConfigError(path, *msg);
    }
    acc(c) = std::move(value);
  };
  return f;
}

Check unit_interval() {
  return [](const json& v) -> std::optional<std::string> {
    const double x = v.get<double>();
    if (x < 0.0 || x > 1.0) return "must lie in [0, 1]";
    return std::nullopt;
  };
}

Check open_unit_interval() {
  return [](const json& v) -> std::optional<std::string> {
    const double x = v.get<double>();
    if (x <= 0.0 || x >= 1.0) return "must lie in (0, 1)";
    return std::nullopt;
  };
}

Check non_negative() {
  return [](const json& v) -> std::optional<std::string> {
    if (v.get<double>() < 0.0) return "must be non-negative";
    return std::nullopt;
  };
}

Check positive() {
  return [](const json& v) -> std::optional<std::string> {
    if (v.is_array()) {
      for (const auto& x : v) {
        if (x.get<std::size_t>() == 0) return "entries must be positive";
      }
      return std::nullopt;
    }
    if (v.get<double>() <= 0.0) return "must be positive";
    return std::nullopt;
  };
}

Field score_field() {
  Field f;
  f.key = "ood_score";
  f.get = [](const ExperimentConfig& c) { return json(score_tag(c.ood_score)); };
  f.set = [](ExperimentConfig& c, const json& v, const std::string& path) {
    const auto tag = read_as<std::string>(v, path);
    try {
      c.ood_score = parse_score_tag(tag);
    } catch (const std::invalid_argument&) {
      throw ConfigError(path, "unknown score '" + tag +
                                  "' (ova_at_argmax, max_softmax, max_ova, feature_norm)");
    }
  };
  return f;
}

Field socr_field() {
  Field f;
  f.key = "socr_target";
  f.get = [](const ExperimentConfig& c) {
    return json(c.train.socr_target == SocrTarget::Logits ? "logits" : "probabilities");
  };
  f.set = [](ExperimentConfig& c, const json& v, const std::string& path) {
    const auto tag = read_as<std::string>(v, path);
    if (tag == "logits") c.train.socr_target = SocrTarget::Logits;
    else if (tag == "probabilities") c.train.socr_target = SocrTarget::Probabilities;
    else throw ConfigError(path, "expected 'logits' or 'probabilities'");
  };
  return f;
}

#define REF(expr) [](ExperimentConfig& c) -> auto& { return c.expr; }

const std::vector<Section>& schema() {
  static const std::vector<Section> s = {
      {"",
       {
           field("name", REF(name)),
           field("seed", REF(seed)),
       }},
      {"scenario",
       {
           field("input_dim", REF(scenario.input_dim), positive()),
           field("num_classes", REF(scenario.num_classes), positive()),
           field("id_radius", REF(scenario.id_radius), non_negative()),
           field("id_sigma", REF(scenario.id_sigma), non_negative()),
           field("seen_ood_clusters", REF(scenario.seen_ood_clusters)),
           field("seen_radius", REF(scenario.seen_radius), non_negative()),
           field("seen_sigma", REF(scenario.seen_sigma), non_negative()),
           field("unseen_ood_clusters", REF(scenario.unseen_ood_clusters)),
           field("unseen_radius", REF(scenario.unseen_radius), non_negative()),
           field("unseen_sigma", REF(scenario.unseen_sigma), non_negative()),
           field("between_cluster", REF(scenario.between_cluster)),
           field("between_sigma", REF(scenario.between_sigma), non_negative()),
           field("min_separation", REF(scenario.min_separation), non_negative()),
           field("max_retries", REF(scenario.max_retries), positive()),
           field("labeled_per_class", REF(scenario.labeled_per_class), positive()),
           field("unlabeled_id_per_class", REF(scenario.unlabeled_id_per_class)),
           field("unlabeled_ood_per_cluster", REF(scenario.unlabeled_ood_per_cluster)),
           field("test_id_per_class", REF(scenario.test_id_per_class)),
           field("test_ood_per_cluster", REF(scenario.test_ood_per_cluster)),
           field("seed", REF(scenario.seed)),
       }},
      {"net",
       {
           field("backbone_widths", REF(net.backbone_widths), positive()),
           field("feature_dim", REF(net.feature_dim), positive()),
           field("proj_hidden", REF(net.proj_hidden)),
           field("proj_dim", REF(net.proj_dim), positive()),
           field("proj_nonlinear", REF(net.proj_nonlinear)),
           field("cc_hidden", REF(net.cc_hidden)),
           field("od_hidden", REF(net.od_hidden), positive()),
       }},
      {"train",
       {
           field("epochs", REF(train.epochs)),
           field("iters_per_epoch", REF(train.iters_per_epoch), positive()),
           field("batch_size", REF(train.batch_size), positive()),
           field("gamma", REF(train.gamma), positive()),
           field("lr0", REF(train.lr0), positive()),
           field("momentum", REF(train.momentum), unit_interval()),
           field("weight_decay", REF(train.weight_decay), non_negative()),
           field("tau_id", REF(train.tau_id), unit_interval()),
           field("eta_id", REF(train.eta_id), unit_interval()),
           field("gate_temperature", REF(train.gate_temperature), positive()),
           field("tau_proto", REF(train.tau_proto), unit_interval()),
           field("eta_proto", REF(train.eta_proto), unit_interval()),
           field("r_u", REF(train.r_u), non_negative()),
           socr_field(),
           field("neg_both_views", REF(train.neg_both_views)),
           field("eval_every", REF(train.eval_every)),
           field("log_gate_detail", REF(train.log_gate_detail)),
       }},
      {"heads",
       {
           field("lambda_u", REF(train.head.lambda_u), non_negative()),
           field("lambda_em", REF(train.head.lambda_em), non_negative()),
           field("lambda_socr", REF(train.head.lambda_socr), non_negative()),
           field("lambda_neg", REF(train.head.lambda_neg), non_negative()),
           field("lambda_cc", REF(train.head.lambda_cc), non_negative()),
           field("lambda_od", REF(train.head.lambda_od), non_negative()),
           field("lambda_sna", REF(train.head.lambda_sna), non_negative()),
           field("tau_pl", REF(train.head.tau_pl), unit_interval()),
           field("eta_neg", REF(train.head.eta_neg), open_unit_interval()),
       }},
      {"sna",
       {
           field("lambda_usna", REF(train.sna.lambda_usna), non_negative()),
           field("lambda_ia", REF(train.sna.lambda_ia), non_negative()),
           field("lambda_pa", REF(train.sna.lambda_pa), non_negative()),
           field("t_usna", REF(train.sna.t_usna), positive()),
           field("t_ia", REF(train.sna.t_ia), positive()),
           field("t_pa", REF(train.sna.t_pa), positive()),
       }},
      {"augment",
       {
           field("weak_sigma", REF(train.augment.weak_sigma), non_negative()),
           field("strong_sigma", REF(train.augment.strong_sigma), non_negative()),
           field("strong_dropout", REF(train.augment.strong_dropout), unit_interval()),
       }},
      {"eval", {score_field()}},
  };
  return s;
}

#undef REF

const Section* find_section(const std::string& name) {
  for (const auto& s : schema()) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

const Field* find_field(const Section& s, const std::string& key) {
  for (const auto& f : s.fields) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

void cross_checks(const ExperimentConfig& c) {
  if (c.name.empty()) throw ConfigError("name", "must not be empty");
  if (c.train.augment.weak_sigma > c.train.augment.strong_sigma) {
    throw ConfigError("augment.weak_sigma", "must not exceed augment.strong_sigma");
  }
  if (c.train.momentum >= 1.0) throw ConfigError("train.momentum", "must be below 1");
}

}  // namespace

json to_json(const ExperimentConfig& cfg) {
  json j = json::object();
  for (const auto& s : schema()) {
    json& dst = s.name.empty() ? j : (j[s.name] = json::object());
    for (const auto& f : s.fields) dst[f.key] = f.get(cfg);
  }
  return j;
}

ExperimentConfig parse_config(const json& j) {
  if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
  if (!j.contains("name")) throw ConfigError("name", "missing required field");
  ExperimentConfig cfg;
  const Section& top = *find_section("");
  for (const auto& [key, value] : j.items()) {
    if (const Field* f = find_field(top, key)) {
      f->set(cfg, value, key);
      continue;
    }
    const Section* sec = key.empty() ? nullptr : find_section(key);
    if (sec == nullptr) throw ConfigError(key, "unknown field");
    if (!value.is_object()) throw ConfigError(key, "expected an object");
    for (const auto& [k2, v2] : value.items()) {
      const std::string path = key + "." + k2;
      const Field* f = find_field(*sec, k2);
      if (f == nullptr) throw ConfigError(path, "unknown field");
      f->set(cfg, v2, path);
    }
  }
  cross_checks(cfg);
  return cfg;
}

json apply_env_overrides(json j, const std::map<std::string, std::string>& env) {
  const std::string prefix = kEnvPrefix;
  for (const auto& [name, raw] : env) {
    if (name.rfind(prefix, 0) != 0) continue;
    std::vector<std::string> parts;
    std::string rest = name.substr(prefix.size());
    for (std::size_t pos; (pos = rest.find("__")) != std::string::npos;) {
      parts.push_back(rest.substr(0, pos));
      rest = rest.substr(pos + 2);
    }
    parts.push_back(rest);
    std::string path;
    for (const auto& p : parts) path += (path.empty() ? "" : ".") + p;
    if (parts.size() > 2 || parts.back().empty()) {
      throw ConfigError(path, "bad override name " + name);
    }
    json value = json::parse(raw, nullptr, /*allow_exceptions=*/false);
    if (value.is_discarded()) value = raw;  // bare strings need no quotes
    if (value.is_structured()) throw ConfigError(path, "environment overrides must be scalar");
    if (parts.size() == 1) {
      j[parts[0]] = value;
    } else {
      if (!j.contains(parts[0])) j[parts[0]] = json::object();
      if (!j[parts[0]].is_object()) throw ConfigError(parts[0], "expected an object");
      j[parts[0]][parts[1]] = value;
    }
  }
  return j;
}

std::map<std::string, std::string> environment_overrides() {
  std::map<std::string, std::string> out;
  for (char** e = environ; e != nullptr && *e != nullptr; ++e) {
    const std::string entry = *e;
    const auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    const std::string name = entry.substr(0, eq);
    if (name.rfind(kEnvPrefix, 0) == 0) out[name] = entry.substr(eq + 1);
  }
  return out;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot open " + path);
  json j = json::parse(in, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw ConfigError("<file>", path + " is not valid JSON");
  return parse_config(apply_env_overrides(std::move(j), environment_overrides()));
}

ExperimentConfig with_field(const ExperimentConfig& cfg, const std::string& path,
                            const json& value) {
  json j = to_json(cfg);
  const auto dot = path.find('.');
  if (dot == std::string::npos) {
    if (!j.contains(path)) throw ConfigError(path, "unknown field");
    j[path] = value;
  } else {
    const std::string sec = path.substr(0, dot), key = path.substr(dot + 1);
    if (!j.contains(sec) || !j[sec].contains(key)) throw ConfigError(path, "unknown field");
    j[sec][key] = value;
  }
  return parse_config(j);
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  const std::string s = to_json(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace skipalign
