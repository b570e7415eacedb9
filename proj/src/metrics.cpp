#include "skipalign/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace skipalign {

std::string score_tag(OodScoreKind kind) {
  switch (kind) {
    case OodScoreKind::OvaAtArgmax:
      return "ova_at_argmax";
    case OodScoreKind::MaxSoftmax:
      return "max_softmax";
    case OodScoreKind::MaxOva:
      return "max_ova";
    case OodScoreKind::FeatureNorm:
      return "feature_norm";
  }
  return "?";
}

OodScoreKind parse_score_tag(const std::string& tag) {
  for (auto k : {OodScoreKind::OvaAtArgmax, OodScoreKind::MaxSoftmax, OodScoreKind::MaxOva,
                 OodScoreKind::FeatureNorm}) {
    if (score_tag(k) == tag) return k;
  }
  throw std::invalid_argument("unknown OOD score: " + tag);
}

Vec ood_score(const OvaOutput& out, const Mat& cc_probs, OodScoreKind kind,
              std::span<const double> f_norms) {
  if (cc_probs.rows() != out.batch() || cc_probs.cols() != out.classes()) {
    throw std::invalid_argument("ood_score: shape mismatch");
  }
  Vec s(out.batch());
  for (std::size_t i = 0; i < out.batch(); ++i) {
    auto p = cc_probs.row(i);
    auto phi = out.id_probs.row(i);
    switch (kind) {
      case OodScoreKind::OvaAtArgmax: {
        const auto k = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
        s[i] = phi[k];
        break;
      }
      case OodScoreKind::MaxSoftmax:
        s[i] = *std::max_element(p.begin(), p.end());
        break;
      case OodScoreKind::MaxOva:
        s[i] = *std::max_element(phi.begin(), phi.end());
        break;
      case OodScoreKind::FeatureNorm:
        if (f_norms.size() != out.batch()) {
          throw std::invalid_argument("feature_norm score needs per-sample norms");
        }
        s[i] = f_norms[i];
        break;
    }
  }
  return s;
}

double auroc(std::span<const double> id_scores, std::span<const double> ood_scores) {
  if (id_scores.empty() || ood_scores.empty()) throw std::invalid_argument("auroc: empty input");
  if (!all_finite(id_scores) || !all_finite(ood_scores)) {
    throw std::invalid_argument("auroc: non-finite score");
  }
  std::vector<double> sorted(ood_scores.begin(), ood_scores.end());
  std::sort(sorted.begin(), sorted.end());
  std::uint64_t below = 0;
  std::uint64_t ties = 0;
  for (double s : id_scores) {
    const auto lo = std::lower_bound(sorted.begin(), sorted.end(), s);
    const auto hi = std::upper_bound(lo, sorted.end(), s);
    below += static_cast<std::uint64_t>(lo - sorted.begin());
    ties += static_cast<std::uint64_t>(hi - lo);
  }
  const double pairs = static_cast<double>(id_scores.size()) * static_cast<double>(sorted.size());
  return (static_cast<double>(below) + 0.5 * static_cast<double>(ties)) / pairs;
}

std::string geometry_category(const Category& c) {
  switch (c.kind) {
    case CategoryKind::Id:
      return "id";
    case CategoryKind::SeenOod:
      return "seen_ood";
    case CategoryKind::UnseenOod:
      return "unseen_ood";
  }
  return "?";
}

GeometryReport geometry_stats(const Mat& f, const Mat& z, const PrototypeSet& protos,
                              std::span<const std::string> categories,
                              std::span<const long> ids,
                              std::span<const std::string> expected) {
  if (f.rows() != z.rows() || categories.size() != f.rows() || ids.size() != f.rows()) {
    throw std::invalid_argument("geometry_stats: row count mismatch");
  }
  GeometryReport rep;
  for (const auto& name : expected) rep.categories.push_back({name, 0, 0.0, 0.0, false});
  auto slot = [&](const std::string& name) -> CategoryGeometry& {
    for (auto& c : rep.categories) {
      if (c.category == name) return c;
    }
    rep.categories.push_back({name, 0, 0.0, 0.0, false});
    return rep.categories.back();
  };
  for (std::size_t i = 0; i < f.rows(); ++i) {
    // A dead embedding (every unit inactive) has no direction.
    const bool dead = !(norm(z.row(i)) >= kDegenerateNorm);
    double best = dead ? 0.0 : -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; !dead && k < protos.num_classes(); ++k) {
      best = std::max(best, cosine_sim(z.row(i), protos.mu.row(k)));
    }
    const double fn = norm(f.row(i));
    rep.samples.push_back({ids[i], categories[i], fn, best});
    CategoryGeometry& c = slot(categories[i]);
    ++c.count;
    if (dead) ++c.degenerate;
    c.present = true;
    c.mean_f_norm += fn;
    c.mean_max_cos += best;
  }
  for (auto& c : rep.categories) {
    if (c.count == 0) continue;
    c.mean_f_norm /= static_cast<double>(c.count);
    c.mean_max_cos /= static_cast<double>(c.count);
  }
  return rep;
}

double EvalReport::norm_of(const std::string& category) const {
  for (const auto& g : geometry) {
    if (g.category == category) return g.mean_f_norm;
  }
  throw std::out_of_range("no geometry for category " + category);
}

double EvalReport::max_cos_of(const std::string& category) const {
  for (const auto& g : geometry) {
    if (g.category == category) return g.mean_max_cos;
  }
  throw std::out_of_range("no geometry for category " + category);
}

Evaluation evaluate(const Network& net, const ParamState& params, const PrototypeSet& protos,
                    const Mat& x, std::span<const Category> categories, std::span<const long> ids,
                    OodScoreKind score) {
  if (categories.size() != x.rows() || ids.size() != x.rows()) {
    throw std::invalid_argument("evaluate: metadata length mismatch");
  }
  const ForwardOutput out = net.forward(params, x);
  const Mat probs = softmax_rows(out.cc_logits);
  const Vec scores = ood_score(out.ova, probs, score, out.f_norms);

  Evaluation ev;
  EvalReport& rep = ev.report;
  rep.score_tag = score_tag(score);

  std::vector<double> id_scores;
  std::map<std::string, std::vector<double>> by_source;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const Category& c = categories[i];
    if (c.kind == CategoryKind::Id) {
      id_scores.push_back(scores[i]);
      auto p = probs.row(i);
      const auto k = std::max_element(p.begin(), p.end()) - p.begin();
      if (k == c.index) ++correct;
    } else if (c.kind == CategoryKind::SeenOod) {
      by_source["seen"].push_back(scores[i]);
    } else {
      by_source[c.tag()].push_back(scores[i]);
    }
  }
  rep.accuracy = id_scores.empty()
                     ? std::numeric_limits<double>::quiet_NaN()
                     : static_cast<double>(correct) / static_cast<double>(id_scores.size());

  double unseen_sum = 0.0, all_sum = 0.0;
  std::size_t unseen_n = 0;
  rep.seen_auc = std::numeric_limits<double>::quiet_NaN();
  for (const auto& [source, s] : by_source) {
    if (id_scores.empty()) break;
    const double a = auroc(id_scores, s);
    rep.sources.push_back({source, a, s.size()});
    all_sum += a;
    if (source == "seen") {
      rep.seen_auc = a;
    } else {
      unseen_sum += a;
      ++unseen_n;
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  rep.unseen_auc = unseen_n > 0 ? unseen_sum / static_cast<double>(unseen_n) : nan;
  rep.overall_auc = rep.sources.empty() ? nan : all_sum / static_cast<double>(rep.sources.size());

  std::vector<std::string> cats;
  for (const auto& c : categories) cats.push_back(geometry_category(c));
  const std::vector<std::string> expected = {"id", "seen_ood", "unseen_ood"};
  rep.geometry = geometry_stats(out.f, out.z, protos, cats, ids, expected).categories;

  ev.z = out.z;
  ev.f_norms = out.f_norms;
  ev.categories.assign(categories.begin(), categories.end());
  ev.ids.assign(ids.begin(), ids.end());
  return ev;
}

nlohmann::json to_json(const EvalReport& r) {
  using nlohmann::json;
  auto num = [](double v) -> json { return std::isfinite(v) ? json(v) : json(nullptr); };
  json sources = json::array();
  for (const auto& s : r.sources) {
    sources.push_back({{"source", s.source}, {"auroc", num(s.auroc)}, {"n_ood", s.n_ood}});
  }
  json geometry = json::array();
  for (const auto& g : r.geometry) {
    geometry.push_back({{"category", g.category},
                        {"count", g.count},
                        {"present", g.present},
                        {"degenerate", g.degenerate},
                        {"mean_f_norm", num(g.mean_f_norm)},
                        {"mean_max_cos", num(g.mean_max_cos)}});
  }
  return {{"ood_score", r.score_tag},   {"accuracy", num(r.accuracy)},
          {"seen_auc", num(r.seen_auc)}, {"unseen_auc", num(r.unseen_auc)},
          {"overall_auc", num(r.overall_auc)}, {"sources", sources},
          {"geometry", geometry}};
}

std::string metrics_csv(const EvalReport& r) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "metric,value\n";
  os << "ood_score," << r.score_tag << '\n';
  os << "accuracy," << r.accuracy << '\n';
  for (const auto& s : r.sources) os << "auroc:" << s.source << ',' << s.auroc << '\n';
  os << "seen_auc," << r.seen_auc << '\n';
  os << "unseen_auc," << r.unseen_auc << '\n';
  os << "overall_auc," << r.overall_auc << '\n';
  for (const auto& g : r.geometry) {
    if (!g.present) continue;
    os << "mean_f_norm:" << g.category << ',' << g.mean_f_norm << '\n';
    os << "mean_max_cos:" << g.category << ',' << g.mean_max_cos << '\n';
  }
  return os.str();
}

void write_embedding_dump(std::ostream& os, const Evaluation& ev) {
  os << "id,category,f_norm";
  for (std::size_t j = 0; j < ev.z.cols(); ++j) os << ",z_" << j;
  os << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < ev.z.rows(); ++i) {
    os << ev.ids[i] << ',' << ev.categories[i].tag() << ',' << ev.f_norms[i];
    for (double v : ev.z.row(i)) os << ',' << v;
    os << '\n';
  }
}

}  // namespace skipalign
