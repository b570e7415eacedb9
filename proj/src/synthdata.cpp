#include "skipalign/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

namespace skipalign {

std::string Category::tag() const {
  switch (kind) {
    case CategoryKind::Id:
      return "id:" + std::to_string(index);
    case CategoryKind::SeenOod:
      return "seen:" + std::to_string(index);
    case CategoryKind::UnseenOod:
      return "unseen:" + std::to_string(index);
  }
  return "?";
}

Category Category::parse(const std::string& tag) {
  const auto colon = tag.find(':');
  if (colon == std::string::npos) throw std::invalid_argument("bad category tag: " + tag);
  const std::string head = tag.substr(0, colon);
  const int index = std::stoi(tag.substr(colon + 1));
  if (head == "id") return {CategoryKind::Id, index};
  if (head == "seen") return {CategoryKind::SeenOod, index};
  if (head == "unseen") return {CategoryKind::UnseenOod, index};
  throw std::invalid_argument("bad category tag: " + tag);
}

TrainingView Split::training_view() const {
  return {labeled_x, labeled_y, labeled_ids, unlabeled_x, unlabeled_ids, spec.num_classes};
}

namespace {

Vec random_direction(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  while (true) {
    Vec v(d);
    for (double& x : v) x = n01(rng);
    if (norm(v) > 1e-6) return normalized(v);
  }
}

void draw_rows(Mat& out, std::size_t& at, const ClusterInfo& c, std::size_t count,
               std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  for (std::size_t i = 0; i < count; ++i, ++at) {
    auto r = out.row(at);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = c.mean[j] + c.sigma * n01(rng);
  }
}

double distance(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

std::vector<ClusterInfo> place_clusters(const ScenarioSpec& spec, std::mt19937_64& rng) {
  const std::size_t d = spec.input_dim;
  const std::size_t between = spec.between_cluster && spec.unseen_ood_clusters > 0 ? 1 : 0;
  for (std::size_t attempt = 0; attempt < spec.max_retries; ++attempt) {
    std::vector<ClusterInfo> cs;
    auto scaled = [&](double radius) {
      Vec v = random_direction(d, rng);
      for (double& x : v) x *= radius;
      return v;
    };
    for (std::size_t k = 0; k < spec.num_classes; ++k) {
      cs.push_back({{CategoryKind::Id, static_cast<int>(k)}, scaled(spec.id_radius), spec.id_sigma});
    }
    for (std::size_t s = 0; s < spec.seen_ood_clusters; ++s) {
      cs.push_back({{CategoryKind::SeenOod, static_cast<int>(s)}, scaled(spec.seen_radius),
                    spec.seen_sigma});
    }
    for (std::size_t u = 0; u + between < spec.unseen_ood_clusters; ++u) {
      cs.push_back({{CategoryKind::UnseenOod, static_cast<int>(u)}, scaled(spec.unseen_radius),
                    spec.unseen_sigma});
    }
    if (between == 1) {
      Vec centroid(d, 0.0);
      for (std::size_t k = 0; k < spec.num_classes; ++k) {
        for (std::size_t j = 0; j < d; ++j) {
          centroid[j] += cs[k].mean[j] / static_cast<double>(spec.num_classes);
        }
      }
      cs.push_back({{CategoryKind::UnseenOod, static_cast<int>(spec.unseen_ood_clusters - 1)},
                    centroid, spec.between_sigma});
    }
    bool ok = true;
    for (std::size_t a = 0; a < cs.size() && ok; ++a) {
      for (std::size_t b = a + 1; b < cs.size() && ok; ++b) {
        ok = distance(cs[a].mean, cs[b].mean) >= spec.min_separation;
      }
    }
    if (ok) return cs;
  }
  throw std::runtime_error("cluster separation constraint unsatisfiable after " +
                           std::to_string(spec.max_retries) + " attempts");
}

void validate(const ScenarioSpec& spec) {
  if (spec.input_dim == 0) throw std::invalid_argument("scenario input_dim must be positive");
  if (spec.num_classes == 0) throw std::invalid_argument("scenario needs at least one class");
  if (spec.labeled_per_class == 0) {
    throw std::invalid_argument("scenario needs at least one labeled sample per class");
  }
  if (spec.id_sigma < 0 || spec.seen_sigma < 0 || spec.unseen_sigma < 0 || spec.between_sigma < 0) {
    throw std::invalid_argument("cluster sigmas must be non-negative");
  }
}

}  // namespace

Split generate(const ScenarioSpec& spec) {
  validate(spec);
  std::mt19937_64 rng(spec.seed);
  Split split;
  split.spec = spec;
  split.clusters = place_clusters(spec, rng);
  const std::size_t d = spec.input_dim;
  long next_id = 0;

  // Labeled: class-major order.
  split.labeled_x = Mat(spec.num_classes * spec.labeled_per_class, d);
  std::size_t at = 0;
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    draw_rows(split.labeled_x, at, split.clusters[k], spec.labeled_per_class, rng);
    for (std::size_t i = 0; i < spec.labeled_per_class; ++i) {
      split.labeled_y.push_back(static_cast<ClassIndex>(k));
      split.labeled_ids.push_back(next_id++);
    }
  }

  auto fill_pool = [&](bool include_unseen, std::size_t per_id, std::size_t per_ood, Mat& x,
                       std::vector<Category>& cats, std::vector<long>& ids) {
    std::size_t rows = 0;
    for (const auto& c : split.clusters) {
      if (c.category.kind == CategoryKind::Id) rows += per_id;
      else if (c.category.kind == CategoryKind::SeenOod) rows += per_ood;
      else if (include_unseen) rows += per_ood;
    }
    Mat raw(rows, d);
    std::vector<Category> raw_cats;
    std::size_t pos = 0;
    for (const auto& c : split.clusters) {
      std::size_t count = 0;
      if (c.category.kind == CategoryKind::Id) count = per_id;
      else if (c.category.kind == CategoryKind::SeenOod) count = per_ood;
      else if (include_unseen) count = per_ood;
      draw_rows(raw, pos, c, count, rng);
      raw_cats.insert(raw_cats.end(), count, c.category);
    }
    std::vector<std::size_t> order(rows);
    for (std::size_t i = 0; i < rows; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    x = raw.gather_rows(order);
    for (std::size_t i : order) {
      cats.push_back(raw_cats[i]);
      ids.push_back(next_id++);
    }
  };
  fill_pool(false, spec.unlabeled_id_per_class, spec.unlabeled_ood_per_cluster, split.unlabeled_x,
            split.unlabeled_cat, split.unlabeled_ids);
  fill_pool(true, spec.test_id_per_class, spec.test_ood_per_cluster, split.test_x, split.test_cat,
            split.test_ids);
  return split;
}

Mat augment(const Mat& x, AugmentKind kind, const AugmentSpec& spec, std::mt19937_64& rng) {
  Mat out = x;
  std::normal_distribution<double> n01(0.0, 1.0);
  if (kind == AugmentKind::Strong) {
    std::bernoulli_distribution drop(std::clamp(spec.strong_dropout, 0.0, 1.0));
    for (double& v : out.data()) {
      if (drop(rng)) v = 0.0;
      v += spec.strong_sigma * n01(rng);
    }
    return out;
  }
  for (double& v : out.data()) v += spec.weak_sigma * n01(rng);
  return out;
}

void write_split_csv(std::ostream& os, const Split& split) {
  const std::size_t d = split.spec.input_dim;
  os << "split,id,category,label";
  for (std::size_t j = 0; j < d; ++j) os << ",x_" << j;
  os << '\n';
  os << std::setprecision(17);
  auto rows = [&](const char* name, const Mat& x, const std::vector<long>& ids,
                  const std::vector<Category>* cats, const std::vector<ClassIndex>* labels) {
    for (std::size_t i = 0; i < x.rows(); ++i) {
      os << name << ',' << ids[i] << ',';
      if (cats != nullptr) os << (*cats)[i].tag();
      else os << Category{CategoryKind::Id, (*labels)[i]}.tag();
      os << ',';
      if (labels != nullptr) os << (*labels)[i];
      for (double v : x.row(i)) os << ',' << v;
      os << '\n';
    }
  };
  rows("labeled", split.labeled_x, split.labeled_ids, nullptr, &split.labeled_y);
  rows("unlabeled", split.unlabeled_x, split.unlabeled_ids, &split.unlabeled_cat, nullptr);
  rows("test", split.test_x, split.test_ids, &split.test_cat, nullptr);
}

std::string manifest_json(const Split& split) {
  using nlohmann::json;
  const ScenarioSpec& s = split.spec;
  json clusters = json::array();
  for (const auto& c : split.clusters) {
    clusters.push_back({{"category", c.category.tag()}, {"sigma", c.sigma}, {"mean", c.mean},
                        {"mean_norm", norm(c.mean)}});
  }
  json j = {
      {"seed", s.seed},
      {"input_dim", s.input_dim},
      {"num_classes", s.num_classes},
      {"counts",
       {{"labeled", split.labeled_x.rows()},
        {"unlabeled", split.unlabeled_x.rows()},
        {"test", split.test_x.rows()}}},
      {"min_separation", s.min_separation},
      {"clusters", clusters},
  };
  return j.dump(2);
}

}  // namespace skipalign
