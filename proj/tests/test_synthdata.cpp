#include <doctest.h>

#include <json.hpp>
#include <set>
#include <sstream>

#include "skipalign/synthdata.hpp"
#include "support.hpp"

using namespace skipalign;

namespace {

std::size_t count_kind(const std::vector<Category>& cats, CategoryKind kind) {
  return static_cast<std::size_t>(
      std::count_if(cats.begin(), cats.end(), [&](const Category& c) { return c.kind == kind; }));
}

}  // namespace

TEST_CASE("split counts follow the spec") {
  ScenarioSpec s;
  s.num_classes = 3;
  s.labeled_per_class = 50;
  const Split sp = generate(s);
  CHECK(sp.labeled_x.rows() == 150);
  CHECK(sp.labeled_y.size() == 150);
  for (ClassIndex k = 0; k < 3; ++k) CHECK(std::count(sp.labeled_y.begin(), sp.labeled_y.end(), k) == 50);
  CHECK(sp.unlabeled_x.rows() == 3 * s.unlabeled_id_per_class + s.seen_ood_clusters * s.unlabeled_ood_per_cluster);
  CHECK(count_kind(sp.unlabeled_cat, CategoryKind::SeenOod) == s.seen_ood_clusters * s.unlabeled_ood_per_cluster);
  CHECK(count_kind(sp.unlabeled_cat, CategoryKind::UnseenOod) == 0);
  CHECK(count_kind(sp.test_cat, CategoryKind::Id) == 3 * s.test_id_per_class);
  CHECK(count_kind(sp.test_cat, CategoryKind::SeenOod) == s.seen_ood_clusters * s.test_ood_per_cluster);
  CHECK(count_kind(sp.test_cat, CategoryKind::UnseenOod) == s.unseen_ood_clusters * s.test_ood_per_cluster);
  CHECK(sp.labeled_x.cols() == s.input_dim);
}

TEST_CASE("a spec without OOD clusters is a plain semi-supervised split") {
  ScenarioSpec s;
  s.seen_ood_clusters = 0;
  s.unseen_ood_clusters = 0;
  s.between_cluster = false;
  const Split sp = generate(s);
  CHECK(sp.unlabeled_x.rows() == s.num_classes * s.unlabeled_id_per_class);
  CHECK(count_kind(sp.unlabeled_cat, CategoryKind::Id) == sp.unlabeled_cat.size());
  CHECK(count_kind(sp.test_cat, CategoryKind::Id) == sp.test_cat.size());
}

TEST_CASE("generation is deterministic in the seed") {
  ScenarioSpec s;
  s.seed = 5;
  const Split a = generate(s), b = generate(s);
  CHECK(a.labeled_x == b.labeled_x);
  CHECK(a.unlabeled_x == b.unlabeled_x);
  CHECK(a.test_x == b.test_x);
  CHECK(a.test_cat == b.test_cat);
  CHECK(a.labeled_ids == b.labeled_ids);
  std::ostringstream ca, cb;
  write_split_csv(ca, a);
  write_split_csv(cb, b);
  CHECK(ca.str() == cb.str());
  CHECK(manifest_json(a) == manifest_json(b));
  s.seed = 6;
  CHECK_FALSE(generate(s).labeled_x == a.labeled_x);
}

TEST_CASE("cluster means respect the minimum separation") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ScenarioSpec s;
    s.seed = seed;
    const Split sp = generate(s);
    for (std::size_t i = 0; i < sp.clusters.size(); ++i) {
      for (std::size_t j = i + 1; j < sp.clusters.size(); ++j) {
        Vec d = sp.clusters[i].mean;
        for (std::size_t c = 0; c < d.size(); ++c) d[c] -= sp.clusters[j].mean[c];
        CHECK(norm(d) >= s.min_separation);
      }
    }
  }
}

TEST_CASE("an unsatisfiable separation is an error") {
  ScenarioSpec s;
  s.min_separation = 1000.0;
  s.max_retries = 5;
  CHECK_THROWS(generate(s));
}

TEST_CASE("unseen OOD never reaches the training view") {
  const Split sp = generate(ScenarioSpec{});
  std::set<long> unseen;
  for (std::size_t i = 0; i < sp.test_cat.size(); ++i) {
    if (sp.test_cat[i].kind == CategoryKind::UnseenOod) unseen.insert(sp.test_ids[i]);
  }
  REQUIRE_FALSE(unseen.empty());
  const TrainingView v = sp.training_view();
  for (long id : v.labeled_ids) CHECK(unseen.count(id) == 0);
  for (long id : v.unlabeled_ids) CHECK(unseen.count(id) == 0);
  for (const auto& c : sp.unlabeled_cat) CHECK(c.kind != CategoryKind::UnseenOod);
  // Ids are unique across the three splits.
  std::set<long> all(sp.labeled_ids.begin(), sp.labeled_ids.end());
  all.insert(sp.unlabeled_ids.begin(), sp.unlabeled_ids.end());
  all.insert(sp.test_ids.begin(), sp.test_ids.end());
  CHECK(all.size() == sp.labeled_ids.size() + sp.unlabeled_ids.size() + sp.test_ids.size());
  CHECK(v.unlabeled_x == sp.unlabeled_x);
  CHECK(v.num_classes == sp.spec.num_classes);
}

TEST_CASE("the between-galaxies cluster sits at the ID centroid") {
  const Split sp = generate(ScenarioSpec{});
  Vec centroid(sp.spec.input_dim, 0.0);
  std::size_t k = 0;
  for (const auto& c : sp.clusters) {
    if (c.category.kind != CategoryKind::Id) continue;
    for (std::size_t j = 0; j < centroid.size(); ++j) centroid[j] += c.mean[j];
    ++k;
  }
  for (double& v : centroid) v /= static_cast<double>(k);
  bool found = false;
  for (const auto& c : sp.clusters) {
    if (c.category.kind == CategoryKind::UnseenOod && relative_error(c.mean, centroid) < 1e-12) found = true;
  }
  CHECK(found);
}

TEST_CASE("category tags round-trip") {
  for (const Category c : {Category{CategoryKind::Id, 2}, Category{CategoryKind::SeenOod, 0},
                           Category{CategoryKind::UnseenOod, 1}}) {
    CHECK(Category::parse(c.tag()) == c);
  }
  CHECK(Category{CategoryKind::Id, 2}.tag() == "id:2");
  CHECK_THROWS(Category::parse("void:1"));
}

TEST_CASE("augmentation operators") {
  std::mt19937_64 rng(51);
  const Mat x = testing::gaussian_mat(10, 6, rng);
  AugmentSpec none{0.0, 0.0, 0.0};
  std::mt19937_64 r1(1);
  CHECK(augment(x, AugmentKind::Weak, none, r1) == x);
  CHECK(augment(x, AugmentKind::Strong, none, r1) == x);

  AugmentSpec spec;
  std::mt19937_64 a(2), b(2);
  const Mat w = augment(x, AugmentKind::Weak, spec, a);
  const Mat w2 = augment(x, AugmentKind::Weak2, spec, a);
  CHECK_FALSE(w == w2);
  CHECK(augment(x, AugmentKind::Weak, spec, b) == w);

  // Full dropout leaves only the noise: the result is independent of x.
  AugmentSpec drop{0.25, 0.6, 1.0};
  std::mt19937_64 c1(3), c2(3);
  const Mat s1 = augment(x, AugmentKind::Strong, drop, c1);
  const Mat s2 = augment(Mat(10, 6), AugmentKind::Strong, drop, c2);
  CHECK(s1 == s2);
  AugmentSpec drop_quiet{0.0, 0.0, 1.0};
  const Mat zeroed = augment(x, AugmentKind::Strong, drop_quiet, c1);
  for (double v : zeroed.data()) CHECK(v == 0.0);
}

TEST_CASE("split csv and manifest are well formed") {
  ScenarioSpec s;
  s.num_classes = 2;
  s.unlabeled_id_per_class = 3;
  s.unlabeled_ood_per_cluster = 2;
  s.test_id_per_class = 2;
  s.test_ood_per_cluster = 1;
  s.labeled_per_class = 2;
  const Split sp = generate(s);
  std::ostringstream os;
  write_split_csv(os, sp);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  CHECK(line.rfind("split,id,category,label,x_0", 0) == 0);
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 3 + static_cast<long>(s.input_dim));
  }
  CHECK(rows == sp.labeled_x.rows() + sp.unlabeled_x.rows() + sp.test_x.rows());
  const auto j = nlohmann::json::parse(manifest_json(sp));
  CHECK(j.at("seed") == s.seed);
  CHECK(j.at("clusters").size() == sp.clusters.size());
}
