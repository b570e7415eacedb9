#pragma once

// Seeded synthetic open-set scenarios. ID classes are isotropic Gaussian
// "galaxies"; seen-OOD clusters are mixed into the unlabeled pool; unseen-OOD
// clusters exist only in the test split. One unseen cluster can be placed at
// the centroid of the ID means, inside their convex hull.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "skipalign/numeric.hpp"
#include "skipalign/types.hpp"

namespace skipalign {

struct ScenarioSpec {
  std::size_t input_dim = 16;
  std::size_t num_classes = 4;
  double id_radius = 6.0;
  double id_sigma = 1.0;
  std::size_t seen_ood_clusters = 2;
  // Seen OOD sits in the low-norm void between the galaxies, broader than them.
  double seen_radius = 3.0;
  double seen_sigma = 1.5;
  /// Total unseen clusters, including the between-galaxies one when enabled.
  std::size_t unseen_ood_clusters = 3;
  double unseen_radius = 6.0;
  double unseen_sigma = 1.0;
  bool between_cluster = true;
  double between_sigma = 1.5;
  double min_separation = 4.0;
  std::size_t max_retries = 1000;

  std::size_t labeled_per_class = 25;
  std::size_t unlabeled_id_per_class = 200;
  std::size_t unlabeled_ood_per_cluster = 200;
  std::size_t test_id_per_class = 100;
  std::size_t test_ood_per_cluster = 100;

  std::uint64_t seed = 0;
};

struct AugmentSpec {
  double weak_sigma = 0.25;
  double strong_sigma = 0.6;
  double strong_dropout = 0.2;
};

enum class CategoryKind { Id, SeenOod, UnseenOod };

/// Ground-truth provenance of a sample: ID class k, or OOD cluster index.
struct Category {
  CategoryKind kind = CategoryKind::Id;
  int index = 0;

  /// "id:2", "seen:0", "unseen:1".
  std::string tag() const;
  static Category parse(const std::string& tag);
  friend bool operator==(const Category&, const Category&) = default;
};

struct ClusterInfo {
  Category category;
  Vec mean;
  double sigma = 0.0;
};

/// The only data a trainer may see: labeled rows with labels and unlabeled
/// rows without provenance.
struct TrainingView {
  Mat labeled_x;
  std::vector<ClassIndex> labeled_y;
  std::vector<long> labeled_ids;
  Mat unlabeled_x;
  std::vector<long> unlabeled_ids;
  std::size_t num_classes = 0;
};

struct Split {
  Mat labeled_x;
  std::vector<ClassIndex> labeled_y;
  std::vector<long> labeled_ids;

  Mat unlabeled_x;
  std::vector<Category> unlabeled_cat;  // hidden from training
  std::vector<long> unlabeled_ids;

  Mat test_x;
  std::vector<Category> test_cat;
  std::vector<long> test_ids;

  std::vector<ClusterInfo> clusters;
  ScenarioSpec spec;

  TrainingView training_view() const;
};

/// Deterministic given spec.seed. Throws if the separation constraint cannot
/// be met within spec.max_retries attempts.
Split generate(const ScenarioSpec& spec);

enum class AugmentKind { Weak, Weak2, Strong };

/// Weak and Weak2 add isotropic noise of scale weak_sigma (independent draws).
/// Strong zeroes each coordinate with probability strong_dropout and then adds
/// noise of scale strong_sigma.
Mat augment(const Mat& x, AugmentKind kind, const AugmentSpec& spec, std::mt19937_64& rng);

/// CSV rows: split,id,category,label,x_0..x_{d-1}. Labels are blank outside
/// the labeled split.
void write_split_csv(std::ostream& os, const Split& split);
/// JSON text describing cluster geometry, counts, and seed.
std::string manifest_json(const Split& split);

}  // namespace skipalign
