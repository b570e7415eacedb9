#pragma once

// Evaluation: closed-set accuracy, per-source AUROC, overall AUC, and the
// feature-norm / prototype-cosine geometry statistics.

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "skipalign/heads.hpp"
#include "skipalign/net.hpp"
#include "skipalign/synthdata.hpp"
#include "skipalign/types.hpp"

namespace skipalign {

/// Test-time OOD score (higher = more ID-like).
enum class OodScoreKind {
  OvaAtArgmax,  // φ^ID at the classifier's argmax class
  MaxSoftmax,   // max closed-set softmax probability
  MaxOva,       // max_k φ^ID_k
  FeatureNorm,  // ‖f‖
};

std::string score_tag(OodScoreKind kind);
OodScoreKind parse_score_tag(const std::string& tag);

Vec ood_score(const OvaOutput& out, const Mat& cc_probs,
              OodScoreKind kind = OodScoreKind::OvaAtArgmax, std::span<const double> f_norms = {});

/// Mann–Whitney AUROC: P(id > ood) + ½·P(id == ood), from exact pair counts.
double auroc(std::span<const double> id_scores, std::span<const double> ood_scores);

struct CategoryGeometry {
  std::string category;
  std::size_t count = 0;
  double mean_f_norm = 0.0;
  double mean_max_cos = 0.0;
  /// False when no sample had this category; the means are then meaningless.
  bool present = false;
  /// Samples whose embedding is zero; they enter mean_max_cos as 0.
  std::size_t degenerate = 0;
};

struct GeometrySample {
  long id = 0;
  std::string category;
  double f_norm = 0.0;
  double max_cos = 0.0;
};

struct GeometryReport {
  std::vector<CategoryGeometry> categories;
  std::vector<GeometrySample> samples;
};

/// Per-category mean ‖f‖ and mean max_k cos(z, μ_k). `expected` fixes the
/// category order; categories absent from the data are reported with
/// present = false.
GeometryReport geometry_stats(const Mat& f, const Mat& z, const PrototypeSet& protos,
                              std::span<const std::string> categories,
                              std::span<const long> ids,
                              std::span<const std::string> expected);

/// Coarse geometry category for a ground-truth tag: id, seen_ood, unseen_ood.
std::string geometry_category(const Category& c);

struct SourceAuc {
  std::string source;  // "seen" or "unseen:j"
  double auroc = 0.0;
  std::size_t n_ood = 0;
};

struct EvalReport {
  std::string score_tag;
  double accuracy = 0.0;
  std::vector<SourceAuc> sources;
  double seen_auc = 0.0;
  double unseen_auc = 0.0;   // mean over unseen sources
  double overall_auc = 0.0;  // mean over all sources
  std::vector<CategoryGeometry> geometry;

  double norm_of(const std::string& category) const;
  double max_cos_of(const std::string& category) const;
};

struct Evaluation {
  EvalReport report;
  Mat z;
  Vec f_norms;
  std::vector<Category> categories;
  std::vector<long> ids;
};

Evaluation evaluate(const Network& net, const ParamState& params, const PrototypeSet& protos,
                    const Mat& x, std::span<const Category> categories, std::span<const long> ids,
                    OodScoreKind score);

nlohmann::json to_json(const EvalReport& report);
/// Flat "metric,value" CSV with round-trip precision.
std::string metrics_csv(const EvalReport& report);
/// id,category,f_norm,z_0..z_{d-1}
void write_embedding_dump(std::ostream& os, const Evaluation& eval);

}  // namespace skipalign
