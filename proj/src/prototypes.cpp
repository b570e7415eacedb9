#include "skipalign/prototypes.hpp"

#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "skipalign/net.hpp"

namespace skipalign {

PrototypeSet refresh_prototypes(const EmbeddingBatch& labeled, const EmbeddingBatch& unlabeled,
                                const GateMask& mask, double gamma, double r_u,
                                std::size_t num_classes) {
  if (labeled.labels.size() != labeled.size()) {
    throw std::invalid_argument("labeled embeddings need labels");
  }
  if (mask.size() != unlabeled.size()) {
    throw std::invalid_argument("gate mask size does not match unlabeled embeddings");
  }
  if (unlabeled.size() > 0 && unlabeled.dim() != labeled.dim()) {
    throw std::invalid_argument("embedding dimension mismatch");
  }
  if (!(gamma > 0.0) || r_u < 0.0) throw std::invalid_argument("gamma must be > 0 and r_u >= 0");

  const std::size_t d = labeled.dim();
  PrototypeSet p;
  p.gamma = gamma;
  p.r_u = r_u;
  p.mu_l = Mat(num_classes, d);
  p.mu_u = Mat(num_classes, d);
  p.mu = Mat(num_classes, d);
  p.n_l.assign(num_classes, 0);
  p.n_u.assign(num_classes, 0);
  p.w_l_norm.assign(num_classes, 1.0);
  p.w_u_norm.assign(num_classes, 0.0);

  for (std::size_t i = 0; i < labeled.size(); ++i) {
    const auto k = static_cast<std::size_t>(labeled.labels[i]);
    if (k >= num_classes) throw std::invalid_argument("label out of range");
    ++p.n_l[k];
    auto src = labeled.z.row(i);
    auto dst = p.mu_l.row(k);
    for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
  }
  for (std::size_t i = 0; i < unlabeled.size(); ++i) {
    if (mask.phi[i] != 1) continue;
    const auto k = static_cast<std::size_t>(mask.pred_class[i]);
    if (k >= num_classes) throw std::invalid_argument("predicted class out of range");
    ++p.n_u[k];
    auto src = unlabeled.z.row(i);
    auto dst = p.mu_u.row(k);
    for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
  }

  for (std::size_t k = 0; k < num_classes; ++k) {
    if (p.n_l[k] == 0) {
      throw std::invalid_argument("prototype undefined: class " + std::to_string(k) +
                                  " has no labeled samples");
    }
    for (double& v : p.mu_l.row(k)) v /= static_cast<double>(p.n_l[k]);
    if (p.n_u[k] > 0) {
      for (double& v : p.mu_u.row(k)) v /= static_cast<double>(p.n_u[k]);
    }
    const double w_l = gamma * static_cast<double>(p.n_l[k]);
    const double w_u = r_u * static_cast<double>(p.n_u[k]);
    auto mu = p.mu.row(k);
    auto ml = p.mu_l.row(k);
    if (w_u == 0.0) {
      std::copy(ml.begin(), ml.end(), mu.begin());
      continue;
    }
    p.w_l_norm[k] = w_l / (w_l + w_u);
    p.w_u_norm[k] = w_u / (w_l + w_u);
    auto mv = p.mu_u.row(k);
    for (std::size_t c = 0; c < d; ++c) mu[c] = p.w_l_norm[k] * ml[c] + p.w_u_norm[k] * mv[c];
  }
  return p;
}

Mat proto_similarity_profile(const EmbeddingBatch& batch, const PrototypeSet& protos) {
  Mat out(batch.size(), protos.num_classes());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    for (std::size_t k = 0; k < protos.num_classes(); ++k) {
      out(i, k) = cosine_sim(batch.z.row(i), protos.mu.row(k));
    }
  }
  return out;
}

namespace {

constexpr const char* kProtoMagic = "skipalign-prototypes";

void write_mat(std::ostream& os, const char* key, const Mat& m) {
  os << key << '\n';
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) os << (c ? " " : "") << hexfloat(m(r, c));
    os << '\n';
  }
}

void expect(std::istream& is, const char* key) {
  std::string k;
  if (!(is >> k) || k != key) {
    throw std::runtime_error(std::string("prototypes: expected '") + key + "', got '" + k + "'");
  }
}

double read_double(std::istream& is) {
  std::string tok;
  if (!(is >> tok)) throw std::runtime_error("prototypes: truncated file");
  return parse_hexfloat(tok);
}

Mat read_mat(std::istream& is, const char* key, std::size_t rows, std::size_t cols) {
  expect(is, key);
  Mat m(rows, cols);
  for (double& v : m.data()) v = read_double(is);
  return m;
}

}  // namespace

void save_prototypes(std::ostream& os, const PrototypeSet& p) {
  os << kProtoMagic << " 1\n";
  os << "classes " << p.num_classes() << "\ndim " << p.dim() << '\n';
  os << "gamma " << hexfloat(p.gamma) << "\nr_u " << hexfloat(p.r_u) << '\n';
  for (std::size_t k = 0; k < p.num_classes(); ++k) {
    os << "class " << k << ' ' << p.n_l[k] << ' ' << p.n_u[k] << ' ' << hexfloat(p.w_l_norm[k]) << ' '
       << hexfloat(p.w_u_norm[k]) << '\n';
  }
  write_mat(os, "mu", p.mu);
  write_mat(os, "mu_l", p.mu_l);
  write_mat(os, "mu_u", p.mu_u);
}

PrototypeSet load_prototypes(std::istream& is) {
  expect(is, kProtoMagic);
  int version = 0;
  if (!(is >> version) || version != 1) throw std::runtime_error("prototypes: unsupported version");
  std::size_t k = 0, d = 0;
  expect(is, "classes");
  is >> k;
  expect(is, "dim");
  is >> d;
  if (!is || k == 0 || d == 0) throw std::runtime_error("prototypes: bad header");
  PrototypeSet p;
  expect(is, "gamma");
  p.gamma = read_double(is);
  expect(is, "r_u");
  p.r_u = read_double(is);
  p.n_l.resize(k);
  p.n_u.resize(k);
  p.w_l_norm.resize(k);
  p.w_u_norm.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    expect(is, "class");
    std::size_t idx = 0;
    is >> idx >> p.n_l[c] >> p.n_u[c];
    if (!is || idx != c) throw std::runtime_error("prototypes: bad class record");
    p.w_l_norm[c] = read_double(is);
    p.w_u_norm[c] = read_double(is);
  }
  p.mu = read_mat(is, "mu", k, d);
  p.mu_l = read_mat(is, "mu_l", k, d);
  p.mu_u = read_mat(is, "mu_u", k, d);
  return p;
}

}  // namespace skipalign
