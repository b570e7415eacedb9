#include "skipalign/net.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace skipalign {

namespace {

void require_finite(const Mat& m, const std::string& where) {
  if (!all_finite(m.data())) throw std::domain_error("non-finite values in layer " + where);
}

Mat add_or_zero(const Mat& a, std::size_t rows, std::size_t cols) {
  if (a.empty()) return Mat(rows, cols);
  if (a.rows() != rows || a.cols() != cols) {
    throw std::invalid_argument("upstream gradient shape mismatch");
  }
  return a;
}

}  // namespace

ForwardOutput ForwardOutput::slice_rows(std::size_t begin, std::size_t count) const {
  ForwardOutput o;
  o.f = f.slice_rows(begin, count);
  o.z = z.slice_rows(begin, count);
  o.cc_logits = cc_logits.slice_rows(begin, count);
  o.ova = ova.slice_rows(begin, count);
  o.f_norms.assign(f_norms.begin() + static_cast<std::ptrdiff_t>(begin),
                   f_norms.begin() + static_cast<std::ptrdiff_t>(begin + count));
  return o;
}

Network::Network(NetSpec spec) : spec_(std::move(spec)) {
  if (spec_.input_dim == 0 || spec_.feature_dim == 0 || spec_.proj_dim == 0 ||
      spec_.num_classes == 0) {
    throw std::invalid_argument("network dimensions must be positive");
  }
  auto add = [&](const std::string& name, std::size_t in, std::size_t out, Activation act) {
    if (in == 0 || out == 0) throw std::invalid_argument("zero-width layer " + name);
    LayerInfo l{name, in, out, act, param_count_, param_count_ + in * out};
    param_count_ += in * out + out;
    layers_.push_back(l);
  };

  backbone_.first = layers_.size();
  std::size_t width = spec_.input_dim;
  for (std::size_t i = 0; i < spec_.backbone_widths.size(); ++i) {
    add("backbone." + std::to_string(i), width, spec_.backbone_widths[i], Activation::Relu);
    width = spec_.backbone_widths[i];
  }
  add("backbone.feature", width, spec_.feature_dim, Activation::Relu);
  backbone_.count = layers_.size() - backbone_.first;

  proj_.first = layers_.size();
  if (spec_.proj_hidden > 0) {
    add("proj.hidden", spec_.feature_dim, spec_.proj_hidden,
        spec_.proj_nonlinear ? Activation::Relu : Activation::Identity);
    add("proj.out", spec_.proj_hidden, spec_.proj_dim, Activation::Identity);
  } else {
    add("proj.out", spec_.feature_dim, spec_.proj_dim, Activation::Identity);
  }
  proj_.count = layers_.size() - proj_.first;

  cc_.first = layers_.size();
  if (spec_.cc_hidden > 0) {
    add("cc.hidden", spec_.feature_dim, spec_.cc_hidden, Activation::Relu);
    add("cc.out", spec_.cc_hidden, spec_.num_classes, Activation::Identity);
  } else {
    add("cc.out", spec_.feature_dim, spec_.num_classes, Activation::Identity);
  }
  cc_.count = layers_.size() - cc_.first;

  od_.first = layers_.size();
  width = spec_.feature_dim;
  for (std::size_t i = 0; i < spec_.od_hidden.size(); ++i) {
    add("od.hidden." + std::to_string(i), width, spec_.od_hidden[i], Activation::Relu);
    width = spec_.od_hidden[i];
  }
  add("od.out", width, 2 * spec_.num_classes, Activation::Identity);
  od_.count = layers_.size() - od_.first;
}

const LayerInfo& Network::layer(const std::string& name) const {
  for (const auto& l : layers_) {
    if (l.name == name) return l;
  }
  throw std::out_of_range("no layer named " + name);
}

ParamState Network::init() const {
  ParamState s;
  s.spec = spec_;
  s.params.assign(param_count_, 0.0);
  s.velocity.assign(param_count_, 0.0);
  std::mt19937_64 rng(spec_.seed);
  for (const auto& l : layers_) {
    const double bound = std::sqrt(6.0 / static_cast<double>(l.in + l.out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t i = 0; i < l.in * l.out; ++i) s.params[l.w_offset + i] = dist(rng);
  }
  return s;
}

Mat Network::run_group(const Group& g, std::span<const double> params, const Mat& input,
                       Trace* trace) const {
  Mat x = input;
  for (std::size_t li = g.first; li < g.first + g.count; ++li) {
    const LayerInfo& l = layers_[li];
    if (x.cols() != l.in) throw std::invalid_argument("input width mismatch at layer " + l.name);
    const double* w = params.data() + l.w_offset;
    const double* b = params.data() + l.b_offset;
    Mat pre(x.rows(), l.out);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      auto xr = x.row(r);
      for (std::size_t o = 0; o < l.out; ++o) {
        double s = b[o];
        const double* wr = w + o * l.in;
        for (std::size_t i = 0; i < l.in; ++i) s += wr[i] * xr[i];
        pre(r, o) = s;
      }
    }
    require_finite(pre, l.name);
    Mat y = pre;
    if (l.act == Activation::Relu) {
      for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
    }
    if (trace != nullptr) {
      trace->inputs[li] = std::move(x);
      trace->pre[li] = std::move(pre);
    }
    x = std::move(y);
  }
  return x;
}

ForwardOutput Network::forward(const ParamState& state, const Mat& x, Trace* trace) const {
  if (state.params.size() != param_count_) {
    throw std::invalid_argument("parameter count does not match network spec");
  }
  if (x.cols() != spec_.input_dim) throw std::invalid_argument("input dimension mismatch");
  if (trace != nullptr) {
    trace->inputs.assign(layers_.size(), Mat());
    trace->pre.assign(layers_.size(), Mat());
  }
  ForwardOutput out;
  out.f = run_group(backbone_, state.params, x, trace);
  out.z = run_group(proj_, state.params, out.f, trace);
  out.cc_logits = run_group(cc_, state.params, out.f, trace);
  const Mat od = run_group(od_, state.params, out.f, trace);
  const std::size_t k = spec_.num_classes;
  Mat id(od.rows(), k), ood(od.rows(), k);
  for (std::size_t r = 0; r < od.rows(); ++r) {
    for (std::size_t c = 0; c < k; ++c) {
      id(r, c) = od(r, c);
      ood(r, c) = od(r, k + c);
    }
  }
  out.ova = OvaOutput::from_logits(std::move(id), std::move(ood));
  out.f_norms.resize(out.f.rows());
  for (std::size_t r = 0; r < out.f.rows(); ++r) out.f_norms[r] = norm(out.f.row(r));
  return out;
}

Mat Network::back_group(const Group& g, std::span<const double> params, const Trace& trace,
                        Mat upstream, std::span<double> grad) const {
  for (std::size_t li = g.first + g.count; li-- > g.first;) {
    const LayerInfo& l = layers_[li];
    const Mat& x = trace.inputs[li];
    const Mat& pre = trace.pre[li];
    if (upstream.rows() != x.rows() || upstream.cols() != l.out) {
      throw std::invalid_argument("gradient shape mismatch at layer " + l.name);
    }
    if (l.act == Activation::Relu) {
      for (std::size_t r = 0; r < pre.rows(); ++r) {
        for (std::size_t o = 0; o < l.out; ++o) {
          if (!(pre(r, o) > 0.0)) upstream(r, o) = 0.0;
        }
      }
    }
    const double* w = params.data() + l.w_offset;
    double* gw = grad.data() + l.w_offset;
    double* gb = grad.data() + l.b_offset;
    Mat dx(x.rows(), l.in);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      auto xr = x.row(r);
      auto dxr = dx.row(r);
      for (std::size_t o = 0; o < l.out; ++o) {
        const double go = upstream(r, o);
        if (go == 0.0) continue;
        gb[o] += go;
        double* gwr = gw + o * l.in;
        const double* wr = w + o * l.in;
        for (std::size_t i = 0; i < l.in; ++i) {
          gwr[i] += go * xr[i];
          dxr[i] += go * wr[i];
        }
      }
    }
    require_finite(dx, l.name + " (backward)");
    upstream = std::move(dx);
  }
  return upstream;
}

Mat Network::head_feature_grad(const ParamState& state, const Trace& trace,
                               const OutputGrad& upstream, std::span<double> grad) const {
  const std::size_t rows = trace.inputs[backbone_.first].rows();
  const std::size_t k = spec_.num_classes;
  Mat df = add_or_zero(upstream.d_f, rows, spec_.feature_dim);
  auto accumulate = [&](const Mat& part) {
    for (std::size_t i = 0; i < part.data().size(); ++i) df.data()[i] += part.data()[i];
  };
  if (!upstream.d_z.empty()) {
    accumulate(back_group(proj_, state.params, trace,
                          add_or_zero(upstream.d_z, rows, spec_.proj_dim), grad));
  }
  if (!upstream.d_cc.empty()) {
    accumulate(back_group(cc_, state.params, trace, add_or_zero(upstream.d_cc, rows, k), grad));
  }
  if (!upstream.d_id.empty() || !upstream.d_ood.empty()) {
    const Mat did = add_or_zero(upstream.d_id, rows, k);
    const Mat dood = add_or_zero(upstream.d_ood, rows, k);
    Mat dod(rows, 2 * k);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < k; ++c) {
        dod(r, c) = did(r, c);
        dod(r, k + c) = dood(r, c);
      }
    }
    accumulate(back_group(od_, state.params, trace, std::move(dod), grad));
  }
  return df;
}

Vec Network::backward(const ParamState& state, const Trace& trace,
                      const OutputGrad& upstream) const {
  Vec grad(param_count_, 0.0);
  Mat df = head_feature_grad(state, trace, upstream, grad);
  back_group(backbone_, state.params, trace, std::move(df), grad);
  return grad;
}

Mat Network::feature_grad(const ParamState& state, const Trace& trace,
                          const OutputGrad& upstream) const {
  Vec scratch(param_count_, 0.0);
  return head_feature_grad(state, trace, upstream, scratch);
}

BackwardResult backward(const Network& net, const ParamState& state, const Mat& x,
                        const LossClosure& closure) {
  Network::Trace trace;
  BackwardResult r;
  r.out = net.forward(state, x, &trace);
  LossEval eval = closure(r.out);
  if (!std::isfinite(eval.loss)) throw std::domain_error("non-finite loss from closure");
  r.loss = eval.loss;
  r.grad = net.backward(state, trace, eval.grad);
  return r;
}

ParamState sgd_step(ParamState state, std::span<const double> grads, double lr, double momentum,
                    double weight_decay) {
  if (grads.size() != state.params.size()) throw std::invalid_argument("gradient length mismatch");
  if (state.velocity.size() != state.params.size()) state.velocity.assign(state.params.size(), 0.0);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const double g = grads[i] + weight_decay * state.params[i];
    state.velocity[i] = momentum * state.velocity[i] + g;
    state.params[i] -= lr * state.velocity[i];
  }
  ++state.step;
  return state;
}

std::string hexfloat(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

double parse_hexfloat(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw std::runtime_error("bad float literal: " + s);
  return v;
}

namespace {

constexpr const char* kCheckpointMagic = "skipalign-checkpoint";
constexpr int kCheckpointVersion = 1;

void write_sizes(std::ostream& os, const char* key, const std::vector<std::size_t>& v) {
  os << key << ' ' << v.size();
  for (auto x : v) os << ' ' << x;
  os << '\n';
}

void write_floats(std::ostream& os, const char* key, const Vec& v) {
  os << key << ' ' << v.size() << '\n';
  for (double x : v) os << hexfloat(x) << '\n';
}

std::string expect_key(std::istream& is, const char* key) {
  std::string k;
  if (!(is >> k) || k != key) {
    throw std::runtime_error(std::string("checkpoint: expected '") + key + "', got '" + k + "'");
  }
  return k;
}

template <class T>
T read_value(std::istream& is, const char* key) {
  expect_key(is, key);
  T v{};
  if (!(is >> v)) throw std::runtime_error(std::string("checkpoint: bad value for ") + key);
  return v;
}

std::vector<std::size_t> read_sizes(std::istream& is, const char* key) {
  const auto n = read_value<std::size_t>(is, key);
  std::vector<std::size_t> v(n);
  for (auto& x : v) {
    if (!(is >> x)) throw std::runtime_error(std::string("checkpoint: truncated ") + key);
  }
  return v;
}

Vec read_floats(std::istream& is, const char* key) {
  const auto n = read_value<std::size_t>(is, key);
  Vec v(n);
  std::string tok;
  for (auto& x : v) {
    if (!(is >> tok)) throw std::runtime_error(std::string("checkpoint: truncated ") + key);
    x = parse_hexfloat(tok);
  }
  return v;
}

}  // namespace

void save_checkpoint(std::ostream& os, const ParamState& state) {
  const NetSpec& s = state.spec;
  os << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  os << "input_dim " << s.input_dim << '\n';
  write_sizes(os, "backbone_widths", s.backbone_widths);
  os << "feature_dim " << s.feature_dim << '\n';
  os << "proj_hidden " << s.proj_hidden << '\n';
  os << "proj_dim " << s.proj_dim << '\n';
  os << "proj_nonlinear " << (s.proj_nonlinear ? 1 : 0) << '\n';
  os << "cc_hidden " << s.cc_hidden << '\n';
  write_sizes(os, "od_hidden", s.od_hidden);
  os << "num_classes " << s.num_classes << '\n';
  os << "seed " << s.seed << '\n';
  os << "step " << state.step << '\n';
  write_floats(os, "params", state.params);
  write_floats(os, "velocity", state.velocity);
}

ParamState load_checkpoint(std::istream& is) {
  const auto version = read_value<int>(is, kCheckpointMagic);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  ParamState st;
  NetSpec& s = st.spec;
  s.input_dim = read_value<std::size_t>(is, "input_dim");
  s.backbone_widths = read_sizes(is, "backbone_widths");
  s.feature_dim = read_value<std::size_t>(is, "feature_dim");
  s.proj_hidden = read_value<std::size_t>(is, "proj_hidden");
  s.proj_dim = read_value<std::size_t>(is, "proj_dim");
  s.proj_nonlinear = read_value<int>(is, "proj_nonlinear") != 0;
  s.cc_hidden = read_value<std::size_t>(is, "cc_hidden");
  s.od_hidden = read_sizes(is, "od_hidden");
  s.num_classes = read_value<std::size_t>(is, "num_classes");
  s.seed = read_value<std::uint64_t>(is, "seed");
  st.step = read_value<std::int64_t>(is, "step");
  st.params = read_floats(is, "params");
  st.velocity = read_floats(is, "velocity");
  if (Network(s).param_count() != st.params.size()) {
    throw std::runtime_error("checkpoint: parameter count does not match its network spec");
  }
  return st;
}

}  // namespace skipalign
