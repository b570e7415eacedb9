#pragma once

// A small fully-connected model: backbone F (x -> f), projection head P
// (f -> z), closed-set classifier CC (f -> K logits) and one-vs-all detector
// OD (f -> K ID/OOD logit pairs). Gradients are exact reverse mode over this
// fixed architecture family.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "skipalign/heads.hpp"
#include "skipalign/numeric.hpp"

namespace skipalign {

enum class Activation { Identity, Relu };

struct NetSpec {
  std::size_t input_dim = 16;
  /// Hidden widths of the backbone before the feature layer.
  std::vector<std::size_t> backbone_widths = {64};
  std::size_t feature_dim = 32;
  /// 0 makes the projection a single linear map.
  std::size_t proj_hidden = 32;
  std::size_t proj_dim = 16;
  /// Rectifier between the two projection layers; off gives a linear head
  /// with the same parameter count.
  bool proj_nonlinear = true;
  /// 0 makes the classifier linear in f.
  std::size_t cc_hidden = 32;
  std::vector<std::size_t> od_hidden = {32};
  std::size_t num_classes = 4;
  std::uint64_t seed = 0;

  friend bool operator==(const NetSpec&, const NetSpec&) = default;
};

struct LayerInfo {
  std::string name;
  std::size_t in = 0;
  std::size_t out = 0;
  Activation act = Activation::Identity;
  std::size_t w_offset = 0;  // out×in, row-major
  std::size_t b_offset = 0;
};

struct ParamState {
  NetSpec spec;
  Vec params;
  Vec velocity;  // momentum buffer, same length as params
  std::int64_t step = 0;

  friend bool operator==(const ParamState&, const ParamState&) = default;
};

struct ForwardOutput {
  Mat f;
  Mat z;
  Mat cc_logits;
  OvaOutput ova;
  /// ‖f_i‖ per row.
  Vec f_norms;

  ForwardOutput slice_rows(std::size_t begin, std::size_t count) const;
};

/// Upstream gradients with respect to forward outputs; an empty matrix is zero.
struct OutputGrad {
  Mat d_f;
  Mat d_z;
  Mat d_cc;
  Mat d_id;
  Mat d_ood;
};

struct LossEval {
  double loss = 0.0;
  OutputGrad grad;
};

using LossClosure = std::function<LossEval(const ForwardOutput&)>;

struct BackwardResult {
  double loss = 0.0;
  Vec grad;
  ForwardOutput out;
};

class Network {
 public:
  explicit Network(NetSpec spec);

  const NetSpec& spec() const { return spec_; }
  std::size_t param_count() const { return param_count_; }
  std::span<const LayerInfo> layers() const { return layers_; }
  const LayerInfo& layer(const std::string& name) const;

  /// Seeded initialization: uniform weights scaled by fan-in/fan-out, zero biases.
  ParamState init() const;

  /// Saved activations needed by backward.
  struct Trace {
    std::vector<Mat> inputs;  // per layer
    std::vector<Mat> pre;     // per layer, before activation
  };

  ForwardOutput forward(const ParamState& state, const Mat& x, Trace* trace = nullptr) const;
  /// Parameter gradient for the given upstream output gradients.
  Vec backward(const ParamState& state, const Trace& trace, const OutputGrad& upstream) const;
  /// Gradient of the scalar closure loss with respect to f, for the same rows.
  Mat feature_grad(const ParamState& state, const Trace& trace, const OutputGrad& upstream) const;

 private:
  struct Group {
    std::size_t first = 0;
    std::size_t count = 0;
  };

  Mat run_group(const Group& g, std::span<const double> params, const Mat& input,
                Trace* trace) const;
  Mat back_group(const Group& g, std::span<const double> params, const Trace& trace, Mat upstream,
                 std::span<double> grad) const;
  Mat head_feature_grad(const ParamState& state, const Trace& trace, const OutputGrad& upstream,
                        std::span<double> grad) const;

  NetSpec spec_;
  std::vector<LayerInfo> layers_;
  Group backbone_, proj_, cc_, od_;
  std::size_t param_count_ = 0;
};

/// Forward, evaluate the closure, and backpropagate its output gradients.
BackwardResult backward(const Network& net, const ParamState& state, const Mat& x,
                        const LossClosure& closure);

/// Momentum SGD with weight decay added to the gradient:
/// g' = g + wd·p, v = momentum·v + g', p = p − lr·v.
ParamState sgd_step(ParamState state, std::span<const double> grads, double lr, double momentum,
                    double weight_decay);

/// Text checkpoint with hexadecimal floats; round-trips bitwise.
void save_checkpoint(std::ostream& os, const ParamState& state);
ParamState load_checkpoint(std::istream& is);

/// Hexadecimal float text form used by checkpoints and prototype dumps.
std::string hexfloat(double v);
double parse_hexfloat(const std::string& s);

}  // namespace skipalign
