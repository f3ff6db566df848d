#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "rfw/ops.hpp"
#include "rfw/rng.hpp"
#include "rfw/tensor.hpp"

namespace rfw {

// Dotted-path parameter naming: every layer contributes its tensors under a
// caller-supplied prefix, e.g. "backbone.stage1.block0.norm1.gamma".
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

class Conv2dLayer {
 public:
  Conv2dLayer() = default;

  // Weights and bias initialized uniform in +-sqrt(1/fan_in).
  Conv2dLayer(ConvSpec spec, Rng& rng, bool with_bias = true) : spec_(spec) {
    spec_.validate();
    const int icg = spec_.in_channels / spec_.groups;
    const int fan_in = icg * spec_.kernel_size * spec_.kernel_size;
    const double bound = std::sqrt(1.0 / fan_in);
    Shape wshape{spec_.out_channels, icg, spec_.kernel_size, spec_.kernel_size};
    std::vector<double> w(static_cast<std::size_t>(numel_of(wshape)));
    for (double& v : w) v = rng.uniform(-bound, bound);
    weight_ = Tensor::from(std::move(wshape), std::move(w), true);
    if (with_bias) {
      std::vector<double> b(static_cast<std::size_t>(spec_.out_channels));
      for (double& v : b) v = rng.uniform(-bound, bound);
      bias_ = Tensor::from({spec_.out_channels}, std::move(b), true);
    }
  }

  Tensor forward(const Tensor& x) const { return conv2d(x, weight_, bias_, spec_); }

  const ConvSpec& spec() const { return spec_; }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

  void collect(const std::string& prefix, NamedTensors* params, NamedTensors* buffers) const {
    (void)buffers;
    if (params) {
      params->emplace_back(prefix + ".weight", weight_);
      if (bias_.defined()) params->emplace_back(prefix + ".bias", bias_);
    }
  }

 private:
  ConvSpec spec_;
  Tensor weight_;
  Tensor bias_;
};

class BatchNorm2d;

// Running-statistic updates recorded during training forwards. When several
// images run through shared layers on worker threads, each thread fills its
// own sink and the trainer applies them afterwards in image order, keeping the
// running statistics bit-deterministic.
struct BnStatsSink {
  struct Entry {
    BatchNorm2d* layer;
    std::vector<double> mean, var;
  };
  std::vector<Entry> entries;

  void apply();  // flush every recorded update in order, then clear
};

// Per-channel normalization by the statistics of the current input, in
// training and inference alike. Images flow through the network one at a
// time here, so "batch" statistics are single-image moments; normalizing by
// an averaged running estimate instead would hand inference a feature
// distribution the training forwards never produced (measured as a large
// held-out mAP drop). Running estimates are still tracked during training
// and checkpointed, as telemetry only.
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels)
      : gamma_(Tensor::full({channels}, 1.0, true)),
        beta_(Tensor::zeros({channels}, true)),
        running_mean_(Tensor::zeros({channels})),
        running_var_(Tensor::full({channels}, 1.0)) {}

  Tensor forward(const Tensor& x, bool training, BnStatsSink* sink = nullptr) {
    detail::check_rank(x, 4, "BatchNorm2d");
    if (x.dim(1) != gamma_.dim(0))
      throw std::invalid_argument("BatchNorm2d: input has " + std::to_string(x.dim(1)) +
                                  " channels, layer has " + std::to_string(gamma_.dim(0)));
    Tensor mean = mean_nhw(x);
    Tensor centered = add_channel(x, neg(mean));
    Tensor var = mean_nhw(mul(centered, centered));
    if (training) {
      if (sink) {
        sink->entries.push_back({this, mean.data(), var.data()});
      } else {
        apply_running_update(mean.data(), var.data());
      }
    }
    Tensor invstd = pow_scalar(add_scalar(var, eps_), -0.5);
    return add_channel(mul_channel(mul_channel(centered, invstd), gamma_), beta_);
  }

  void apply_running_update(const std::vector<double>& mean, const std::vector<double>& var) {
    std::vector<double>& rm = running_mean_.data();
    std::vector<double>& rv = running_var_.data();
    for (std::size_t c = 0; c < rm.size(); ++c) {
      rm[c] = (1.0 - momentum_) * rm[c] + momentum_ * mean[c];
      rv[c] = (1.0 - momentum_) * rv[c] + momentum_ * var[c];
    }
  }

  void collect(const std::string& prefix, NamedTensors* params, NamedTensors* buffers) const {
    if (params) {
      params->emplace_back(prefix + ".gamma", gamma_);
      params->emplace_back(prefix + ".beta", beta_);
    }
    if (buffers) {
      buffers->emplace_back(prefix + ".running_mean", running_mean_);
      buffers->emplace_back(prefix + ".running_var", running_var_);
    }
  }

 private:
  Tensor gamma_, beta_;
  Tensor running_mean_, running_var_;
  double momentum_ = 0.1;
  double eps_ = 1e-5;
};

inline void BnStatsSink::apply() {
  for (Entry& e : entries) e.layer->apply_running_update(e.mean, e.var);
  entries.clear();
}

// Two pointwise convolutions around an activation; the channel MLP of a
// pre-norm block.
class Mlp {
 public:
  Mlp() = default;
  Mlp(int channels, double ratio, Rng& rng) {
    const int hidden = std::max(1, static_cast<int>(std::lround(channels * ratio)));
    ConvSpec s1;
    s1.kernel_size = 1;
    s1.in_channels = channels;
    s1.out_channels = hidden;
    ConvSpec s2 = s1;
    s2.in_channels = hidden;
    s2.out_channels = channels;
    fc1_ = Conv2dLayer(s1, rng);
    fc2_ = Conv2dLayer(s2, rng);
  }

  Tensor forward(const Tensor& x) const { return fc2_.forward(silu(fc1_.forward(x))); }

  void collect(const std::string& prefix, NamedTensors* params, NamedTensors* buffers) const {
    fc1_.collect(prefix + ".fc1", params, buffers);
    fc2_.collect(prefix + ".fc2", params, buffers);
  }

 private:
  Conv2dLayer fc1_, fc2_;
};

inline std::int64_t count_parameters(const NamedTensors& params) {
  std::int64_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

}  // namespace rfw
