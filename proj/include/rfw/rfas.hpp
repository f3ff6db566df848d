#pragma once

#include <array>
#include <string>
#include <vector>

#include "rfw/nn.hpp"

namespace rfw {

// Two-branch receptive-field block. Each branch stacks a dense conv and a
// dilated conv so the pair covers a large footprint at depthwise cost:
// the small branch reaches 3 + (3-1)*3 = 9, the large one 5 + (3-1)*5 = 15.
// A 7x7 selector over channel-pooled features picks per-pixel branch weights
// and a pointwise conv fuses the blend, which finally gates the input.
struct RFASBlockParams {
  int channels = 0;
  Conv2dLayer conv_3_1;       // depthwise 3x3, dilation 1
  Conv2dLayer conv_3_3;       // depthwise 3x3, dilation 3
  Conv2dLayer conv_5_1;       // depthwise 5x5, dilation 1
  Conv2dLayer conv_3_5;       // depthwise 3x3, dilation 5
  Conv2dLayer selector_conv;  // dense 7x7, 2 -> 2 channels
  Conv2dLayer fuse_conv;      // dense 1x1, C -> C

  RFASBlockParams() = default;

  RFASBlockParams(int channels_in, Rng& rng) : channels(channels_in) {
    auto depthwise = [&](int k, int d) {
      ConvSpec s;
      s.kernel_size = k;
      s.dilation = d;
      s.padding = ConvSpec::same_padding(k, d);
      s.in_channels = channels;
      s.out_channels = channels;
      s.groups = channels;
      return Conv2dLayer(s, rng);
    };
    conv_3_1 = depthwise(3, 1);
    conv_3_3 = depthwise(3, 3);
    conv_5_1 = depthwise(5, 1);
    conv_3_5 = depthwise(3, 5);
    ConvSpec sel;
    sel.kernel_size = 7;
    sel.padding = 3;
    sel.in_channels = 2;
    sel.out_channels = 2;
    selector_conv = Conv2dLayer(sel, rng);
    ConvSpec fuse;
    fuse.kernel_size = 1;
    fuse.in_channels = channels;
    fuse.out_channels = channels;
    fuse_conv = Conv2dLayer(fuse, rng);
  }

  void collect(const std::string& prefix, NamedTensors* params, NamedTensors* buffers) const {
    conv_3_1.collect(prefix + ".conv_3_1", params, buffers);
    conv_3_3.collect(prefix + ".conv_3_3", params, buffers);
    conv_5_1.collect(prefix + ".conv_5_1", params, buffers);
    conv_3_5.collect(prefix + ".conv_3_5", params, buffers);
    selector_conv.collect(prefix + ".selector_conv", params, buffers);
    fuse_conv.collect(prefix + ".fuse_conv", params, buffers);
  }
};

// Residual over the inner conv output, not over the block input.
inline Tensor small_rf_branch(const Tensor& x, const RFASBlockParams& p) {
  Tensor inner = p.conv_3_1.forward(x);
  return add(p.conv_3_3.forward(inner), inner);
}

inline Tensor large_rf_branch(const Tensor& x, const RFASBlockParams& p) {
  Tensor inner = p.conv_5_1.forward(x);
  return add(p.conv_3_5.forward(inner), inner);
}

// Per-pixel branch weights from the channel-pooled mixed features:
// sigmoid(conv7([max_c, avg_c])) with one output channel per branch.
inline Tensor select_weights(const Tensor& f_mrf, const RFASBlockParams& p) {
  detail::check_rank(f_mrf, 4, "select_weights");
  if (f_mrf.dim(1) != 2 * p.channels)
    throw std::invalid_argument("select_weights: expected " + std::to_string(2 * p.channels) +
                                " channels (both branches), got " + std::to_string(f_mrf.dim(1)));
  Tensor pooled = concat(1, {pool_channel(f_mrf, PoolMode::Max), pool_channel(f_mrf, PoolMode::Avg)});
  return sigmoid(p.selector_conv.forward(pooled));
}

inline Tensor rfas_forward(const Tensor& x, const RFASBlockParams& p) {
  detail::check_rank(x, 4, "rfas_forward");
  if (x.dim(1) != p.channels)
    throw std::invalid_argument("rfas_forward: input has " + std::to_string(x.dim(1)) +
                                " channels, block is built for " + std::to_string(p.channels));
  Tensor f_srf = small_rf_branch(x, p);
  Tensor f_lrf = large_rf_branch(x, p);
  Tensor w = select_weights(concat(1, {f_srf, f_lrf}), p);
  Tensor blend = add(mul_gate(f_srf, slice_channels(w, 0, 1)),
                     mul_gate(f_lrf, slice_channels(w, 1, 2)));
  return mul(x, p.fuse_conv.forward(blend));
}

struct BackboneConfig {
  std::vector<int> stage_channels{16, 32, 64};
  std::vector<int> stage_depths{1, 2, 2};
  double mlp_ratio = 2.0;
  int in_channels = 3;

  void validate() const {
    if (stage_channels.size() != stage_depths.size())
      throw std::invalid_argument("BackboneConfig: stage_channels and stage_depths lengths differ");
    if (stage_channels.size() != 3)
      throw std::invalid_argument("BackboneConfig: exactly 3 stages are exported, got " +
                                  std::to_string(stage_channels.size()));
    for (int c : stage_channels)
      if (c < 1) throw std::invalid_argument("BackboneConfig: stage widths must be positive");
    for (int d : stage_depths)
      if (d < 1) throw std::invalid_argument("BackboneConfig: stage depths must be positive");
    if (mlp_ratio <= 0.0) throw std::invalid_argument("BackboneConfig: mlp_ratio must be positive");
    if (in_channels < 1) throw std::invalid_argument("BackboneConfig: in_channels must be positive");
  }
};

// Pre-norm block: x + RFASM(norm(x)) then x + MLP(norm(x)).
class RFASBlock {
 public:
  RFASBlock() = default;
  RFASBlock(int channels, double mlp_ratio, Rng& rng)
      : norm1_(channels), norm2_(channels), rfasm_(channels, rng), mlp_(channels, mlp_ratio, rng) {}

  Tensor forward(const Tensor& x, bool training, BnStatsSink* sink) {
    Tensor y = add(x, rfas_forward(norm1_.forward(x, training, sink), rfasm_));
    return add(y, mlp_.forward(norm2_.forward(y, training, sink)));
  }

  void collect(const std::string& prefix, NamedTensors* params, NamedTensors* buffers) const {
    norm1_.collect(prefix + ".norm1", params, buffers);
    norm2_.collect(prefix + ".norm2", params, buffers);
    rfasm_.collect(prefix + ".rfasm", params, buffers);
    mlp_.collect(prefix + ".mlp", params, buffers);
  }

 private:
  BatchNorm2d norm1_, norm2_;
  RFASBlockParams rfasm_;
  Mlp mlp_;
};

// Stride-4 patchify stem plus three stride-2 stages; the three stage outputs
// (strides 8, 16, 32) feed the neck.
class RFASNet {
 public:
  RFASNet() = default;

  RFASNet(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    ConvSpec stem;
    stem.kernel_size = 4;
    stem.stride = 4;
    stem.in_channels = cfg_.in_channels;
    stem.out_channels = cfg_.stage_channels[0];
    stem_conv_ = Conv2dLayer(stem, rng, /*with_bias=*/false);
    stem_bn_ = BatchNorm2d(cfg_.stage_channels[0]);
    int prev = cfg_.stage_channels[0];
    for (std::size_t i = 0; i < cfg_.stage_channels.size(); ++i) {
      Stage st;
      ConvSpec down;
      down.kernel_size = 3;
      down.stride = 2;
      down.padding = 1;
      down.in_channels = prev;
      down.out_channels = cfg_.stage_channels[i];
      st.down = Conv2dLayer(down, rng, /*with_bias=*/false);
      st.down_bn = BatchNorm2d(cfg_.stage_channels[i]);
      for (int b = 0; b < cfg_.stage_depths[i]; ++b)
        st.blocks.emplace_back(cfg_.stage_channels[i], cfg_.mlp_ratio, rng);
      stages_.push_back(std::move(st));
      prev = cfg_.stage_channels[i];
    }
  }

  std::array<Tensor, 3> forward(const Tensor& image, bool training, BnStatsSink* sink = nullptr) {
    detail::check_rank(image, 4, "RFASNet");
    const int H = image.dim(2), W = image.dim(3);
    if (H % 32 != 0 || W % 32 != 0)
      throw std::invalid_argument("RFASNet: input " + std::to_string(H) + "x" +
                                  std::to_string(W) + " must be a multiple of 32 per side");
    Tensor x = silu(stem_bn_.forward(stem_conv_.forward(image), training, sink));
    std::array<Tensor, 3> outs;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      Stage& st = stages_[i];
      x = silu(st.down_bn.forward(st.down.forward(x), training, sink));
      for (RFASBlock& b : st.blocks) x = b.forward(x, training, sink);
      outs[i] = x;
    }
    return outs;
  }

  void collect(const std::string& prefix, NamedTensors* params, NamedTensors* buffers) const {
    stem_conv_.collect(prefix + ".stem.conv", params, buffers);
    stem_bn_.collect(prefix + ".stem.norm", params, buffers);
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      const std::string sp = prefix + ".stage" + std::to_string(i);
      stages_[i].down.collect(sp + ".down.conv", params, buffers);
      stages_[i].down_bn.collect(sp + ".down.norm", params, buffers);
      for (std::size_t b = 0; b < stages_[i].blocks.size(); ++b)
        stages_[i].blocks[b].collect(sp + ".block" + std::to_string(b), params, buffers);
    }
  }

  const BackboneConfig& config() const { return cfg_; }

 private:
  struct Stage {
    Conv2dLayer down;
    BatchNorm2d down_bn;
    std::vector<RFASBlock> blocks;
  };

  BackboneConfig cfg_;
  Conv2dLayer stem_conv_;
  BatchNorm2d stem_bn_;
  std::vector<Stage> stages_;
};

}  // namespace rfw
