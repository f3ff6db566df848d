#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "rfw/nn.hpp"

namespace rfw {

struct FBSMConfig {
  int s = 4;      // regions per spatial axis
  int k = 4;      // routed regions per query region
  int heads = 1;  // attention heads
  // When set, gathered values are additionally scaled by the softmaxed
  // routing weights. Off by default: plain selection keeps the k = s*s case
  // exactly equal to dense attention.
  bool use_routing_weights = false;

  void validate() const {
    if (s < 1) throw std::invalid_argument("FBSMConfig: s must be positive");
    if (k < 1 || k > s * s)
      throw std::invalid_argument("FBSMConfig: k=" + std::to_string(k) +
                                  " out of range for s*s=" + std::to_string(s * s) + " regions");
    if (heads < 1) throw std::invalid_argument("FBSMConfig: heads must be positive");
  }
};

struct RoutingResult {
  Tensor r_w;                       // [R, k] affinity scores, descending per row
  std::vector<std::int64_t> r_l;    // [R * k] region indices, aligned with r_w
};

// Region-to-region affinity routing: r_l[i] holds the k regions whose mean
// keys are most affine to region i's mean query.
inline RoutingResult topk_routing(const Tensor& q_mean, const Tensor& k_mean, int k) {
  detail::check_rank(q_mean, 2, "topk_routing");
  detail::check_rank(k_mean, 2, "topk_routing");
  if (q_mean.dim(0) != k_mean.dim(0) || q_mean.dim(1) != k_mean.dim(1))
    throw std::invalid_argument("topk_routing: mean shapes differ, " + shape_str(q_mean.shape()) +
                                " vs " + shape_str(k_mean.shape()));
  const int R = q_mean.dim(0);
  if (k < 1 || k > R)
    throw std::invalid_argument("topk_routing: k=" + std::to_string(k) + " out of range for " +
                                std::to_string(R) + " regions");
  Tensor affinity = matmul(q_mean, permute(k_mean, {1, 0}));  // [R, R]
  TopK t = topk(affinity, k, 1);
  return RoutingResult{t.values, std::move(t.indices)};
}

class FBSMParams {
 public:
  FBSMParams() = default;

  FBSMParams(int channels, FBSMConfig cfg, Rng& rng) : channels_(channels), cfg_(cfg) {
    cfg_.validate();
    if (channels % cfg_.heads != 0)
      throw std::invalid_argument("FBSMParams: channels " + std::to_string(channels) +
                                  " not divisible by heads " + std::to_string(cfg_.heads));
    ConvSpec pw;
    pw.kernel_size = 1;
    pw.in_channels = channels;
    pw.out_channels = channels;
    q_proj_ = Conv2dLayer(pw, rng);
    k_proj_ = Conv2dLayer(pw, rng);
    v_proj_ = Conv2dLayer(pw, rng);
    ConvSpec gate;
    gate.kernel_size = 7;
    gate.padding = 3;
    gate.in_channels = 2;
    gate.out_channels = 1;
    fiem_conv_ = Conv2dLayer(gate, rng);
  }

  int channels() const { return channels_; }
  const FBSMConfig& config() const { return cfg_; }
  Conv2dLayer& q_proj() { return q_proj_; }
  Conv2dLayer& k_proj() { return k_proj_; }
  Conv2dLayer& v_proj() { return v_proj_; }
  Conv2dLayer& fiem_conv() { return fiem_conv_; }
  const Conv2dLayer& q_proj() const { return q_proj_; }
  const Conv2dLayer& k_proj() const { return k_proj_; }
  const Conv2dLayer& v_proj() const { return v_proj_; }
  const Conv2dLayer& fiem_conv() const { return fiem_conv_; }

  void collect(const std::string& prefix, NamedTensors* params, NamedTensors* buffers) const {
    q_proj_.collect(prefix + ".q_proj", params, buffers);
    k_proj_.collect(prefix + ".k_proj", params, buffers);
    v_proj_.collect(prefix + ".v_proj", params, buffers);
    fiem_conv_.collect(prefix + ".fiem_conv", params, buffers);
  }

 private:
  int channels_ = 0;
  FBSMConfig cfg_;
  Conv2dLayer q_proj_, k_proj_, v_proj_, fiem_conv_;
};

// Background-filtering attention: regions attend only to their top-k routed
// regions. Residual output, no output projection (so a zero value projection
// passes X through untouched). When attn_out is non-null it receives the
// post-softmax attention rows, shape [N*R*heads, L, k*L].
inline Tensor brifm(const Tensor& x, const FBSMParams& p, Tensor* attn_out = nullptr) {
  const FBSMConfig& cfg = p.config();
  detail::check_partition(x, cfg.s, "brifm");
  if (x.dim(1) != p.channels())
    throw std::invalid_argument("brifm: input has " + std::to_string(x.dim(1)) +
                                " channels, module built for " + std::to_string(p.channels()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int s = cfg.s, k = cfg.k, heads = cfg.heads;
  const int R = s * s;
  const int L = (H / s) * (W / s);
  const int dh = C / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor q = partition_regions(p.q_proj().forward(x), s);  // [N,R,L,C]
  Tensor kk = partition_regions(p.k_proj().forward(x), s);
  Tensor v = partition_regions(p.v_proj().forward(x), s);

  // routing on per-region means, per batch element
  Tensor qm = mean_axis(q, 2);  // [N,R,C]
  Tensor km = mean_axis(kk, 2);
  Tensor affinity = bmm(qm, permute(km, {0, 2, 1}));  // [N,R,R]
  TopK routed = topk(affinity, k, 2);                 // values [N,R,k]

  Tensor k_sel = gather_regions(kk, routed.indices, k);  // [N,R,kL,C]
  Tensor v_sel = gather_regions(v, routed.indices, k);
  if (cfg.use_routing_weights) {
    Tensor rw = softmax(routed.values, 2);
    v_sel = scale_region_blocks(v_sel, rw, k);
  }

  // heads split: [N,R,T,C] -> [N*R*heads, T, dh]
  auto split_heads = [&](const Tensor& t, int T) {
    Tensor r = reshape(t, {N * R, T, heads, dh});
    return reshape(permute(r, {0, 2, 1, 3}), {N * R * heads, T, dh});
  };
  Tensor qh = split_heads(q, L);
  Tensor kh = split_heads(k_sel, k * L);
  Tensor vh = split_heads(v_sel, k * L);

  Tensor scores = mul_scalar(bmm(qh, permute(kh, {0, 2, 1})), scale);  // [NRh, L, kL]
  Tensor attn = softmax(scores, 2);
  if (attn_out) *attn_out = attn;
  Tensor ctx = bmm(attn, vh);  // [NRh, L, dh]

  Tensor merged = reshape(permute(reshape(ctx, {N * R, heads, L, dh}), {0, 2, 1, 3}),
                          {N, R, L, C});
  return add(x, merge_regions(merged, s, H, W));
}

// Spatial gate from pooled channels: F * sigmoid(conv7([max_c(F), avg_c(F)])).
inline Tensor fiem(const Tensor& f, const FBSMParams& p) {
  detail::check_rank(f, 4, "fiem");
  Tensor pooled = concat(1, {pool_channel(f, PoolMode::Max), pool_channel(f, PoolMode::Avg)});
  Tensor gate = sigmoid(p.fiem_conv().forward(pooled));
  return mul_gate(f, gate);
}

// The pre-sigmoid FIEM response, exported for attention visualization.
inline Tensor fiem_response(const Tensor& f, const FBSMParams& p) {
  detail::check_rank(f, 4, "fiem_response");
  Tensor pooled = concat(1, {pool_channel(f, PoolMode::Max), pool_channel(f, PoolMode::Avg)});
  return p.fiem_conv().forward(pooled);
}

inline Tensor fbsm_forward(const Tensor& x, const FBSMParams& p) { return fiem(brifm(x, p), p); }

}  // namespace rfw
