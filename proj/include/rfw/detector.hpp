#pragma once

// Anchor-free detector assembly: receptive-field backbone, pyramid pooling
// and region-routing attention on the deepest map, a top-down/bottom-up neck,
// and per-scale heads, plus target assignment, the box codec, decoding, and
// non-maximum suppression.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rfw/box.hpp"
#include "rfw/fbsm.hpp"
#include "rfw/rfas.hpp"

namespace rfw {

inline constexpr std::array<int, 3> kStrides{8, 16, 32};

// Canonical box size owned by each scale; doubles as the exclusive upper
// bound of the size bucket the scale is responsible for.
inline double canonical_size(int stride) { return 2.0 * static_cast<double>(stride); }

struct Detection {
  int class_id = 0;
  double score = 0.0;
  AABox box;
};

struct HeadOutput {
  Tensor cls;  // [N, num_classes, H, W] logits
  Tensor box;  // [N, 4, H, W] (tx, ty, tw, th)
};

struct GtBox {
  int class_id = 0;
  AABox box;
};

// ---------------------------------------------------------------------------
// pyramid pooling
// ---------------------------------------------------------------------------

struct SPPFParams {
  Conv2dLayer reduce;  // 1x1, C -> C/2
  Conv2dLayer expand;  // 1x1, 2C -> C

  SPPFParams() = default;

  SPPFParams(int channels, Rng& rng) {
    if (channels < 2 || channels % 2 != 0)
      throw std::invalid_argument("SPPFParams: channels must be even, got " +
                                  std::to_string(channels));
    ConvSpec r;
    r.kernel_size = 1;
    r.in_channels = channels;
    r.out_channels = channels / 2;
    reduce = Conv2dLayer(r, rng);
    ConvSpec e;
    e.kernel_size = 1;
    e.in_channels = channels * 2;
    e.out_channels = channels;
    expand = Conv2dLayer(e, rng);
  }

  void collect(const std::string& prefix, NamedTensors* params, NamedTensors* buffers) const {
    reduce.collect(prefix + ".reduce", params, buffers);
    expand.collect(prefix + ".expand", params, buffers);
  }
};

inline Tensor sppf_forward(const Tensor& x, const SPPFParams& p) {
  Tensor r = silu(p.reduce.forward(x));
  Tensor p1 = maxpool2d(r, 5, 1, 2);
  Tensor p2 = maxpool2d(p1, 5, 1, 2);
  Tensor p3 = maxpool2d(p2, 5, 1, 2);
  return silu(p.expand.forward(concat(1, {r, p1, p2, p3})));
}

// ---------------------------------------------------------------------------
// neck: top-down fuse then bottom-up aggregation
// ---------------------------------------------------------------------------

struct NeckParams {
  Conv2dLayer fuse_t4;  // 1x1, w5+w4 -> w4
  Conv2dLayer fuse_n3;  // 1x1, w4+w3 -> w3
  Conv2dLayer down3;    // 3x3 s2,  w3 -> w3
  Conv2dLayer fuse_n4;  // 1x1, w3+w4 -> w4
  Conv2dLayer down4;    // 3x3 s2,  w4 -> w4
  Conv2dLayer fuse_n5;  // 1x1, w4+w5 -> w5

  NeckParams() = default;

  NeckParams(int w3, int w4, int w5, Rng& rng) {
    auto pointwise = [&](int ci, int co) {
      ConvSpec s;
      s.kernel_size = 1;
      s.in_channels = ci;
      s.out_channels = co;
      return Conv2dLayer(s, rng);
    };
    auto downsample = [&](int c) {
      ConvSpec s;
      s.kernel_size = 3;
      s.stride = 2;
      s.padding = 1;
      s.in_channels = c;
      s.out_channels = c;
      return Conv2dLayer(s, rng);
    };
    fuse_t4 = pointwise(w5 + w4, w4);
    fuse_n3 = pointwise(w4 + w3, w3);
    down3 = downsample(w3);
    fuse_n4 = pointwise(w3 + w4, w4);
    down4 = downsample(w4);
    fuse_n5 = pointwise(w4 + w5, w5);
  }

  void collect(const std::string& prefix, NamedTensors* params, NamedTensors* buffers) const {
    fuse_t4.collect(prefix + ".fuse_t4", params, buffers);
    fuse_n3.collect(prefix + ".fuse_n3", params, buffers);
    down3.collect(prefix + ".down3", params, buffers);
    fuse_n4.collect(prefix + ".fuse_n4", params, buffers);
    down4.collect(prefix + ".down4", params, buffers);
    fuse_n5.collect(prefix + ".fuse_n5", params, buffers);
  }
};

inline std::array<Tensor, 3> neck_forward(const Tensor& p3, const Tensor& p4, const Tensor& p5,
                                          const NeckParams& p) {
  Tensor t4 = silu(p.fuse_t4.forward(concat(1, {upsample_nearest2(p5), p4})));
  Tensor n3 = silu(p.fuse_n3.forward(concat(1, {upsample_nearest2(t4), p3})));
  Tensor n4 = silu(p.fuse_n4.forward(concat(1, {silu(p.down3.forward(n3)), t4})));
  Tensor n5 = silu(p.fuse_n5.forward(concat(1, {silu(p.down4.forward(n4)), p5})));
  return {n3, n4, n5};
}

// ---------------------------------------------------------------------------
// heads
// ---------------------------------------------------------------------------

struct HeadParams {
  Conv2dLayer stem;      // 3x3, width -> width
  Conv2dLayer cls_pred;  // 1x1, width -> num_classes
  Conv2dLayer box_pred;  // 1x1, width -> 4

  HeadParams() = default;

  HeadParams(int width, int num_classes, Rng& rng) {
    ConvSpec st;
    st.kernel_size = 3;
    st.padding = 1;
    st.in_channels = width;
    st.out_channels = width;
    stem = Conv2dLayer(st, rng);
    ConvSpec cs;
    cs.kernel_size = 1;
    cs.in_channels = width;
    cs.out_channels = num_classes;
    cls_pred = Conv2dLayer(cs, rng);
    // bias the class logits toward background so early training is stable
    std::fill(cls_pred.bias().data().begin(), cls_pred.bias().data().end(), -3.9);
    ConvSpec bs;
    bs.kernel_size = 1;
    bs.in_channels = width;
    bs.out_channels = 4;
    box_pred = Conv2dLayer(bs, rng);
    // zero regressands decode to the cell-centered canonical box
    std::fill(box_pred.bias().data().begin(), box_pred.bias().data().end(), 0.0);
  }

  HeadOutput forward(const Tensor& x) const {
    Tensor f = silu(stem.forward(x));
    return {cls_pred.forward(f), box_pred.forward(f)};
  }

  void collect(const std::string& prefix, NamedTensors* params, NamedTensors* buffers) const {
    stem.collect(prefix + ".stem", params, buffers);
    cls_pred.collect(prefix + ".cls", params, buffers);
    box_pred.collect(prefix + ".box", params, buffers);
  }
};

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

struct DetectorConfig {
  BackboneConfig backbone;
  FBSMConfig fbsm;
  int num_classes = 3;
  int image_size = 96;
  bool use_fbsm = true;

  DetectorConfig() {
    fbsm.s = 3;  // the deepest map is image_size/32 per side
  }

  void validate() const {
    backbone.validate();
    fbsm.validate();
    if (num_classes < 1) throw std::invalid_argument("DetectorConfig: num_classes must be positive");
    if (image_size < 32 || image_size % 32 != 0)
      throw std::invalid_argument("DetectorConfig: image_size must be a positive multiple of 32");
    if (image_size / 32 % fbsm.s != 0)
      throw std::invalid_argument("DetectorConfig: fbsm.s=" + std::to_string(fbsm.s) +
                                  " does not divide the deepest map size " +
                                  std::to_string(image_size / 32));
  }
};

class RFWNet {
 public:
  RFWNet() = default;

  RFWNet(const DetectorConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    backbone_ = RFASNet(cfg_.backbone, rng);
    const int w3 = cfg_.backbone.stage_channels[0];
    const int w4 = cfg_.backbone.stage_channels[1];
    const int w5 = cfg_.backbone.stage_channels[2];
    sppf_ = SPPFParams(w5, rng);
    if (cfg_.use_fbsm) fbsm_.emplace(w5, cfg_.fbsm, rng);
    neck_ = NeckParams(w3, w4, w5, rng);
    heads_[0] = HeadParams(w3, cfg_.num_classes, rng);
    heads_[1] = HeadParams(w4, cfg_.num_classes, rng);
    heads_[2] = HeadParams(w5, cfg_.num_classes, rng);
  }

  std::array<HeadOutput, 3> forward(const Tensor& image, bool training,
                                    BnStatsSink* sink = nullptr) {
    std::array<Tensor, 3> c = backbone_.forward(image, training, sink);
    Tensor top = sppf_forward(c[2], sppf_);
    // the attention stage carries a 0.5 average gate at its identity setting,
    // so the ablated variant halves the map to stay scale-comparable
    top = fbsm_ ? fbsm_forward(top, *fbsm_) : mul_scalar(top, 0.5);
    std::array<Tensor, 3> n = neck_forward(c[0], c[1], top, neck_);
    return {heads_[0].forward(n[0]), heads_[1].forward(n[1]), heads_[2].forward(n[2])};
  }

  void collect(const std::string& prefix, NamedTensors* params, NamedTensors* buffers) const {
    backbone_.collect(prefix + ".backbone", params, buffers);
    sppf_.collect(prefix + ".sppf", params, buffers);
    if (fbsm_) fbsm_->collect(prefix + ".fbsm", params, buffers);
    neck_.collect(prefix + ".neck", params, buffers);
    heads_[0].collect(prefix + ".head8", params, buffers);
    heads_[1].collect(prefix + ".head16", params, buffers);
    heads_[2].collect(prefix + ".head32", params, buffers);
  }

  // Spatial gate of the attention stage at the deepest scale, recomputed in
  // inference mode for visualization exports. Values lie strictly in (0, 1).
  Tensor attention_gate(const Tensor& image) {
    if (!fbsm_)
      throw std::invalid_argument("attention_gate: model built without the attention stage");
    NoGradGuard ng;
    std::array<Tensor, 3> c = backbone_.forward(image, false, nullptr);
    Tensor top = sppf_forward(c[2], sppf_);
    return sigmoid(fiem_response(brifm(top, *fbsm_), *fbsm_));
  }

  const DetectorConfig& config() const { return cfg_; }
  FBSMParams* fbsm() { return fbsm_ ? &*fbsm_ : nullptr; }

 private:
  DetectorConfig cfg_;
  RFASNet backbone_;
  SPPFParams sppf_;
  std::optional<FBSMParams> fbsm_;
  NeckParams neck_;
  std::array<HeadParams, 3> heads_;
};

// ---------------------------------------------------------------------------
// target assignment
// ---------------------------------------------------------------------------

struct ScaleAssignment {
  int stride = 0;
  int cells = 0;                // cells per side
  std::vector<int> gt_of_cell;  // cells*cells entries, -1 = background
};

using TargetAssignment = std::array<ScaleAssignment, 3>;

// Scale whose size bucket holds the box: smallest stride whose canonical
// size strictly exceeds sqrt(w*h); boxes at or beyond the largest canonical
// size stay on the coarsest scale.
inline int assign_scale(const AABox& b) {
  const double size = std::sqrt(b.w * b.h);
  for (int si = 0; si < 2; ++si)
    if (size < canonical_size(kStrides[static_cast<std::size_t>(si)])) return si;
  return 2;
}

inline TargetAssignment assign_targets(const std::vector<GtBox>& gts, int image_size) {
  if (image_size < 32 || image_size % 32 != 0)
    throw std::invalid_argument("assign_targets: image_size must be a positive multiple of 32");
  TargetAssignment out;
  for (std::size_t si = 0; si < 3; ++si) {
    out[si].stride = kStrides[si];
    out[si].cells = image_size / kStrides[si];
    out[si].gt_of_cell.assign(static_cast<std::size_t>(out[si].cells * out[si].cells), -1);
  }
  for (std::size_t gi = 0; gi < gts.size(); ++gi) {
    const AABox& b = gts[gi].box;
    b.validate();
    const double img = static_cast<double>(image_size);
    if (b.cx - b.w / 2 < 0.0 || b.cy - b.h / 2 < 0.0 || b.cx + b.w / 2 > img ||
        b.cy + b.h / 2 > img)
      throw std::invalid_argument("assign_targets: box " + std::to_string(gi) +
                                  " extends outside the image");
    const int si = assign_scale(b);
    ScaleAssignment& sa = out[static_cast<std::size_t>(si)];
    const double s = static_cast<double>(sa.stride);
    const int cj = std::min(sa.cells - 1, static_cast<int>(b.cx / s));
    const int ci = std::min(sa.cells - 1, static_cast<int>(b.cy / s));
    const std::size_t cell = static_cast<std::size_t>(ci * sa.cells + cj);
    const int prev = sa.gt_of_cell[cell];
    if (prev < 0) {
      sa.gt_of_cell[cell] = static_cast<int>(gi);
      continue;
    }
    // contested cell: the box overlapping the cell's canonical prior more
    // wins; equal overlap keeps the earlier box
    AABox prior{(cj + 0.5) * s, (ci + 0.5) * s, canonical_size(sa.stride),
                canonical_size(sa.stride)};
    if (iou(b, prior) > iou(gts[static_cast<std::size_t>(prev)].box, prior))
      sa.gt_of_cell[cell] = static_cast<int>(gi);
  }
  return out;
}

// ---------------------------------------------------------------------------
// box codec
// ---------------------------------------------------------------------------

struct EncodedBox {
  double tx = 0.0, ty = 0.0, tw = 0.0, th = 0.0;
};

inline EncodedBox encode_box(const AABox& b, int stride, int ci, int cj) {
  const double s = static_cast<double>(stride);
  const double canon = canonical_size(stride);
  return {b.cx / s - (cj + 0.5), b.cy / s - (ci + 0.5), std::log(b.w / canon),
          std::log(b.h / canon)};
}

inline AABox decode_box(const EncodedBox& e, int stride, int ci, int cj) {
  const double s = static_cast<double>(stride);
  const double canon = canonical_size(stride);
  return {(cj + 0.5 + e.tx) * s, (ci + 0.5 + e.ty) * s, canon * std::exp(e.tw),
          canon * std::exp(e.th)};
}

// Taped decode of the regressands at one cell, for the training loss.
inline TapedBox decode_box_taped(const Tensor& box_map, int stride, int ci, int cj) {
  const int H = box_map.dim(2), W = box_map.dim(3);
  auto pick = [&](int c) {
    return take(box_map, {static_cast<std::int64_t>((c * H + ci) * W + cj)});
  };
  const double s = static_cast<double>(stride);
  const double canon = canonical_size(stride);
  return {mul_scalar(add_scalar(pick(0), cj + 0.5), s), mul_scalar(add_scalar(pick(1), ci + 0.5), s),
          mul_scalar(exp(pick(2)), canon), mul_scalar(exp(pick(3)), canon)};
}

// ---------------------------------------------------------------------------
// decode + suppression
// ---------------------------------------------------------------------------

inline std::vector<Detection> decode_detections(const std::array<HeadOutput, 3>& outputs,
                                                double score_threshold) {
  if (!(score_threshold >= 0.0 && score_threshold <= 1.0))
    throw std::invalid_argument("decode_detections: threshold must lie in [0, 1]");
  std::vector<Detection> dets;
  for (std::size_t si = 0; si < 3; ++si) {
    const Tensor& cls = outputs[si].cls;
    const Tensor& box = outputs[si].box;
    const int nc = cls.dim(1), H = cls.dim(2), W = cls.dim(3);
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        int best = 0;
        double best_logit = cls.at({0, 0, i, j});
        for (int c = 1; c < nc; ++c) {
          const double l = cls.at({0, c, i, j});
          if (l > best_logit) {
            best_logit = l;
            best = c;
          }
        }
        const double score = 1.0 / (1.0 + std::exp(-best_logit));
        if (score < score_threshold) continue;
        EncodedBox e{box.at({0, 0, i, j}), box.at({0, 1, i, j}), box.at({0, 2, i, j}),
                     box.at({0, 3, i, j})};
        dets.push_back({best, score, decode_box(e, kStrides[si], i, j)});
      }
  }
  return dets;
}

// Greedy per-class suppression: highest score first, earlier index wins ties.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold) {
  if (!(iou_threshold > 0.0) || !(iou_threshold < 1.0))
    throw std::invalid_argument("nms: iou_threshold must lie in (0, 1)");
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].score > dets[b].score;
  });
  std::vector<bool> removed(dets.size(), false);
  std::vector<Detection> kept;
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (removed[i]) continue;
    kept.push_back(dets[i]);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (removed[j] || dets[j].class_id != dets[i].class_id) continue;
      if (iou(dets[i].box, dets[j].box) > iou_threshold) removed[j] = true;
    }
  }
  return kept;
}

}  // namespace rfw
