#pragma once

// Training machinery: momentum SGD with cosine decay, the detection loss,
// and a batch step that runs per-image tapes in parallel yet produces
// bit-identical results for any thread count (gradients merge in image
// order through per-image sinks).

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "rfw/data.hpp"
#include "rfw/detector.hpp"

namespace rfw {

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

class SGDMomentum {
 public:
  SGDMomentum(NamedTensors params, double lr, double momentum)
      : params_(std::move(params)), lr_(lr), momentum_(momentum) {
    if (!(lr > 0.0)) throw std::invalid_argument("SGDMomentum: lr must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0))
      throw std::invalid_argument("SGDMomentum: momentum must lie in [0, 1)");
    velocity_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i)
      velocity_[i].assign(static_cast<std::size_t>(params_[i].second.numel()), 0.0);
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& t = params_[i].second;
      if (!t.has_grad()) continue;
      const std::vector<double>& g = t.grad();
      std::vector<double>& v = velocity_[i];
      std::vector<double>& w = t.data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = momentum_ * v[j] + g[j];
        w[j] -= lr_ * v[j];
      }
    }
  }

  void set_lr(double lr) {
    if (!(lr > 0.0)) throw std::invalid_argument("SGDMomentum: lr must be positive");
    lr_ = lr;
  }
  double lr() const { return lr_; }
  const NamedTensors& params() const { return params_; }
  // Exposed for checkpointing; entries align with params() by index.
  std::vector<std::vector<double>>& velocities() { return velocity_; }

 private:
  NamedTensors params_;
  std::vector<std::vector<double>> velocity_;
  double lr_ = 0.001;
  double momentum_ = 0.9;
};

inline double cosine_lr(double base_lr, int step, int total_steps) {
  if (total_steps < 1) throw std::invalid_argument("cosine_lr: total_steps must be positive");
  const double t = std::clamp(static_cast<double>(step) / total_steps, 0.0, 1.0);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

struct TrainConfig {
  double lr = 0.001;
  double momentum = 0.9;
  double box_weight = 2.0;
  double focal_gamma = 0.0;  // 0 = plain binary cross-entropy
  WCWConfig wcw;
  int threads = 1;

  void validate() const {
    wcw.validate();
    if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be positive");
    if (!(box_weight >= 0.0)) throw std::invalid_argument("TrainConfig: negative box_weight");
    if (!(focal_gamma >= 0.0)) throw std::invalid_argument("TrainConfig: negative focal_gamma");
    if (threads < 1) throw std::invalid_argument("TrainConfig: threads must be positive");
  }
};

// Unnormalized per-image pieces; the batch step divides by global counts so
// the result matches a single fused tape.
struct ImageLossSums {
  Tensor cls_sum;      // summed binary cross-entropy over every cell and class
  Tensor box_sum;      // summed box loss over this image's positive cells
  int positives = 0;
  std::int64_t cls_terms = 0;
};

inline ImageLossSums image_loss_sums(const std::array<HeadOutput, 3>& outputs,
                                     const TargetAssignment& assign,
                                     const std::vector<GtBox>& gts, const WCWConfig& wcw,
                                     double focal_gamma = 0.0) {
  ImageLossSums out;
  Tensor cls_total, box_total;
  for (std::size_t si = 0; si < 3; ++si) {
    const Tensor& logits = outputs[si].cls;
    const ScaleAssignment& sa = assign[si];
    const int nc = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
    if (H != sa.cells || W != sa.cells)
      throw std::invalid_argument("image_loss_sums: head map " + std::to_string(H) + "x" +
                                  std::to_string(W) + " does not match assignment grid " +
                                  std::to_string(sa.cells));
    Tensor targets = Tensor::zeros({1, nc, H, W});
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const int gi = sa.gt_of_cell[static_cast<std::size_t>(i * W + j)];
        if (gi < 0) continue;
        const int c = gts[static_cast<std::size_t>(gi)].class_id;
        if (c < 0 || c >= nc)
          throw std::invalid_argument("image_loss_sums: class id " + std::to_string(c) +
                                      " outside [0, " + std::to_string(nc) + ")");
        targets.data()[static_cast<std::size_t>((c * H + i) * W + j)] = 1.0;
      }
    Tensor cls_terms_t = bce_with_logits(logits, targets);
    if (focal_gamma > 0.0) {
      // standard focal modulation: (1 - p_t)^gamma with p_t the probability
      // assigned to the true label; targets carry no gradient
      Tensor p = sigmoid(logits);
      Tensor miss = add(mul(p, add_scalar(neg(targets), 1.0)),
                        mul(add_scalar(neg(p), 1.0), targets));
      cls_terms_t = mul(pow_scalar(miss, focal_gamma), cls_terms_t);
    }
    Tensor cls_part = sum_all(cls_terms_t);
    cls_total = cls_total.defined() ? add(cls_total, cls_part) : cls_part;
    out.cls_terms += static_cast<std::int64_t>(nc) * H * W;

    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const int gi = sa.gt_of_cell[static_cast<std::size_t>(i * W + j)];
        if (gi < 0) continue;
        TapedBox pred = decode_box_taped(outputs[si].box, sa.stride, i, j);
        Tensor piece =
            wcw_loss_taped(pred, to_taped(gts[static_cast<std::size_t>(gi)].box), wcw);
        box_total = box_total.defined() ? add(box_total, piece) : piece;
        ++out.positives;
      }
  }
  out.cls_sum = cls_total;
  out.box_sum = box_total.defined() ? box_total : Tensor::zeros({1});
  return out;
}

// ---------------------------------------------------------------------------
// batch step
// ---------------------------------------------------------------------------

struct TrainStepResult {
  double cls_loss = 0.0;
  double box_loss = 0.0;
  double total = 0.0;
  int positives = 0;
};

namespace detail {

inline void accumulate_sink(const GradSink& sink) {
  for (const auto& [node, g] : sink.grads) {
    if (node->grad.empty()) node->grad.assign(g.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) node->grad[i] += g[i];
  }
}

}  // namespace detail

class Trainer {
 public:
  Trainer(RFWNet& model, const TrainConfig& cfg)
      : model_(model), cfg_(cfg), opt_(collect_params(model), cfg.lr, cfg.momentum) {
    cfg_.validate();
  }

  // One optimizer update from one batch. Forward/backward runs per image on
  // private tapes (optionally across threads); leaf gradients land in
  // per-image sinks and merge in image order, so any thread count yields the
  // same update bit for bit.
  TrainStepResult train_step(const std::vector<AnnotatedImage>& batch, int batch_id) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    const int n = static_cast<int>(batch.size());
    const int img = model_.config().image_size;

    for (const AnnotatedImage& ai : batch) {
      if (ai.image.ndim() != 3)
        throw std::invalid_argument("train_step: images must be [C,H,W]");
      for (double v : ai.image.data())
        if (!std::isfinite(v))
          throw NumericError("train_step: non-finite input image in batch " +
                             std::to_string(batch_id));
    }

    std::vector<TargetAssignment> assigns;
    assigns.reserve(batch.size());
    int npos = 0;
    for (const AnnotatedImage& ai : batch) {
      assigns.push_back(assign_targets(ai.gts, img));
      for (const ScaleAssignment& sa : assigns.back())
        for (int gi : sa.gt_of_cell) npos += gi >= 0 ? 1 : 0;
    }

    std::vector<GradSink> sinks(batch.size());
    std::vector<BnStatsSink> bn_sinks(batch.size());
    std::vector<double> cls_sums(batch.size(), 0.0), box_sums(batch.size(), 0.0);

    // both terms normalize by the batch's positive count (the background sea
    // would otherwise drown the handful of object cells); the normalizer must
    // be known before any backward and depends only on the fixed assignment
    const double cls_div = std::max(1, npos);
    const double box_div = std::max(1, npos);

    auto run_image = [&](std::size_t i) {
      const AnnotatedImage& ai = batch[i];
      const Tensor input =
          reshape(ai.image, {1, ai.image.dim(0), ai.image.dim(1), ai.image.dim(2)});
      std::array<HeadOutput, 3> out = model_.forward(input, true, &bn_sinks[i]);
      ImageLossSums sums = image_loss_sums(out, assigns[i], ai.gts, cfg_.wcw, cfg_.focal_gamma);
      cls_sums[i] = sums.cls_sum.item();
      box_sums[i] = sums.box_sum.item();
      Tensor loss = add(mul_scalar(sums.cls_sum, 1.0 / cls_div),
                        mul_scalar(sums.box_sum, cfg_.box_weight / box_div));
      loss.backward_into(sinks[i]);
    };

    const int workers = std::min(cfg_.threads, n);
    if (workers <= 1) {
      for (std::size_t i = 0; i < batch.size(); ++i) run_image(i);
    } else {
      std::vector<std::thread> pool;
      pool.reserve(static_cast<std::size_t>(workers));
      for (int w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
          for (std::size_t i = static_cast<std::size_t>(w); i < batch.size();
               i += static_cast<std::size_t>(workers))
            run_image(i);
        });
      for (std::thread& t : pool) t.join();
    }

    TrainStepResult r;
    r.positives = npos;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      r.cls_loss += cls_sums[i] / cls_div;
      r.box_loss += box_sums[i] / box_div;
    }
    r.total = r.cls_loss + cfg_.box_weight * r.box_loss;
    // abort before any state (grads, running stats, weights) changes
    auto check = [&](double v, const char* term) {
      if (!std::isfinite(v))
        throw NumericError("train_step: non-finite " + std::string(term) + " loss in batch " +
                           std::to_string(batch_id));
    };
    check(r.cls_loss, "cls");
    check(r.box_loss, "box");
    check(r.total, "total");

    opt_.zero_grad();
    for (std::size_t i = 0; i < batch.size(); ++i) {
      detail::accumulate_sink(sinks[i]);
      bn_sinks[i].apply();
    }
    opt_.step();
    return r;
  }

  SGDMomentum& optimizer() { return opt_; }
  const TrainConfig& config() const { return cfg_; }

  static NamedTensors collect_params(const RFWNet& model) {
    NamedTensors params;
    model.collect("model", &params, nullptr);
    return params;
  }

 private:
  RFWNet& model_;
  TrainConfig cfg_;
  SGDMomentum opt_;
};

}  // namespace rfw
