#pragma once

// Experiment harness behind the CLI: gradient-check suite, box-loss shift
// sensitivity sweep, synthetic training with resumable checkpoints, held-out
// evaluation, loss-mix ablation, attention-gate export, and parameter count.
//
// Every command takes an explicit config and output stream so tests can run
// it in-process; the binary in tools/ only parses flags and dispatches.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rfw/box.hpp"
#include "rfw/checkpoint.hpp"
#include "rfw/config.hpp"
#include "rfw/data.hpp"
#include "rfw/detector.hpp"
#include "rfw/eval.hpp"
#include "rfw/gradcheck.hpp"
#include "rfw/io.hpp"
#include "rfw/train.hpp"

namespace rfw {

// ---------------------------------------------------------------------------
// gradient-check suite
// ---------------------------------------------------------------------------

struct GradcheckReport {
  struct Row {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = false;
  };
  std::vector<Row> rows;
  double worst = 0.0;
  bool pass = false;
};

namespace detail {

inline Tensor random_leaf(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> d(static_cast<std::size_t>(numel_of(shape)));
  for (double& v : d) v = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(d), true);
}

}  // namespace detail

// Finite-difference validation of every differentiable layer family: raw
// tensor ops, the two-branch feature block, regional attention, the box loss
// family, and the assembled detector's training loss.
inline GradcheckReport run_gradcheck_suite(std::uint64_t seed, double tolerance) {
  GradcheckReport report;
  auto add_row = [&](const std::string& name, const GradCheckResult& r) {
    report.rows.push_back({name, r.max_rel_err, r.max_rel_err < tolerance});
  };
  Rng rng(seed);

  {
    Tensor a = detail::random_leaf(rng, {3, 4});
    Tensor b = detail::random_leaf(rng, {3, 4}, 0.5, 2.0);
    add_row("elementwise-arithmetic",
            gradcheck([&] { return sum_all(mul(add(a, b), sub(a, mul_scalar(b, 0.5)))); }, {a, b}));
  }
  {
    Tensor a = detail::random_leaf(rng, {2, 6});
    add_row("activation-chain",
            gradcheck([&] { return sum_all(silu(mul(sigmoid(a), exp(mul_scalar(a, 0.5))))); },
                      {a}));
  }
  {
    Tensor logits = detail::random_leaf(rng, {2, 8}, -2.0, 2.0);
    Tensor targets = Tensor::zeros({2, 8});
    targets.data()[1] = 1.0;
    targets.data()[11] = 1.0;
    add_row("focal-bce", gradcheck(
                             [&] {
                               Tensor p = sigmoid(logits);
                               Tensor miss = add(mul(p, add_scalar(neg(targets), 1.0)),
                                                 mul(add_scalar(neg(p), 1.0), targets));
                               return sum_all(
                                   mul(pow_scalar(miss, 2.0), bce_with_logits(logits, targets)));
                             },
                             {logits}));
  }
  {
    Tensor a = detail::random_leaf(rng, {3, 5});
    Tensor b = detail::random_leaf(rng, {5, 4});
    Tensor w = detail::random_leaf(rng, {3, 4});
    add_row("matmul-softmax",
            gradcheck([&] { return sum_all(mul(softmax(matmul(a, b), 1), w)); }, {a, b, w}));
  }
  {
    Tensor x = detail::random_leaf(rng, {1, 2, 6, 6});
    Tensor w = detail::random_leaf(rng, {3, 2, 3, 3});
    Tensor bias = detail::random_leaf(rng, {3});
    ConvSpec spec;
    spec.kernel_size = 3;
    spec.in_channels = 2;
    spec.out_channels = 3;
    spec.padding = 1;
    add_row("conv2d",
            gradcheck([&] { return sum_all(conv2d(x, w, bias, spec)); }, {x, w, bias}));
  }
  {
    Tensor x = detail::random_leaf(rng, {1, 2, 6, 6});
    add_row("maxpool",
            gradcheck([&] { return sum_all(maxpool2d(x, 3, 1, 1)); }, {x}));
  }
  {
    Rng prng(seed + 1);
    RFASBlockParams block(4, prng);
    Tensor x = detail::random_leaf(rng, {1, 4, 8, 8});
    add_row("rfas-block", gradcheck([&] { return sum_all(rfas_forward(x, block)); },
                                    {x, block.conv_3_1.weight(), block.selector_conv.weight(),
                                     block.fuse_conv.weight()}));
  }
  {
    Rng prng(seed + 2);
    FBSMConfig fc;
    fc.s = 2;
    fc.k = 2;
    fc.heads = 2;
    FBSMParams params(4, fc, prng);
    Tensor x = detail::random_leaf(rng, {1, 4, 8, 8});
    add_row("fbsm", gradcheck([&] { return sum_all(fbsm_forward(x, params)); },
                              {x, params.q_proj().weight(), params.v_proj().weight(),
                               params.fiem_conv().weight()}));
  }
  {
    // overlapping, non-coincident box pair as eight scalar leaves
    auto leaf1 = [&](double v) { return Tensor::from({1}, {v}, true); };
    TapedBox pred{leaf1(10.0 + rng.uniform(-1, 1)), leaf1(10.0 + rng.uniform(-1, 1)),
                  leaf1(8.0 + rng.uniform(0, 2)), leaf1(6.0 + rng.uniform(0, 2))};
    TapedBox gt{leaf1(11.0 + rng.uniform(-1, 1)), leaf1(9.0 + rng.uniform(-1, 1)),
                leaf1(7.0 + rng.uniform(0, 2)), leaf1(8.0 + rng.uniform(0, 2))};
    const std::vector<Tensor> leaves{pred.cx, pred.cy, pred.w, pred.h,
                                     gt.cx,   gt.cy,   gt.w,   gt.h};
    WCWConfig wcw;
    add_row("box-ciou", gradcheck([&] { return ciou_loss_taped(pred, gt); }, leaves));
    add_row("box-nwd",
            gradcheck([&] { return nwd_loss_taped(pred, gt, wcw.nwd_constant); }, leaves));
    add_row("box-wcw", gradcheck([&] { return wcw_loss_taped(pred, gt, wcw); }, leaves));
  }
  {
    // tiny assembled detector: 32px canvas, 4/2/1 grids, one positive cell
    DetectorConfig dc;
    dc.image_size = 32;
    dc.backbone.stage_channels = {4, 6, 8};
    dc.backbone.stage_depths = {1, 1, 1};
    dc.backbone.mlp_ratio = 1.0;
    dc.fbsm.s = 1;
    dc.fbsm.k = 1;
    dc.num_classes = 2;
    Rng prng(seed + 3);
    RFWNet model(dc, prng);
    Tensor image = detail::random_leaf(rng, {1, 3, 32, 32}, 0.0, 1.0);
    const std::vector<GtBox> gts{{0, AABox{16.0, 16.0, 10.0, 12.0}}};
    const TargetAssignment assign = assign_targets(gts, 32);
    WCWConfig wcw;
    auto loss = [&] {
      auto out = model.forward(image, true, nullptr);
      ImageLossSums sums = image_loss_sums(out, assign, gts, wcw);
      // 21 cells across the three grids, 2 classes each
      return add(mul_scalar(sums.cls_sum, 1.0 / 42.0),
                 mul_scalar(sums.box_sum, 2.0 / std::max(1, sums.positives)));
    };
    // a few small parameters from every stage keep the runtime bounded while
    // the backward pass still covers the whole graph
    NamedTensors params;
    model.collect("model", &params, nullptr);
    std::vector<Tensor> leaves{image};
    for (const char* group : {".backbone", ".sppf", ".fbsm", ".neck", ".head"}) {
      for (const auto& [name, t] : params)
        if (name.find(group) != std::string::npos && t.numel() <= 64) {
          leaves.push_back(t);
          break;
        }
    }
    add_row("detector-training-loss", gradcheck(loss, leaves, 1e-5, tolerance));
  }

  for (const GradcheckReport::Row& r : report.rows) report.worst = std::max(report.worst, r.max_rel_err);
  report.pass = true;
  for (const GradcheckReport::Row& r : report.rows) report.pass = report.pass && r.pass;
  return report;
}

inline int cmd_gradcheck(std::uint64_t seed, double tolerance, std::ostream& os) {
  if (!(tolerance >= 0.0)) throw std::invalid_argument("gradcheck: tolerance must be >= 0");
  const GradcheckReport report = run_gradcheck_suite(seed, tolerance);
  os << "gradcheck seed=" << seed << " tolerance=" << detail::fmt_double(tolerance) << "\n";
  for (const GradcheckReport::Row& r : report.rows) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "  %-24s max_rel_err=%-12.3e %s\n", r.name.c_str(),
                  r.max_rel_err, r.pass ? "PASS" : "FAIL");
    os << buf;
  }
  os << "RESULT: " << (report.pass ? "PASS" : "FAIL") << " (worst "
     << detail::fmt_double(report.worst) << ")\n";
  return report.pass ? 0 : 2;
}

// ---------------------------------------------------------------------------
// shift sensitivity sweep
// ---------------------------------------------------------------------------

inline int cmd_sensitivity(double box_size, double nwd_constant,
                           const std::filesystem::path& out_dir, std::ostream& os) {
  const int T = static_cast<int>(std::llround(std::ceil(box_size)));
  std::vector<std::pair<double, double>> shifts;
  for (int t = 0; t <= T; ++t) shifts.emplace_back(t, 0.0);  // axial
  for (int t = 1; t <= T; ++t) shifts.emplace_back(t, t);    // diagonal
  const std::vector<SensitivityRow> rows = sensitivity_curve(box_size, shifts, nwd_constant);

  std::filesystem::create_directories(out_dir);
  std::vector<std::vector<std::string>> cells;
  for (const SensitivityRow& r : rows)
    cells.push_back({detail::fmt_double(r.shift_x), detail::fmt_double(r.shift_y),
                     detail::fmt_double(r.iou), detail::fmt_double(r.nwd_similarity)});
  save_csv(out_dir / "sensitivity.csv", {"shift_x", "shift_y", "iou", "nwd_similarity"}, cells);

  PlotSeries iou_ax{"iou axial", {}}, nwd_ax{"nwd-similarity axial", {}};
  PlotSeries iou_di{"iou diagonal", {}}, nwd_di{"nwd-similarity diagonal", {}};
  for (const SensitivityRow& r : rows) {
    if (r.shift_y == 0.0) {
      iou_ax.points.emplace_back(r.shift_x, r.iou);
      nwd_ax.points.emplace_back(r.shift_x, r.nwd_similarity);
    } else {
      iou_di.points.emplace_back(r.shift_x, r.iou);
      nwd_di.points.emplace_back(r.shift_x, r.nwd_similarity);
    }
  }
  save_svg_plot(out_dir / "sensitivity.svg", "box shift sensitivity", "shift (px)", "similarity",
                {iou_ax, nwd_ax, iou_di, nwd_di});

  // companion table: doubling box size, shift, and the normalization constant
  // together must leave both columns unchanged
  const std::vector<SensitivityRow> base = rows;
  std::vector<std::pair<double, double>> shifts2;
  for (const auto& [sx, sy] : shifts) shifts2.emplace_back(2 * sx, 2 * sy);
  const std::vector<SensitivityRow> scaled =
      sensitivity_curve(2 * box_size, shifts2, 2 * nwd_constant);
  std::vector<std::vector<std::string>> sc;
  for (std::size_t i = 0; i < base.size(); ++i)
    sc.push_back({detail::fmt_double(base[i].shift_x), detail::fmt_double(base[i].shift_y),
                  detail::fmt_double(base[i].iou), detail::fmt_double(scaled[i].iou),
                  detail::fmt_double(base[i].nwd_similarity),
                  detail::fmt_double(scaled[i].nwd_similarity)});
  save_csv(out_dir / "scale_consistency.csv",
           {"shift_x", "shift_y", "iou", "iou_2x", "nwd_similarity", "nwd_similarity_2x"}, sc);

  os << "wrote " << (out_dir / "sensitivity.csv").string() << " (" << rows.size() << " rows)\n";
  os << "wrote " << (out_dir / "sensitivity.svg").string() << "\n";
  os << "wrote " << (out_dir / "scale_consistency.csv").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// data and evaluation plumbing
// ---------------------------------------------------------------------------

// Held-out and training splits. With a dataset directory configured the
// splits are persisted there on first use and always read back through the
// annotation parser, so the text round trip is part of every training run.
inline std::vector<AnnotatedImage> experiment_dataset(const RFWNetConfig& cfg, bool val) {
  SynthSpec spec;
  spec.image_size = cfg.model.image_size;
  const int n = val ? cfg.val_images : cfg.train_images;
  const std::uint64_t seed = val ? cfg.seed ^ 0x5a5a5a5a5a5a5a5aULL : cfg.seed;
  if (cfg.dataset_dir.empty()) return synth_generate(n, seed, spec);

  const std::filesystem::path split = std::filesystem::path(cfg.dataset_dir) / (val ? "val" : "train");
  if (!std::filesystem::is_directory(split))
    save_dataset(split, synth_generate(n, seed, spec), synth_class_names());
  return load_dataset(split, synth_class_names());
}

inline EvalResult evaluate_model(RFWNet& model, const std::vector<AnnotatedImage>& images,
                                 const RFWNetConfig& cfg) {
  NoGradGuard ng;
  std::vector<EvalScene> scenes;
  scenes.reserve(images.size());
  for (const AnnotatedImage& ai : images) {
    const Tensor input =
        reshape(ai.image, {1, ai.image.dim(0), ai.image.dim(1), ai.image.dim(2)});
    auto out = model.forward(input, false, nullptr);
    EvalScene scene;
    scene.dets = nms(decode_detections(out, cfg.eval_score_thr), cfg.eval_nms_thr);
    for (const GtBox& g : ai.gts) scene.gts.push_back(EvalGt{g.class_id, g.box, false});
    scenes.push_back(std::move(scene));
  }
  return compute_map(scenes, cfg.model.num_classes, cfg.eval_iou_thr);
}

// ---------------------------------------------------------------------------
// training with resumable checkpoints
// ---------------------------------------------------------------------------

namespace detail {

inline Checkpoint make_training_checkpoint(RFWNet& model, Trainer& trainer, Rng& shuffle_rng,
                                           int next_epoch, int step, const RFWNetConfig& cfg) {
  Checkpoint ckpt;
  NamedTensors buffers;
  model.collect("model", nullptr, &buffers);
  for (const auto& [name, t] : trainer.optimizer().params()) ckpt.tensors.emplace("param." + name, t);
  for (const auto& [name, t] : buffers) ckpt.tensors.emplace("buffer." + name, t);
  const NamedTensors& params = trainer.optimizer().params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::vector<double> v = trainer.optimizer().velocities()[i];
    const int n = static_cast<int>(v.size());
    ckpt.tensors.emplace("vel." + params[i].first, Tensor::from({n}, std::move(v)));
  }
  ckpt.strings["config"] = serialize_config(cfg);
  ckpt.strings["rng"] = shuffle_rng.serialize();
  ckpt.strings["epoch"] = std::to_string(next_epoch);
  ckpt.strings["step"] = std::to_string(step);
  return ckpt;
}

inline void copy_into(const Checkpoint& ckpt, const std::string& key, Tensor dst) {
  auto it = ckpt.tensors.find(key);
  if (it == ckpt.tensors.end())
    throw std::runtime_error("checkpoint: missing entry " + key);
  if (it->second.numel() != dst.numel())
    throw std::runtime_error("checkpoint: size mismatch for " + key);
  dst.data() = it->second.data();
}

// Loads parameters and batch-norm statistics only. Entry names and sizes must
// match the freshly built model; optimizer state and config are ignored, so a
// checkpoint trained elsewhere can be evaluated under different paths.
inline void restore_model_weights(const Checkpoint& ckpt, RFWNet& model) {
  NamedTensors params, buffers;
  model.collect("model", &params, &buffers);
  for (const auto& [name, t] : params) copy_into(ckpt, "param." + name, t);
  for (const auto& [name, t] : buffers) copy_into(ckpt, "buffer." + name, t);
}

// Resume compatibility ignores where artifacts live, but everything that
// shapes the model or the data stream must match exactly.
inline std::string training_signature(const RFWNetConfig& cfg) {
  RFWNetConfig c = cfg;
  c.checkpoint_path.clear();
  c.out_dir.clear();
  return serialize_config(c);
}

struct ResumeState {
  int next_epoch = 0;
  int step = 0;
};

inline ResumeState restore_training_checkpoint(const Checkpoint& ckpt, RFWNet& model,
                                               Trainer& trainer, Rng& shuffle_rng,
                                               const RFWNetConfig& cfg) {
  auto cfg_it = ckpt.strings.find("config");
  if (cfg_it == ckpt.strings.end()) throw std::runtime_error("checkpoint: missing config entry");
  if (training_signature(parse_config(cfg_it->second)) != training_signature(cfg))
    throw std::invalid_argument(
        "checkpoint: stored config differs from the requested one; refusing to resume");
  NamedTensors buffers;
  model.collect("model", nullptr, &buffers);
  for (const auto& [name, t] : trainer.optimizer().params()) copy_into(ckpt, "param." + name, t);
  for (const auto& [name, t] : buffers) copy_into(ckpt, "buffer." + name, t);
  const NamedTensors& params = trainer.optimizer().params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto it = ckpt.tensors.find("vel." + params[i].first);
    if (it == ckpt.tensors.end())
      throw std::runtime_error("checkpoint: missing entry vel." + params[i].first);
    trainer.optimizer().velocities()[i] = it->second.data();
  }
  shuffle_rng = Rng::deserialize(ckpt.strings.at("rng"));
  ResumeState rs;
  rs.next_epoch = static_cast<int>(std::stoll(ckpt.strings.at("epoch")));
  rs.step = static_cast<int>(std::stoll(ckpt.strings.at("step")));
  return rs;
}

}  // namespace detail

struct TrainOutcome {
  double val_map = 0.0;
  int epochs_run = 0;
  std::filesystem::path checkpoint;
};

// Epoch-granular training. With checkpoints enabled the run resumes from the
// configured checkpoint if it exists and saves after every epoch, so two
// short invocations reproduce one long run exactly. max_epochs_this_run caps
// how far a single invocation advances (-1 = run to completion); the cosine
// schedule always spans the configured total, so sliced runs match straight
// ones bit for bit.
inline TrainOutcome run_training(const RFWNetConfig& cfg, std::ostream& os,
                                 bool use_checkpoints, int max_epochs_this_run = -1) {
  cfg.validate();
  const std::filesystem::path out_dir(cfg.out_dir);
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path ckpt_path =
      cfg.checkpoint_path.empty() ? out_dir / "checkpoint.bin"
                                  : std::filesystem::path(cfg.checkpoint_path);

  const std::vector<AnnotatedImage> train_set = experiment_dataset(cfg, false);
  const std::vector<AnnotatedImage> val_set = experiment_dataset(cfg, true);

  Rng model_rng(cfg.seed);
  RFWNet model(cfg.model, model_rng);
  Trainer trainer(model, cfg.train);
  Rng shuffle_rng(cfg.seed ^ 0x517cc1b727220a95ULL);

  int start_epoch = 0, step = 0;
  if (use_checkpoints && std::filesystem::exists(ckpt_path)) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const detail::ResumeState rs =
        detail::restore_training_checkpoint(ckpt, model, trainer, shuffle_rng, cfg);
    start_epoch = rs.next_epoch;
    step = rs.step;
    os << "resuming from " << ckpt_path.string() << " at epoch " << start_epoch << "\n";
  }

  const int n = static_cast<int>(train_set.size());
  const int batches_per_epoch = (n + cfg.batch - 1) / cfg.batch;
  const int total_steps = cfg.epochs * batches_per_epoch;

  const std::filesystem::path log_path = out_dir / "train_log.csv";
  std::ofstream log;
  if (use_checkpoints && start_epoch > 0) {
    log.open(log_path, std::ios::app);
  } else {
    log.open(log_path, std::ios::trunc);
    log << "step,cls_loss,box_loss,total\n";
  }
  if (!log) throw std::runtime_error("cannot open training log: " + log_path.string());

  int stop_epoch = cfg.epochs;
  if (max_epochs_this_run >= 0)
    stop_epoch = std::min(stop_epoch, start_epoch + max_epochs_this_run);

  TrainOutcome outcome;
  outcome.checkpoint = ckpt_path;
  for (int epoch = start_epoch; epoch < stop_epoch; ++epoch) {
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, i))]);

    double epoch_total = 0.0;
    for (int b = 0; b < batches_per_epoch; ++b) {
      std::vector<AnnotatedImage> batch;
      for (int i = b * cfg.batch; i < std::min(n, (b + 1) * cfg.batch); ++i)
        batch.push_back(train_set[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
      trainer.optimizer().set_lr(cosine_lr(cfg.train.lr, step, total_steps));
      const TrainStepResult r = trainer.train_step(batch, step);
      log << step << ',' << detail::fmt_double(r.cls_loss) << ',' << detail::fmt_double(r.box_loss)
          << ',' << detail::fmt_double(r.total) << "\n";
      epoch_total += r.total;
      ++step;
    }
    const EvalResult ev = evaluate_model(model, val_set, cfg);
    outcome.val_map = ev.map;
    outcome.epochs_run = epoch + 1;
    char line[160];
    std::snprintf(line, sizeof(line), "epoch %d/%d  mean_loss=%.6f  val_mAP=%.6f\n", epoch + 1,
                  cfg.epochs, epoch_total / batches_per_epoch, ev.map);
    os << line;
    if (use_checkpoints)
      save_checkpoint(ckpt_path,
                      detail::make_training_checkpoint(model, trainer, shuffle_rng, epoch + 1,
                                                       step, cfg));
  }
  if (start_epoch >= cfg.epochs) {
    os << "nothing to do: checkpoint already at epoch " << start_epoch << "\n";
    const EvalResult ev = evaluate_model(model, val_set, cfg);
    outcome.val_map = ev.map;
    outcome.epochs_run = start_epoch;
  }
  return outcome;
}

inline int cmd_train(const RFWNetConfig& cfg, std::ostream& os) {
  const TrainOutcome outcome = run_training(cfg, os, true);
  char line[120];
  std::snprintf(line, sizeof(line), "final val_mAP=%.6f\n", outcome.val_map);
  os << line;
  os << "checkpoint: " << outcome.checkpoint.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

inline int cmd_eval(const RFWNetConfig& cfg, std::ostream& os) {
  cfg.validate();
  Rng model_rng(cfg.seed);
  RFWNet model(cfg.model, model_rng);

  if (!cfg.checkpoint_path.empty()) {
    const Checkpoint ckpt = load_checkpoint(cfg.checkpoint_path);
    detail::restore_model_weights(ckpt, model);
    os << "loaded " << cfg.checkpoint_path << "\n";
  } else {
    os << "no checkpoint configured: evaluating freshly initialized weights\n";
  }

  const std::vector<AnnotatedImage> val_set = experiment_dataset(cfg, true);
  const EvalResult result = evaluate_model(model, val_set, cfg);
  const std::string csv = eval_csv(result, synth_class_names());
  os << csv;
  std::filesystem::create_directories(cfg.out_dir);
  const std::filesystem::path path = std::filesystem::path(cfg.out_dir) / "eval.csv";
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << csv;
  os << "wrote " << path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// loss-mix ablation
// ---------------------------------------------------------------------------

inline const std::array<std::pair<double, double>, 7>& ablation_rows() {
  static const std::array<std::pair<double, double>, 7> rows{{{1.0, 0.0},
                                                              {0.9, 0.1},
                                                              {0.8, 0.2},
                                                              {0.7, 0.3},
                                                              {0.6, 0.4},
                                                              {0.5, 0.5},
                                                              {0.0, 1.0}}};
  return rows;
}

inline int cmd_ablate(const RFWNetConfig& cfg, std::ostream& os) {
  cfg.validate();
  std::vector<std::vector<std::string>> table;
  for (const auto& [gamma, beta] : ablation_rows()) {
    RFWNetConfig row_cfg = cfg;
    row_cfg.train.wcw.gamma = gamma;
    row_cfg.train.wcw.beta = beta;
    char head[80];
    std::snprintf(head, sizeof(head), "ablation gamma=%.1f beta=%.1f\n", gamma, beta);
    os << head;
    const TrainOutcome outcome = run_training(row_cfg, os, false);
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6f", outcome.val_map);
    table.push_back({csv_cell(gamma), csv_cell(beta), buf});
  }
  std::filesystem::create_directories(cfg.out_dir);
  const std::filesystem::path path = std::filesystem::path(cfg.out_dir) / "ablation.csv";
  save_csv(path, {"gamma", "beta", "map"}, table);
  os << "gamma,beta,map\n";
  for (const auto& row : table) os << row[0] << "," << row[1] << "," << row[2] << "\n";
  os << "wrote " << path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// attention-gate export
// ---------------------------------------------------------------------------

inline int cmd_export_attention(const RFWNetConfig& cfg, int image_index, std::ostream& os) {
  cfg.validate();
  if (!cfg.model.use_fbsm)
    throw std::invalid_argument("export-attention: model configured without the attention stage");
  Rng model_rng(cfg.seed);
  RFWNet model(cfg.model, model_rng);
  if (!cfg.checkpoint_path.empty()) {
    const Checkpoint ckpt = load_checkpoint(cfg.checkpoint_path);
    detail::restore_model_weights(ckpt, model);
  }

  const std::vector<AnnotatedImage> val_set = experiment_dataset(cfg, true);
  if (image_index < 0 || image_index >= static_cast<int>(val_set.size()))
    throw std::invalid_argument("export-attention: image index out of range (have " +
                                std::to_string(val_set.size()) + " images)");
  const AnnotatedImage& ai = val_set[static_cast<std::size_t>(image_index)];
  const Tensor input = reshape(ai.image, {1, ai.image.dim(0), ai.image.dim(1), ai.image.dim(2)});
  const Tensor gate = model.attention_gate(input);  // [1,1,g,g]

  const int S = cfg.model.image_size;
  const int g = gate.dim(2);
  const int factor = S / g;
  Tensor up = Tensor::zeros({S, S});
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x)
      up.data()[static_cast<std::size_t>(y * S + x)] =
          gate.at({0, 0, y / factor, x / factor});

  Tensor lum = Tensor::zeros({S, S});
  for (int p = 0; p < S * S; ++p)
    lum.data()[static_cast<std::size_t>(p)] =
        (ai.image.data()[static_cast<std::size_t>(p)] +
         ai.image.data()[static_cast<std::size_t>(S * S + p)] +
         ai.image.data()[static_cast<std::size_t>(2 * S * S + p)]) /
        3.0;

  std::filesystem::create_directories(cfg.out_dir);
  const std::filesystem::path gate_path =
      std::filesystem::path(cfg.out_dir) / ("attention_" + ai.id + ".pgm");
  const std::filesystem::path input_path =
      std::filesystem::path(cfg.out_dir) / ("input_" + ai.id + ".pgm");
  save_pgm(gate_path, up);
  save_pgm(input_path, lum);
  os << "wrote " << gate_path.string() << "\n";
  os << "wrote " << input_path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// parameter count
// ---------------------------------------------------------------------------

inline std::int64_t model_parameter_count(const RFWNetConfig& cfg) {
  Rng rng(cfg.seed);
  RFWNet model(cfg.model, rng);
  NamedTensors params;
  model.collect("model", &params, nullptr);
  return count_parameters(params);
}

inline int cmd_params(const RFWNetConfig& cfg, std::ostream& os) {
  cfg.validate();
  os << "trainable parameters: " << model_parameter_count(cfg) << "\n";
  return 0;
}

}  // namespace rfw
