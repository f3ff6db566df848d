#pragma once

// Detection-quality metrics: per-class average precision at a fixed IoU
// threshold, pooled across images, with precision/recall curves and mAP.
//
// Matching is the de facto standard: within each image, detections are taken
// in descending score order and each greedily claims the unmatched ground
// truth with the highest IoU (if that IoU clears the threshold). AP is the
// area under the exact all-point interpolated precision-recall staircase,
// not the 11-point approximation; the two differ in the third decimal.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "rfw/box.hpp"
#include "rfw/detector.hpp"

namespace rfw {

struct EvalGt {
  int class_id = 0;
  AABox box;
  bool difficult = false;
};

struct EvalScene {
  std::vector<Detection> dets;
  std::vector<EvalGt> gts;
};

struct EvalResult {
  std::vector<double> per_class_ap;
  std::vector<std::vector<double>> precision;  // per class, per pooled detection
  std::vector<std::vector<double>> recall;
  std::vector<std::int64_t> gt_count;
  double map = 0.0;  // mean AP over classes with at least one gt
};

namespace detail {

// Greedy per-image matching. Boxes arrive in evaluation order (already sorted
// by descending score); returns a true-positive flag per detection.
inline std::vector<char> match_greedy(const std::vector<AABox>& det_boxes,
                                      const std::vector<AABox>& gt_boxes, double iou_thr) {
  std::vector<char> matched(gt_boxes.size(), 0);
  std::vector<char> tp(det_boxes.size(), 0);
  for (std::size_t d = 0; d < det_boxes.size(); ++d) {
    double best_iou = 0.0;
    int best = -1;
    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
      if (matched[g]) continue;
      const double v = iou(det_boxes[d], gt_boxes[g]);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0 && best_iou >= iou_thr) {
      tp[d] = 1;
      matched[static_cast<std::size_t>(best)] = 1;
    }
  }
  return tp;
}

struct PrCurve {
  std::vector<double> precision;
  std::vector<double> recall;
  double ap = 0.0;
};

// Area under the all-point interpolated PR staircase. Flags are in
// descending-score order; n_gt of zero yields AP 0 with an empty curve.
inline PrCurve ap_from_flags(const std::vector<char>& tp, std::int64_t n_gt) {
  PrCurve out;
  out.precision.reserve(tp.size());
  out.recall.reserve(tp.size());
  std::int64_t cum = 0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    cum += tp[i];
    out.precision.push_back(static_cast<double>(cum) / static_cast<double>(i + 1));
    out.recall.push_back(n_gt > 0 ? static_cast<double>(cum) / static_cast<double>(n_gt) : 0.0);
  }
  if (n_gt <= 0) return out;
  double env = 0.0;
  for (std::size_t i = tp.size(); i-- > 0;) {
    env = std::max(env, out.precision[i]);
    const double r_prev = i > 0 ? out.recall[i - 1] : 0.0;
    out.ap += (out.recall[i] - r_prev) * env;
  }
  return out;
}

inline void check_iou_thr(double iou_thr) {
  if (!(iou_thr > 0.0 && iou_thr <= 1.0))
    throw std::invalid_argument("iou threshold must lie in (0, 1]");
}

}  // namespace detail

// Single-scene, class-blind AP: every detection competes for every gt box.
inline double compute_ap(std::vector<Detection> dets, const std::vector<AABox>& gts,
                         double iou_thr) {
  detail::check_iou_thr(iou_thr);
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<AABox> det_boxes;
  det_boxes.reserve(dets.size());
  for (const Detection& d : dets) det_boxes.push_back(d.box);
  const std::vector<char> tp = detail::match_greedy(det_boxes, gts, iou_thr);
  return detail::ap_from_flags(tp, static_cast<std::int64_t>(gts.size())).ap;
}

// Per-class AP pooled over scenes. Matching stays within each scene; the
// (score, tp) pairs are then pooled per class for one global PR curve.
// Difficult gts are ignored by the flag in the blunt sense: they are removed
// before matching, so detections covering them count as false positives.
inline EvalResult compute_map(const std::vector<EvalScene>& scenes, int num_classes,
                              double iou_thr, bool exclude_difficult = false) {
  if (num_classes <= 0) throw std::invalid_argument("compute_map: num_classes must be positive");
  detail::check_iou_thr(iou_thr);
  for (const EvalScene& s : scenes) {
    for (const Detection& d : s.dets)
      if (d.class_id < 0 || d.class_id >= num_classes)
        throw std::invalid_argument("compute_map: detection class id out of range");
    for (const EvalGt& g : s.gts)
      if (g.class_id < 0 || g.class_id >= num_classes)
        throw std::invalid_argument("compute_map: gt class id out of range");
  }

  EvalResult result;
  result.per_class_ap.resize(static_cast<std::size_t>(num_classes), 0.0);
  result.precision.resize(static_cast<std::size_t>(num_classes));
  result.recall.resize(static_cast<std::size_t>(num_classes));
  result.gt_count.resize(static_cast<std::size_t>(num_classes), 0);

  struct Pooled {
    double score;
    std::size_t scene, det;  // tiebreak keys for a deterministic global order
    char tp;
  };

  for (int c = 0; c < num_classes; ++c) {
    std::vector<Pooled> pooled;
    std::int64_t n_gt = 0;
    for (std::size_t si = 0; si < scenes.size(); ++si) {
      const EvalScene& scene = scenes[si];
      std::vector<std::size_t> order;
      for (std::size_t d = 0; d < scene.dets.size(); ++d)
        if (scene.dets[d].class_id == c) order.push_back(d);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scene.dets[a].score > scene.dets[b].score;
      });
      std::vector<AABox> det_boxes, gt_boxes;
      for (std::size_t d : order) det_boxes.push_back(scene.dets[d].box);
      for (const EvalGt& g : scene.gts)
        if (g.class_id == c && !(exclude_difficult && g.difficult)) gt_boxes.push_back(g.box);
      n_gt += static_cast<std::int64_t>(gt_boxes.size());
      const std::vector<char> tp = detail::match_greedy(det_boxes, gt_boxes, iou_thr);
      for (std::size_t k = 0; k < order.size(); ++k)
        pooled.push_back(Pooled{scene.dets[order[k]].score, si, order[k], tp[k]});
    }
    std::sort(pooled.begin(), pooled.end(), [](const Pooled& a, const Pooled& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.scene != b.scene) return a.scene < b.scene;
      return a.det < b.det;
    });
    std::vector<char> flags;
    flags.reserve(pooled.size());
    for (const Pooled& p : pooled) flags.push_back(p.tp);
    detail::PrCurve curve = detail::ap_from_flags(flags, n_gt);
    const std::size_t ci = static_cast<std::size_t>(c);
    result.per_class_ap[ci] = curve.ap;
    result.precision[ci] = std::move(curve.precision);
    result.recall[ci] = std::move(curve.recall);
    result.gt_count[ci] = n_gt;
  }

  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < num_classes; ++c)
    if (result.gt_count[static_cast<std::size_t>(c)] > 0) {
      sum += result.per_class_ap[static_cast<std::size_t>(c)];
      ++present;
    }
  result.map = present > 0 ? sum / present : 0.0;
  return result;
}

// Comma-separated per-class rows plus a summary row.
inline std::string eval_csv(const EvalResult& result, const std::vector<std::string>& class_names) {
  if (class_names.size() != result.per_class_ap.size())
    throw std::invalid_argument("eval_csv: class name count mismatch");
  std::string out = "class,ap,gts\n";
  char buf[64];
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    std::snprintf(buf, sizeof(buf), "%s,%.6f,%lld\n", class_names[c].c_str(),
                  result.per_class_ap[c], static_cast<long long>(result.gt_count[c]));
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "mAP,%.6f,\n", result.map);
  out += buf;
  return out;
}

}  // namespace rfw
