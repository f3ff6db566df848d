#pragma once

// Axis-aligned box geometry and the box-loss family: IoU, CIoU, the squared
// Gaussian-Wasserstein distance, the normalized Wasserstein loss, and their
// weighted combination. Every loss exists in two routes: plain double for
// evaluation tooling and a taped route for training. Both instantiate the
// same arithmetic template, so they agree bit for bit.

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "rfw/ops.hpp"

namespace rfw {

struct AABox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  void validate() const {
    if (!(std::isfinite(cx) && std::isfinite(cy) && std::isfinite(w) && std::isfinite(h)))
      throw std::invalid_argument("AABox: non-finite field");
    if (!(w > 0.0) || !(h > 0.0))
      throw std::invalid_argument("AABox: degenerate size " + std::to_string(w) + "x" +
                                  std::to_string(h));
  }
};

struct WCWConfig {
  double gamma = 0.5;
  double beta = 0.5;
  double nwd_constant = 12.8;

  void validate() const {
    if (!(gamma >= 0.0) || !(beta >= 0.0))
      throw std::invalid_argument("WCWConfig: negative weight");
    if (!(gamma + beta > 0.0))
      throw std::invalid_argument("WCWConfig: gamma + beta must be positive");
    if (!(nwd_constant > 0.0))
      throw std::invalid_argument("WCWConfig: nwd_constant must be positive");
  }
};

// Scalar box whose fields live on the autodiff tape.
struct TapedBox {
  Tensor cx, cy, w, h;
};

inline TapedBox to_taped(const AABox& b) {
  return {Tensor::full({1}, b.cx), Tensor::full({1}, b.cy), Tensor::full({1}, b.w),
          Tensor::full({1}, b.h)};
}

namespace detail {

// Arithmetic shims letting one loss implementation serve both routes.
template <typename T>
struct BoxMath;

template <>
struct BoxMath<double> {
  static double c(double v) { return v; }
  static double add(double a, double b) { return a + b; }
  static double sub(double a, double b) { return a - b; }
  static double mul(double a, double b) { return a * b; }
  static double div(double a, double b) { return a / b; }
  static double mn(double a, double b) { return std::min(a, b); }
  static double mx(double a, double b) { return std::max(a, b); }
  static double atan_(double a) { return std::atan(a); }
  static double exp_(double a) { return std::exp(a); }
  static double sqrt_(double a) { return std::sqrt(a); }
};

template <>
struct BoxMath<Tensor> {
  static Tensor c(double v) { return Tensor::full({1}, v); }
  static Tensor add(const Tensor& a, const Tensor& b) { return rfw::add(a, b); }
  static Tensor sub(const Tensor& a, const Tensor& b) { return rfw::sub(a, b); }
  static Tensor mul(const Tensor& a, const Tensor& b) { return rfw::mul(a, b); }
  static Tensor div(const Tensor& a, const Tensor& b) { return rfw::div(a, b); }
  static Tensor mn(const Tensor& a, const Tensor& b) { return rfw::minimum(a, b); }
  static Tensor mx(const Tensor& a, const Tensor& b) { return rfw::maximum(a, b); }
  static Tensor atan_(const Tensor& a) { return rfw::atan(a); }
  static Tensor exp_(const Tensor& a) { return rfw::exp(a); }
  static Tensor sqrt_(const Tensor& a) { return rfw::sqrt(a); }
};

template <typename T>
struct BoxT {
  T cx, cy, w, h;
};

inline BoxT<double> lift(const AABox& b) { return {b.cx, b.cy, b.w, b.h}; }
inline BoxT<Tensor> lift(const TapedBox& b) { return {b.cx, b.cy, b.w, b.h}; }

template <typename T>
T iou_core(const BoxT<T>& a, const BoxT<T>& b) {
  using M = BoxMath<T>;
  T half = M::c(0.5);
  T ahw = M::mul(a.w, half), ahh = M::mul(a.h, half);
  T bhw = M::mul(b.w, half), bhh = M::mul(b.h, half);
  T ix = M::mx(M::c(0.0), M::sub(M::mn(M::add(a.cx, ahw), M::add(b.cx, bhw)),
                                 M::mx(M::sub(a.cx, ahw), M::sub(b.cx, bhw))));
  T iy = M::mx(M::c(0.0), M::sub(M::mn(M::add(a.cy, ahh), M::add(b.cy, bhh)),
                                 M::mx(M::sub(a.cy, ahh), M::sub(b.cy, bhh))));
  T inter = M::mul(ix, iy);
  T uni = M::sub(M::add(M::mul(a.w, a.h), M::mul(b.w, b.h)), inter);
  return M::div(inter, uni);
}

// Loss terms: overlap, normalized center distance, and an aspect-ratio
// penalty whose denominator carries a tiny guard so identical boxes give an
// exact zero instead of 0/0.
template <typename T>
T ciou_core(const BoxT<T>& pred, const BoxT<T>& gt) {
  using M = BoxMath<T>;
  T i = iou_core(pred, gt);
  T dx = M::sub(pred.cx, gt.cx);
  T dy = M::sub(pred.cy, gt.cy);
  T d2 = M::add(M::mul(dx, dx), M::mul(dy, dy));

  T half = M::c(0.5);
  T phw = M::mul(pred.w, half), phh = M::mul(pred.h, half);
  T ghw = M::mul(gt.w, half), ghh = M::mul(gt.h, half);
  T cw = M::sub(M::mx(M::add(pred.cx, phw), M::add(gt.cx, ghw)),
                M::mn(M::sub(pred.cx, phw), M::sub(gt.cx, ghw)));
  T ch = M::sub(M::mx(M::add(pred.cy, phh), M::add(gt.cy, ghh)),
                M::mn(M::sub(pred.cy, phh), M::sub(gt.cy, ghh)));
  T c2 = M::add(M::mul(cw, cw), M::mul(ch, ch));

  T darg = M::sub(M::atan_(M::div(gt.w, gt.h)), M::atan_(M::div(pred.w, pred.h)));
  T v = M::mul(M::c(4.0 / (std::numbers::pi * std::numbers::pi)), M::mul(darg, darg));
  T one_minus_iou = M::sub(M::c(1.0), i);
  T vterm = M::div(M::mul(v, v), M::add(M::add(one_minus_iou, v), M::c(1e-12)));
  return M::add(M::add(one_minus_iou, M::div(d2, c2)), vterm);
}

template <typename T>
T wasserstein_sq_core(const BoxT<T>& a, const BoxT<T>& b) {
  using M = BoxMath<T>;
  T half = M::c(0.5);
  T dx = M::sub(a.cx, b.cx);
  T dy = M::sub(a.cy, b.cy);
  T dw = M::sub(M::mul(a.w, half), M::mul(b.w, half));
  T dh = M::sub(M::mul(a.h, half), M::mul(b.h, half));
  return M::add(M::add(M::mul(dx, dx), M::mul(dy, dy)),
                M::add(M::mul(dw, dw), M::mul(dh, dh)));
}

template <typename T>
T nwd_loss_core(const BoxT<T>& a, const BoxT<T>& b, double C) {
  using M = BoxMath<T>;
  T w2 = wasserstein_sq_core(a, b);
  return M::sub(M::c(1.0), M::exp_(M::div(M::sub(M::c(0.0), M::sqrt_(w2)), M::c(C))));
}

template <typename T>
T wcw_core(const BoxT<T>& pred, const BoxT<T>& gt, const WCWConfig& cfg) {
  using M = BoxMath<T>;
  return M::add(M::mul(M::c(cfg.gamma), ciou_core(pred, gt)),
                M::mul(M::c(cfg.beta), nwd_loss_core(pred, gt, cfg.nwd_constant)));
}

}  // namespace detail

// --- plain route -----------------------------------------------------------

inline double iou(const AABox& a, const AABox& b) {
  a.validate();
  b.validate();
  return detail::iou_core(detail::lift(a), detail::lift(b));
}

inline double ciou_loss(const AABox& pred, const AABox& gt) {
  pred.validate();
  gt.validate();
  return detail::ciou_core(detail::lift(pred), detail::lift(gt));
}

inline double wasserstein_sq(const AABox& a, const AABox& b) {
  a.validate();
  b.validate();
  return detail::wasserstein_sq_core(detail::lift(a), detail::lift(b));
}

inline double nwd_loss(const AABox& a, const AABox& b, double C) {
  a.validate();
  b.validate();
  if (!(C > 0.0)) throw std::invalid_argument("nwd_loss: constant must be positive");
  return detail::nwd_loss_core(detail::lift(a), detail::lift(b), C);
}

inline double wcw_loss(const AABox& pred, const AABox& gt, const WCWConfig& cfg) {
  cfg.validate();
  pred.validate();
  gt.validate();
  return detail::wcw_core(detail::lift(pred), detail::lift(gt), cfg);
}

// --- taped route ------------------------------------------------------------

inline Tensor iou_taped(const TapedBox& a, const TapedBox& b) {
  return detail::iou_core(detail::lift(a), detail::lift(b));
}

inline Tensor ciou_loss_taped(const TapedBox& pred, const TapedBox& gt) {
  return detail::ciou_core(detail::lift(pred), detail::lift(gt));
}

inline Tensor wasserstein_sq_taped(const TapedBox& a, const TapedBox& b) {
  return detail::wasserstein_sq_core(detail::lift(a), detail::lift(b));
}

inline Tensor nwd_loss_taped(const TapedBox& a, const TapedBox& b, double C) {
  if (!(C > 0.0)) throw std::invalid_argument("nwd_loss: constant must be positive");
  return detail::nwd_loss_core(detail::lift(a), detail::lift(b), C);
}

inline Tensor wcw_loss_taped(const TapedBox& pred, const TapedBox& gt, const WCWConfig& cfg) {
  cfg.validate();
  return detail::wcw_core(detail::lift(pred), detail::lift(gt), cfg);
}

// --- positional-sensitivity sweep -------------------------------------------

struct SensitivityRow {
  double shift_x = 0.0;
  double shift_y = 0.0;
  double iou = 0.0;
  double nwd_similarity = 0.0;  // the exp term, before the 1-minus
};

// Overlap versus smooth similarity for a square box of the given side as a
// second identical box slides away by each offset.
inline std::vector<SensitivityRow> sensitivity_curve(
    int box_size, const std::vector<std::pair<double, double>>& shifts, double C) {
  if (box_size <= 0) throw std::invalid_argument("sensitivity_curve: box_size must be positive");
  if (!(C > 0.0)) throw std::invalid_argument("sensitivity_curve: constant must be positive");
  const double side = static_cast<double>(box_size);
  AABox base{0.0, 0.0, side, side};
  std::vector<SensitivityRow> rows;
  rows.reserve(shifts.size());
  for (const auto& [dx, dy] : shifts) {
    AABox moved{dx, dy, side, side};
    SensitivityRow r;
    r.shift_x = dx;
    r.shift_y = dy;
    r.iou = iou(base, moved);
    r.nwd_similarity = std::exp(-std::sqrt(wasserstein_sq(base, moved)) / C);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace rfw
