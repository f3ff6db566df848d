#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "rfw/tensor.hpp"

namespace rfw {

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

inline void check_rank(const Tensor& a, int rank, const char* op) {
  if (a.ndim() != rank)
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got " + shape_str(a.shape()));
}

inline int normalize_axis(int axis, int rank, const char* op) {
  int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank)
    throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) +
                                " out of range for rank " + std::to_string(rank));
  return a;
}

// outer/len/inner decomposition of a shape around one axis
struct AxisSplit {
  std::int64_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
  r.len = s[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<double> out(a.data());
  const double* pb = b.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return detail::make_op(a.shape(), std::move(out), {a, b}, [an, bn](const std::vector<double>& g) {
    if (double* ga = an->grad_buf())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (double* gb = bn->grad_buf())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<double> out(a.data());
  const double* pb = b.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return detail::make_op(a.shape(), std::move(out), {a, b}, [an, bn](const std::vector<double>& g) {
    if (double* ga = an->grad_buf())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (double* gb = bn->grad_buf())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<double> out(a.data());
  const double* pb = b.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return detail::make_op(a.shape(), std::move(out), {a, b}, [an, bn](const std::vector<double>& g) {
    if (double* ga = an->grad_buf()) {
      const double* pb2 = bn->data.data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb2[i];
    }
    if (double* gb = bn->grad_buf()) {
      const double* pa2 = an->data.data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa2[i];
    }
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "div");
  std::vector<double> out(a.data());
  const double* pb = b.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= pb[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return detail::make_op(a.shape(), std::move(out), {a, b}, [an, bn](const std::vector<double>& g) {
    const double* pa2 = an->data.data();
    const double* pb2 = bn->data.data();
    if (double* ga = an->grad_buf())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / pb2[i];
    if (double* gb = bn->grad_buf())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * pa2[i] / (pb2[i] * pb2[i]);
  });
}

// ties route gradient to the first argument
inline Tensor minimum(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "minimum");
  std::vector<double> out(a.numel());
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] <= pb[i] ? pa[i] : pb[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return detail::make_op(a.shape(), std::move(out), {a, b}, [an, bn](const std::vector<double>& g) {
    const double* pa2 = an->data.data();
    const double* pb2 = bn->data.data();
    double* ga = an->grad_buf();
    double* gb = bn->grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (pa2[i] <= pb2[i]) {
        if (ga) ga[i] += g[i];
      } else if (gb) {
        gb[i] += g[i];
      }
    }
  });
}

inline Tensor maximum(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "maximum");
  std::vector<double> out(a.numel());
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] >= pb[i] ? pa[i] : pb[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return detail::make_op(a.shape(), std::move(out), {a, b}, [an, bn](const std::vector<double>& g) {
    const double* pa2 = an->data.data();
    const double* pb2 = bn->data.data();
    double* ga = an->grad_buf();
    double* gb = bn->grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (pa2[i] >= pb2[i]) {
        if (ga) ga[i] += g[i];
      } else if (gb) {
        gb[i] += g[i];
      }
    }
  });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.data());
  for (double& v : out) v += s;
  auto an = a.node_ptr();
  return detail::make_op(a.shape(), std::move(out), {a}, [an](const std::vector<double>& g) {
    if (double* ga = an->grad_buf())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

inline Tensor mul_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.data());
  for (double& v : out) v *= s;
  auto an = a.node_ptr();
  return detail::make_op(a.shape(), std::move(out), {a}, [an, s](const std::vector<double>& g) {
    if (double* ga = an->grad_buf())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

inline Tensor pow_scalar(const Tensor& a, double p) {
  std::vector<double> out(a.numel());
  const double* pa = a.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::pow(pa[i], p);
  auto an = a.node_ptr();
  return detail::make_op(a.shape(), std::move(out), {a}, [an, p](const std::vector<double>& g) {
    if (double* ga = an->grad_buf()) {
      const double* pa2 = an->data.data();
      for (std::size_t i = 0; i < g.size(); ++i)
        ga[i] += g[i] * p * std::pow(pa2[i], p - 1.0);
    }
  });
}

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(a.numel());
  const double* pa = a.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(pa[i]);
  auto an = a.node_ptr();
  std::vector<double> saved(out);
  return detail::make_op(a.shape(), std::move(out), {a},
                         [an, saved = std::move(saved)](const std::vector<double>& g) {
                           if (double* ga = an->grad_buf())
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * saved[i];
                         });
}

inline Tensor log(const Tensor& a) {
  std::vector<double> out(a.numel());
  const double* pa = a.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(pa[i]);
  auto an = a.node_ptr();
  return detail::make_op(a.shape(), std::move(out), {a}, [an](const std::vector<double>& g) {
    if (double* ga = an->grad_buf()) {
      const double* pa2 = an->data.data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / pa2[i];
    }
  });
}

inline Tensor sqrt(const Tensor& a) {
  std::vector<double> out(a.numel());
  const double* pa = a.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(pa[i]);
  auto an = a.node_ptr();
  std::vector<double> saved(out);
  return detail::make_op(a.shape(), std::move(out), {a},
                         [an, saved = std::move(saved)](const std::vector<double>& g) {
                           if (double* ga = an->grad_buf())
                             for (std::size_t i = 0; i < g.size(); ++i)
                               ga[i] += g[i] * 0.5 / saved[i];
                         });
}

inline Tensor atan(const Tensor& a) {
  std::vector<double> out(a.numel());
  const double* pa = a.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::atan(pa[i]);
  auto an = a.node_ptr();
  return detail::make_op(a.shape(), std::move(out), {a}, [an](const std::vector<double>& g) {
    if (double* ga = an->grad_buf()) {
      const double* pa2 = an->data.data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / (1.0 + pa2[i] * pa2[i]);
    }
  });
}

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.numel());
  const double* pa = a.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(pa[i]);
  auto an = a.node_ptr();
  std::vector<double> saved(out);
  return detail::make_op(a.shape(), std::move(out), {a},
                         [an, saved = std::move(saved)](const std::vector<double>& g) {
                           if (double* ga = an->grad_buf())
                             for (std::size_t i = 0; i < g.size(); ++i)
                               ga[i] += g[i] * saved[i] * (1.0 - saved[i]);
                         });
}

// x * sigmoid(x)
inline Tensor silu(const Tensor& a) {
  std::vector<double> out(a.numel());
  const double* pa = a.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * sigmoid_scalar(pa[i]);
  auto an = a.node_ptr();
  return detail::make_op(a.shape(), std::move(out), {a}, [an](const std::vector<double>& g) {
    if (double* ga = an->grad_buf()) {
      const double* pa2 = an->data.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double s = sigmoid_scalar(pa2[i]);
        ga[i] += g[i] * s * (1.0 + pa2[i] * (1.0 - s));
      }
    }
  });
}

// Numerically stable per-element binary cross-entropy on logits:
//   max(x,0) - x*z + log(1 + exp(-|x|))
inline Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  detail::check_same_shape(logits, targets, "bce_with_logits");
  std::vector<double> out(logits.numel());
  const double* px = logits.ptr();
  const double* pz = targets.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = px[i];
    out[i] = std::max(x, 0.0) - x * pz[i] + std::log1p(std::exp(-std::abs(x)));
  }
  auto xn = logits.node_ptr(), zn = targets.node_ptr();
  return detail::make_op(logits.shape(), std::move(out), {logits, targets},
                         [xn, zn](const std::vector<double>& g) {
                           const double* px2 = xn->data.data();
                           const double* pz2 = zn->data.data();
                           if (double* gx = xn->grad_buf())
                             for (std::size_t i = 0; i < g.size(); ++i)
                               gx[i] += g[i] * (sigmoid_scalar(px2[i]) - pz2[i]);
                           if (double* gz = zn->grad_buf())
                             for (std::size_t i = 0; i < g.size(); ++i) gz[i] -= g[i] * px2[i];
                         });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator/(const Tensor& a, double s) { return mul_scalar(a, 1.0 / s); }
inline Tensor operator+(double s, const Tensor& a) { return add_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator-(double s, const Tensor& a) { return add_scalar(neg(a), s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
  double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
  auto an = a.node_ptr();
  return detail::make_op({1}, {s}, {a}, [an](const std::vector<double>& g) {
    if (double* ga = an->grad_buf())
      for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += g[0];
  });
}

inline Tensor mean_all(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.numel());
  double s = std::accumulate(a.data().begin(), a.data().end(), 0.0) * inv;
  auto an = a.node_ptr();
  return detail::make_op({1}, {s}, {a}, [an, inv](const std::vector<double>& g) {
    if (double* ga = an->grad_buf())
      for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += g[0] * inv;
  });
}

// Mean over one axis; the axis is dropped from the output shape.
inline Tensor mean_axis(const Tensor& a, int axis) {
  const int ax = detail::normalize_axis(axis, a.ndim(), "mean_axis");
  const auto sp = detail::split_axis(a.shape(), ax);
  Shape out_shape;
  for (int i = 0; i < a.ndim(); ++i)
    if (i != ax) out_shape.push_back(a.shape()[static_cast<std::size_t>(i)]);
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> out(static_cast<std::size_t>(sp.outer * sp.inner), 0.0);
  const double* pa = a.ptr();
  const double inv = 1.0 / static_cast<double>(sp.len);
  for (std::int64_t o = 0; o < sp.outer; ++o)
    for (std::int64_t l = 0; l < sp.len; ++l) {
      const double* src = pa + (o * sp.len + l) * sp.inner;
      double* dst = out.data() + o * sp.inner;
      for (std::int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i] * inv;
    }
  auto an = a.node_ptr();
  return detail::make_op(std::move(out_shape), std::move(out), {a},
                         [an, sp, inv](const std::vector<double>& g) {
                           if (double* ga = an->grad_buf()) {
                             for (std::int64_t o = 0; o < sp.outer; ++o)
                               for (std::int64_t l = 0; l < sp.len; ++l) {
                                 double* dst = ga + (o * sp.len + l) * sp.inner;
                                 const double* src = g.data() + o * sp.inner;
                                 for (std::int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i] * inv;
                               }
                           }
                         });
}

// Per-channel mean over batch and spatial axes: [N,C,H,W] -> [C]
inline Tensor mean_nhw(const Tensor& a) {
  detail::check_rank(a, 4, "mean_nhw");
  const int N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  const std::int64_t hw = static_cast<std::int64_t>(H) * W;
  const double inv = 1.0 / (static_cast<double>(N) * hw);
  std::vector<double> out(static_cast<std::size_t>(C), 0.0);
  const double* pa = a.ptr();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* src = pa + (static_cast<std::int64_t>(n) * C + c) * hw;
      double s = 0.0;
      for (std::int64_t i = 0; i < hw; ++i) s += src[i];
      out[static_cast<std::size_t>(c)] += s * inv;
    }
  auto an = a.node_ptr();
  return detail::make_op({C}, std::move(out), {a},
                         [an, N, C, hw, inv](const std::vector<double>& g) {
                           if (double* ga = an->grad_buf()) {
                             for (int n = 0; n < N; ++n)
                               for (int c = 0; c < C; ++c) {
                                 double* dst = ga + (static_cast<std::int64_t>(n) * C + c) * hw;
                                 const double gv = g[static_cast<std::size_t>(c)] * inv;
                                 for (std::int64_t i = 0; i < hw; ++i) dst[i] += gv;
                               }
                           }
                         });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel())
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                shape_str(shape));
  std::vector<double> out(a.data());
  auto an = a.node_ptr();
  return detail::make_op(std::move(shape), std::move(out), {a},
                         [an](const std::vector<double>& g) {
                           if (double* ga = an->grad_buf())
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                         });
}

inline Tensor permute(const Tensor& a, const std::vector<int>& perm) {
  const int rank = a.ndim();
  if (static_cast<int>(perm.size()) != rank)
    throw std::invalid_argument("permute: perm rank mismatch");
  std::vector<bool> seen(static_cast<std::size_t>(rank), false);
  for (int p : perm) {
    if (p < 0 || p >= rank || seen[static_cast<std::size_t>(p)])
      throw std::invalid_argument("permute: invalid permutation");
    seen[static_cast<std::size_t>(p)] = true;
  }
  const Shape& in_shape = a.shape();
  Shape out_shape(static_cast<std::size_t>(rank));
  for (int i = 0; i < rank; ++i)
    out_shape[static_cast<std::size_t>(i)] = in_shape[static_cast<std::size_t>(perm[i])];

  std::vector<std::int64_t> in_strides(static_cast<std::size_t>(rank), 1);
  for (int i = rank - 2; i >= 0; --i)
    in_strides[static_cast<std::size_t>(i)] =
        in_strides[static_cast<std::size_t>(i + 1)] * in_shape[static_cast<std::size_t>(i + 1)];

  // source index mapping for every output element, reused by the backward
  auto mapping = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(a.numel()));
  std::vector<double> out(static_cast<std::size_t>(a.numel()));
  std::vector<int> idx(static_cast<std::size_t>(rank), 0);
  const double* pa = a.ptr();
  for (std::int64_t flat = 0; flat < a.numel(); ++flat) {
    std::int64_t src = 0;
    for (int i = 0; i < rank; ++i)
      src += static_cast<std::int64_t>(idx[static_cast<std::size_t>(i)]) *
             in_strides[static_cast<std::size_t>(perm[i])];
    (*mapping)[static_cast<std::size_t>(flat)] = src;
    out[static_cast<std::size_t>(flat)] = pa[src];
    for (int i = rank - 1; i >= 0; --i) {
      if (++idx[static_cast<std::size_t>(i)] < out_shape[static_cast<std::size_t>(i)]) break;
      idx[static_cast<std::size_t>(i)] = 0;
    }
  }
  auto an = a.node_ptr();
  return detail::make_op(std::move(out_shape), std::move(out), {a},
                         [an, mapping](const std::vector<double>& g) {
                           if (double* ga = an->grad_buf())
                             for (std::size_t i = 0; i < g.size(); ++i)
                               ga[(*mapping)[i]] += g[i];
                         });
}

inline Tensor concat(int axis, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const int rank = parts[0].ndim();
  const int ax = detail::normalize_axis(axis, rank, "concat");
  Shape out_shape = parts[0].shape();
  std::int64_t total = 0;
  for (const Tensor& t : parts) {
    if (t.ndim() != rank) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < rank; ++i)
      if (i != ax && t.shape()[static_cast<std::size_t>(i)] != out_shape[static_cast<std::size_t>(i)])
        throw std::invalid_argument("concat: shape mismatch at axis " + std::to_string(i) + ": " +
                                    shape_str(t.shape()) + " vs " + shape_str(parts[0].shape()));
    total += t.dim(ax);
  }
  out_shape[static_cast<std::size_t>(ax)] = static_cast<int>(total);
  const auto sp = detail::split_axis(out_shape, ax);
  std::vector<double> out(static_cast<std::size_t>(sp.outer * total * sp.inner));
  std::int64_t offset = 0;
  for (const Tensor& t : parts) {
    const std::int64_t len = t.dim(ax);
    const double* src = t.ptr();
    for (std::int64_t o = 0; o < sp.outer; ++o)
      std::copy(src + o * len * sp.inner, src + (o + 1) * len * sp.inner,
                out.data() + (o * total + offset) * sp.inner);
    offset += len;
  }
  std::vector<std::shared_ptr<detail::Node>> nodes;
  std::vector<std::int64_t> lens;
  for (const Tensor& t : parts) {
    nodes.push_back(t.node_ptr());
    lens.push_back(t.dim(ax));
  }
  return detail::make_op(std::move(out_shape), std::move(out), parts,
                         [nodes, lens, sp, total](const std::vector<double>& g) {
                           std::int64_t off = 0;
                           for (std::size_t p = 0; p < nodes.size(); ++p) {
                             const std::int64_t len = lens[p];
                             if (double* gp = nodes[p]->grad_buf()) {
                               for (std::int64_t o = 0; o < sp.outer; ++o) {
                                 const double* src = g.data() + (o * total + off) * sp.inner;
                                 double* dst = gp + o * len * sp.inner;
                                 for (std::int64_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
                               }
                             }
                             off += len;
                           }
                         });
}

inline Tensor slice_axis(const Tensor& a, int axis, int begin, int end) {
  const int ax = detail::normalize_axis(axis, a.ndim(), "slice_axis");
  const int len = a.dim(ax);
  if (begin < 0 || end > len || begin >= end)
    throw std::invalid_argument("slice_axis: invalid range [" + std::to_string(begin) + ", " +
                                std::to_string(end) + ") for axis length " + std::to_string(len));
  const auto sp = detail::split_axis(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(ax)] = end - begin;
  const std::int64_t olen = end - begin;
  std::vector<double> out(static_cast<std::size_t>(sp.outer * olen * sp.inner));
  const double* pa = a.ptr();
  for (std::int64_t o = 0; o < sp.outer; ++o)
    std::copy(pa + (o * sp.len + begin) * sp.inner, pa + (o * sp.len + end) * sp.inner,
              out.data() + o * olen * sp.inner);
  auto an = a.node_ptr();
  return detail::make_op(std::move(out_shape), std::move(out), {a},
                         [an, sp, begin, olen](const std::vector<double>& g) {
                           if (double* ga = an->grad_buf()) {
                             for (std::int64_t o = 0; o < sp.outer; ++o) {
                               const double* src = g.data() + o * olen * sp.inner;
                               double* dst = ga + (o * sp.len + begin) * sp.inner;
                               for (std::int64_t i = 0; i < olen * sp.inner; ++i) dst[i] += src[i];
                             }
                           }
                         });
}

inline Tensor slice_channels(const Tensor& a, int c0, int c1) {
  detail::check_rank(a, 4, "slice_channels");
  return slice_axis(a, 1, c0, c1);
}

// Flat-index gather over the flattened input; returns a 1-D tensor.
inline Tensor take(const Tensor& a, const std::vector<std::int64_t>& indices) {
  const std::int64_t n = a.numel();
  std::vector<double> out(indices.size());
  const double* pa = a.ptr();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= n)
      throw std::invalid_argument("take: index " + std::to_string(indices[i]) +
                                  " out of range for " + std::to_string(n) + " elements");
    out[i] = pa[indices[i]];
  }
  auto an = a.node_ptr();
  auto idx = std::make_shared<std::vector<std::int64_t>>(indices);
  return detail::make_op({static_cast<int>(indices.size())}, std::move(out), {a},
                         [an, idx](const std::vector<double>& g) {
                           if (double* ga = an->grad_buf())
                             for (std::size_t i = 0; i < g.size(); ++i)
                               ga[(*idx)[i]] += g[i];
                         });
}

// ---------------------------------------------------------------------------
// softmax / topk
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& a, int axis) {
  const int ax = detail::normalize_axis(axis, a.ndim(), "softmax");
  const double* pa = a.ptr();
  for (std::int64_t i = 0; i < a.numel(); ++i)
    if (!std::isfinite(pa[i]))
      throw NumericError("softmax: non-finite input at flat index " + std::to_string(i));
  const auto sp = detail::split_axis(a.shape(), ax);
  std::vector<double> out(static_cast<std::size_t>(a.numel()));
  for (std::int64_t o = 0; o < sp.outer; ++o)
    for (std::int64_t in = 0; in < sp.inner; ++in) {
      const std::int64_t base = o * sp.len * sp.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t l = 0; l < sp.len; ++l) mx = std::max(mx, pa[base + l * sp.inner]);
      double sum = 0.0;
      for (std::int64_t l = 0; l < sp.len; ++l) {
        const double e = std::exp(pa[base + l * sp.inner] - mx);
        out[static_cast<std::size_t>(base + l * sp.inner)] = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (std::int64_t l = 0; l < sp.len; ++l)
        out[static_cast<std::size_t>(base + l * sp.inner)] *= inv;
    }
  auto an = a.node_ptr();
  auto saved = std::make_shared<std::vector<double>>(out);
  return detail::make_op(a.shape(), std::move(out), {a},
                         [an, saved, sp](const std::vector<double>& g) {
                           if (double* ga = an->grad_buf()) {
                             const std::vector<double>& y = *saved;
                             for (std::int64_t o = 0; o < sp.outer; ++o)
                               for (std::int64_t in = 0; in < sp.inner; ++in) {
                                 const std::int64_t base = o * sp.len * sp.inner + in;
                                 double dot = 0.0;
                                 for (std::int64_t l = 0; l < sp.len; ++l) {
                                   const std::size_t k = static_cast<std::size_t>(base + l * sp.inner);
                                   dot += g[k] * y[k];
                                 }
                                 for (std::int64_t l = 0; l < sp.len; ++l) {
                                   const std::size_t k = static_cast<std::size_t>(base + l * sp.inner);
                                   ga[k] += y[k] * (g[k] - dot);
                                 }
                               }
                           }
                         });
}

struct TopK {
  Tensor values;                      // shape = input with `axis` length k
  std::vector<std::int64_t> indices;  // row-major alongside values, in [0, axis_len)
};

// Largest k along `axis`, sorted descending; ties broken by lower index.
inline TopK topk(const Tensor& a, int k, int axis) {
  const int ax = detail::normalize_axis(axis, a.ndim(), "topk");
  const int len = a.dim(ax);
  if (k < 1 || k > len)
    throw std::invalid_argument("topk: k=" + std::to_string(k) + " out of range for axis length " +
                                std::to_string(len));
  const int rank = a.ndim();
  // reduce to the last-axis case
  if (ax != rank - 1) {
    std::vector<int> perm;
    for (int i = 0; i < rank; ++i)
      if (i != ax) perm.push_back(i);
    perm.push_back(ax);
    TopK inner = topk(permute(a, perm), k, rank - 1);
    std::vector<int> inv(static_cast<std::size_t>(rank));
    for (int i = 0; i < rank; ++i) inv[static_cast<std::size_t>(perm[i])] = i;
    TopK out;
    out.values = permute(inner.values, inv);
    // rearrange the index block identically
    Shape vshape = inner.values.shape();
    Tensor idx_as_data = Tensor::from(
        vshape, std::vector<double>(inner.indices.begin(), inner.indices.end()));
    Tensor idx_perm = permute(idx_as_data, inv);
    out.indices.assign(idx_perm.data().begin(), idx_perm.data().end());
    return out;
  }
  const auto sp = detail::split_axis(a.shape(), ax);  // inner == 1
  const std::int64_t rows = sp.outer;
  std::vector<double> vals(static_cast<std::size_t>(rows * k));
  std::vector<std::int64_t> idx(static_cast<std::size_t>(rows * k));
  const double* pa = a.ptr();
  std::vector<int> order(static_cast<std::size_t>(len));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = pa + r * len;
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [row](int x, int y) { return row[x] > row[y]; });
    for (int j = 0; j < k; ++j) {
      vals[static_cast<std::size_t>(r * k + j)] = row[order[static_cast<std::size_t>(j)]];
      idx[static_cast<std::size_t>(r * k + j)] = order[static_cast<std::size_t>(j)];
    }
  }
  Shape out_shape = a.shape();
  out_shape.back() = k;
  auto an = a.node_ptr();
  auto saved_idx = std::make_shared<std::vector<std::int64_t>>(idx);
  TopK result;
  result.values = detail::make_op(std::move(out_shape), std::move(vals), {a},
                                  [an, saved_idx, len, k](const std::vector<double>& g) {
                                    if (double* ga = an->grad_buf()) {
                                      const std::int64_t rows2 =
                                          static_cast<std::int64_t>(g.size()) / k;
                                      for (std::int64_t r = 0; r < rows2; ++r)
                                        for (int j = 0; j < k; ++j)
                                          ga[r * len + (*saved_idx)[static_cast<std::size_t>(
                                                            r * k + j)]] +=
                                              g[static_cast<std::size_t>(r * k + j)];
                                    }
                                  });
  result.indices = std::move(idx);
  return result;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace detail {

inline void mm_acc(const double* a, const double* b, double* c, std::int64_t M, std::int64_t K,
                   std::int64_t N) {
  // c[M,N] += a[M,K] * b[K,N]
  for (std::int64_t m = 0; m < M; ++m) {
    const double* arow = a + m * K;
    double* crow = c + m * N;
    for (std::int64_t k = 0; k < K; ++k) {
      const double av = arow[k];
      if (av == 0.0) continue;
      const double* brow = b + k * N;
      for (std::int64_t n = 0; n < N; ++n) crow[n] += av * brow[n];
    }
  }
}

inline void mm_acc_transB(const double* a, const double* b, double* c, std::int64_t M,
                          std::int64_t K, std::int64_t N) {
  // c[M,N] += a[M,K] * b[N,K]^T
  for (std::int64_t m = 0; m < M; ++m) {
    const double* arow = a + m * K;
    double* crow = c + m * N;
    for (std::int64_t n = 0; n < N; ++n) {
      const double* brow = b + n * K;
      double s = 0.0;
      for (std::int64_t k = 0; k < K; ++k) s += arow[k] * brow[k];
      crow[n] += s;
    }
  }
}

inline void mm_acc_transA(const double* a, const double* b, double* c, std::int64_t M,
                          std::int64_t K, std::int64_t N) {
  // c[M,N] += a[K,M]^T * b[K,N]
  for (std::int64_t k = 0; k < K; ++k) {
    const double* arow = a + k * M;
    const double* brow = b + k * N;
    for (std::int64_t m = 0; m < M; ++m) {
      const double av = arow[m];
      if (av == 0.0) continue;
      double* crow = c + m * N;
      for (std::int64_t n = 0; n < N; ++n) crow[n] += av * brow[n];
    }
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::check_rank(a, 2, "matmul");
  detail::check_rank(b, 2, "matmul");
  const std::int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  if (b.dim(0) != K)
    throw std::invalid_argument("matmul: inner dimensions " + std::to_string(K) + " vs " +
                                std::to_string(b.dim(0)));
  std::vector<double> out(static_cast<std::size_t>(M * N), 0.0);
  detail::mm_acc(a.ptr(), b.ptr(), out.data(), M, K, N);
  auto an = a.node_ptr(), bn = b.node_ptr();
  return detail::make_op({static_cast<int>(M), static_cast<int>(N)}, std::move(out), {a, b},
                         [an, bn, M, K, N](const std::vector<double>& g) {
                           if (double* ga = an->grad_buf())
                             detail::mm_acc_transB(g.data(), bn->data.data(), ga, M, N, K);
                           if (double* gb = bn->grad_buf())
                             detail::mm_acc_transA(an->data.data(), g.data(), gb, K, M, N);
                         });
}

inline Tensor bmm(const Tensor& a, const Tensor& b) {
  detail::check_rank(a, 3, "bmm");
  detail::check_rank(b, 3, "bmm");
  const std::int64_t B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
  if (b.dim(0) != B || b.dim(1) != K)
    throw std::invalid_argument("bmm: incompatible shapes " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  std::vector<double> out(static_cast<std::size_t>(B * M * N), 0.0);
  for (std::int64_t i = 0; i < B; ++i)
    detail::mm_acc(a.ptr() + i * M * K, b.ptr() + i * K * N, out.data() + i * M * N, M, K, N);
  auto an = a.node_ptr(), bn = b.node_ptr();
  return detail::make_op({static_cast<int>(B), static_cast<int>(M), static_cast<int>(N)},
                         std::move(out), {a, b},
                         [an, bn, B, M, K, N](const std::vector<double>& g) {
                           double* ga = an->grad_buf();
                           double* gb = bn->grad_buf();
                           for (std::int64_t i = 0; i < B; ++i) {
                             if (ga)
                               detail::mm_acc_transB(g.data() + i * M * N,
                                                     bn->data.data() + i * K * N, ga + i * M * K, M,
                                                     N, K);
                             if (gb)
                               detail::mm_acc_transA(an->data.data() + i * M * K,
                                                     g.data() + i * M * N, gb + i * K * N, K, M, N);
                           }
                         });
}

// ---------------------------------------------------------------------------
// convolution and pooling
// ---------------------------------------------------------------------------

struct ConvSpec {
  int kernel_size = 1;
  int dilation = 1;
  int stride = 1;
  int padding = 0;
  int in_channels = 1;
  int out_channels = 1;
  int groups = 1;

  void validate() const {
    if (kernel_size < 1 || dilation < 1 || stride < 1 || padding < 0 || in_channels < 1 ||
        out_channels < 1 || groups < 1)
      throw std::invalid_argument("ConvSpec: all sizes must be positive (padding >= 0)");
    if (in_channels % groups != 0)
      throw std::invalid_argument("ConvSpec: in_channels " + std::to_string(in_channels) +
                                  " not divisible by groups " + std::to_string(groups));
    if (out_channels % groups != 0)
      throw std::invalid_argument("ConvSpec: out_channels " + std::to_string(out_channels) +
                                  " not divisible by groups " + std::to_string(groups));
  }

  // padding that preserves spatial size at stride 1 (odd kernels)
  static int same_padding(int kernel_size, int dilation) {
    return dilation * (kernel_size - 1) / 2;
  }
};

inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                     const ConvSpec& spec) {
  spec.validate();
  detail::check_rank(input, 4, "conv2d");
  detail::check_rank(weight, 4, "conv2d");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int k = spec.kernel_size, d = spec.dilation, st = spec.stride, p = spec.padding;
  const int icg = spec.in_channels / spec.groups;
  const int ocg = spec.out_channels / spec.groups;
  if (C != spec.in_channels)
    throw std::invalid_argument("conv2d: input channel dimension is " + std::to_string(C) +
                                ", spec.in_channels is " + std::to_string(spec.in_channels));
  if (weight.dim(0) != spec.out_channels || weight.dim(1) != icg || weight.dim(2) != k ||
      weight.dim(3) != k)
    throw std::invalid_argument("conv2d: weight shape " + shape_str(weight.shape()) +
                                " does not match spec [" + std::to_string(spec.out_channels) +
                                ", " + std::to_string(icg) + ", " + std::to_string(k) + ", " +
                                std::to_string(k) + "]");
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != spec.out_channels))
    throw std::invalid_argument("conv2d: bias shape " + shape_str(bias.shape()) +
                                " does not match out_channels " +
                                std::to_string(spec.out_channels));
  const int eff = d * (k - 1) + 1;
  const int OH = (H + 2 * p - eff) / st + 1;
  const int OW = (W + 2 * p - eff) / st + 1;
  if (H + 2 * p < eff || W + 2 * p < eff)
    throw std::invalid_argument("conv2d: spatial input " + std::to_string(H) + "x" +
                                std::to_string(W) + " too small for effective kernel " +
                                std::to_string(eff));

  std::vector<double> out(static_cast<std::size_t>(N) * spec.out_channels * OH * OW, 0.0);
  const double* px = input.ptr();
  const double* pw = weight.ptr();
  const double* pb = bias.defined() ? bias.ptr() : nullptr;
  const std::int64_t xn_stride = static_cast<std::int64_t>(C) * H * W;
  const std::int64_t on_stride = static_cast<std::int64_t>(spec.out_channels) * OH * OW;

  for (int n = 0; n < N; ++n) {
    for (int g = 0; g < spec.groups; ++g) {
      for (int oc = 0; oc < ocg; ++oc) {
        const int ocb = g * ocg + oc;
        const double* wbase = pw + static_cast<std::int64_t>(ocb) * icg * k * k;
        double* obase = out.data() + n * on_stride + static_cast<std::int64_t>(ocb) * OH * OW;
        const double bval = pb ? pb[ocb] : 0.0;
        for (int oh = 0; oh < OH; ++oh) {
          for (int ow = 0; ow < OW; ++ow) {
            double acc = bval;
            const int ih0 = oh * st - p;
            const int iw0 = ow * st - p;
            for (int ic = 0; ic < icg; ++ic) {
              const double* xc = px + n * xn_stride +
                                 static_cast<std::int64_t>(g * icg + ic) * H * W;
              const double* wc = wbase + static_cast<std::int64_t>(ic) * k * k;
              for (int kh = 0; kh < k; ++kh) {
                const int ih = ih0 + kh * d;
                if (ih < 0 || ih >= H) continue;
                const double* xrow = xc + static_cast<std::int64_t>(ih) * W;
                const double* wrow = wc + static_cast<std::int64_t>(kh) * k;
                for (int kw = 0; kw < k; ++kw) {
                  const int iw = iw0 + kw * d;
                  if (iw < 0 || iw >= W) continue;
                  acc += xrow[iw] * wrow[kw];
                }
              }
            }
            obase[static_cast<std::int64_t>(oh) * OW + ow] = acc;
          }
        }
      }
    }
  }

  auto xn = input.node_ptr();
  auto wn = weight.node_ptr();
  auto bnode = bias.defined() ? bias.node_ptr() : nullptr;
  ConvSpec sp = spec;
  std::vector<Tensor> inputs = bias.defined() ? std::vector<Tensor>{input, weight, bias}
                                              : std::vector<Tensor>{input, weight};
  return detail::make_op(
      {N, spec.out_channels, OH, OW}, std::move(out), inputs,
      [xn, wn, bnode, sp, N, C, H, W, OH, OW](const std::vector<double>& g) {
        const int k = sp.kernel_size, d = sp.dilation, st = sp.stride, p = sp.padding;
        const int icg = sp.in_channels / sp.groups;
        const int ocg = sp.out_channels / sp.groups;
        double* gx = xn->grad_buf();
        double* gw = wn->grad_buf();
        double* gb = bnode ? bnode->grad_buf() : nullptr;
        const double* px = xn->data.data();
        const double* pw = wn->data.data();
        const std::int64_t xn_stride = static_cast<std::int64_t>(C) * H * W;
        const std::int64_t on_stride = static_cast<std::int64_t>(sp.out_channels) * OH * OW;
        for (int n = 0; n < N; ++n) {
          for (int gi = 0; gi < sp.groups; ++gi) {
            for (int oc = 0; oc < ocg; ++oc) {
              const int ocb = gi * ocg + oc;
              const double* gout =
                  g.data() + n * on_stride + static_cast<std::int64_t>(ocb) * OH * OW;
              const double* wbase = pw + static_cast<std::int64_t>(ocb) * icg * k * k;
              double* gwbase = gw ? gw + static_cast<std::int64_t>(ocb) * icg * k * k : nullptr;
              for (int oh = 0; oh < OH; ++oh) {
                for (int ow = 0; ow < OW; ++ow) {
                  const double gv = gout[static_cast<std::int64_t>(oh) * OW + ow];
                  if (gv == 0.0) continue;
                  if (gb) gb[ocb] += gv;
                  const int ih0 = oh * st - p;
                  const int iw0 = ow * st - p;
                  for (int ic = 0; ic < icg; ++ic) {
                    const std::int64_t coff =
                        n * xn_stride + static_cast<std::int64_t>(gi * icg + ic) * H * W;
                    const double* xc = px + coff;
                    double* gxc = gx ? gx + coff : nullptr;
                    const double* wc = wbase + static_cast<std::int64_t>(ic) * k * k;
                    double* gwc = gwbase ? gwbase + static_cast<std::int64_t>(ic) * k * k : nullptr;
                    for (int kh = 0; kh < k; ++kh) {
                      const int ih = ih0 + kh * d;
                      if (ih < 0 || ih >= H) continue;
                      for (int kw = 0; kw < k; ++kw) {
                        const int iw = iw0 + kw * d;
                        if (iw < 0 || iw >= W) continue;
                        const std::int64_t xi = static_cast<std::int64_t>(ih) * W + iw;
                        const std::int64_t wi = static_cast<std::int64_t>(kh) * k + kw;
                        if (gxc) gxc[xi] += gv * wc[wi];
                        if (gwc) gwc[wi] += gv * xc[xi];
                      }
                    }
                  }
                }
              }
            }
          }
        }
      });
}

// convenience overload without bias
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const ConvSpec& spec) {
  return conv2d(input, weight, Tensor(), spec);
}

enum class PoolMode { Max, Avg };

// Per-pixel reduction over the channel axis: [N,C,H,W] -> [N,1,H,W].
// Max-pool gradient goes to the first (lowest channel index) maximal element.
inline Tensor pool_channel(const Tensor& input, PoolMode mode) {
  detail::check_rank(input, 4, "pool_channel");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::int64_t hw = static_cast<std::int64_t>(H) * W;
  std::vector<double> out(static_cast<std::size_t>(N) * hw);
  std::vector<std::int32_t> winners;
  const double* px = input.ptr();
  if (mode == PoolMode::Max) winners.resize(static_cast<std::size_t>(N) * hw);
  for (int n = 0; n < N; ++n) {
    const double* base = px + static_cast<std::int64_t>(n) * C * hw;
    double* obase = out.data() + static_cast<std::int64_t>(n) * hw;
    for (std::int64_t i = 0; i < hw; ++i) {
      if (mode == PoolMode::Max) {
        double best = base[i];
        int bc = 0;
        for (int c = 1; c < C; ++c) {
          const double v = base[c * hw + i];
          if (v > best) {
            best = v;
            bc = c;
          }
        }
        obase[i] = best;
        winners[static_cast<std::size_t>(n * hw + i)] = bc;
      } else {
        double s = 0.0;
        for (int c = 0; c < C; ++c) s += base[c * hw + i];
        obase[i] = s / C;
      }
    }
  }
  auto an = input.node_ptr();
  auto win = std::make_shared<std::vector<std::int32_t>>(std::move(winners));
  return detail::make_op({N, 1, H, W}, std::move(out), {input},
                         [an, win, mode, N, C, hw](const std::vector<double>& g) {
                           if (double* ga = an->grad_buf()) {
                             for (int n = 0; n < N; ++n) {
                               double* base = ga + static_cast<std::int64_t>(n) * C * hw;
                               const double* gbase = g.data() + static_cast<std::int64_t>(n) * hw;
                               for (std::int64_t i = 0; i < hw; ++i) {
                                 if (mode == PoolMode::Max) {
                                   base[(*win)[static_cast<std::size_t>(n * hw + i)] * hw + i] +=
                                       gbase[i];
                                 } else {
                                   const double gv = gbase[i] / C;
                                   for (int c = 0; c < C; ++c) base[c * hw + i] += gv;
                                 }
                               }
                             }
                           }
                         });
}

// Spatial max pooling; padded positions are ignored (never win). Ties go to
// the first window element in row-major order.
inline Tensor maxpool2d(const Tensor& input, int kernel, int stride, int padding) {
  detail::check_rank(input, 4, "maxpool2d");
  if (kernel < 1 || stride < 1 || padding < 0)
    throw std::invalid_argument("maxpool2d: bad kernel/stride/padding");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int OH = (H + 2 * padding - kernel) / stride + 1;
  const int OW = (W + 2 * padding - kernel) / stride + 1;
  if (OH < 1 || OW < 1) throw std::invalid_argument("maxpool2d: output would be empty");
  std::vector<double> out(static_cast<std::size_t>(N) * C * OH * OW);
  std::vector<std::int64_t> winners(out.size());
  const double* px = input.ptr();
  std::int64_t o = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* plane = px + (static_cast<std::int64_t>(n) * C + c) * H * W;
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          std::int64_t bidx = -1;
          for (int kh = 0; kh < kernel; ++kh) {
            const int ih = oh * stride - padding + kh;
            if (ih < 0 || ih >= H) continue;
            for (int kw = 0; kw < kernel; ++kw) {
              const int iw = ow * stride - padding + kw;
              if (iw < 0 || iw >= W) continue;
              const double v = plane[static_cast<std::int64_t>(ih) * W + iw];
              if (v > best) {
                best = v;
                bidx = (static_cast<std::int64_t>(n) * C + c) * H * W + ih * W + iw;
              }
            }
          }
          if (bidx < 0)
            throw std::invalid_argument("maxpool2d: window contains no valid input positions");
          out[static_cast<std::size_t>(o)] = best;
          winners[static_cast<std::size_t>(o)] = bidx;
        }
    }
  auto an = input.node_ptr();
  auto win = std::make_shared<std::vector<std::int64_t>>(std::move(winners));
  return detail::make_op({N, C, OH, OW}, std::move(out), {input},
                         [an, win](const std::vector<double>& g) {
                           if (double* ga = an->grad_buf())
                             for (std::size_t i = 0; i < g.size(); ++i)
                               ga[(*win)[i]] += g[i];
                         });
}

inline Tensor upsample_nearest2(const Tensor& input) {
  detail::check_rank(input, 4, "upsample_nearest2");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int OH = H * 2, OW = W * 2;
  std::vector<double> out(static_cast<std::size_t>(N) * C * OH * OW);
  const double* px = input.ptr();
  for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
    const double* plane = px + nc * H * W;
    double* oplane = out.data() + nc * OH * OW;
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        const double v = plane[static_cast<std::int64_t>(h) * W + w];
        double* q = oplane + static_cast<std::int64_t>(2 * h) * OW + 2 * w;
        q[0] = v;
        q[1] = v;
        q[OW] = v;
        q[OW + 1] = v;
      }
  }
  auto an = input.node_ptr();
  return detail::make_op({N, C, OH, OW}, std::move(out), {input},
                         [an, N, C, H, W, OW](const std::vector<double>& g) {
                           if (double* ga = an->grad_buf()) {
                             for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
                               double* plane = ga + nc * H * W;
                               const double* gplane = g.data() + nc * (2 * H) * OW;
                               for (int h = 0; h < H; ++h)
                                 for (int w = 0; w < W; ++w) {
                                   const double* q =
                                       gplane + static_cast<std::int64_t>(2 * h) * OW + 2 * w;
                                   plane[static_cast<std::int64_t>(h) * W + w] +=
                                       q[0] + q[1] + q[OW] + q[OW + 1];
                                 }
                             }
                           }
                         });
}

// ---------------------------------------------------------------------------
// region partition (attention plumbing)
// ---------------------------------------------------------------------------

namespace detail {

// out[(n, r, t, c)] <- x[(n, c, ri*th + lr, rj*tw + lc)] with r = ri*s + rj,
// t = lr*tw + lc; a bijection reused by both partition directions.
inline std::shared_ptr<std::vector<std::int64_t>> region_mapping(int N, int C, int H, int W,
                                                                 int s) {
  const int th = H / s, tw = W / s;
  const std::int64_t R = static_cast<std::int64_t>(s) * s;
  const std::int64_t L = static_cast<std::int64_t>(th) * tw;
  auto map = std::make_shared<std::vector<std::int64_t>>(
      static_cast<std::size_t>(static_cast<std::int64_t>(N) * C * H * W));
  std::int64_t o = 0;
  for (int n = 0; n < N; ++n)
    for (std::int64_t r = 0; r < R; ++r) {
      const int ri = static_cast<int>(r) / s, rj = static_cast<int>(r) % s;
      for (std::int64_t t = 0; t < L; ++t) {
        const int lr = static_cast<int>(t) / tw, lc = static_cast<int>(t) % tw;
        const int ih = ri * th + lr, iw = rj * tw + lc;
        for (int c = 0; c < C; ++c, ++o)
          (*map)[static_cast<std::size_t>(o)] =
              ((static_cast<std::int64_t>(n) * C + c) * H + ih) * W + iw;
      }
    }
  return map;
}

inline void check_partition(const Tensor& x, int s, const char* op) {
  check_rank(x, 4, op);
  if (s < 1) throw std::invalid_argument(std::string(op) + ": s must be positive");
  const int H = x.dim(2), W = x.dim(3);
  if (H % s != 0 || W % s != 0)
    throw std::invalid_argument(std::string(op) + ": s=" + std::to_string(s) +
                                " does not divide spatial size " + std::to_string(H) + "x" +
                                std::to_string(W));
}

}  // namespace detail

// [N,C,H,W] -> [N, s*s, (H/s)*(W/s), C]: region-major tokens, row-major
// within each spatial tile.
inline Tensor partition_regions(const Tensor& x, int s) {
  detail::check_partition(x, s, "partition_regions");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto map = detail::region_mapping(N, C, H, W, s);
  std::vector<double> out(static_cast<std::size_t>(x.numel()));
  const double* px = x.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[(*map)[i]];
  auto xn = x.node_ptr();
  return detail::make_op({N, s * s, (H / s) * (W / s), C}, std::move(out), {x},
                         [xn, map](const std::vector<double>& g) {
                           if (double* gx = xn->grad_buf())
                             for (std::size_t i = 0; i < g.size(); ++i) gx[(*map)[i]] += g[i];
                         });
}

// Inverse of partition_regions.
inline Tensor merge_regions(const Tensor& t, int s, int H, int W) {
  detail::check_rank(t, 4, "merge_regions");
  if (s < 1 || H % s != 0 || W % s != 0)
    throw std::invalid_argument("merge_regions: s=" + std::to_string(s) +
                                " does not divide spatial size " + std::to_string(H) + "x" +
                                std::to_string(W));
  const int N = t.dim(0), C = t.dim(3);
  if (t.dim(1) != s * s || t.dim(2) != (H / s) * (W / s))
    throw std::invalid_argument("merge_regions: input " + shape_str(t.shape()) +
                                " inconsistent with s=" + std::to_string(s) + ", " +
                                std::to_string(H) + "x" + std::to_string(W));
  auto map = detail::region_mapping(N, C, H, W, s);
  std::vector<double> out(static_cast<std::size_t>(t.numel()));
  const double* pt = t.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[(*map)[i]] = pt[i];
  auto tn = t.node_ptr();
  return detail::make_op({N, C, H, W}, std::move(out), {t},
                         [tn, map](const std::vector<double>& g) {
                           if (double* gt = tn->grad_buf())
                             for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[(*map)[i]];
                         });
}

// x[N,R,L,C], idx flat [N*R*k] with values in [0,R) ->
// out[N,R,k*L,C]: out(n, i, j*L + t, c) = x(n, idx[(n*R+i)*k + j], t, c).
inline Tensor gather_regions(const Tensor& x, const std::vector<std::int64_t>& idx, int k) {
  detail::check_rank(x, 4, "gather_regions");
  const int N = x.dim(0), R = x.dim(1), L = x.dim(2), C = x.dim(3);
  if (k < 1 || k > R)
    throw std::invalid_argument("gather_regions: k=" + std::to_string(k) + " out of range for " +
                                std::to_string(R) + " regions");
  if (idx.size() != static_cast<std::size_t>(N) * R * k)
    throw std::invalid_argument("gather_regions: index count " + std::to_string(idx.size()) +
                                " != N*R*k");
  for (std::int64_t v : idx)
    if (v < 0 || v >= R)
      throw std::invalid_argument("gather_regions: region index " + std::to_string(v) +
                                  " out of range");
  const std::int64_t lc = static_cast<std::int64_t>(L) * C;
  std::vector<double> out(static_cast<std::size_t>(static_cast<std::int64_t>(N) * R * k * lc));
  const double* px = x.ptr();
  for (int n = 0; n < N; ++n)
    for (int i = 0; i < R; ++i)
      for (int j = 0; j < k; ++j) {
        const std::int64_t src = idx[static_cast<std::size_t>((static_cast<std::int64_t>(n) * R + i) * k + j)];
        std::copy(px + (static_cast<std::int64_t>(n) * R + src) * lc,
                  px + (static_cast<std::int64_t>(n) * R + src + 1) * lc,
                  out.data() + ((static_cast<std::int64_t>(n) * R + i) * k + j) * lc);
      }
  auto xn = x.node_ptr();
  auto saved = std::make_shared<std::vector<std::int64_t>>(idx);
  return detail::make_op({N, R, k * L, C}, std::move(out), {x},
                         [xn, saved, N, R, k, lc](const std::vector<double>& g) {
                           if (double* gx = xn->grad_buf()) {
                             for (int n = 0; n < N; ++n)
                               for (int i = 0; i < R; ++i)
                                 for (int j = 0; j < k; ++j) {
                                   const std::int64_t src = (*saved)[static_cast<std::size_t>(
                                       (static_cast<std::int64_t>(n) * R + i) * k + j)];
                                   const double* gs =
                                       g.data() +
                                       ((static_cast<std::int64_t>(n) * R + i) * k + j) * lc;
                                   double* gd = gx + (static_cast<std::int64_t>(n) * R + src) * lc;
                                   for (std::int64_t q = 0; q < lc; ++q) gd[q] += gs[q];
                                 }
                           }
                         });
}

// v[N,R,k*L,C] scaled blockwise by w[N,R,k]: block j (rows j*L..(j+1)*L-1)
// multiplied by w(n,i,j). Both sides taped.
inline Tensor scale_region_blocks(const Tensor& v, const Tensor& w, int k) {
  detail::check_rank(v, 4, "scale_region_blocks");
  detail::check_rank(w, 3, "scale_region_blocks");
  const int N = v.dim(0), R = v.dim(1), KL = v.dim(2), C = v.dim(3);
  if (k < 1 || KL % k != 0)
    throw std::invalid_argument("scale_region_blocks: k=" + std::to_string(k) +
                                " does not divide token axis " + std::to_string(KL));
  if (w.dim(0) != N || w.dim(1) != R || w.dim(2) != k)
    throw std::invalid_argument("scale_region_blocks: weight shape " + shape_str(w.shape()) +
                                " incompatible with " + shape_str(v.shape()));
  const std::int64_t L = KL / k;
  const std::int64_t block = L * C;
  std::vector<double> out(static_cast<std::size_t>(v.numel()));
  const double* pv = v.ptr();
  const double* pw = w.ptr();
  for (std::int64_t ni = 0; ni < static_cast<std::int64_t>(N) * R; ++ni)
    for (int j = 0; j < k; ++j) {
      const double wv = pw[ni * k + j];
      const double* src = pv + (ni * k + j) * block;
      double* dst = out.data() + (ni * k + j) * block;
      for (std::int64_t q = 0; q < block; ++q) dst[q] = src[q] * wv;
    }
  auto vn = v.node_ptr(), wn = w.node_ptr();
  return detail::make_op(v.shape(), std::move(out), {v, w},
                         [vn, wn, N, R, k, block](const std::vector<double>& g) {
                           double* gv = vn->grad_buf();
                           double* gw = wn->grad_buf();
                           const double* pv2 = vn->data.data();
                           const double* pw2 = wn->data.data();
                           for (std::int64_t ni = 0; ni < static_cast<std::int64_t>(N) * R; ++ni)
                             for (int j = 0; j < k; ++j) {
                               const std::int64_t off = (ni * k + j) * block;
                               if (gv) {
                                 const double wv = pw2[ni * k + j];
                                 for (std::int64_t q = 0; q < block; ++q)
                                   gv[off + q] += g[off + q] * wv;
                               }
                               if (gw) {
                                 double s = 0.0;
                                 for (std::int64_t q = 0; q < block; ++q)
                                   s += g[off + q] * pv2[off + q];
                                 gw[ni * k + j] += s;
                               }
                             }
                         });
}

// ---------------------------------------------------------------------------
// channel broadcasts
// ---------------------------------------------------------------------------

// x[N,C,H,W] * gate[N,1,H,W], gate broadcast over channels
inline Tensor mul_gate(const Tensor& x, const Tensor& gate) {
  detail::check_rank(x, 4, "mul_gate");
  detail::check_rank(gate, 4, "mul_gate");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (gate.dim(0) != N || gate.dim(1) != 1 || gate.dim(2) != H || gate.dim(3) != W)
    throw std::invalid_argument("mul_gate: gate shape " + shape_str(gate.shape()) +
                                " incompatible with " + shape_str(x.shape()));
  const std::int64_t hw = static_cast<std::int64_t>(H) * W;
  std::vector<double> out(static_cast<std::size_t>(x.numel()));
  const double* px = x.ptr();
  const double* pg = gate.ptr();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* xs = px + (static_cast<std::int64_t>(n) * C + c) * hw;
      const double* gs = pg + static_cast<std::int64_t>(n) * hw;
      double* os = out.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) os[i] = xs[i] * gs[i];
    }
  auto xn = x.node_ptr(), gn = gate.node_ptr();
  return detail::make_op(x.shape(), std::move(out), {x, gate},
                         [xn, gn, N, C, hw](const std::vector<double>& g) {
                           double* gx = xn->grad_buf();
                           double* gg = gn->grad_buf();
                           const double* px2 = xn->data.data();
                           const double* pg2 = gn->data.data();
                           for (int n = 0; n < N; ++n)
                             for (int c = 0; c < C; ++c) {
                               const std::int64_t xoff =
                                   (static_cast<std::int64_t>(n) * C + c) * hw;
                               const std::int64_t goff = static_cast<std::int64_t>(n) * hw;
                               for (std::int64_t i = 0; i < hw; ++i) {
                                 if (gx) gx[xoff + i] += g[xoff + i] * pg2[goff + i];
                                 if (gg) gg[goff + i] += g[xoff + i] * px2[xoff + i];
                               }
                             }
                         });
}

// x[N,C,H,W] * v[C] per channel
inline Tensor mul_channel(const Tensor& x, const Tensor& v) {
  detail::check_rank(x, 4, "mul_channel");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (v.ndim() != 1 || v.dim(0) != C)
    throw std::invalid_argument("mul_channel: vector shape " + shape_str(v.shape()) +
                                " does not match channel count " + std::to_string(C));
  const std::int64_t hw = static_cast<std::int64_t>(H) * W;
  std::vector<double> out(static_cast<std::size_t>(x.numel()));
  const double* px = x.ptr();
  const double* pv = v.ptr();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* xs = px + (static_cast<std::int64_t>(n) * C + c) * hw;
      double* os = out.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) os[i] = xs[i] * pv[c];
    }
  auto xn = x.node_ptr(), vn = v.node_ptr();
  return detail::make_op(x.shape(), std::move(out), {x, v},
                         [xn, vn, N, C, hw](const std::vector<double>& g) {
                           double* gx = xn->grad_buf();
                           double* gv = vn->grad_buf();
                           const double* px2 = xn->data.data();
                           const double* pv2 = vn->data.data();
                           for (int n = 0; n < N; ++n)
                             for (int c = 0; c < C; ++c) {
                               const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * hw;
                               for (std::int64_t i = 0; i < hw; ++i) {
                                 if (gx) gx[off + i] += g[off + i] * pv2[c];
                                 if (gv) gv[c] += g[off + i] * px2[off + i];
                               }
                             }
                         });
}

// x[N,C,H,W] + v[C] per channel
inline Tensor add_channel(const Tensor& x, const Tensor& v) {
  detail::check_rank(x, 4, "add_channel");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (v.ndim() != 1 || v.dim(0) != C)
    throw std::invalid_argument("add_channel: vector shape " + shape_str(v.shape()) +
                                " does not match channel count " + std::to_string(C));
  const std::int64_t hw = static_cast<std::int64_t>(H) * W;
  std::vector<double> out(x.data());
  const double* pv = v.ptr();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      double* os = out.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) os[i] += pv[c];
    }
  auto xn = x.node_ptr(), vn = v.node_ptr();
  return detail::make_op(x.shape(), std::move(out), {x, v},
                         [xn, vn, N, C, hw](const std::vector<double>& g) {
                           double* gx = xn->grad_buf();
                           double* gv = vn->grad_buf();
                           for (int n = 0; n < N; ++n)
                             for (int c = 0; c < C; ++c) {
                               const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * hw;
                               for (std::int64_t i = 0; i < hw; ++i) {
                                 if (gx) gx[off + i] += g[off + i];
                                 if (gv) gv[c] += g[off + i];
                               }
                             }
                         });
}

}  // namespace rfw
