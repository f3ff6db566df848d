#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "rfw/tensor.hpp"

namespace rfw {

struct GradCheckResult {
  bool pass = false;
  double max_rel_err = 0.0;
  // location of the worst element: which leaf, which flat index within it
  int worst_leaf = -1;
  std::int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Central-difference check of reverse-mode gradients.
//
// `f` must rebuild the scalar loss from the leaves' current values on every
// call. Analytic gradients come from one backward pass; numeric ones from
// (f(x+h) - f(x-h)) / 2h per element. The relative error is
// |a - n| / max(1, |a|, |n|) and the check passes only if every element is
// strictly below `tol`, so tol = 0 can never pass.
inline GradCheckResult gradcheck(const std::function<Tensor()>& f, std::vector<Tensor> leaves,
                                 double h = 1e-5, double tol = 1e-6) {
  if (h <= 0.0) throw std::invalid_argument("gradcheck: step size must be positive");
  for (Tensor& t : leaves) {
    if (!t.requires_grad())
      throw std::invalid_argument("gradcheck: all leaves must require gradients");
    t.zero_grad();
  }
  Tensor loss = f();
  if (loss.numel() != 1) throw std::invalid_argument("gradcheck: loss must be scalar");
  loss.backward();

  GradCheckResult r;
  r.pass = true;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor& leaf = leaves[li];
    std::vector<double>& x = leaf.data();
    const std::vector<double>& g = leaf.grad();
    for (std::int64_t i = 0; i < leaf.numel(); ++i) {
      const double saved = x[static_cast<std::size_t>(i)];
      double lp, lm;
      {
        NoGradGuard ng;
        x[static_cast<std::size_t>(i)] = saved + h;
        lp = f().item();
        x[static_cast<std::size_t>(i)] = saved - h;
        lm = f().item();
      }
      x[static_cast<std::size_t>(i)] = saved;
      const double numeric = (lp - lm) / (2.0 * h);
      const double analytic = g[static_cast<std::size_t>(i)];
      const double rel =
          std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
      if (rel >= r.max_rel_err) {
        r.max_rel_err = rel;
        r.worst_leaf = static_cast<int>(li);
        r.worst_index = i;
        r.analytic = analytic;
        r.numeric = numeric;
      }
    }
  }
  r.pass = r.max_rel_err < tol;
  return r;
}

}  // namespace rfw
