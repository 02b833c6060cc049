#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "propetl/graph.hpp"

namespace propetl {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares the reverse-mode gradient of f at `point` with central
/// differences: max over coordinates of |analytic - numeric| / (|analytic| + 1e-8).
///
/// `f(graph, x)` builds a scalar from the leaf x. Only `coords` are probed
/// when given.
template <typename T, typename F>
GradCheckResult finite_difference_check(F&& f, const BasicTensor<T>& point, double epsilon,
                                        std::optional<std::span<const std::size_t>> coords = std::nullopt) {
  BasicParameter<T> x("x", point);
  BasicTensor<T> analytic;
  {
    BasicGraph<T> g;
    auto loss = f(g, g.param(x));
    g.backward(loss);
    analytic = x.has_grad() ? x.grad : BasicTensor<T>(point.shape());
  }
  auto eval = [&](const BasicTensor<T>& p) {
    BasicParameter<T> probe("x", p, false);
    BasicGraph<T> g;
    return double(f(g, g.param(probe)).value()[0]);
  };

  std::vector<std::size_t> all;
  if (!coords) {
    all.resize(point.numel());
    std::iota(all.begin(), all.end(), std::size_t{0});
  }
  const std::span<const std::size_t> probe = coords ? *coords : std::span<const std::size_t>(all);

  GradCheckResult r;
  for (const std::size_t i : probe) {
    BasicTensor<T> plus = point, minus = point;
    plus[i] = static_cast<T>(plus[i] + epsilon);
    minus[i] = static_cast<T>(minus[i] - epsilon);
    const double step = double(plus[i]) - double(minus[i]);
    const double numeric = (eval(plus) - eval(minus)) / step;
    const double a = analytic[i];
    const double err = std::abs(a - numeric) / (std::abs(a) + 1e-8);
    if (err >= r.max_rel_error) r = GradCheckResult{err, i, a, numeric};
  }
  return r;
}

}  // namespace propetl
