#pragma once

// Shared helpers for the unit suites and the acceptance harness: the
// gradient-check policy, independent quadrature oracles, and small stats
// utilities. Oracles here must stay independent of the library code paths
// they check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <vector>

#include "ortlab/graph.hpp"
#include "ortlab/rng.hpp"
#include "ortlab/tensor.hpp"

namespace testsupport {

inline constexpr double kGradStep = 1e-4;
inline constexpr double kGradTol = 1e-4;
// Instances whose forward pass came this close to a relu/abs/min/max kink
// are rejected and redrawn: central differences straddle the kink there.
inline constexpr double kKinkRejectMargin = 1e-3;

/// Per-coordinate relative error with a floor, so near-zero gradient
/// entries are compared absolutely at the floor scale.
inline double rel_error(double a, double b) {
  double denom = std::max({std::fabs(a), std::fabs(b), 1e-2});
  return std::fabs(a - b) / denom;
}

inline double max_rel_error(const ortlab::Tensor<double>& a,
                            const ortlab::Tensor<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, rel_error(a[i], b[i]));
  return worst;
}

inline ortlab::Tensor<double> random_tensor(ortlab::Shape shape, ortlab::Rng& rng,
                                            double lo = -1.0, double hi = 1.0) {
  ortlab::Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

/// Checks d(scalar build(x))/dx against central differences on `instances`
/// random draws, redrawing any instance that lands near a kink. `build`
/// receives a graph and an input leaf and returns the scalar output var.
using BuildFn = std::function<ortlab::Graph<double>::Var(
    ortlab::Graph<double>&, ortlab::Graph<double>::Var)>;

struct GradCheckResult {
  double max_err = 0.0;
  int instances = 0;
};

inline GradCheckResult gradcheck(const BuildFn& build, const ortlab::Shape& shape,
                                 std::uint64_t seed, int instances = 20,
                                 double lo = -1.0, double hi = 1.0) {
  GradCheckResult res;
  std::uint64_t attempt = 0;
  while (res.instances < instances && attempt < 20 * static_cast<std::uint64_t>(instances)) {
    ortlab::Rng rng(ortlab::derive_seed(seed, attempt++));
    ortlab::Tensor<double> x = random_tensor(shape, rng, lo, hi);

    ortlab::Graph<double> g;
    auto xv = g.input(x);
    auto loss = build(g, xv);
    if (g.kink_margin() < kKinkRejectMargin) continue;
    g.backward(loss);
    ortlab::Tensor<double> analytic =
        g.has_grad(xv) ? g.grad(xv) : ortlab::Tensor<double>(x.shape());

    auto f = [&](const ortlab::Tensor<double>& xx) {
      ortlab::Graph<double> gg;
      auto v = gg.input(xx);
      return gg.value(build(gg, v))[0];
    };
    ortlab::Tensor<double> numeric = ortlab::finite_diff(f, x, kGradStep);
    res.max_err = std::max(res.max_err, max_rel_error(analytic, numeric));
    res.instances += 1;
  }
  return res;
}

/// Composite-Simpson integration oracle, independent of the erf-based
/// quadrature inside the library.
inline double simpson_1d(const std::function<double(double)>& f, double a, double b,
                         int n /* even */) {
  double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

inline double simpson_2d(const std::function<double(double, double)>& f, double ax,
                         double bx, double ay, double by, int n = 256) {
  auto inner = [&](double y) {
    return simpson_1d([&](double x) { return f(x, y); }, ax, bx, n);
  };
  return simpson_1d(inner, ay, by, n);
}

/// Central-difference check of named parameter gradients. `f` evaluates the
/// scalar objective from the parameters' current storage; `params` maps
/// names to that storage. Checks up to `budget` coordinates per tensor
/// (stride-sampled); pass 0 to check every coordinate.
inline double weight_fd_max_err(
    const std::function<double()>& f,
    const std::vector<std::pair<std::string, ortlab::Tensor<double>*>>& params,
    const std::map<std::string, ortlab::Tensor<double>>& analytic,
    std::size_t budget = 0, double h = kGradStep) {
  double worst = 0.0;
  for (const auto& [name, tensor] : params) {
    const ortlab::Tensor<double>& ga = analytic.at(name);
    std::size_t n = tensor->size();
    std::size_t step = (budget == 0 || n <= budget) ? 1 : n / budget;
    for (std::size_t i = 0; i < n; i += step) {
      double saved = (*tensor)[i];
      (*tensor)[i] = saved + h;
      double fp = f();
      (*tensor)[i] = saved - h;
      double fm = f();
      (*tensor)[i] = saved;
      double numeric = (fp - fm) / (2.0 * h);
      worst = std::max(worst, rel_error(ga[i], numeric));
    }
  }
  return worst;
}

inline double mean_of(const std::vector<double>& xs) {
  double s = 0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

inline double variance_of(const std::vector<double>& xs) {
  double m = mean_of(xs);
  double s = 0;
  for (double x : xs) s += (x - m) * (x - m);
  return s / static_cast<double>(xs.size() - 1);
}

}  // namespace testsupport
