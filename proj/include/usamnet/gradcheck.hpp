#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "usamnet/ops.hpp"

namespace usam {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;  // perturbation crossed a leaky_relu kink
};

/// Compares the reverse-mode gradient of `f` at `x` against central
/// differences. `f` maps x to a scalar tensor; it may also read other tensors
/// captured by reference. Only the coordinates listed in `coords` are probed
/// (all coordinates when empty). The relative error per coordinate is
/// |g_analytic - g_fd| / max(1e-8, |g_analytic| + |g_fd|).
template <typename F>
GradCheckResult finite_diff_check(F&& f, Tensor<double> x, double h, std::vector<std::size_t> coords = {}) {
  if (coords.empty()) {
    coords.resize(x.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
  }
  x.set_requires_grad(true);
  x.zero_grad();

  std::uint64_t centre_sig = 0;
  {
    KinkMonitor monitor;
    Tensor<double> loss = f(x);
    centre_sig = monitor.signature();
    backward(loss);
  }
  const std::vector<double> analytic(x.grad().begin(), x.grad().end());

  auto probe = [&](std::size_t i, double delta, std::uint64_t& sig) {
    NoGradGuard no_grad;
    const double saved = x[i];
    x[i] = saved + delta;
    KinkMonitor monitor;
    const double value = f(x).item();
    sig = monitor.signature();
    x[i] = saved;
    return value;
  };

  GradCheckResult result;
  for (std::size_t i : coords) {
    std::uint64_t sig_plus = 0, sig_minus = 0;
    const double plus = probe(i, h, sig_plus);
    const double minus = probe(i, -h, sig_minus);
    if (sig_plus != centre_sig || sig_minus != centre_sig) {
      ++result.excluded;
      continue;
    }
    const double numeric = (plus - minus) / (2.0 * h);
    const double denom = std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
    result.max_rel_error = std::max(result.max_rel_error, std::abs(analytic[i] - numeric) / denom);
    ++result.checked;
  }
  return result;
}

}  // namespace usam
