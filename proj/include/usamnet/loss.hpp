#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "usamnet/tensor.hpp"

namespace usam {

using Mask = Tensor<std::uint8_t>;

/// Smooth-L1 averaged over pixels where `valid` is nonzero.
/// Per pixel with d = pred - target: 0.5*d^2/beta if |d| < beta, else |d| - 0.5*beta.
/// Only `pred` receives gradient; invalid pixels contribute nothing.
template <typename T>
Tensor<T> smooth_l1_masked_loss(const Tensor<T>& pred, const Tensor<T>& target, const Mask& valid, T beta = T(1)) {
  if (pred.shape() != target.shape())
    throw ConfigError("smooth_l1_masked_loss: pred " + shape_str(pred.shape()) + " vs target " +
                      shape_str(target.shape()));
  if (valid.numel() != pred.numel())
    throw ConfigError("smooth_l1_masked_loss: mask " + shape_str(valid.shape()) + " vs pred " +
                      shape_str(pred.shape()));
  if (!(beta > T(0))) throw ConfigError("smooth_l1_masked_loss: beta must be positive");

  std::size_t count = 0;
  T total = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    if (!valid[i]) continue;
    const T d = pred[i] - target[i];
    const T ad = std::abs(d);
    total += ad < beta ? T(0.5) * d * d / beta : ad - T(0.5) * beta;
    ++count;
  }
  if (count == 0) throw NoValidPixelsError("smooth_l1_masked_loss: no valid pixels in batch");
  const T inv_count = T(1) / static_cast<T>(count);

  auto pn = pred.node();
  std::vector<T> residual(pred.numel(), T(0));
  for (std::size_t i = 0; i < pred.numel(); ++i)
    if (valid[i]) residual[i] = pred[i] - target[i];
  std::vector<std::uint8_t> mask(valid.values());
  return detail::make_result<T>(
      {1}, {total * inv_count}, {&pred},
      [pn, residual = std::move(residual), mask = std::move(mask), beta, inv_count](detail::Node<T>& self) {
        auto& g = pn->ensure_grad();
        const T upstream = self.grad[0] * inv_count;
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (!mask[i]) continue;
          const T d = residual[i];
          const T slope = std::abs(d) < beta ? d / beta : (d > T(0) ? T(1) : T(-1));
          g[i] += upstream * slope;
        }
      });
}

}  // namespace usam
