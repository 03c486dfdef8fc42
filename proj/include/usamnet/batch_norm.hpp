#pragma once

#include <cmath>
#include <vector>

#include "usamnet/tensor.hpp"

namespace usam {

enum class Mode { train, eval };

template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  explicit BatchNormStats(std::size_t channels = 1)
      : running_mean(Shape{channels}, T(0)), running_var(Shape{channels}, T(1)) {}
};

struct BatchNormOptions {
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel batch normalization over (B,H,W).
///
/// Train mode normalizes with the biased batch variance and folds the batch
/// statistics into `stats` as running <- (1-momentum)*running + momentum*batch,
/// using the unbiased variance for running_var. Eval mode reads `stats` only.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                       BatchNormStats<T>& stats, Mode mode, BatchNormOptions opts = {}) {
  if (input.dim() != 4) throw ConfigError("batch_norm2d: input must be rank 4, got " + shape_str(input.shape()));
  const std::size_t batch = input.size(0), channels = input.size(1);
  const std::size_t plane = input.size(2) * input.size(3);
  const Shape cshape{channels};
  if (gamma.shape() != cshape || beta.shape() != cshape)
    throw ConfigError("batch_norm2d: gamma/beta must have shape " + shape_str(cshape));
  if (stats.running_mean.shape() != cshape || stats.running_var.shape() != cshape)
    throw ConfigError("batch_norm2d: running stats must have shape " + shape_str(cshape));
  const std::size_t count = batch * plane;
  const T eps = static_cast<T>(opts.eps);

  std::vector<T> mean(channels), inv_std(channels);
  if (mode == Mode::train) {
    if (count < 2)
      throw DegenerateBatchError("batch_norm2d: train mode needs at least 2 values per channel, got " +
                                 std::to_string(count));
    const T momentum = static_cast<T>(opts.momentum);
    for (std::size_t c = 0; c < channels; ++c) {
      T acc = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = input.data().data() + (b * channels + c) * plane;
        for (std::size_t s = 0; s < plane; ++s) acc += p[s];
      }
      const T mu = acc / static_cast<T>(count);
      T sq = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = input.data().data() + (b * channels + c) * plane;
        for (std::size_t s = 0; s < plane; ++s) sq += (p[s] - mu) * (p[s] - mu);
      }
      const T var = sq / static_cast<T>(count);
      mean[c] = mu;
      inv_std[c] = T(1) / std::sqrt(var + eps);
      const T unbiased = sq / static_cast<T>(count - 1);
      stats.running_mean[c] = (T(1) - momentum) * stats.running_mean[c] + momentum * mu;
      stats.running_var[c] = (T(1) - momentum) * stats.running_var[c] + momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = stats.running_mean[c];
      inv_std[c] = T(1) / std::sqrt(stats.running_var[c] + eps);
    }
  }

  std::vector<T> xhat(input.numel());
  std::vector<T> out(input.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (b * channels + c) * plane;
      for (std::size_t s = 0; s < plane; ++s) {
        const T xh = (input[base + s] - mean[c]) * inv_std[c];
        xhat[base + s] = xh;
        out[base + s] = gamma[c] * xh + beta[c];
      }
    }

  auto in_n = input.node(), g_n = gamma.node(), b_n = beta.node();
  const bool batch_stats = mode == Mode::train;
  return detail::make_result<T>(
      input.shape(), std::move(out), {&input, &gamma, &beta},
      [in_n, g_n, b_n, xhat = std::move(xhat), inv_std, batch, channels, plane, count,
       batch_stats](detail::Node<T>& self) {
        const auto& gy = self.grad;
        for (std::size_t c = 0; c < channels; ++c) {
          T sum_dy = 0, sum_dy_xhat = 0;
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t base = (b * channels + c) * plane;
            for (std::size_t s = 0; s < plane; ++s) {
              sum_dy += gy[base + s];
              sum_dy_xhat += gy[base + s] * xhat[base + s];
            }
          }
          if (g_n->requires_grad) g_n->ensure_grad()[c] += sum_dy_xhat;
          if (b_n->requires_grad) b_n->ensure_grad()[c] += sum_dy;
          if (!in_n->requires_grad) continue;
          auto& gi = in_n->ensure_grad();
          const T gam = g_n->data[c];
          const T n = static_cast<T>(count);
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t base = (b * channels + c) * plane;
            for (std::size_t s = 0; s < plane; ++s) {
              const std::size_t i = base + s;
              if (batch_stats)
                gi[i] += gam * inv_std[c] / n * (n * gy[i] - sum_dy - xhat[i] * sum_dy_xhat);
              else
                gi[i] += gam * inv_std[c] * gy[i];
            }
          }
        }
      });
}

}  // namespace usam
