#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "usamnet/tensor.hpp"

namespace usam {

// Records which side of the leaky_relu kink every activation falls on while
// active. Gradient checking compares signatures of the centre and perturbed
// evaluations and drops coordinates whose perturbation crosses a kink.
class KinkMonitor {
 public:
  KinkMonitor() : previous_(active_) { active_ = this; }
  ~KinkMonitor() { active_ = previous_; }
  KinkMonitor(const KinkMonitor&) = delete;
  KinkMonitor& operator=(const KinkMonitor&) = delete;

  std::uint64_t signature() const { return hash_; }

  static void record(bool positive) {
    if (!active_) return;
    // FNV-1a over the sign stream.
    active_->hash_ ^= positive ? 0x9e3779b97f4a7c15ULL : 0x7f4a7c159e3779b9ULL;
    active_->hash_ *= 0x100000001b3ULL;
  }
  static bool active() { return active_ != nullptr; }

 private:
  inline static thread_local KinkMonitor* active_ = nullptr;
  KinkMonitor* previous_;
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [an, bn](detail::Node<T>& self) {
    for (auto* p : {an.get(), bn.get()}) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [an, bn](detail::Node<T>& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [an, bn](detail::Node<T>& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->data[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->data[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  auto an = a.node();
  return detail::make_result<T>(a.shape(), std::move(out), {&a}, [an, factor](detail::Node<T>& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.data()) total += v;
  auto an = a.node();
  return detail::make_result<T>({1}, {total}, {&a}, [an](detail::Node<T>& self) {
    auto& g = an->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ConfigError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  auto an = a.node();
  return detail::make_result<T>(std::move(shape), a.values(), {&a}, [an](detail::Node<T>& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// Swaps the last two axes of a rank-3 tensor.
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  if (a.dim() != 3) throw ConfigError("transpose_last2: expected rank 3, got " + shape_str(a.shape()));
  const std::size_t batch = a.size(0), rows = a.size(1), cols = a.size(2);
  std::vector<T> out(a.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        out[(b * cols + c) * rows + r] = a[(b * rows + r) * cols + c];
  auto an = a.node();
  return detail::make_result<T>({batch, cols, rows}, std::move(out), {&a},
                                [an, batch, rows, cols](detail::Node<T>& self) {
                                  auto& g = an->ensure_grad();
                                  for (std::size_t b = 0; b < batch; ++b)
                                    for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t c = 0; c < cols; ++c)
                                        g[(b * rows + r) * cols + c] += self.grad[(b * cols + c) * rows + r];
                                });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.01)) {
  std::vector<T> out(x.numel());
  const bool monitor = KinkMonitor::active();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x[i];
    out[i] = v >= T(0) ? v : slope * v;
    if (monitor) KinkMonitor::record(v > T(0));
  }
  auto xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [xn, slope](detail::Node<T>& self) {
    auto& g = xn->ensure_grad();
    // Derivative at exactly 0 is taken as the slope.
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (xn->data[i] > T(0) ? T(1) : slope);
  });
}

/// scale / (1 + exp(-x)), strictly inside (0, scale) for finite x.
template <typename T>
Tensor<T> sigmoid_scale(const Tensor<T>& x, T scale_factor = T(255)) {
  std::vector<T> sig(x.numel());
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x[i];
    const T s = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
    sig[i] = s;
    T y = scale_factor * s;
    // Keep the open interval even where float rounding would saturate.
    if (!(y < scale_factor)) y = std::nextafter(scale_factor, T(0));
    if (!(y > T(0))) y = std::numeric_limits<T>::denorm_min();
    out[i] = y;
  }
  auto xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x},
                                [xn, sig = std::move(sig), scale_factor](detail::Node<T>& self) {
                                  auto& g = xn->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    g[i] += self.grad[i] * scale_factor * sig[i] * (T(1) - sig[i]);
                                });
}

/// Numerically stable softmax along `axis` (max-subtracted).
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.dim()) throw ConfigError("softmax: axis out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  const std::size_t len = x.size(axis);
  for (std::size_t i = 0; i < axis; ++i) outer *= x.size(i);
  for (std::size_t i = axis + 1; i < x.dim(); ++i) inner *= x.size(i);

  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T peak = x[base];
      for (std::size_t k = 1; k < len; ++k) peak = std::max(peak, x[base + k * inner]);
      T total = 0;
      for (std::size_t k = 0; k < len; ++k) {
        const T e = std::exp(x[base + k * inner] - peak);
        out[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= total;
    }

  auto xn = x.node();
  return detail::make_result<T>(
      x.shape(), out, {&x}, [xn, out, outer, inner, len](detail::Node<T>& self) {
        auto& g = xn->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            T dot = 0;
            for (std::size_t k = 0; k < len; ++k) dot += self.grad[base + k * inner] * out[base + k * inner];
            for (std::size_t k = 0; k < len; ++k) {
              const std::size_t idx = base + k * inner;
              g[idx] += out[idx] * (self.grad[idx] - dot);
            }
          }
      });
}

namespace detail {

// C[M,N] (+)= op(A) * op(B), row-major. Each output element is reduced over
// k in ascending order, so results do not depend on the call site.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b,
          T* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a[i * k + p];
        if (av == T(0)) continue;
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const T* arow = a + i * k;
        const T* brow = b + j * k;
        T acc = 0;
        for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        c[i * n + j] += acc;
      }
  } else if (trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a[p * m + i];
        if (av == T(0)) continue;
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        T acc = 0;
        for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
        c[i * n + j] += acc;
      }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dim() != 3 || b.dim() != 3)
    throw ConfigError("batched_matmul: expected rank-3 operands, got " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()));
  if (a.size(0) != b.size(0))
    throw ConfigError("batched_matmul: batch dimension " + std::to_string(a.size(0)) + " vs " +
                      std::to_string(b.size(0)));
  if (a.size(2) != b.size(1))
    throw ConfigError("batched_matmul: inner dimension " + std::to_string(a.size(2)) + " vs " +
                      std::to_string(b.size(1)));
  const std::size_t batch = a.size(0), m = a.size(1), k = a.size(2), n = b.size(2);
  std::vector<T> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i)
    detail::gemm(false, false, m, n, k, a.data().data() + i * m * k, b.data().data() + i * k * n,
                 out.data() + i * m * n, false);
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>({batch, m, n}, std::move(out), {&a, &b},
                                [an, bn, batch, m, n, k](detail::Node<T>& self) {
                                  for (std::size_t i = 0; i < batch; ++i) {
                                    const T* go = self.grad.data() + i * m * n;
                                    if (an->requires_grad)
                                      detail::gemm(false, true, m, k, n, go, bn->data.data() + i * k * n,
                                                   an->ensure_grad().data() + i * m * k, true);
                                    if (bn->requires_grad)
                                      detail::gemm(true, false, k, n, m, an->data.data() + i * m * k, go,
                                                   bn->ensure_grad().data() + i * k * n, true);
                                  }
                                });
}

/// Concatenates rank-4 tensors along the channel axis.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw UsageError("concat_channels: nothing to concatenate");
  const std::size_t batch = parts[0].size(0), h = parts[0].size(2), w = parts[0].size(3);
  std::size_t channels = 0;
  for (const auto& p : parts) {
    if (p.dim() != 4 || p.size(0) != batch || p.size(2) != h || p.size(3) != w)
      throw ConfigError("concat_channels: incompatible part " + shape_str(p.shape()));
    channels += p.size(1);
  }
  const std::size_t plane = h * w;
  std::vector<T> out(batch * channels * plane);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.size(1);
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(p.data().data() + b * pc * plane, pc * plane,
                  out.data() + (b * channels + offset) * plane);
    offset += pc;
  }
  return Tensor<T>({batch, channels, h, w}, std::move(out));
}

}  // namespace usam
