#pragma once

#include <vector>

#include "usamnet/data.hpp"
#include "usamnet/model.hpp"

namespace usam {

/// Stacks left‖right‖seg (seg only when `use_segmentation`) into (B,C,H,W).
/// Left and right are normalized here; seg passes through unchanged.
inline Tensor<float> assemble_input(const std::vector<const StereoSample*>& samples, bool use_segmentation,
                                    const NormalizationStats& stats) {
  if (samples.empty()) throw UsageError("assemble_input: empty batch");
  const std::size_t h = samples[0]->height(), w = samples[0]->width(), plane = h * w;
  const std::size_t channels = use_segmentation ? 9 : 6;
  Tensor<float> batch({samples.size(), channels, h, w});
  float* out = batch.data().data();
  for (std::size_t b = 0; b < samples.size(); ++b) {
    const StereoSample& s = *samples[b];
    if (s.height() != h || s.width() != w)
      throw DataError("assemble_input: sample " + std::to_string(b) + " is " + std::to_string(s.height()) + "x" +
                      std::to_string(s.width()) + ", batch is " + std::to_string(h) + "x" + std::to_string(w));
    if (use_segmentation && !s.seg) throw DataError("assemble_input: segmentation model needs a seg image");
    float* dst = out + b * channels * plane;
    const auto left = normalize_image(s.left, stats);
    const auto right = normalize_image(s.right, stats);
    std::copy_n(left.data().data(), 3 * plane, dst);
    std::copy_n(right.data().data(), 3 * plane, dst + 3 * plane);
    if (use_segmentation) std::copy_n(s.seg->data().data(), 3 * plane, dst + 6 * plane);
  }
  return batch;
}

/// Eval-mode prediction for one sample, (1,H,W) in (0, output_scale).
inline Tensor<float> predict_disparity(UsamNet<float>& model, const StereoSample& sample,
                                       const NormalizationStats& stats = {}) {
  NoGradGuard no_grad;
  const Tensor<float> input = assemble_input({&sample}, model.config().use_segmentation, stats);
  const Tensor<float> out = model.forward(input, Mode::eval);
  return Tensor<float>({1, sample.height(), sample.width()}, out.values());
}


/// Fixed colormap for disparity renderings: 0 -> dark blue, through cyan,
/// yellow and red, to `max_disparity` -> dark red (piecewise linear "jet").
inline Tensor<float> colorize_disparity(const Tensor<float>& disparity, float max_disparity) {
  if (!(max_disparity > 0.0f)) throw UsageError("colorize_disparity: max_disparity must be positive");
  const std::size_t plane = disparity.numel();
  Tensor<float> rgb({3, disparity.size(disparity.dim() - 2), disparity.size(disparity.dim() - 1)});
  auto ramp = [](float x) { return std::clamp(1.5f - std::abs(x), 0.0f, 1.0f); };
  for (std::size_t p = 0; p < plane; ++p) {
    const float t = 4.0f * std::clamp(disparity[p] / max_disparity, 0.0f, 1.0f) - 2.0f;
    rgb[p] = ramp(t - 1.0f);
    rgb[plane + p] = ramp(t);
    rgb[2 * plane + p] = ramp(t + 1.0f);
  }
  return rgb;
}

}  // namespace usam
