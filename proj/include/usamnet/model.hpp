#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "usamnet/batch_norm.hpp"
#include "usamnet/conv.hpp"
#include "usamnet/ops.hpp"
#include "usamnet/random.hpp"

namespace usam {

/// Architecture description. Channel widths are fixed by the design; the
/// divisor only exists to shrink the network for gradient checks and
/// desk-scale runs (1 = full size).
struct ModelConfig {
  bool use_segmentation = true;
  bool use_attention = true;
  std::size_t input_height = 64;
  std::size_t input_width = 64;
  std::size_t channel_divisor = 1;
  double leaky_slope = 0.01;
  double output_scale = 255.0;

  static constexpr std::array<std::size_t, 5> kEncoderChannels{64, 128, 256, 512, 1024};
  static constexpr std::array<std::size_t, 5> kDecoderChannels{512, 256, 128, 64, 32};
  static constexpr std::array<std::size_t, 2> kHeadChannels{64, 128};

  std::size_t input_channels() const { return use_segmentation ? 9 : 6; }
  std::size_t encoder_channels(std::size_t i) const { return kEncoderChannels.at(i) / channel_divisor; }
  std::size_t decoder_channels(std::size_t i) const { return kDecoderChannels.at(i) / channel_divisor; }
  std::size_t head_channels(std::size_t i) const { return kHeadChannels.at(i) / channel_divisor; }

  void validate() const {
    if (input_height == 0 || input_height % 32 != 0)
      throw ConfigError("input_height " + std::to_string(input_height) + " is not a positive multiple of 32");
    if (input_width == 0 || input_width % 32 != 0)
      throw ConfigError("input_width " + std::to_string(input_width) + " is not a positive multiple of 32");
    if (channel_divisor == 0 || 32 % channel_divisor != 0)
      throw ConfigError("channel_divisor must divide 32, got " + std::to_string(channel_divisor));
    if (use_attention && encoder_channels(4) % 8 != 0)
      throw ConfigError("attention needs bottleneck channels divisible by 8");
    if (!(output_scale > 0)) throw ConfigError("output_scale must be positive");
  }

  // Canonical form: the checkpoint's config hash is taken over dump() of this.
  nlohmann::json to_json() const {
    return {{"use_segmentation", use_segmentation}, {"use_attention", use_attention},
            {"input_height", input_height},         {"input_width", input_width},
            {"channel_divisor", channel_divisor},   {"leaky_slope", leaky_slope},
            {"output_scale", output_scale}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    for (const auto& [key, value] : j.items()) {
      if (key == "use_segmentation") c.use_segmentation = value.get<bool>();
      else if (key == "use_attention") c.use_attention = value.get<bool>();
      else if (key == "input_height") c.input_height = value.get<std::size_t>();
      else if (key == "input_width") c.input_width = value.get<std::size_t>();
      else if (key == "channel_divisor") c.channel_divisor = value.get<std::size_t>();
      else if (key == "leaky_slope") c.leaky_slope = value.get<double>();
      else if (key == "output_scale") c.output_scale = value.get<double>();
      else throw ConfigError("unknown model config key '" + key + "'");
    }
    return c;
  }

  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : to_json().dump()) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

inline std::uint64_t name_hash(const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
struct ConvLayer {
  std::string name;
  ConvSpec spec;
  bool transposed = false;
  Tensor<T> weight;
  Tensor<T> bias;

  ConvLayer() = default;
  ConvLayer(std::string layer_name, ConvSpec s, bool is_transposed)
      : name(std::move(layer_name)),
        spec(s),
        transposed(is_transposed),
        weight(is_transposed ? Shape{s.in_channels, s.out_channels, s.kernel_h, s.kernel_w}
                             : Shape{s.out_channels, s.in_channels, s.kernel_h, s.kernel_w}),
        bias(Shape{s.out_channels}) {
    weight.set_requires_grad(true);
    bias.set_requires_grad(true);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return transposed ? conv_transpose2d(x, spec, weight, bias) : conv2d(x, spec, weight, bias);
  }

  // Kaiming-normal (fan-in) for leaky ReLU, zero bias. Fan-in counts the
  // input channels times the kernel window for both directions.
  void init(std::uint64_t seed, double slope) {
    const double fan_in = static_cast<double>(spec.in_channels * spec.kernel_h * spec.kernel_w);
    const double stddev = std::sqrt(2.0 / ((1.0 + slope * slope) * fan_in));
    Rng rng(mix_seed(seed, name_hash(name)));
    for (auto& w : weight.values()) w = static_cast<T>(stddev * rng.normal());
    std::fill(bias.values().begin(), bias.values().end(), T(0));
  }

  void collect(std::vector<NamedTensor<T>>& out) const {
    out.push_back({name + ".weight", weight});
    out.push_back({name + ".bias", bias});
  }
};

template <typename T>
struct BatchNormLayer {
  std::string name;
  Tensor<T> gamma;
  Tensor<T> beta;
  BatchNormStats<T> stats;

  BatchNormLayer() = default;
  BatchNormLayer(std::string layer_name, std::size_t channels)
      : name(std::move(layer_name)), gamma(Shape{channels}, T(1)), beta(Shape{channels}, T(0)), stats(channels) {
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
  }

  Tensor<T> operator()(const Tensor<T>& x, Mode mode) { return batch_norm2d(x, gamma, beta, stats, mode); }

  void init() {
    std::fill(gamma.values().begin(), gamma.values().end(), T(1));
    std::fill(beta.values().begin(), beta.values().end(), T(0));
    std::fill(stats.running_mean.values().begin(), stats.running_mean.values().end(), T(0));
    std::fill(stats.running_var.values().begin(), stats.running_var.values().end(), T(1));
  }

  void collect(std::vector<NamedTensor<T>>& out) const {
    out.push_back({name + ".gamma", gamma});
    out.push_back({name + ".beta", beta});
  }
  void collect_buffers(std::vector<NamedTensor<T>>& out) const {
    out.push_back({name + ".running_mean", stats.running_mean});
    out.push_back({name + ".running_var", stats.running_var});
  }
};

/// Bottleneck self-attention with a residual skip.
///
/// With N = H*W, query/key are 1x1 projections to C/8 channels and value a
/// 1x1 projection to C channels. Scores S = Q^T K (B,N,N) are softmaxed over
/// the key axis without scaling, and y = x + V A^T reshaped back to (B,C,H,W).
template <typename T>
struct SelfAttention {
  ConvLayer<T> query;
  ConvLayer<T> key;
  ConvLayer<T> value;

  SelfAttention() = default;
  SelfAttention(const std::string& name, std::size_t channels)
      : query(name + ".query", {channels, channels / 8, 1, 1, 1, 0}, false),
        key(name + ".key", {channels, channels / 8, 1, 1, 1, 0}, false),
        value(name + ".value", {channels, channels, 1, 1, 1, 0}, false) {
    if (channels % 8 != 0) throw ConfigError("self-attention channels must be divisible by 8");
  }

  std::size_t channels() const { return value.spec.in_channels; }

  // Attention weights A (B,N,N); row i holds query position i's distribution over keys.
  Tensor<T> attention_weights(const Tensor<T>& x) const {
    const std::size_t batch = x.size(0), n = x.size(2) * x.size(3), reduced = query.spec.out_channels;
    Tensor<T> q = reshape(query(x), {batch, reduced, n});
    Tensor<T> k = reshape(key(x), {batch, reduced, n});
    return softmax(batched_matmul(transpose_last2(q), k), 2);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.dim() != 4 || x.size(1) != channels())
      throw ConfigError("self-attention expects " + std::to_string(channels()) + " channels, got " +
                        shape_str(x.shape()));
    const std::size_t batch = x.size(0), n = x.size(2) * x.size(3);
    Tensor<T> attn = attention_weights(x);
    Tensor<T> v = reshape(value(x), {batch, channels(), n});
    Tensor<T> mixed = batched_matmul(v, transpose_last2(attn));
    return add(x, reshape(mixed, x.shape()));
  }

  void init(std::uint64_t seed, double slope) {
    query.init(seed, slope);
    key.init(seed, slope);
    value.init(seed, slope);
  }

  void collect(std::vector<NamedTensor<T>>& out) const {
    query.collect(out);
    key.collect(out);
    value.collect(out);
  }
};

template <typename T>
struct Stage {
  ConvLayer<T> conv;
  BatchNormLayer<T> norm;
};

/// U-Net disparity network: five stride-2 encoder stages, optional bottleneck
/// attention, five stride-2 transposed-conv decoder stages with additive
/// skips, and a three-conv head ending in a scaled sigmoid.
///
/// Skips add encoder stage k's output to decoder stage 4-k's output
/// (k = 0..3), both taken after activation and batch norm.
template <typename T>
class UsamNet {
 public:
  UsamNet() = default;

  explicit UsamNet(const ModelConfig& config) : config_(config) {
    config_.validate();
    std::size_t in = config_.input_channels();
    for (std::size_t i = 0; i < 5; ++i) {
      const std::size_t out = config_.encoder_channels(i);
      const std::string name = "encoder" + std::to_string(i + 1);
      encoder_[i] = {ConvLayer<T>(name + ".conv", {in, out, 3, 3, 2, 1}, false), BatchNormLayer<T>(name + ".bn", out)};
      in = out;
    }
    if (config_.use_attention) attention_.emplace("attention", in);
    // Output padding chosen per axis so every stage exactly doubles H and W.
    constexpr std::array<std::array<std::size_t, 2>, 5> kernels{{{3, 3}, {4, 4}, {4, 4}, {4, 4}, {4, 3}}};
    for (std::size_t i = 0; i < 5; ++i) {
      const std::size_t out = config_.decoder_channels(i);
      const std::string name = "decoder" + std::to_string(i + 1);
      const auto [kh, kw] = kernels[i];
      ConvSpec spec{in, out, kh, kw, 2, 1, kh == 3 ? 1u : 0u, kw == 3 ? 1u : 0u};
      decoder_[i] = {ConvLayer<T>(name + ".deconv", spec, true), BatchNormLayer<T>(name + ".bn", out)};
      in = out;
    }
    head_[0] = ConvLayer<T>("head.conv1", {in, config_.head_channels(0), 3, 3, 1, 1}, false);
    head_[1] = ConvLayer<T>("head.conv2", {config_.head_channels(0), config_.head_channels(1), 3, 3, 1, 1}, false);
    head_[2] = ConvLayer<T>("head.conv3", {config_.head_channels(1), 1, 1, 1, 1, 0}, false);
  }

  const ModelConfig& config() const { return config_; }
  bool has_attention() const { return attention_.has_value(); }
  SelfAttention<T>& attention() { return attention_.value(); }
  const SelfAttention<T>& attention() const { return attention_.value(); }
  Stage<T>& encoder(std::size_t i) { return encoder_.at(i); }
  Stage<T>& decoder(std::size_t i) { return decoder_.at(i); }
  ConvLayer<T>& head(std::size_t i) { return head_.at(i); }

  void init_weights(std::uint64_t seed) {
    const double slope = config_.leaky_slope;
    for (auto& s : encoder_) {
      s.conv.init(seed, slope);
      s.norm.init();
    }
    if (attention_) attention_->init(seed, slope);
    for (auto& s : decoder_) {
      s.conv.init(seed, slope);
      s.norm.init();
    }
    for (auto& c : head_) c.init(seed, slope);
  }

  /// (B,Cin,H,W) -> (B,1,H,W) with values in (0, output_scale).
  /// Train mode uses batch statistics and updates the running ones.
  Tensor<T> forward(const Tensor<T>& batch, Mode mode) {
    if (batch.dim() != 4) throw ConfigError("forward: batch must be rank 4, got " + shape_str(batch.shape()));
    if (batch.size(1) != config_.input_channels())
      throw ConfigError("forward: model expects " + std::to_string(config_.input_channels()) +
                        " input channels, got " + std::to_string(batch.size(1)));
    if (batch.size(2) != config_.input_height || batch.size(3) != config_.input_width)
      throw ConfigError("forward: model expects " + std::to_string(config_.input_height) + "x" +
                        std::to_string(config_.input_width) + " input, got " + std::to_string(batch.size(2)) +
                        "x" + std::to_string(batch.size(3)));
    const T slope = static_cast<T>(config_.leaky_slope);

    std::array<Tensor<T>, 5> skips;
    Tensor<T> x = batch;
    for (std::size_t i = 0; i < 5; ++i) {
      x = encoder_[i].norm(leaky_relu(encoder_[i].conv(x), slope), mode);
      skips[i] = x;
    }
    if (attention_) x = (*attention_)(x);
    for (std::size_t i = 0; i < 5; ++i) {
      x = decoder_[i].norm(leaky_relu(decoder_[i].conv(x), slope), mode);
      if (i < 4) x = add(x, skips[3 - i]);
    }
    x = leaky_relu(head_[0](x), slope);
    x = leaky_relu(head_[1](x), slope);
    return sigmoid_scale(head_[2](x), static_cast<T>(config_.output_scale));
  }

  /// Learnable tensors in a fixed order, named by layer.
  std::vector<NamedTensor<T>> parameters() const {
    std::vector<NamedTensor<T>> out;
    for (const auto& s : encoder_) {
      s.conv.collect(out);
      s.norm.collect(out);
    }
    if (attention_) attention_->collect(out);
    for (const auto& s : decoder_) {
      s.conv.collect(out);
      s.norm.collect(out);
    }
    for (const auto& c : head_) c.collect(out);
    return out;
  }

  /// Batch-norm running statistics (not learnable).
  std::vector<NamedTensor<T>> buffers() const {
    std::vector<NamedTensor<T>> out;
    for (const auto& s : encoder_) s.norm.collect_buffers(out);
    for (const auto& s : decoder_) s.norm.collect_buffers(out);
    return out;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }

 private:
  ModelConfig config_;
  std::array<Stage<T>, 5> encoder_;
  std::optional<SelfAttention<T>> attention_;
  std::array<Stage<T>, 5> decoder_;
  std::array<ConvLayer<T>, 3> head_;
};

template <typename T>
UsamNet<T> build_model(const ModelConfig& config, std::uint64_t seed) {
  UsamNet<T> model(config);
  model.init_weights(seed);
  return model;
}

template <typename T>
std::size_t param_count(const ConvLayer<T>& layer) {
  std::vector<NamedTensor<T>> params;
  layer.collect(params);
  std::size_t total = 0;
  for (const auto& p : params) total += p.tensor.numel();
  return total;
}

template <typename T>
std::size_t param_count(const UsamNet<T>& model) {
  std::size_t total = 0;
  for (const auto& p : model.parameters()) total += p.tensor.numel();
  return total;
}

}  // namespace usam
