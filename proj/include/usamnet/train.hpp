#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "usamnet/data.hpp"
#include "usamnet/inference.hpp"
#include "usamnet/loss.hpp"
#include "usamnet/model.hpp"

namespace usam {

struct TrainConfig {
  std::size_t epochs = 30;
  double base_lr = 0.001;
  double lr_decay = 0.9;
  std::size_t batch_size = 2;
  std::size_t repeats = 1;  // passes over the dataset per epoch
  double smooth_l1_beta = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  AugmentConfig augment;

  void validate() const {
    if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must be in (0,1]");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (repeats == 0) throw ConfigError("repeats must be positive");
    if (!(smooth_l1_beta > 0.0)) throw ConfigError("smooth_l1_beta must be positive");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
      throw ConfigError("adam betas must be in [0,1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    augment.validate();
  }

  nlohmann::json to_json() const {
    return {{"epochs", epochs},         {"base_lr", base_lr},
            {"lr_decay", lr_decay},     {"batch_size", batch_size},
            {"repeats", repeats},       {"smooth_l1_beta", smooth_l1_beta},
            {"adam_beta1", adam_beta1}, {"adam_beta2", adam_beta2},
            {"adam_eps", adam_eps},     {"seed", seed},
            {"augment", augment.to_json()}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    for (const auto& [key, value] : j.items()) {
      if (key == "epochs") c.epochs = value.get<std::size_t>();
      else if (key == "base_lr") c.base_lr = value.get<double>();
      else if (key == "lr_decay") c.lr_decay = value.get<double>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "repeats") c.repeats = value.get<std::size_t>();
      else if (key == "smooth_l1_beta") c.smooth_l1_beta = value.get<double>();
      else if (key == "adam_beta1") c.adam_beta1 = value.get<double>();
      else if (key == "adam_beta2") c.adam_beta2 = value.get<double>();
      else if (key == "adam_eps") c.adam_eps = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "augment") c.augment = AugmentConfig::from_json(value);
      else throw ConfigError("unknown train config key '" + key + "'");
    }
    return c;
  }
};

inline double lr_at_epoch(const TrainConfig& config, std::size_t epoch) {
  return config.base_lr * std::pow(config.lr_decay, static_cast<double>(epoch));
}

// ---------------------------------------------------------------------- Adam

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t t = 0;

  static AdamState zeros_like(const std::vector<NamedTensor<T>>& params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.tensor.numel(), T(0));
      s.v.emplace_back(p.tensor.numel(), T(0));
    }
    return s;
  }
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update. Parameters without a gradient see g = 0.
template <typename T>
void adam_step(const std::vector<NamedTensor<T>>& params, AdamState<T>& state, double lr,
               const AdamOptions& opts = {}) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ConfigError("adam_step: state holds " + std::to_string(state.m.size()) + " buffers for " +
                      std::to_string(params.size()) + " parameters");
  ++state.t;
  const double c1 = 1.0 - std::pow(opts.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(opts.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T> p = params[i].tensor;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.numel() || v.size() != p.numel())
      throw ConfigError("adam_step: buffer size mismatch for " + params[i].name);
    const bool has_grad = p.has_grad();
    for (std::size_t k = 0; k < p.numel(); ++k) {
      const double g = has_grad ? static_cast<double>(p.grad()[k]) : 0.0;
      const double mk = opts.beta1 * m[k] + (1.0 - opts.beta1) * g;
      const double vk = opts.beta2 * v[k] + (1.0 - opts.beta2) * g * g;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      p[k] = static_cast<T>(p[k] - lr * (mk / c1) / (std::sqrt(vk / c2) + opts.eps));
    }
  }
}

inline AdamOptions adam_options(const TrainConfig& c) { return {c.adam_beta1, c.adam_beta2, c.adam_eps}; }

// ---------------------------------------------------------------- checkpoint

struct Checkpoint {
  ModelConfig model;
  std::vector<NamedTensor<float>> params;
  std::vector<NamedTensor<float>> buffers;
  AdamState<float> adam;
  std::uint64_t epoch = 0;  // completed epochs
  std::uint64_t step = 0;   // batches processed, including skipped ones
};

inline Checkpoint capture_checkpoint(const UsamNet<float>& model, const AdamState<float>& adam, std::uint64_t epoch,
                                     std::uint64_t step) {
  Checkpoint c{model.config(), {}, {}, adam, epoch, step};
  for (const auto& p : model.parameters()) c.params.push_back({p.name, p.tensor.clone()});
  for (const auto& b : model.buffers()) c.buffers.push_back({b.name, b.tensor.clone()});
  return c;
}

/// Copies weights and running stats into `model`; names and shapes must match.
inline void restore_checkpoint(const Checkpoint& ckpt, UsamNet<float>& model) {
  if (ckpt.model.hash() != model.config().hash())
    throw IncompatibleError("checkpoint model config " + ckpt.model.to_json().dump() + " does not match " +
                            model.config().to_json().dump());
  auto copy = [](const std::vector<NamedTensor<float>>& from, const std::vector<NamedTensor<float>>& to) {
    if (from.size() != to.size())
      throw IncompatibleError("checkpoint holds " + std::to_string(from.size()) + " tensors, model has " +
                              std::to_string(to.size()));
    for (std::size_t i = 0; i < from.size(); ++i) {
      if (from[i].name != to[i].name || from[i].tensor.shape() != to[i].tensor.shape())
        throw IncompatibleError("checkpoint tensor " + from[i].name + " " + shape_str(from[i].tensor.shape()) +
                                " does not match model tensor " + to[i].name + " " +
                                shape_str(to[i].tensor.shape()));
      Tensor<float> dst = to[i].tensor;
      std::copy(from[i].tensor.values().begin(), from[i].tensor.values().end(), dst.values().begin());
    }
  };
  copy(ckpt.params, model.parameters());
  copy(ckpt.buffers, model.buffers());
}

inline UsamNet<float> model_from_checkpoint(const Checkpoint& ckpt) {
  UsamNet<float> model(ckpt.model);
  restore_checkpoint(ckpt, model);
  return model;
}

namespace detail {

inline constexpr const char* kCheckpointMagic = "USAMNET-CHECKPOINT 1";

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline void put_floats(std::string& out, const float* values, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
  }
}

inline void get_floats(const std::string& in, std::size_t offset, float* values, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b)
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + 4 * i + b])) << (8 * b);
    values[i] = std::bit_cast<float>(bits);
  }
}

}  // namespace detail

/// Layout: magic line, header byte count line, canonical JSON header line,
/// then float32 little-endian payloads at the offsets listed in the header.
/// Tensor sections: "param/<name>", "buffer/<name>", "adam_m/<name>", "adam_v/<name>".
inline std::string serialize_checkpoint(const Checkpoint& c) {
  nlohmann::json tensors = nlohmann::json::array();
  std::string payload;
  auto section = [&](const std::string& name, const Shape& shape, const float* data, std::size_t n) {
    tensors.push_back({{"name", name}, {"shape", shape}, {"offset", payload.size()}, {"count", n}});
    detail::put_floats(payload, data, n);
  };
  if (c.adam.m.size() != c.params.size() || c.adam.v.size() != c.params.size())
    throw UsageError("checkpoint optimizer state does not match parameter count");
  for (const auto& p : c.params) section("param/" + p.name, p.tensor.shape(), p.tensor.data().data(), p.tensor.numel());
  for (const auto& b : c.buffers)
    section("buffer/" + b.name, b.tensor.shape(), b.tensor.data().data(), b.tensor.numel());
  for (std::size_t i = 0; i < c.params.size(); ++i) {
    section("adam_m/" + c.params[i].name, c.params[i].tensor.shape(), c.adam.m[i].data(), c.adam.m[i].size());
    section("adam_v/" + c.params[i].name, c.params[i].tensor.shape(), c.adam.v[i].data(), c.adam.v[i].size());
  }
  const nlohmann::json header{{"byte_order", "little"},
                              {"dtype", "float32"},
                              {"model_config", c.model.to_json()},
                              {"config_hash", detail::hex64(c.model.hash())},
                              {"epoch", c.epoch},
                              {"step", c.step},
                              {"adam_t", c.adam.t},
                              {"tensors", tensors},
                              {"payload_bytes", payload.size()}};
  const std::string header_text = header.dump();
  std::string out = std::string(detail::kCheckpointMagic) + "\n" + std::to_string(header_text.size()) + "\n" +
                    header_text + "\n";
  out += payload;
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& source = "checkpoint") {
  auto fail = [&](const std::string& why) -> FormatError { return FormatError(source + ": " + why); };
  std::size_t pos = bytes.find('\n');
  if (pos == std::string::npos || bytes.substr(0, pos) != detail::kCheckpointMagic)
    throw fail("not a checkpoint file");
  const std::size_t len_end = bytes.find('\n', pos + 1);
  if (len_end == std::string::npos) throw fail("truncated header");
  std::size_t header_len = 0;
  try {
    header_len = std::stoull(bytes.substr(pos + 1, len_end - pos - 1));
  } catch (const std::exception&) {
    throw fail("bad header length");
  }
  const std::size_t header_start = len_end + 1;
  if (bytes.size() < header_start + header_len + 1) throw fail("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(header_start, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("bad header: ") + e.what());
  }
  const std::size_t payload_start = header_start + header_len + 1;
  Checkpoint c;
  try {
    if (header.at("byte_order") != "little" || header.at("dtype") != "float32") throw fail("unsupported encoding");
    const std::size_t payload_bytes = header.at("payload_bytes").get<std::size_t>();
    if (bytes.size() - payload_start != payload_bytes)
      throw fail("payload is " + std::to_string(bytes.size() - payload_start) + " bytes, header says " +
                 std::to_string(payload_bytes));
    c.model = ModelConfig::from_json(header.at("model_config"));
    if (header.at("config_hash").get<std::string>() != detail::hex64(c.model.hash()))
      throw fail("config hash does not match stored model config");
    c.epoch = header.at("epoch").get<std::uint64_t>();
    c.step = header.at("step").get<std::uint64_t>();
    c.adam.t = header.at("adam_t").get<std::uint64_t>();
    for (const auto& t : header.at("tensors")) {
      const std::string name = t.at("name").get<std::string>();
      const Shape shape = t.at("shape").get<Shape>();
      const std::size_t offset = t.at("offset").get<std::size_t>();
      const std::size_t count = t.at("count").get<std::size_t>();
      if (count != shape_numel(shape) || offset + 4 * count > payload_bytes) throw fail("bad section " + name);
      std::vector<float> values(count);
      detail::get_floats(bytes, payload_start + offset, values.data(), count);
      const auto slash = name.find('/');
      const std::string kind = name.substr(0, slash), tensor_name = name.substr(slash + 1);
      if (kind == "param") c.params.push_back({tensor_name, Tensor<float>(shape, std::move(values))});
      else if (kind == "buffer") c.buffers.push_back({tensor_name, Tensor<float>(shape, std::move(values))});
      else if (kind == "adam_m") c.adam.m.push_back(std::move(values));
      else if (kind == "adam_v") c.adam.v.push_back(std::move(values));
      else throw fail("unknown section " + name);
    }
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("bad header: ") + e.what());
  } catch (const ConfigError& e) {
    throw fail(e.what());
  }
  for (auto& p : c.params) p.tensor.set_requires_grad(true);
  if (c.adam.m.size() != c.params.size() || c.adam.v.size() != c.params.size())
    throw fail("optimizer state does not match parameters");
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const fs::path& path) {
  const std::string bytes = serialize_checkpoint(c);
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize_checkpoint(buf.str(), path.string());
}

// ------------------------------------------------------------------ training

struct TrainBatch {
  Tensor<float> input;   // (B,C,H,W)
  Tensor<float> target;  // (B,1,H,W)
  Mask valid;            // (B,1,H,W)
};

/// Augments (jitter, top replacement, optional sky masking) in [0,1] space,
/// then normalizes and stacks. `step_seed` fixes every random choice.
inline TrainBatch make_train_batch(const std::vector<StereoSample>& samples, const std::vector<std::size_t>& indices,
                                   const TrainConfig& config, bool use_segmentation, std::uint64_t step_seed,
                                   const NormalizationStats& stats = {}) {
  std::vector<StereoSample> augmented;
  augmented.reserve(indices.size());
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const StereoSample& src = samples.at(indices[b]);
    const std::uint64_t s = mix_seed(step_seed, config.augment.seed, b);
    StereoSample a = top_replace_augment(src, config.augment, mix_seed(s, 1));
    auto [l, r] = color_jitter(a.left, a.right, config.augment.jitter_strength, mix_seed(s, 2));
    a.left = l;
    a.right = r;
    if (config.augment.sky_masking_enabled && a.sky) a = apply_sky_mask(a);
    augmented.push_back(std::move(a));
  }
  std::vector<const StereoSample*> ptrs;
  for (const auto& a : augmented) ptrs.push_back(&a);
  const std::size_t h = augmented[0].height(), w = augmented[0].width(), plane = h * w;
  TrainBatch batch{assemble_input(ptrs, use_segmentation, stats), Tensor<float>({indices.size(), 1, h, w}),
                   Mask({indices.size(), 1, h, w})};
  for (std::size_t b = 0; b < augmented.size(); ++b) {
    std::copy_n(augmented[b].disparity.data().data(), plane, batch.target.data().data() + b * plane);
    std::copy_n(augmented[b].valid.data().data(), plane, batch.valid.data().data() + b * plane);
  }
  return batch;
}

/// Forward, masked loss, backward and one Adam update. Gradients are left on
/// the parameters for inspection. Throws NoValidPixelsError before touching
/// any state when the batch has no supervision.
inline double train_step(UsamNet<float>& model, const TrainBatch& batch, AdamState<float>& adam, double lr,
                         const TrainConfig& config) {
  const bool any_valid =
      std::any_of(batch.valid.values().begin(), batch.valid.values().end(), [](std::uint8_t v) { return v != 0; });
  if (!any_valid) throw NoValidPixelsError("batch has no valid pixels");
  model.zero_grad();
  const Tensor<float> pred = model.forward(batch.input, Mode::train);
  Tensor<float> loss =
      smooth_l1_masked_loss(pred, batch.target, batch.valid, static_cast<float>(config.smooth_l1_beta));
  const double value = loss.item();
  backward(loss);
  adam_step(model.parameters(), adam, lr, adam_options(config));
  return value;
}

struct TrainLogEntry {
  std::uint64_t epoch = 0;
  std::uint64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;  // NaN for a skipped batch
  bool skipped = false;
};

struct TrainOptions {
  fs::path out_dir;  // empty: no files written
  std::function<void(const TrainLogEntry&)> on_step;
  NormalizationStats stats;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<TrainLogEntry> log;
  std::size_t skipped_batches = 0;
};

/// Deterministic visiting order for one epoch: `repeats` copies of the index
/// set, Fisher-Yates shuffled with a seed derived from (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t count, const TrainConfig& config, std::uint64_t epoch) {
  std::vector<std::size_t> order;
  for (std::size_t r = 0; r < config.repeats; ++r)
    for (std::size_t i = 0; i < count; ++i) order.push_back(i);
  Rng rng(mix_seed(config.seed, 0x0dde5ULL, epoch));
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
  return order;
}

inline std::string checkpoint_filename(std::uint64_t epoch) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "epoch_%04llu.ckpt", static_cast<unsigned long long>(epoch));
  return buf;
}

/// Runs epochs [resume.epoch, config.epochs). With an output directory, each
/// epoch ends with "<out>/epoch_NNNN.ckpt" plus "<out>/last.ckpt", and steps are
/// appended to "<out>/loss_log.csv".
inline TrainResult train_epochs(UsamNet<float>& model, const std::vector<StereoSample>& samples,
                                const TrainConfig& config, const std::optional<Checkpoint>& resume = std::nullopt,
                                const TrainOptions& options = {}) {
  config.validate();
  if (samples.empty()) throw DataError("training set is empty");
  if (model.config().use_segmentation)
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (!samples[i].seg) throw DataError("segmentation model but sample " + std::to_string(i) + " has no seg image");

  AdamState<float> adam = AdamState<float>::zeros_like(model.parameters());
  std::uint64_t start_epoch = 0, step = 0;
  if (resume) {
    restore_checkpoint(*resume, model);
    if (resume->adam.m.size() != adam.m.size()) throw IncompatibleError("checkpoint optimizer state size mismatch");
    adam = resume->adam;
    start_epoch = resume->epoch;
    step = resume->step;
  }

  std::ofstream log_file;
  if (!options.out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(options.out_dir, ec);
    if (ec) throw IoError("cannot create " + options.out_dir.string() + ": " + ec.message());
    const fs::path log_path = options.out_dir / "loss_log.csv";
    const bool fresh = !resume || !fs::exists(log_path);
    log_file.open(log_path, fresh ? std::ios::trunc : std::ios::app);
    if (!log_file) throw IoError("cannot write " + log_path.string());
    if (fresh) log_file << "epoch,step,lr,loss\n";
  }

  TrainResult result;
  for (std::uint64_t epoch = start_epoch; epoch < config.epochs; ++epoch) {
    const double lr = lr_at_epoch(config, epoch);
    const auto order = epoch_order(samples.size(), config, epoch);
    for (std::size_t first = 0; first < order.size(); first += config.batch_size) {
      const std::vector<std::size_t> indices(order.begin() + static_cast<std::ptrdiff_t>(first),
                                             order.begin() + static_cast<std::ptrdiff_t>(
                                                                 std::min(order.size(), first + config.batch_size)));
      const TrainBatch batch = make_train_batch(samples, indices, config, model.config().use_segmentation,
                                                mix_seed(config.seed, 0xba7c4ULL, step), options.stats);
      TrainLogEntry entry{epoch, step, lr, std::numeric_limits<double>::quiet_NaN(), false};
      try {
        entry.loss = train_step(model, batch, adam, lr, config);
      } catch (const NoValidPixelsError&) {
        entry.skipped = true;
        ++result.skipped_batches;
      }
      ++step;
      result.log.push_back(entry);
      if (log_file.is_open()) {
        char line[128];
        if (entry.skipped)
          std::snprintf(line, sizeof line, "%llu,%llu,%.9g,skipped\n", static_cast<unsigned long long>(entry.epoch),
                        static_cast<unsigned long long>(entry.step), entry.lr);
        else
          std::snprintf(line, sizeof line, "%llu,%llu,%.9g,%.9g\n", static_cast<unsigned long long>(entry.epoch),
                        static_cast<unsigned long long>(entry.step), entry.lr, entry.loss);
        log_file << line;
      }
      if (options.on_step) options.on_step(entry);
    }
    model.zero_grad();
    if (!options.out_dir.empty()) {
      log_file.flush();
      const Checkpoint ckpt = capture_checkpoint(model, adam, epoch + 1, step);
      save_checkpoint(ckpt, options.out_dir / checkpoint_filename(epoch + 1));
      save_checkpoint(ckpt, options.out_dir / "last.ckpt");
    }
  }
  result.checkpoint = capture_checkpoint(model, adam, std::max<std::uint64_t>(start_epoch, config.epochs), step);
  return result;
}

/// Loads every record of `manifest` (dims fixed by the model config).
inline std::vector<StereoSample> load_dataset(const DatasetManifest& manifest, const ModelConfig& model) {
  if (manifest.records.empty()) throw DataError("manifest has no records");
  if (model.use_segmentation)
    for (const auto& r : manifest.records)
      if (!r.seg) throw DataError("segmentation model but record " + r.left.string() + " has no seg image");
  std::vector<StereoSample> samples;
  for (const auto& r : manifest.records) samples.push_back(load_sample(r, Dims{model.input_height, model.input_width}));
  return samples;
}

}  // namespace usam
