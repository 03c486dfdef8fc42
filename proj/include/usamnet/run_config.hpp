#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "json.hpp"
#include "usamnet/metrics.hpp"
#include "usamnet/model.hpp"
#include "usamnet/train.hpp"

namespace usam {

/// Everything a run needs, as one JSON document:
///   {"model": {...}, "train": {...}, "metric": {...}, "buckets": {...},
///    "train_manifest": "...", "eval_manifest": "...", "focal_baseline": 96.0 | null,
///    "output_dir": "...", "init_seed": 0}
/// Unknown keys are rejected at every level. Relative paths resolve against
/// the working directory.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  MetricConfig metric;
  ArdBucketConfig buckets;
  std::string train_manifest;
  std::string eval_manifest;
  std::optional<double> focal_baseline;
  std::string output_dir = "run";
  std::uint64_t init_seed = 0;

  void validate() const {
    model.validate();
    train.validate();
    metric.validate();
    buckets.validate();
    if (focal_baseline && !(*focal_baseline > 0.0)) throw ConfigError("focal_baseline must be positive");
  }

  nlohmann::json to_json() const {
    return {{"model", model.to_json()},
            {"train", train.to_json()},
            {"metric", metric.to_json()},
            {"buckets", buckets.to_json()},
            {"train_manifest", train_manifest},
            {"eval_manifest", eval_manifest},
            {"focal_baseline", focal_baseline ? nlohmann::json(*focal_baseline) : nlohmann::json(nullptr)},
            {"output_dir", output_dir},
            {"init_seed", init_seed}};
  }

  static RunConfig from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("run config must be a JSON object");
    RunConfig c;
    try {
      for (const auto& [key, value] : j.items()) {
        if (key == "model") c.model = ModelConfig::from_json(value);
        else if (key == "train") c.train = TrainConfig::from_json(value);
        else if (key == "metric") c.metric = MetricConfig::from_json(value);
        else if (key == "buckets") c.buckets = ArdBucketConfig::from_json(value);
        else if (key == "train_manifest") c.train_manifest = value.get<std::string>();
        else if (key == "eval_manifest") c.eval_manifest = value.get<std::string>();
        else if (key == "focal_baseline")
          c.focal_baseline = value.is_null() ? std::nullopt : std::optional<double>(value.get<double>());
        else if (key == "output_dir") c.output_dir = value.get<std::string>();
        else if (key == "init_seed") c.init_seed = value.get<std::uint64_t>();
        else throw ConfigError("unknown run config key '" + key + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("run config: ") + e.what());
    }
    return c;
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return from_json(j);
  }

  /// "train.base_lr=0.0005", "model.use_attention=false", "output_dir=out".
  /// The value is parsed as JSON when possible, else taken as a string.
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key.path=value");
    const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    nlohmann::json j = to_json();
    nlohmann::json* node = &j;
    std::size_t start = 0;
    while (true) {
      const auto dot = path.find('.', start);
      const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (!node->is_object() || !node->contains(key)) throw ConfigError("unknown config key '" + path + "'");
      node = &(*node)[key];
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    nlohmann::json value;
    try {
      value = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception&) {
      value = text;
    }
    *node = value;
    *this = from_json(j);
  }

  void set_variant(const std::string& variant) {
    if (variant == "baseline") model.use_segmentation = false, model.use_attention = false;
    else if (variant == "attn") model.use_segmentation = false, model.use_attention = true;
    else if (variant == "seg") model.use_segmentation = true, model.use_attention = false;
    else if (variant == "seg-attn") model.use_segmentation = true, model.use_attention = true;
    else throw UsageError("unknown variant '" + variant + "' (baseline|attn|seg|seg-attn)");
  }
};

}  // namespace usam
