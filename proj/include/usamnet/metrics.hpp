#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "usamnet/data.hpp"
#include "usamnet/inference.hpp"
#include "usamnet/loss.hpp"
#include "usamnet/tensor.hpp"

namespace usam {

struct MetricConfig {
  double tau_abs = 3.0;
  double tau_rel = 0.05;
  std::vector<double> thresholds{1.0, 2.0, 3.0};

  void validate() const {
    if (!(tau_abs > 0.0)) throw ConfigError("tau_abs must be positive");
    if (!(tau_rel >= 0.0)) throw ConfigError("tau_rel must be non-negative");
    for (double k : thresholds)
      if (!(k > 0.0)) throw ConfigError("thresholds must be positive");
  }

  nlohmann::json to_json() const { return {{"tau_abs", tau_abs}, {"tau_rel", tau_rel}, {"thresholds", thresholds}}; }

  static MetricConfig from_json(const nlohmann::json& j) {
    MetricConfig c;
    for (const auto& [key, value] : j.items()) {
      if (key == "tau_abs") c.tau_abs = value.get<double>();
      else if (key == "tau_rel") c.tau_rel = value.get<double>();
      else if (key == "thresholds") c.thresholds = value.get<std::vector<double>>();
      else throw ConfigError("unknown metric config key '" + key + "'");
    }
    return c;
  }
};

/// Buckets centred at min_depth + interval, ..., max_depth; bucket k holds
/// depths in [k - r, k + r).
struct ArdBucketConfig {
  double min_depth = 0.0;
  double max_depth = 80.0;
  double interval = 8.0;
  double range_r = 4.0;

  void validate() const {
    if (!(interval > 0.0)) throw ConfigError("bucket interval must be positive");
    if (!(range_r > 0.0)) throw ConfigError("bucket range_r must be positive");
    if (!(max_depth >= min_depth + interval)) throw ConfigError("max_depth must leave at least one bucket");
  }

  std::vector<double> centers() const {
    std::vector<double> out;
    const auto n = static_cast<std::size_t>(std::floor((max_depth - min_depth) / interval + 1e-9));
    for (std::size_t i = 1; i <= n; ++i) out.push_back(min_depth + interval * static_cast<double>(i));
    return out;
  }

  bool contains(double center, double depth) const { return depth >= center - range_r && depth < center + range_r; }

  nlohmann::json to_json() const {
    return {{"min_depth", min_depth}, {"max_depth", max_depth}, {"interval", interval}, {"range_r", range_r}};
  }

  static ArdBucketConfig from_json(const nlohmann::json& j) {
    ArdBucketConfig c;
    for (const auto& [key, value] : j.items()) {
      if (key == "min_depth") c.min_depth = value.get<double>();
      else if (key == "max_depth") c.max_depth = value.get<double>();
      else if (key == "interval") c.interval = value.get<double>();
      else if (key == "range_r") c.range_r = value.get<double>();
      else throw ConfigError("unknown bucket config key '" + key + "'");
    }
    return c;
  }
};

namespace detail {

inline void check_metric_inputs(const Tensor<float>& pred, const Tensor<float>& gt, const Mask& valid) {
  if (pred.numel() != gt.numel() || valid.numel() != gt.numel())
    throw UsageError("metric inputs differ in size: pred " + shape_str(pred.shape()) + ", gt " +
                     shape_str(gt.shape()) + ", mask " + shape_str(valid.shape()));
}

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------- single-map metrics

inline double epe(const Tensor<float>& pred, const Tensor<float>& gt, const Mask& valid) {
  detail::check_metric_inputs(pred, gt, valid);
  double total = 0.0;
  std::uint64_t n = 0;
  for (std::size_t i = 0; i < gt.numel(); ++i) {
    if (!valid[i]) continue;
    total += std::abs(static_cast<double>(pred[i]) - static_cast<double>(gt[i]));
    ++n;
  }
  if (n == 0) throw NoValidPixelsError();
  return total / static_cast<double>(n);
}

inline bool is_d1_outlier(double pred, double gt, const MetricConfig& cfg) {
  return std::abs(pred - gt) > std::max(cfg.tau_abs, cfg.tau_rel * gt);
}

/// Percentage of valid pixels whose error exceeds max(tau_abs, tau_rel * gt).
inline double d1(const Tensor<float>& pred, const Tensor<float>& gt, const Mask& valid, const MetricConfig& cfg = {}) {
  detail::check_metric_inputs(pred, gt, valid);
  std::uint64_t n = 0, bad = 0;
  for (std::size_t i = 0; i < gt.numel(); ++i) {
    if (!valid[i]) continue;
    ++n;
    bad += is_d1_outlier(pred[i], gt[i], cfg);
  }
  if (n == 0) throw NoValidPixelsError();
  return 100.0 * static_cast<double>(bad) / static_cast<double>(n);
}

inline double threshold_error(const Tensor<float>& pred, const Tensor<float>& gt, const Mask& valid, double k) {
  detail::check_metric_inputs(pred, gt, valid);
  std::uint64_t n = 0, bad = 0;
  for (std::size_t i = 0; i < gt.numel(); ++i) {
    if (!valid[i]) continue;
    ++n;
    bad += std::abs(static_cast<double>(pred[i]) - static_cast<double>(gt[i])) > k;
  }
  if (n == 0) throw NoValidPixelsError();
  return 100.0 * static_cast<double>(bad) / static_cast<double>(n);
}

/// depth = focal_baseline / disparity; NaN where disparity <= 0.
inline Tensor<double> disparity_to_depth(const Tensor<float>& disparity, double focal_baseline) {
  if (!(focal_baseline > 0.0)) throw ConfigError("focal_baseline must be positive");
  Tensor<double> depth(disparity.shape());
  for (std::size_t i = 0; i < disparity.numel(); ++i)
    depth[i] = disparity[i] > 0.0f ? focal_baseline / static_cast<double>(disparity[i])
                                   : std::numeric_limits<double>::quiet_NaN();
  return depth;
}

/// Mean relative disparity error per depth bucket; nullopt for empty buckets.
inline std::vector<std::optional<double>> ard_buckets(const Tensor<float>& pred, const Tensor<float>& gt,
                                                      const Mask& valid, const Tensor<double>& depth_gt,
                                                      const ArdBucketConfig& cfg = {}) {
  detail::check_metric_inputs(pred, gt, valid);
  if (depth_gt.numel() != gt.numel()) throw UsageError("ard_buckets: depth map size differs from gt");
  cfg.validate();
  const auto centers = cfg.centers();
  std::vector<std::optional<double>> out;
  for (double k : centers) {
    double total = 0.0;
    std::uint64_t n = 0;
    for (std::size_t i = 0; i < gt.numel(); ++i) {
      if (!valid[i] || !cfg.contains(k, depth_gt[i])) continue;
      const double g = gt[i];
      total += std::abs(static_cast<double>(pred[i]) - g) / g;
      ++n;
    }
    out.push_back(n ? std::optional<double>(total / static_cast<double>(n)) : std::nullopt);
  }
  return out;
}

/// 100 * mean of the non-empty bucket ARDs.
inline double gd(const std::vector<std::optional<double>>& ard) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& a : ard)
    if (a) {
      total += *a;
      ++n;
    }
  if (n == 0) throw NoValidPixelsError("all ARD buckets are empty");
  return 100.0 * total / static_cast<double>(n);
}

inline double gd(const std::vector<double>& ard) {
  return gd(std::vector<std::optional<double>>(ard.begin(), ard.end()));
}

// ------------------------------------------------------------------ reports

struct MetricReport {
  double epe = 0.0;
  double d1 = 0.0;
  std::vector<double> thresholds;
  std::vector<double> threshold_errors;
  std::vector<double> bucket_centers;
  std::vector<std::optional<double>> ard;
  std::optional<double> gd;
  std::uint64_t valid_pixel_count = 0;

  std::vector<std::string> csv_columns() const {
    std::vector<std::string> cols{"EPE", "D1"};
    for (double k : thresholds) cols.push_back("thres_" + detail::format_number(k));
    for (double c : bucket_centers) cols.push_back("ARD_" + detail::format_number(c));
    cols.push_back("GD");
    return cols;
  }

  // Empty cells for empty buckets / undefined GD.
  std::vector<std::string> csv_values() const {
    auto num = [](double v) {
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.10g", v);
      return std::string(buf);
    };
    std::vector<std::string> vals{num(epe), num(d1)};
    for (double t : threshold_errors) vals.push_back(num(t));
    for (const auto& a : ard) vals.push_back(a ? num(*a) : "");
    vals.push_back(gd ? num(*gd) : "");
    return vals;
  }

  static std::string csv(const std::vector<MetricReport>& rows) {
    if (rows.empty()) return "";
    auto join = [](const std::vector<std::string>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
      return s + "\n";
    };
    std::string out = join(rows[0].csv_columns());
    for (const auto& r : rows) out += join(r.csv_values());
    return out;
  }

  std::string csv() const { return csv({*this}); }

  /// bucket_center,ard (empty ard for empty buckets), one row per bucket.
  std::string ard_curve_csv() const {
    std::string out = "bucket_center,ard\n";
    for (std::size_t i = 0; i < bucket_centers.size(); ++i) {
      char buf[64];
      if (ard[i]) std::snprintf(buf, sizeof buf, "%g,%.10g\n", bucket_centers[i], *ard[i]);
      else std::snprintf(buf, sizeof buf, "%g,\n", bucket_centers[i]);
      out += buf;
    }
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json thres = nlohmann::json::object();
    for (std::size_t i = 0; i < thresholds.size(); ++i)
      thres["thres_" + detail::format_number(thresholds[i])] = threshold_errors[i];
    nlohmann::json ard_json = nlohmann::json::object();
    for (std::size_t i = 0; i < bucket_centers.size(); ++i)
      ard_json["ARD_" + detail::format_number(bucket_centers[i])] = ard[i] ? nlohmann::json(*ard[i]) : nullptr;
    return {{"EPE", epe},
            {"D1", d1},
            {"thresholds", thres},
            {"ARD", ard_json},
            {"GD", gd ? nlohmann::json(*gd) : nlohmann::json(nullptr)},
            {"valid_pixel_count", valid_pixel_count}};
  }
};

/// Pixel-weighted totals across any number of maps.
class MetricAccumulator {
 public:
  explicit MetricAccumulator(MetricConfig metric = {}, ArdBucketConfig buckets = {})
      : metric_(std::move(metric)), buckets_(buckets), centers_(buckets_.centers()) {
    metric_.validate();
    buckets_.validate();
    threshold_counts_.assign(metric_.thresholds.size(), 0);
    ard_sums_.assign(centers_.size(), 0.0);
    ard_counts_.assign(centers_.size(), 0);
  }

  /// `depth_gt` may be null when ARD is not wanted for this map.
  void add(const Tensor<float>& pred, const Tensor<float>& gt, const Mask& valid, const Tensor<double>* depth_gt) {
    detail::check_metric_inputs(pred, gt, valid);
    if (depth_gt && depth_gt->numel() != gt.numel()) throw UsageError("depth map size differs from gt");
    for (std::size_t i = 0; i < gt.numel(); ++i) {
      if (!valid[i]) continue;
      const double p = pred[i], g = gt[i];
      const double err = std::abs(p - g);
      ++valid_;
      abs_error_ += err;
      d1_outliers_ += is_d1_outlier(p, g, metric_);
      for (std::size_t t = 0; t < metric_.thresholds.size(); ++t) threshold_counts_[t] += err > metric_.thresholds[t];
      if (!depth_gt) continue;
      for (std::size_t b = 0; b < centers_.size(); ++b) {
        if (!buckets_.contains(centers_[b], (*depth_gt)[i])) continue;
        ard_sums_[b] += err / g;
        ++ard_counts_[b];
      }
    }
  }

  void add(const Tensor<float>& pred, const Tensor<float>& gt, const Mask& valid, double focal_baseline) {
    const Tensor<double> depth = disparity_to_depth(gt, focal_baseline);
    add(pred, gt, valid, &depth);
  }

  std::uint64_t valid_pixels() const { return valid_; }

  MetricReport report() const {
    if (valid_ == 0) throw NoValidPixelsError();
    MetricReport r;
    const double n = static_cast<double>(valid_);
    r.epe = abs_error_ / n;
    r.d1 = 100.0 * static_cast<double>(d1_outliers_) / n;
    r.thresholds = metric_.thresholds;
    for (auto c : threshold_counts_) r.threshold_errors.push_back(100.0 * static_cast<double>(c) / n);
    r.bucket_centers = centers_;
    for (std::size_t b = 0; b < centers_.size(); ++b)
      r.ard.push_back(ard_counts_[b] ? std::optional<double>(ard_sums_[b] / static_cast<double>(ard_counts_[b]))
                                     : std::nullopt);
    if (std::any_of(r.ard.begin(), r.ard.end(), [](const auto& a) { return a.has_value(); })) r.gd = usam::gd(r.ard);
    r.valid_pixel_count = valid_;
    return r;
  }

 private:
  MetricConfig metric_;
  ArdBucketConfig buckets_;
  std::vector<double> centers_;
  std::uint64_t valid_ = 0;
  double abs_error_ = 0.0;
  std::uint64_t d1_outliers_ = 0;
  std::vector<std::uint64_t> threshold_counts_;
  std::vector<double> ard_sums_;
  std::vector<std::uint64_t> ard_counts_;
};

struct Evaluation {
  MetricReport aggregate;
  std::vector<std::optional<MetricReport>> per_image;  // nullopt: no valid pixels
};

/// `predict(sample)` returns a (1,H,W) disparity map. Depth for ARD comes from
/// gt disparity and `focal_baseline`.
template <typename Predict>
Evaluation evaluate(const std::vector<StereoSample>& samples, Predict&& predict, double focal_baseline,
                    const MetricConfig& metric = {}, const ArdBucketConfig& buckets = {}) {
  if (samples.empty()) throw DataError("evaluation set is empty");
  MetricAccumulator total(metric, buckets);
  Evaluation out;
  for (const auto& s : samples) {
    const Tensor<float> pred = predict(s);
    MetricAccumulator one(metric, buckets);
    one.add(pred, s.disparity, s.valid, focal_baseline);
    total.add(pred, s.disparity, s.valid, focal_baseline);
    out.per_image.push_back(one.valid_pixels() ? std::optional<MetricReport>(one.report()) : std::nullopt);
  }
  out.aggregate = total.report();
  return out;
}

inline Evaluation evaluate_model(UsamNet<float>& model, const std::vector<StereoSample>& samples,
                                 double focal_baseline, const MetricConfig& metric = {},
                                 const ArdBucketConfig& buckets = {}, const NormalizationStats& stats = {}) {
  return evaluate(
      samples, [&](const StereoSample& s) { return predict_disparity(model, s, stats); }, focal_baseline, metric,
      buckets);
}

// ------------------------------------------------------------ attention diff

/// |a - b| scaled by its maximum; all zero when a == b.
inline Tensor<float> attn_diff_heatmap(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape())
    throw UsageError("attn_diff_heatmap: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  Tensor<float> h(a.shape());
  float peak = 0.0f;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    h[i] = std::abs(a[i] - b[i]);
    peak = std::max(peak, h[i]);
  }
  if (peak > 0.0f)
    for (auto& v : h.values()) v /= peak;
  return h;
}

/// Red blend over the grayscale image: out = (1 - h) * gray + h * (1, 0, 0).
inline Tensor<float> heatmap_overlay(const Tensor<float>& image, const Tensor<float>& heat) {
  const std::size_t plane = image.size(1) * image.size(2);
  if (heat.numel() != plane) throw UsageError("heatmap_overlay: heatmap does not match image size");
  Tensor<float> out(image.shape());
  for (std::size_t p = 0; p < plane; ++p) {
    const float gray = std::clamp(0.299f * image[p] + 0.587f * image[plane + p] + 0.114f * image[2 * plane + p], 0.0f, 1.0f);
    const float h = std::clamp(heat[p], 0.0f, 1.0f);
    out[p] = (1.0f - h) * gray + h;
    out[plane + p] = (1.0f - h) * gray;
    out[2 * plane + p] = (1.0f - h) * gray;
  }
  return out;
}

}  // namespace usam
