#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "usamnet/loss.hpp"
#include "usamnet/png_io.hpp"
#include "usamnet/random.hpp"
#include "usamnet/tensor.hpp"

namespace usam {

namespace fs = std::filesystem;

/// One stereo record. Images are (3,H,W) in [0,1]; disparity, valid and sky
/// are (1,H,W). A pixel is valid only where ground truth exists.
struct StereoSample {
  Tensor<float> left;
  Tensor<float> right;
  std::optional<Tensor<float>> seg;
  Tensor<float> disparity;
  Mask valid;
  std::optional<Mask> sky;

  std::size_t height() const { return left.size(1); }
  std::size_t width() const { return left.size(2); }

  std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count_if(valid.values().begin(), valid.values().end(),
                                                  [](std::uint8_t v) { return v != 0; }));
  }

  StereoSample clone() const {
    StereoSample s{left.clone(), right.clone(), std::nullopt, disparity.clone(), valid.clone(), std::nullopt};
    if (seg) s.seg = seg->clone();
    if (sky) s.sky = sky->clone();
    return s;
  }
};

struct NormalizationStats {
  std::array<float, 3> mean{0.50625f, 0.52283f, 0.41453f};
  std::array<float, 3> std{0.21669f, 0.19807f, 0.18691f};

  void validate() const {
    for (float s : std)
      if (!(s > 0.0f)) throw ConfigError("normalization std must be positive");
  }
};

struct AugmentConfig {
  double jitter_strength = 0.1;
  double top_replace_prob = 0.5;
  double top_fraction = 0.25;
  bool sky_masking_enabled = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (jitter_strength < 0.0 || jitter_strength >= 1.0) throw ConfigError("jitter_strength must be in [0,1)");
    if (top_replace_prob < 0.0 || top_replace_prob > 1.0) throw ConfigError("top_replace_prob must be in [0,1]");
    if (top_fraction <= 0.0 || top_fraction > 0.5) throw ConfigError("top_fraction must be in (0,0.5]");
  }

  nlohmann::json to_json() const {
    return {{"jitter_strength", jitter_strength},
            {"top_replace_prob", top_replace_prob},
            {"top_fraction", top_fraction},
            {"sky_masking_enabled", sky_masking_enabled},
            {"seed", seed}};
  }

  static AugmentConfig from_json(const nlohmann::json& j) {
    AugmentConfig c;
    for (const auto& [key, value] : j.items()) {
      if (key == "jitter_strength") c.jitter_strength = value.get<double>();
      else if (key == "top_replace_prob") c.top_replace_prob = value.get<double>();
      else if (key == "top_fraction") c.top_fraction = value.get<double>();
      else if (key == "sky_masking_enabled") c.sky_masking_enabled = value.get<bool>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else throw ConfigError("unknown augment config key '" + key + "'");
    }
    return c;
  }
};

// ------------------------------------------------------------------ manifest

struct DatasetRecord {
  fs::path left;
  fs::path right;
  std::optional<fs::path> seg;
  fs::path disparity;
  std::optional<fs::path> sky_mask;
};

/// JSON manifest:
///   {"split": "train"|"test", "focal_baseline": <optional float>,
///    "records": [{"left", "right", "disparity", "seg"?, "sky_mask"?}, ...]}
/// Relative paths resolve against the manifest's directory.
struct DatasetManifest {
  std::string split = "train";
  std::vector<DatasetRecord> records;
  std::optional<double> focal_baseline;

  bool has_segmentation() const {
    return !records.empty() &&
           std::all_of(records.begin(), records.end(), [](const DatasetRecord& r) { return r.seg.has_value(); });
  }

  static DatasetManifest load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("manifest " + path.string() + ": " + e.what());
    }
    const fs::path base = path.parent_path();
    auto resolve = [&](const std::string& p) {
      fs::path q(p);
      return q.is_absolute() ? q : base / q;
    };
    DatasetManifest m;
    try {
      for (const auto& [key, value] : j.items()) {
        if (key == "split") {
          m.split = value.get<std::string>();
        } else if (key == "focal_baseline") {
          m.focal_baseline = value.get<double>();
        } else if (key == "records") {
          for (const auto& r : value) {
            DatasetRecord rec;
            for (const auto& [rk, rv] : r.items()) {
              if (rk == "left") rec.left = resolve(rv.get<std::string>());
              else if (rk == "right") rec.right = resolve(rv.get<std::string>());
              else if (rk == "disparity") rec.disparity = resolve(rv.get<std::string>());
              else if (rk == "seg") rec.seg = resolve(rv.get<std::string>());
              else if (rk == "sky_mask") rec.sky_mask = resolve(rv.get<std::string>());
              else throw FormatError("manifest " + path.string() + ": unknown record key '" + rk + "'");
            }
            if (rec.left.empty() || rec.right.empty() || rec.disparity.empty())
              throw FormatError("manifest " + path.string() + ": record needs left, right and disparity");
            m.records.push_back(std::move(rec));
          }
        } else {
          throw FormatError("manifest " + path.string() + ": unknown key '" + key + "'");
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("manifest " + path.string() + ": " + e.what());
    }
    if (m.split != "train" && m.split != "test")
      throw FormatError("manifest " + path.string() + ": split must be train or test");
    return m;
  }

  // Paths under the manifest's directory are stored relative to it.
  void save(const fs::path& path) const {
    const fs::path base = fs::absolute(path).parent_path();
    auto rel = [&](const fs::path& p) { return fs::absolute(p).lexically_relative(base).generic_string(); };
    nlohmann::json records_json = nlohmann::json::array();
    for (const auto& r : records) {
      nlohmann::json rj{{"left", rel(r.left)}, {"right", rel(r.right)}, {"disparity", rel(r.disparity)}};
      if (r.seg) rj["seg"] = rel(*r.seg);
      if (r.sky_mask) rj["sky_mask"] = rel(*r.sky_mask);
      records_json.push_back(std::move(rj));
    }
    nlohmann::json j{{"split", split}, {"records", records_json}};
    if (focal_baseline) j["focal_baseline"] = *focal_baseline;
    fs::path tmp = path;
    tmp += ".tmp";
    {
      std::ofstream out(tmp);
      if (!out) throw IoError("cannot write " + tmp.string());
      out << j.dump(2) << '\n';
    }
    fs::rename(tmp, path);
  }
};

// ------------------------------------------------------------ image bridges

inline Tensor<float> image_to_tensor(const png::Image8& img) {
  Tensor<float> t({img.channels, img.height, img.width});
  const std::size_t plane = img.height * img.width;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < img.channels; ++c)
      t[c * plane + p] = static_cast<float>(img.pixels[p * img.channels + c]) / 255.0f;
  return t;
}

inline png::Image8 tensor_to_image(const Tensor<float>& t) {
  if (t.dim() != 3) throw UsageError("tensor_to_image: expected (C,H,W), got " + shape_str(t.shape()));
  png::Image8 img{t.size(2), t.size(1), t.size(0), {}};
  const std::size_t plane = img.height * img.width;
  img.pixels.resize(plane * img.channels);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < img.channels; ++c)
      img.pixels[p * img.channels + c] =
          static_cast<std::uint8_t>(std::lround(std::clamp(t[c * plane + p], 0.0f, 1.0f) * 255.0f));
  return img;
}

inline Mask image_to_mask(const png::Image8& img) {
  Mask m({1, img.height, img.width});
  for (std::size_t i = 0; i < m.numel(); ++i) m[i] = img.pixels[i] != 0;
  return m;
}

inline png::Image8 mask_to_image(const Mask& m) {
  png::Image8 img{m.size(2), m.size(1), 1, {}};
  img.pixels.resize(m.numel());
  for (std::size_t i = 0; i < m.numel(); ++i) img.pixels[i] = m[i] ? 255 : 0;
  return img;
}

inline void write_rgb(const Tensor<float>& img, const fs::path& path) { png::write8(path, tensor_to_image(img)); }

// --------------------------------------------------------------- disparity

constexpr double kDisparityScale = 256.0;
constexpr double kMaxDisparity = 255.0;

/// 16-bit PNG, raw = round(d * 256); 0 means invalid. Values strictly between
/// 0 and 1/512 are written as raw 1 so they stay valid.
inline void write_disparity(const Tensor<float>& disparity, const fs::path& path) {
  if (disparity.dim() != 3 || disparity.size(0) != 1)
    throw UsageError("write_disparity: expected (1,H,W), got " + shape_str(disparity.shape()));
  png::Image16 img{disparity.size(2), disparity.size(1), {}};
  img.pixels.resize(disparity.numel());
  for (std::size_t i = 0; i < disparity.numel(); ++i) {
    const double d = disparity[i];
    if (!(d >= 0.0 && d < kMaxDisparity))
      throw DataError("write_disparity: value " + std::to_string(d) + " outside [0, 255) for " + path.string());
    if (d == 0.0) {
      img.pixels[i] = 0;
      continue;
    }
    img.pixels[i] = static_cast<std::uint16_t>(std::max<long>(1, std::lround(d * kDisparityScale)));
  }
  png::write16(path, img);
}

struct DisparityMap {
  Tensor<float> disparity;
  Mask valid;
};

inline DisparityMap read_disparity(const fs::path& path) {
  const png::Image16 img = png::read16(path);
  DisparityMap out{Tensor<float>({1, img.height, img.width}), Mask({1, img.height, img.width})};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const std::uint16_t raw = img.pixels[i];
    if (raw == 0) continue;
    const double d = raw / kDisparityScale;
    if (d >= kMaxDisparity)
      throw DataError(path.string() + ": disparity " + std::to_string(d) + " px is not expressible (>= 255)");
    out.disparity[i] = static_cast<float>(d);
    out.valid[i] = 1;
  }
  return out;
}

struct Dims {
  std::size_t height = 0;
  std::size_t width = 0;
};

/// Loads and cross-checks one record. Every file must match the first one's
/// dimensions (and `expected`, when given).
inline StereoSample load_sample(const DatasetRecord& record, std::optional<Dims> expected = std::nullopt) {
  auto check = [&](std::size_t h, std::size_t w, const fs::path& file) {
    if (!expected) expected = Dims{h, w};
    if (h != expected->height || w != expected->width)
      throw DataError(file.string() + ": dimensions " + std::to_string(h) + "x" + std::to_string(w) +
                      " do not match expected " + std::to_string(expected->height) + "x" +
                      std::to_string(expected->width));
  };
  StereoSample s;
  const auto left = png::read8(record.left, 3);
  check(left.height, left.width, record.left);
  s.left = image_to_tensor(left);
  const auto right = png::read8(record.right, 3);
  check(right.height, right.width, record.right);
  s.right = image_to_tensor(right);
  if (record.seg) {
    const auto seg = png::read8(*record.seg, 3);
    check(seg.height, seg.width, *record.seg);
    s.seg = image_to_tensor(seg);
  }
  DisparityMap disp = read_disparity(record.disparity);
  check(disp.disparity.size(1), disp.disparity.size(2), record.disparity);
  s.disparity = disp.disparity;
  s.valid = disp.valid;
  if (record.sky_mask) {
    const auto sky = png::read8(*record.sky_mask, 1);
    check(sky.height, sky.width, *record.sky_mask);
    s.sky = image_to_mask(sky);
  }
  return s;
}

// ------------------------------------------------------------ normalization

inline Tensor<float> normalize_image(const Tensor<float>& img, const NormalizationStats& stats) {
  stats.validate();
  if (img.dim() != 3 || img.size(0) != 3)
    throw ConfigError("normalize_image: expected (3,H,W), got " + shape_str(img.shape()));
  Tensor<float> out(img.shape());
  const std::size_t plane = img.size(1) * img.size(2);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < plane; ++p) out[c * plane + p] = (img[c * plane + p] - stats.mean[c]) / stats.std[c];
  return out;
}

inline Tensor<float> denormalize_image(const Tensor<float>& img, const NormalizationStats& stats) {
  Tensor<float> out(img.shape());
  const std::size_t plane = img.size(1) * img.size(2);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < plane; ++p) out[c * plane + p] = img[c * plane + p] * stats.std[c] + stats.mean[c];
  return out;
}

// -------------------------------------------------------------- color jitter

struct JitterFactors {
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
  double hue = 0.0;  // fraction of the full hue cycle
};

inline JitterFactors sample_jitter(double strength, std::uint64_t seed) {
  if (strength < 0.0 || strength >= 1.0) throw ConfigError("jitter strength must be in [0,1)");
  if (strength == 0.0) return {};
  Rng rng(mix_seed(seed, 0x6a6974746572ULL));
  JitterFactors f;
  f.brightness = rng.uniform(1.0 - strength, 1.0 + strength);
  f.contrast = rng.uniform(1.0 - strength, 1.0 + strength);
  f.saturation = rng.uniform(1.0 - strength, 1.0 + strength);
  f.hue = rng.uniform(-strength, strength);
  return f;
}

namespace detail {

inline float gray(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

inline void shift_hue(float& r, float& g, float& b, float shift) {
  const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const float delta = mx - mn;
  if (delta <= 0.0f) return;
  float h;
  if (mx == r) h = (g - b) / delta;
  else if (mx == g) h = 2.0f + (b - r) / delta;
  else h = 4.0f + (r - g) / delta;
  h = h / 6.0f + shift;
  h -= std::floor(h);
  const float s = delta / mx, v = mx;
  const float h6 = h * 6.0f;
  const int sector = static_cast<int>(h6) % 6;
  const float f = h6 - std::floor(h6);
  const float p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

}  // namespace detail

/// Applies one factor set to both views, in the order brightness, contrast,
/// saturation, hue, clamping to [0,1] after each step. Contrast pivots on the
/// mean luminance of both views together, so every step is the same pointwise
/// map on both images. Identity factors are skipped.
inline std::pair<Tensor<float>, Tensor<float>> apply_jitter(const Tensor<float>& left, const Tensor<float>& right,
                                                            const JitterFactors& f) {
  std::array<Tensor<float>, 2> views{left.clone(), right.clone()};
  const std::size_t plane = left.size(1) * left.size(2);
  auto each_pixel = [&](auto&& fn) {
    for (auto& v : views)
      for (std::size_t p = 0; p < plane; ++p) fn(v[p], v[plane + p], v[2 * plane + p]);
  };
  auto clamp01 = [](float x) { return std::clamp(x, 0.0f, 1.0f); };

  if (f.brightness != 1.0) {
    const float k = static_cast<float>(f.brightness);
    each_pixel([&](float& r, float& g, float& b) {
      r = clamp01(r * k), g = clamp01(g * k), b = clamp01(b * k);
    });
  }
  if (f.contrast != 1.0) {
    double total = 0;
    each_pixel([&](float& r, float& g, float& b) { total += detail::gray(r, g, b); });
    const float pivot = static_cast<float>(total / (2.0 * plane));
    const float k = static_cast<float>(f.contrast);
    each_pixel([&](float& r, float& g, float& b) {
      r = clamp01(pivot + k * (r - pivot)), g = clamp01(pivot + k * (g - pivot)), b = clamp01(pivot + k * (b - pivot));
    });
  }
  if (f.saturation != 1.0) {
    const float k = static_cast<float>(f.saturation);
    each_pixel([&](float& r, float& g, float& b) {
      const float y = detail::gray(r, g, b);
      r = clamp01(y + k * (r - y)), g = clamp01(y + k * (g - y)), b = clamp01(y + k * (b - y));
    });
  }
  if (f.hue != 0.0) {
    const float shift = static_cast<float>(f.hue);
    each_pixel([&](float& r, float& g, float& b) { detail::shift_hue(r, g, b, shift); });
  }
  return {views[0], views[1]};
}

inline std::pair<Tensor<float>, Tensor<float>> color_jitter(const Tensor<float>& left, const Tensor<float>& right,
                                                            double strength, std::uint64_t seed) {
  return apply_jitter(left, right, sample_jitter(strength, seed));
}

// ----------------------------------------------------------- top replacement

struct TopReplacePlan {
  bool applied = false;
  std::size_t rows = 0;          // t = top_fraction * H
  std::size_t source_start = 0;  // first row of the copied band
};

/// Source band: "middle" starts at H/2 - t/2, "bottom" at H - t, chosen with
/// equal probability; the whole replacement happens with top_replace_prob.
inline TopReplacePlan plan_top_replace(std::size_t height, const AugmentConfig& config, std::uint64_t seed) {
  config.validate();
  const double t = config.top_fraction * static_cast<double>(height);
  if (std::abs(t - std::round(t)) > 1e-9)
    throw ConfigError("top_fraction * height = " + std::to_string(t) + " is not a whole number of rows");
  Rng rng(mix_seed(seed, 0x746f70ULL));
  TopReplacePlan plan;
  plan.rows = static_cast<std::size_t>(std::lround(t));
  plan.applied = rng.bernoulli(config.top_replace_prob);
  plan.source_start = rng.bernoulli(0.5) ? height / 2 - plan.rows / 2 : height - plan.rows;
  return plan;
}

inline StereoSample apply_top_replace(const StereoSample& sample, const TopReplacePlan& plan) {
  StereoSample out = sample.clone();
  if (!plan.applied) return out;
  const std::size_t h = sample.height(), w = sample.width();
  auto copy_rows = [&](auto& tensor) {
    const std::size_t channels = tensor.numel() / (h * w);
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = 0; y < plan.rows; ++y)
        std::copy_n(tensor.data().data() + (c * h + plan.source_start + y) * w, w,
                    tensor.data().data() + (c * h + y) * w);
  };
  copy_rows(out.left);
  copy_rows(out.right);
  if (out.seg) copy_rows(*out.seg);
  copy_rows(out.disparity);
  copy_rows(out.valid);
  if (out.sky) copy_rows(*out.sky);
  return out;
}

inline StereoSample top_replace_augment(const StereoSample& sample, const AugmentConfig& config, std::uint64_t seed) {
  return apply_top_replace(sample, plan_top_replace(sample.height(), config, seed));
}

/// Sky pixels become supervised zero-disparity targets (valid, disparity 0).
inline StereoSample apply_sky_mask(const StereoSample& sample) {
  if (!sample.sky) throw UsageError("apply_sky_mask: sample has no sky mask");
  StereoSample out = sample.clone();
  for (std::size_t i = 0; i < out.valid.numel(); ++i) {
    if (!(*out.sky)[i]) continue;
    out.disparity[i] = 0.0f;
    out.valid[i] = 1;
  }
  return out;
}

// --------------------------------------------------------- synthetic scenes

struct SceneShape {
  enum class Kind { rectangle, ellipse };
  Kind kind = Kind::rectangle;
  long cy = 0, cx = 0;  // centre, left-image coordinates
  long ry = 0, rx = 0;  // half extents
  int disparity = 1;
  std::uint64_t texture_seed = 0;
  std::array<std::uint8_t, 3> seg_color{};

  bool covers(long y, long x) const {
    const long dy = y - cy, dx = x - cx;
    if (kind == Kind::rectangle) return std::abs(dy) <= ry && std::abs(dx) <= rx;
    return static_cast<double>(dy * dy) / static_cast<double>(ry * ry) +
               static_cast<double>(dx * dx) / static_cast<double>(rx * rx) <=
           1.0;
  }
};

struct SyntheticOptions {
  double dropout = 0.1;        // fraction of non-sky pixels marked invalid
  double sky_fraction = 0.125;  // top band height as a fraction of H
  int max_retries = 32;
};

/// Rendered sample plus the scene description it came from. Shapes are sorted
/// back to front; a later shape occludes an earlier one.
struct SyntheticScene {
  StereoSample sample;
  std::vector<SceneShape> shapes;
  int background_disparity = 1;
  std::uint64_t background_seed = 0;
  std::size_t sky_rows = 0;

  // Index into `shapes` of the front surface at a left pixel, -1 for
  // background, -2 for sky.
  int surface_left(long y, long x) const {
    if (y < static_cast<long>(sky_rows)) return -2;
    for (int i = static_cast<int>(shapes.size()) - 1; i >= 0; --i)
      if (shapes[i].covers(y, x)) return i;
    return -1;
  }

  // Same for a right-image pixel: surface i shows there if it covers the
  // left-image point xr + d_i.
  int surface_right(long y, long xr) const {
    if (y < static_cast<long>(sky_rows)) return -2;
    for (int i = static_cast<int>(shapes.size()) - 1; i >= 0; --i)
      if (shapes[i].covers(y, xr + shapes[i].disparity)) return i;
    return -1;
  }

  int disparity_of(int surface) const {
    if (surface == -2) return 0;
    if (surface == -1) return background_disparity;
    return shapes[static_cast<std::size_t>(surface)].disparity;
  }
};

namespace detail {

inline std::uint8_t texel(std::uint64_t seed, long y, long x, int channel, std::uint8_t base) {
  const auto coarse = mix_seed(seed, static_cast<std::uint64_t>((y >> 1) * 131071 + (x >> 1)), channel);
  const auto fine = mix_seed(seed ^ 0xf1e2d3c4ULL, static_cast<std::uint64_t>(y * 131071 + x), channel);
  const long v = base + static_cast<long>(coarse % 81) - 40 + static_cast<long>(fine % 21) - 10;
  return static_cast<std::uint8_t>(std::clamp(v, 0L, 255L));
}

inline std::array<std::uint8_t, 3> base_color(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xc0105ULL));
  return {static_cast<std::uint8_t>(rng.uniform_int(50, 205)), static_cast<std::uint8_t>(rng.uniform_int(50, 205)),
          static_cast<std::uint8_t>(rng.uniform_int(50, 205))};
}

}  // namespace detail

inline const std::array<std::uint8_t, 3> kBackgroundSegColor{96, 96, 96};
inline const std::array<std::uint8_t, 3> kSkySegColor{70, 130, 180};

/// Integer-disparity scene: a textured fronto-parallel background, then
/// rectangles/ellipses in front of it, with a sky band of zero disparity on
/// top. Textures are procedural in left-image coordinates, so the right view
/// samples each surface at x + d and matches the left exactly where visible.
inline SyntheticScene generate_synthetic_scene(std::uint64_t seed, std::size_t height, std::size_t width,
                                               std::size_t num_shapes, int max_disparity,
                                               const SyntheticOptions& options = {}) {
  if (height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0)
    throw ConfigError("synthetic scene size " + std::to_string(height) + "x" + std::to_string(width) +
                      " must be divisible by 32");
  if (max_disparity < 1 || max_disparity >= 255 || static_cast<double>(max_disparity) >= width / 4.0)
    throw ConfigError("max_disparity " + std::to_string(max_disparity) + " must be in [1, min(255, W/4))");
  if (options.dropout < 0.0 || options.dropout > 1.0) throw ConfigError("dropout must be in [0,1]");
  if (options.sky_fraction < 0.0 || options.sky_fraction >= 1.0) throw ConfigError("sky_fraction must be in [0,1)");

  const long H = static_cast<long>(height), W = static_cast<long>(width);
  SyntheticScene scene;
  scene.sky_rows = static_cast<std::size_t>(std::lround(options.sky_fraction * static_cast<double>(height)));
  const long sky = static_cast<long>(scene.sky_rows);
  Rng rng(mix_seed(seed, 0x7363656e65ULL));
  scene.background_disparity = static_cast<int>(rng.uniform_int(1, std::max(1, max_disparity / 3)));
  scene.background_seed = mix_seed(seed, 0xb6ULL);

  for (std::size_t i = 0; i < num_shapes; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt <= options.max_retries && !placed; ++attempt) {
      Rng srng(mix_seed(seed, 0x5a11ULL + i, static_cast<std::uint64_t>(attempt)));
      SceneShape s;
      s.kind = srng.bernoulli(0.5) ? SceneShape::Kind::rectangle : SceneShape::Kind::ellipse;
      s.disparity = static_cast<int>(srng.uniform_int(scene.background_disparity, max_disparity));
      s.rx = srng.uniform_int(2, std::max<long>(2, W / 3));
      s.ry = srng.uniform_int(2, std::max<long>(2, (H - sky) / 3));
      // Too wide to keep any part visible in both views.
      if (2 * s.rx + 1 + s.disparity > W || 2 * s.ry + 1 > H - sky) continue;
      s.cx = srng.uniform_int(0, W - 1);
      s.cy = srng.uniform_int(sky, H - 1);
      s.texture_seed = mix_seed(seed, 0x7e8ULL, i);
      s.seg_color = detail::base_color(mix_seed(s.texture_seed, 0x5e9ULL));
      scene.shapes.push_back(s);
      placed = true;
    }
    if (!placed) throw DataError("synthetic shape " + std::to_string(i) + " infeasible after retries");
  }
  std::stable_sort(scene.shapes.begin(), scene.shapes.end(),
                   [](const SceneShape& a, const SceneShape& b) { return a.disparity < b.disparity; });

  const auto bg_base = detail::base_color(scene.background_seed);
  const std::size_t plane = height * width;
  StereoSample& out = scene.sample;
  out.left = Tensor<float>({3, height, width});
  out.right = Tensor<float>({3, height, width});
  out.seg = Tensor<float>({3, height, width});
  out.disparity = Tensor<float>({1, height, width});
  out.valid = Mask({1, height, width});
  out.sky = Mask({1, height, width});

  // Colour of `surface` at left-image point (y, x).
  auto shade = [&](int surface, long y, long x, int c) -> std::uint8_t {
    if (surface == -2) {
      const long v = static_cast<long>(kSkySegColor[c]) + (y * 40) / std::max(1L, sky) +
                     static_cast<long>(mix_seed(0x5c7ULL, static_cast<std::uint64_t>(y * 131071 + x), c) % 5);
      return static_cast<std::uint8_t>(std::clamp(v, 0L, 255L));
    }
    if (surface == -1) return detail::texel(scene.background_seed, y, x, c, bg_base[c]);
    const auto& s = scene.shapes[static_cast<std::size_t>(surface)];
    return detail::texel(s.texture_seed, y, x, c, detail::base_color(s.texture_seed)[c]);
  };

  Rng drop(mix_seed(seed, 0xd209ULL));
  for (long y = 0; y < H; ++y) {
    for (long x = 0; x < W; ++x) {
      const std::size_t p = static_cast<std::size_t>(y * W + x);
      const int left_surface = scene.surface_left(y, x);
      const int right_surface = scene.surface_right(y, x);
      const long right_x = x + scene.disparity_of(right_surface);
      const auto& seg_color = left_surface == -2   ? kSkySegColor
                              : left_surface == -1 ? kBackgroundSegColor
                                                   : scene.shapes[static_cast<std::size_t>(left_surface)].seg_color;
      for (int c = 0; c < 3; ++c) {
        out.left[c * plane + p] = shade(left_surface, y, x, c) / 255.0f;
        out.right[c * plane + p] = shade(right_surface, y, right_x, c) / 255.0f;
        (*out.seg)[c * plane + p] = seg_color[c] / 255.0f;
      }
      if (left_surface == -2) {
        (*out.sky)[p] = 1;
        continue;
      }
      out.disparity[p] = static_cast<float>(scene.disparity_of(left_surface));
      out.valid[p] = !drop.bernoulli(options.dropout);
    }
  }
  return scene;
}

// -------------------------------------------------------- dataset on disk

/// Writes <stem>_{left,right,seg,disp,sky}.png under `dir` and returns the record.
inline DatasetRecord write_sample(const StereoSample& sample, const fs::path& dir, const std::string& stem) {
  fs::create_directories(dir);
  DatasetRecord r;
  r.left = dir / (stem + "_left.png");
  r.right = dir / (stem + "_right.png");
  r.disparity = dir / (stem + "_disp.png");
  write_rgb(sample.left, r.left);
  write_rgb(sample.right, r.right);
  if (sample.seg) {
    r.seg = dir / (stem + "_seg.png");
    write_rgb(*sample.seg, *r.seg);
  }
  // Invalid pixels carry the 0 sentinel regardless of stored disparity.
  Tensor<float> disp = sample.disparity.clone();
  for (std::size_t i = 0; i < disp.numel(); ++i)
    if (!sample.valid[i]) disp[i] = 0.0f;
  write_disparity(disp, r.disparity);
  if (sample.sky) {
    r.sky_mask = dir / (stem + "_sky.png");
    png::write8(*r.sky_mask, mask_to_image(*sample.sky));
  }
  return r;
}

struct SyntheticDatasetSpec {
  std::size_t count = 4;
  std::size_t height = 64;
  std::size_t width = 64;
  std::uint64_t seed = 0;
  int max_disparity = 12;
  std::size_t min_shapes = 2;
  std::size_t max_shapes = 6;
  std::string split = "train";
};

/// Depth = focal_baseline / disparity; scaled so integer disparities
/// 1..max_disparity land on depths from 8 upward.
inline double synthetic_focal_baseline(int max_disparity) { return 8.0 * max_disparity; }

inline DatasetManifest generate_synthetic_dataset(const fs::path& dir, const SyntheticDatasetSpec& spec) {
  if (spec.count == 0) throw ConfigError("count must be positive");
  if (spec.min_shapes > spec.max_shapes) throw ConfigError("min_shapes > max_shapes");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  DatasetManifest manifest;
  manifest.split = spec.split;
  manifest.focal_baseline = synthetic_focal_baseline(spec.max_disparity);
  for (std::size_t i = 0; i < spec.count; ++i) {
    const std::uint64_t sample_seed = mix_seed(spec.seed, 0x5eedULL, i);
    Rng rng(sample_seed);
    const auto shapes = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(spec.min_shapes), static_cast<std::int64_t>(spec.max_shapes)));
    const SyntheticScene scene =
        generate_synthetic_scene(sample_seed, spec.height, spec.width, shapes, spec.max_disparity);
    char stem[32];
    std::snprintf(stem, sizeof stem, "%06zu", i);
    manifest.records.push_back(write_sample(scene.sample, dir, stem));
  }
  manifest.save(dir / "manifest.json");
  return manifest;
}

}  // namespace usam
