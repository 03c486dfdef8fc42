#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "test_support.hpp"
#include "usamnet/data.hpp"

using namespace usam;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("usamnet_data_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

StereoSample random_sample(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  StereoSample s;
  s.left = usam::testing::random_tensor<float>({3, h, w}, rng, 0.0, 1.0);
  s.right = usam::testing::random_tensor<float>({3, h, w}, rng, 0.0, 1.0);
  s.seg = usam::testing::random_tensor<float>({3, h, w}, rng, 0.0, 1.0);
  s.disparity = Tensor<float>({1, h, w});
  s.valid = Mask({1, h, w});
  s.sky = Mask({1, h, w});
  for (std::size_t i = 0; i < h * w; ++i) {
    if (rng.bernoulli(0.6)) {
      s.valid[i] = 1;
      s.disparity[i] = static_cast<float>(rng.uniform(0.5, 100.0));
    }
    (*s.sky)[i] = i < w * 2;
  }
  return s;
}

std::size_t count_valid_rows(const Mask& m, std::size_t w, std::size_t row0, std::size_t rows) {
  std::size_t n = 0;
  for (std::size_t i = row0 * w; i < (row0 + rows) * w; ++i) n += m[i] != 0;
  return n;
}

}  // namespace

// ---------------------------------------------------------------- disparity

TEST(Disparity, RawConventionExamples) {
  const fs::path dir = scratch_dir("raw");
  png::Image16 raw{3, 1, {512, 0, 300}};
  png::write16(dir / "d.png", raw);
  const auto d = read_disparity(dir / "d.png");
  EXPECT_FLOAT_EQ(d.disparity[0], 2.0f);
  EXPECT_EQ(d.valid[0], 1);
  EXPECT_EQ(d.disparity[1], 0.0f);
  EXPECT_EQ(d.valid[1], 0);
  EXPECT_FLOAT_EQ(d.disparity[2], 300.0f / 256.0f);
}

TEST(Disparity, WriteTwoPixelsIsRaw512) {
  const fs::path dir = scratch_dir("w512");
  Tensor<float> d({1, 1, 2}, std::vector<float>{2.0f, 0.0f});
  write_disparity(d, dir / "d.png");
  const auto raw = png::read16(dir / "d.png");
  EXPECT_EQ(raw.pixels[0], 512);
  EXPECT_EQ(raw.pixels[1], 0);
}

TEST(Disparity, RoundTripWithinHalfQuantum) {
  const fs::path dir = scratch_dir("rt");
  Rng rng(3);
  Tensor<float> d({1, 32, 64});
  for (auto& v : d.values()) v = rng.bernoulli(0.2) ? 0.0f : static_cast<float>(rng.uniform(0.0, 254.99));
  write_disparity(d, dir / "d.png");
  const auto back = read_disparity(dir / "d.png");
  for (std::size_t i = 0; i < d.numel(); ++i) {
    if (d[i] == 0.0f) {
      EXPECT_EQ(back.valid[i], 0);
      EXPECT_EQ(back.disparity[i], 0.0f);
    } else {
      EXPECT_EQ(back.valid[i], 1);
      EXPECT_LE(std::abs(back.disparity[i] - d[i]), 1.0 / 512 + 1e-6) << i;
    }
  }
}

TEST(Disparity, TinyPositiveStaysValid) {
  const fs::path dir = scratch_dir("tiny");
  Tensor<float> d({1, 1, 1}, std::vector<float>{0.001f});
  write_disparity(d, dir / "d.png");
  EXPECT_EQ(read_disparity(dir / "d.png").valid[0], 1);
}

TEST(Disparity, OutOfRangeIsDataError) {
  const fs::path dir = scratch_dir("oor");
  EXPECT_THROW(write_disparity(Tensor<float>({1, 1, 1}, 255.0f), dir / "d.png"), DataError);
  EXPECT_THROW(write_disparity(Tensor<float>({1, 1, 1}, -1.0f), dir / "d.png"), DataError);
}

TEST(Disparity, InexpressibleRawIsDataError) {
  const fs::path dir = scratch_dir("inexpr");
  png::write16(dir / "d.png", png::Image16{1, 1, {255 * 256}});
  EXPECT_THROW(read_disparity(dir / "d.png"), DataError);
}

// ------------------------------------------------------------------ loading

TEST(LoadSample, RoundTripThroughFiles) {
  const fs::path dir = scratch_dir("load");
  const StereoSample s = random_sample(32, 64, 11);
  const DatasetRecord rec = write_sample(s, dir, "a");
  const StereoSample back = load_sample(rec, Dims{32, 64});
  for (std::size_t i = 0; i < s.left.numel(); ++i) {
    EXPECT_NEAR(back.left[i], s.left[i], 0.5 / 255 + 1e-6);
    EXPECT_NEAR((*back.seg)[i], (*s.seg)[i], 0.5 / 255 + 1e-6);
  }
  EXPECT_TRUE(same_values(back.valid, s.valid));
  EXPECT_TRUE(same_values(*back.sky, *s.sky));
  for (std::size_t i = 0; i < s.valid.numel(); ++i)
    if (s.valid[i]) {
      EXPECT_LE(std::abs(back.disparity[i] - s.disparity[i]), 1.0 / 512 + 1e-6);
    }
}

TEST(LoadSample, AllZeroDisparityLoadsWithNoValidPixels) {
  const fs::path dir = scratch_dir("zero");
  StereoSample s = random_sample(32, 32, 1);
  for (auto& v : s.valid.values()) v = 0;
  const StereoSample back = load_sample(write_sample(s, dir, "z"));
  EXPECT_EQ(back.valid_count(), 0u);
}

TEST(LoadSample, DimensionMismatchNamesFile) {
  const fs::path dir = scratch_dir("mismatch");
  DatasetRecord rec = write_sample(random_sample(32, 32, 2), dir, "a");
  const DatasetRecord other = write_sample(random_sample(32, 64, 2), dir, "b");
  rec.right = other.right;
  try {
    load_sample(rec);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("b_right.png"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_sample(other, Dims{32, 32}), DataError);
}

TEST(LoadSample, MissingFileIsIoError) {
  DatasetRecord rec{"/nonexistent/l.png", "/nonexistent/r.png", std::nullopt, "/nonexistent/d.png", std::nullopt};
  EXPECT_THROW(load_sample(rec), IoError);
}

// ----------------------------------------------------------------- manifest

TEST(Manifest, SaveLoadResolvesRelativePaths) {
  const fs::path dir = scratch_dir("manifest");
  DatasetManifest m;
  m.split = "test";
  m.focal_baseline = 96.0;
  m.records.push_back(write_sample(random_sample(32, 32, 5), dir / "data", "x"));
  m.save(dir / "manifest.json");

  std::ifstream in(dir / "manifest.json");
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j["records"][0]["left"], "data/x_left.png");

  const DatasetManifest back = DatasetManifest::load(dir / "manifest.json");
  EXPECT_EQ(back.split, "test");
  EXPECT_EQ(back.focal_baseline, 96.0);
  ASSERT_EQ(back.records.size(), 1u);
  EXPECT_TRUE(fs::equivalent(back.records[0].left, m.records[0].left));
  EXPECT_TRUE(back.has_segmentation());
  EXPECT_NO_THROW(load_sample(back.records[0]));
}

TEST(Manifest, RejectsUnknownKeysAndBadSplit) {
  const fs::path dir = scratch_dir("badmanifest");
  std::ofstream(dir / "a.json") << R"({"split":"train","records":[],"extra":1})";
  EXPECT_THROW(DatasetManifest::load(dir / "a.json"), FormatError);
  std::ofstream(dir / "b.json") << R"({"split":"val","records":[]})";
  EXPECT_THROW(DatasetManifest::load(dir / "b.json"), FormatError);
  std::ofstream(dir / "c.json") << "{not json";
  EXPECT_THROW(DatasetManifest::load(dir / "c.json"), FormatError);
}

// ------------------------------------------------------------ normalization

TEST(Normalize, Examples) {
  Tensor<float> img({3, 1, 1}, std::vector<float>{0.50625f, 0.52283f + 0.19807f, 0.0f});
  const auto out = normalize_image(img, NormalizationStats{});
  EXPECT_NEAR(out[0], 0.0f, 1e-6);
  EXPECT_NEAR(out[1], 1.0f, 1e-6);
  EXPECT_NEAR(out[2], -0.41453f / 0.18691f, 1e-5);

  NormalizationStats unit{{0, 0, 0}, {1, 1, 1}};
  Rng rng(1);
  const auto x = usam::testing::random_tensor<float>({3, 4, 4}, rng, 0.0, 1.0);
  EXPECT_TRUE(same_values(normalize_image(x, unit), x));
}

TEST(Normalize, Invertible) {
  Rng rng(2);
  const auto x = usam::testing::random_tensor<float>({3, 16, 16}, rng, 0.0, 1.0);
  const NormalizationStats stats;
  const auto back = denormalize_image(normalize_image(x, stats), stats);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(back[i], x[i], 1e-6);
}

TEST(Normalize, RejectsNonPositiveStd) {
  NormalizationStats bad;
  bad.std[1] = 0.0f;
  EXPECT_THROW(normalize_image(Tensor<float>({3, 1, 1}), bad), ConfigError);
}

// ------------------------------------------------------------- color jitter

TEST(ColorJitter, ZeroStrengthIsIdentity) {
  Rng rng(4);
  const auto l = usam::testing::random_tensor<float>({3, 8, 8}, rng, 0.0, 1.0);
  const auto r = usam::testing::random_tensor<float>({3, 8, 8}, rng, 0.0, 1.0);
  const auto [l2, r2] = color_jitter(l, r, 0.0, 99);
  EXPECT_TRUE(same_values(l, l2));
  EXPECT_TRUE(same_values(r, r2));
}

TEST(ColorJitter, DeterministicPerSeedAndInRange) {
  Rng rng(5);
  const auto l = usam::testing::random_tensor<float>({3, 8, 8}, rng, 0.0, 1.0);
  const auto r = usam::testing::random_tensor<float>({3, 8, 8}, rng, 0.0, 1.0);
  const auto a = color_jitter(l, r, 0.1, 7);
  const auto b = color_jitter(l, r, 0.1, 7);
  const auto c = color_jitter(l, r, 0.1, 8);
  EXPECT_TRUE(same_values(a.first, b.first));
  EXPECT_TRUE(same_values(a.second, b.second));
  EXPECT_FALSE(same_values(a.first, c.first));
  for (float v : a.first.values()) EXPECT_TRUE(v >= 0.0f && v <= 1.0f);
}

TEST(ColorJitter, BrightnessOnlyOnConstantImage) {
  Tensor<float> l({3, 4, 4}, 0.5f), r({3, 4, 4}, 0.5f);
  JitterFactors f;
  f.brightness = 1.1;
  const auto [l2, r2] = apply_jitter(l, r, f);
  for (float v : l2.values()) EXPECT_NEAR(v, 0.55f, 1e-6);
  for (float v : r2.values()) EXPECT_NEAR(v, 0.55f, 1e-6);
}

TEST(ColorJitter, FactorsWithinStrength) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto f = sample_jitter(0.1, seed);
    EXPECT_GE(f.brightness, 0.9);
    EXPECT_LE(f.brightness, 1.1);
    EXPECT_GE(f.contrast, 0.9);
    EXPECT_LE(f.saturation, 1.1);
    EXPECT_LE(std::abs(f.hue), 0.1);
  }
  EXPECT_THROW(sample_jitter(1.0, 0), ConfigError);
}

// Same pointwise map on both views: a pixel with the same color in left and
// right must stay equal after jitter.
TEST(ColorJitter, IdenticalAcrossViews) {
  Rng rng(6);
  const auto l = usam::testing::random_tensor<float>({3, 8, 8}, rng, 0.0, 1.0);
  Tensor<float> r({3, 8, 8});
  const std::size_t plane = 64;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < plane; ++p) r[c * plane + p] = l[c * plane + (p + 1) % plane];
  const auto [l2, r2] = color_jitter(l, r, 0.3, 1);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < plane; ++p) EXPECT_EQ(r2[c * plane + p], l2[c * plane + (p + 1) % plane]);
}

TEST(ColorJitter, HueShiftOfFullCycleIsIdentity) {
  Tensor<float> l({3, 1, 1}, std::vector<float>{0.8f, 0.3f, 0.1f});
  JitterFactors f;
  f.hue = 1.0 / 3.0;
  const auto [l2, r2] = apply_jitter(l, l, f);
  // A third of the cycle rotates R->G->B.
  EXPECT_NEAR(l2[0], 0.1f, 1e-5);
  EXPECT_NEAR(l2[1], 0.8f, 1e-5);
  EXPECT_NEAR(l2[2], 0.3f, 1e-5);
}

// -------------------------------------------------------------- top replace

TEST(TopReplace, ZeroProbabilityIsIdentity) {
  const StereoSample s = random_sample(32, 32, 8);
  AugmentConfig cfg;
  cfg.top_replace_prob = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const StereoSample out = top_replace_augment(s, cfg, seed);
    EXPECT_TRUE(same_values(out.left, s.left));
    EXPECT_TRUE(same_values(out.disparity, s.disparity));
    EXPECT_TRUE(same_values(out.valid, s.valid));
  }
}

TEST(TopReplace, CopiesSourceBandInEveryField) {
  const std::size_t h = 32, w = 16;
  const StereoSample s = random_sample(h, w, 9);
  AugmentConfig cfg;
  cfg.top_replace_prob = 1.0;
  bool saw_middle = false, saw_bottom = false;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto plan = plan_top_replace(h, cfg, seed);
    ASSERT_TRUE(plan.applied);
    ASSERT_EQ(plan.rows, 8u);
    ASSERT_TRUE(plan.source_start == 12 || plan.source_start == 24) << plan.source_start;
    saw_middle |= plan.source_start == 12;
    saw_bottom |= plan.source_start == 24;
    const StereoSample out = top_replace_augment(s, cfg, seed);
    auto check = [&](const auto& before, const auto& after) {
      const std::size_t ch = before.numel() / (h * w);
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            const std::size_t src_y = y < plan.rows ? plan.source_start + y : y;
            ASSERT_EQ(after[(c * h + y) * w + x], before[(c * h + src_y) * w + x]);
          }
    };
    check(s.left, out.left);
    check(s.right, out.right);
    check(*s.seg, *out.seg);
    check(s.disparity, out.disparity);
    check(s.valid, out.valid);
    check(*s.sky, *out.sky);
    const std::size_t expected =
        count_valid_rows(s.valid, w, plan.rows, h - plan.rows) + count_valid_rows(s.valid, w, plan.source_start, plan.rows);
    EXPECT_EQ(out.valid_count(), expected);
  }
  EXPECT_TRUE(saw_middle);
  EXPECT_TRUE(saw_bottom);
}

TEST(TopReplace, MiddleBandCenteredOnHalfHeight) {
  AugmentConfig cfg;
  cfg.top_fraction = 0.5;
  cfg.top_replace_prob = 1.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto plan = plan_top_replace(64, cfg, seed);
    EXPECT_TRUE(plan.source_start == 16 || plan.source_start == 32);
  }
}

TEST(TopReplace, NonIntegerRowsIsConfigError) {
  AugmentConfig cfg;
  cfg.top_fraction = 0.3;
  EXPECT_THROW(plan_top_replace(32, cfg, 0), ConfigError);
  cfg.top_fraction = 0.6;
  EXPECT_THROW(plan_top_replace(32, cfg, 0), ConfigError);
}

TEST(TopReplace, Deterministic) {
  const StereoSample s = random_sample(32, 32, 10);
  const AugmentConfig cfg;
  for (std::uint64_t seed = 0; seed < 5; ++seed)
    EXPECT_TRUE(same_values(top_replace_augment(s, cfg, seed).left, top_replace_augment(s, cfg, seed).left));
}

// ------------------------------------------------------------------ sky mask

TEST(SkyMask, SkyPixelsBecomeZeroTargets) {
  StereoSample s = random_sample(8, 8, 12);
  const StereoSample out = apply_sky_mask(s);
  for (std::size_t i = 0; i < 64; ++i) {
    if ((*s.sky)[i]) {
      EXPECT_EQ(out.valid[i], 1);
      EXPECT_EQ(out.disparity[i], 0.0f);
    } else {
      EXPECT_EQ(out.valid[i], s.valid[i]);
      EXPECT_EQ(out.disparity[i], s.disparity[i]);
    }
  }
  EXPECT_TRUE(same_values(s.valid, random_sample(8, 8, 12).valid)) << "input must not be modified";
}

TEST(SkyMask, EmptyMaskUnchangedAndMissingMaskErrors) {
  StereoSample s = random_sample(8, 8, 13);
  for (auto& v : s.sky->values()) v = 0;
  const StereoSample out = apply_sky_mask(s);
  EXPECT_TRUE(same_values(out.valid, s.valid));
  EXPECT_TRUE(same_values(out.disparity, s.disparity));
  s.sky.reset();
  EXPECT_THROW(apply_sky_mask(s), UsageError);
}

// ---------------------------------------------------------------- synthetic

TEST(Synthetic, SameSeedBitIdentical) {
  const auto a = generate_synthetic_scene(42, 64, 64, 5, 12);
  const auto b = generate_synthetic_scene(42, 64, 64, 5, 12);
  EXPECT_TRUE(same_values(a.sample.left, b.sample.left));
  EXPECT_TRUE(same_values(a.sample.right, b.sample.right));
  EXPECT_TRUE(same_values(*a.sample.seg, *b.sample.seg));
  EXPECT_TRUE(same_values(a.sample.disparity, b.sample.disparity));
  EXPECT_TRUE(same_values(a.sample.valid, b.sample.valid));
  const auto c = generate_synthetic_scene(43, 64, 64, 5, 12);
  EXPECT_FALSE(same_values(a.sample.left, c.sample.left));
}

TEST(Synthetic, InvariantsHold) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto scene = generate_synthetic_scene(seed, 64, 96, 6, 20);
    const auto& s = scene.sample;
    EXPECT_EQ(scene.sky_rows, 8u);
    std::size_t sky = 0, valid = 0, candidates = 0;
    for (std::size_t i = 0; i < s.valid.numel(); ++i) {
      if (s.valid[i]) {
        ++valid;
        EXPECT_GT(s.disparity[i], 0.0f);
        EXPECT_LE(s.disparity[i], 20.0f);
        EXPECT_EQ(s.disparity[i], std::round(s.disparity[i]));
      }
      if ((*s.sky)[i]) {
        ++sky;
        EXPECT_EQ(s.valid[i], 0);
        EXPECT_EQ(s.disparity[i], 0.0f);
        EXPECT_LT(i, 8u * 96);
      } else {
        ++candidates;
      }
    }
    EXPECT_EQ(sky, 8u * 96);
    const double kept = static_cast<double>(valid) / static_cast<double>(candidates);
    EXPECT_NEAR(kept, 0.9, 0.03);
    for (std::size_t i = 0; i + 1 < scene.shapes.size(); ++i)
      EXPECT_LE(scene.shapes[i].disparity, scene.shapes[i + 1].disparity);
    for (float v : s.left.values()) EXPECT_EQ(v, std::round(v * 255.0f) / 255.0f);
  }
}

TEST(Synthetic, WarpConsistencyExact) {
  std::size_t checked = 0;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto scene = generate_synthetic_scene(seed, 64, 128, 1 + seed % 7, 24);
    const auto result = usam::testing::check_warp_consistency(scene);
    EXPECT_EQ(result.violations, 0u) << "seed " << seed;
    checked += result.checked;
  }
  EXPECT_GT(checked, 30u * 64 * 128 / 2);
}

// The check must be able to fail: corrupting one visible right pixel is caught.
TEST(Synthetic, WarpCheckDetectsCorruption) {
  auto scene = generate_synthetic_scene(1, 64, 64, 0, 8);
  ASSERT_EQ(usam::testing::check_warp_consistency(scene).violations, 0u);
  const std::size_t y = 40, x = 30;
  const std::size_t d = static_cast<std::size_t>(scene.sample.disparity[y * 64 + x]);
  scene.sample.valid[y * 64 + x] = 1;
  scene.sample.right[y * 64 + x - d] += 1.0f / 255.0f;
  EXPECT_GE(usam::testing::check_warp_consistency(scene).violations, 1u);
}

TEST(Synthetic, NoShapesGivesConstantBackground) {
  const auto scene = generate_synthetic_scene(3, 32, 64, 0, 15);
  const auto& s = scene.sample;
  EXPECT_TRUE(scene.shapes.empty());
  for (std::size_t i = 0; i < s.valid.numel(); ++i)
    if (s.valid[i]) {
      EXPECT_EQ(s.disparity[i], static_cast<float>(scene.background_disparity));
    }
  EXPECT_GE(scene.background_disparity, 1);
  EXPECT_LE(scene.background_disparity, 5);
}

TEST(Synthetic, GuardsPreconditions) {
  EXPECT_THROW(generate_synthetic_scene(0, 60, 64, 2, 8), ConfigError);
  EXPECT_THROW(generate_synthetic_scene(0, 64, 64, 2, 16), ConfigError);
  EXPECT_THROW(generate_synthetic_scene(0, 64, 64, 2, 0), ConfigError);
  EXPECT_THROW(generate_synthetic_scene(0, 64, 2048, 2, 255), ConfigError);
}

TEST(Synthetic, DatasetOnDiskDeterministic) {
  SyntheticDatasetSpec spec;
  spec.count = 3;
  spec.seed = 7;
  const fs::path a = scratch_dir("ds_a"), b = scratch_dir("ds_b");
  const auto ma = generate_synthetic_dataset(a, spec);
  generate_synthetic_dataset(b, spec);
  ASSERT_EQ(ma.records.size(), 3u);
  for (const auto& entry : fs::directory_iterator(a)) {
    std::ifstream fa(entry.path(), std::ios::binary), fb(b / entry.path().filename(), std::ios::binary);
    const std::string ca((std::istreambuf_iterator<char>(fa)), {}), cb((std::istreambuf_iterator<char>(fb)), {});
    EXPECT_EQ(ca, cb) << entry.path();
  }
  const auto loaded = DatasetManifest::load(a / "manifest.json");
  EXPECT_EQ(loaded.records.size(), 3u);
  EXPECT_EQ(loaded.focal_baseline, synthetic_focal_baseline(spec.max_disparity));
  const StereoSample s = load_sample(loaded.records[0], Dims{64, 64});
  EXPECT_TRUE(s.sky.has_value());
  EXPECT_TRUE(s.seg.has_value());
}
