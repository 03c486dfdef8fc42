#include <gtest/gtest.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "usamnet/data.hpp"
#include "usamnet/png_io.hpp"

using namespace usam;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out;  // stdout
  std::string err;  // stderr
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string quote(const fs::path& p) { return "\"" + p.string() + "\""; }

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("usamnet_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  CliResult run(const std::string& args) {
    const fs::path out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
    const std::string cmd =
        std::string("\"") + USAMNET_CLI_PATH + "\" " + args + " > " + quote(out) + " 2> " + quote(err);
    const int status = std::system(cmd.c_str());
    return {status == -1 ? -1 : WEXITSTATUS(status), slurp(out), slurp(err)};
  }

  fs::path data(std::size_t count = 4) {
    const fs::path d = dir_ / "data";
    if (!fs::exists(d / "manifest.json")) {
      const auto r = run("gen-data --out " + quote(d) + " --count " + std::to_string(count) + " --seed 7");
      EXPECT_EQ(r.code, 0) << r.err;
    }
    return d;
  }

  // One-epoch scaled model; returns its last checkpoint.
  fs::path train(const std::string& variant, const std::string& name, const std::string& extra = "") {
    const fs::path out = dir_ / name;
    const auto r = run("train --variant " + variant + " --manifest " + quote(data() / "manifest.json") + " --out " +
                       quote(out) + " --epochs 1 --seed 2 --set model.channel_divisor=8 " + extra);
    EXPECT_EQ(r.code, 0) << r.err;
    return out / "last.ckpt";
  }

  std::string pair_args(bool with_seg = true) {
    const fs::path d = data();
    std::string s = " --left " + quote(d / "000000_left.png") + " --right " + quote(d / "000000_right.png");
    if (with_seg) s += " --seg " + quote(d / "000000_seg.png");
    return s;
  }

  fs::path dir_;
};

}  // namespace

// ------------------------------------------------------------------ gen-data

TEST_F(Cli, GenDataWritesManifestDeterministically) {
  ASSERT_EQ(run("gen-data --out " + quote(dir_ / "a") + " --count 4 --seed 7").code, 0);
  ASSERT_EQ(run("gen-data --out " + quote(dir_ / "b") + " --count 4 --seed 7").code, 0);
  const auto m = DatasetManifest::load(dir_ / "a" / "manifest.json");
  EXPECT_EQ(m.records.size(), 4u);
  EXPECT_TRUE(m.has_segmentation());
  for (const auto& entry : fs::directory_iterator(dir_ / "a")) {
    const auto name = entry.path().filename();
    EXPECT_EQ(slurp(entry.path()), slurp(dir_ / "b" / name)) << name;
  }
  EXPECT_EQ(slurp(dir_ / "a" / "manifest.json"), slurp(dir_ / "b" / "manifest.json"));
}

TEST_F(Cli, GenDataRejectsBadDimensions) {
  const auto r = run("gen-data --out " + quote(dir_ / "x") + " --height 60");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("usamnet: error:"), std::string::npos);
}

// --------------------------------------------------------------- param-count

TEST_F(Cli, ParamCountJson) {
  const auto r = run("param-count --json");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  const std::size_t total = j["total"].get<std::size_t>();
  EXPECT_EQ(total, 15181153u);
  EXPECT_GE(total, 14'600'000u);
  EXPECT_LE(total, 15'600'000u);
  std::size_t layer_sum = 0;
  for (const auto& l : j["layers"]) layer_sum += l["count"].get<std::size_t>();
  EXPECT_EQ(layer_sum, total);
}

TEST_F(Cli, ParamCountSegmentationDeltaIsFirstLayer) {
  auto first_layer = [&](const std::string& variant) {
    const auto j = nlohmann::json::parse(run("param-count --json --variant " + variant).out);
    for (const auto& l : j["layers"])
      if (l["name"] == "encoder1.conv.weight") return l["count"].get<std::size_t>();
    return std::size_t{0};
  };
  EXPECT_EQ(first_layer("seg-attn") - first_layer("baseline"), 1728u);
}

TEST_F(Cli, ParamCountUnknownVariantIsUsageError) { EXPECT_EQ(run("param-count --variant huge").code, 2); }

// --------------------------------------------------------------------- train

TEST_F(Cli, TrainSegVariantNeedsSegImages) {
  const fs::path d = data();
  auto manifest = DatasetManifest::load(d / "manifest.json");
  for (auto& rec : manifest.records) rec.seg.reset();
  manifest.save(d / "noseg.json");
  const auto r = run("train --variant seg --manifest " + quote(d / "noseg.json") + " --out " + quote(dir_ / "r") +
                     " --epochs 1 --set model.channel_divisor=8");
  EXPECT_EQ(r.code, 3) << r.err;
  EXPECT_NE(r.err.find("usamnet: error:"), std::string::npos);
}

TEST_F(Cli, TrainResumeKeepsStepsMonotonicAndEchoesConfig) {
  const fs::path ck = train("seg-attn", "run");
  ASSERT_TRUE(fs::exists(ck));
  const auto echoed = nlohmann::json::parse(slurp(dir_ / "run" / "effective_config.json"));
  EXPECT_EQ(echoed["model"]["channel_divisor"], 8);
  EXPECT_EQ(echoed["train"]["epochs"], 1);

  const auto r = run("train --variant seg-attn --manifest " + quote(data() / "manifest.json") + " --out " +
                     quote(dir_ / "run") + " --epochs 3 --seed 2 --set model.channel_divisor=8 --resume " + quote(ck));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "run" / "epoch_0003.ckpt"));

  std::ifstream log(dir_ / "run" / "loss_log.csv");
  std::string line;
  std::getline(log, line);
  EXPECT_EQ(line, "epoch,step,lr,loss");
  long last = -1;
  std::size_t rows = 0;
  while (std::getline(log, line)) {
    const long step = std::stol(line.substr(line.find(',') + 1));
    EXPECT_EQ(step, last + 1);
    last = step;
    ++rows;
  }
  EXPECT_EQ(rows, 6u);  // 4 samples, batch 2, 3 epochs
  for (const auto& entry : fs::directory_iterator(dir_ / "run"))
    EXPECT_NE(entry.path().extension(), ".tmp") << entry.path();
}

TEST_F(Cli, TrainOverfitsFourSamples) {
  const fs::path d = dir_ / "four";
  ASSERT_EQ(run("gen-data --out " + quote(d) + " --count 4 --seed 7 --min-shapes 4 --max-shapes 4").code, 0);
  const auto r = run("train --manifest " + quote(d / "manifest.json") + " --out " + quote(dir_ / "run") +
                     " --epochs 10 --seed 3 --set model.channel_divisor=8 --set train.repeats=15"
                     " --set train.augment.jitter_strength=0 --set train.augment.top_replace_prob=0 --set init_seed=1");
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream log(dir_ / "run" / "loss_log.csv");
  std::string line;
  std::getline(log, line);
  std::vector<double> losses;
  while (std::getline(log, line)) losses.push_back(std::stod(line.substr(line.rfind(',') + 1)));
  ASSERT_EQ(losses.size(), 300u);
  double tail = 0;
  for (std::size_t i = 290; i < 300; ++i) tail += losses[i] / 10.0;
  EXPECT_LT(tail, 0.1 * losses.front());
}

TEST_F(Cli, TrainResumeWithDifferentModelIsIncompatible) {
  const fs::path ck = train("seg-attn", "run");
  const auto r = run("train --variant seg --manifest " + quote(data() / "manifest.json") + " --out " +
                     quote(dir_ / "other") + " --epochs 2 --set model.channel_divisor=8 --resume " + quote(ck));
  EXPECT_EQ(r.code, 6) << r.err;
}

TEST_F(Cli, TrainRejectsUnknownOverride) {
  const auto r = run("train --manifest " + quote(data() / "manifest.json") + " --out " + quote(dir_ / "r") +
                     " --set train.learning_rate=0.1");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("train.learning_rate"), std::string::npos);
}

TEST_F(Cli, TrainRejectsUnknownConfigKey) {
  std::ofstream(dir_ / "cfg.json") << R"({"model": {"use_attention": true, "dropout": 0.5}})";
  EXPECT_EQ(run("train --config " + quote(dir_ / "cfg.json") + " --manifest " + quote(data() / "manifest.json")).code,
            2);
}

TEST_F(Cli, MissingManifestIsIoError) {
  EXPECT_EQ(run("train --manifest " + quote(dir_ / "nope.json") + " --out " + quote(dir_ / "r")).code, 4);
}

TEST_F(Cli, CorruptCheckpointIsFormatError) {
  std::ofstream(dir_ / "bad.ckpt") << "USAMNET-CHECKPOINT 1\n12\n{\"trunc";
  EXPECT_EQ(run("predict --checkpoint " + quote(dir_ / "bad.ckpt") + pair_args() + " --out " + quote(dir_ / "p.png"))
                .code,
            5);
}

// ---------------------------------------------------------------------- eval

TEST_F(Cli, EvalDeterministicWithExactColumns) {
  const fs::path ck = train("seg-attn", "run");
  const std::string base = "eval --checkpoint " + quote(ck) + " --manifest " + quote(data() / "manifest.json");
  ASSERT_EQ(run(base + " --out " + quote(dir_ / "e1")).code, 0);
  ASSERT_EQ(run(base + " --out " + quote(dir_ / "e2")).code, 0);
  EXPECT_EQ(slurp(dir_ / "e1" / "report.csv"), slurp(dir_ / "e2" / "report.csv"));
  EXPECT_EQ(slurp(dir_ / "e1" / "ard_curve.csv"), slurp(dir_ / "e2" / "ard_curve.csv"));

  std::istringstream csv(slurp(dir_ / "e1" / "report.csv"));
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header,
            "EPE,D1,thres_1,thres_2,thres_3,ARD_8,ARD_16,ARD_24,ARD_32,ARD_40,ARD_48,ARD_56,ARD_64,ARD_72,ARD_80,GD");

  std::istringstream curve(slurp(dir_ / "e1" / "ard_curve.csv"));
  std::string line;
  std::getline(curve, line);
  EXPECT_EQ(line, "bucket_center,ard");
  std::size_t rows = 0;
  while (std::getline(curve, line)) ++rows;
  EXPECT_EQ(rows, 10u);

  const auto j = nlohmann::json::parse(slurp(dir_ / "e1" / "report.json"));
  for (const char* key : {"EPE", "D1", "thresholds", "ARD", "GD", "valid_pixel_count"}) EXPECT_TRUE(j.contains(key)) << key;
}

TEST_F(Cli, EvalWithMismatchedConfigIsIncompatible) {
  const fs::path ck = train("seg-attn", "run");
  std::ofstream(dir_ / "cfg.json") << R"({"model": {"use_attention": false}})";
  const auto r = run("eval --checkpoint " + quote(ck) + " --manifest " + quote(data() / "manifest.json") +
                     " --config " + quote(dir_ / "cfg.json") + " --out " + quote(dir_ / "e"));
  EXPECT_EQ(r.code, 6) << r.err;
}

TEST_F(Cli, EvalWithoutFocalBaselineIsConfigError) {
  const fs::path ck = train("seg-attn", "run");
  auto manifest = DatasetManifest::load(data() / "manifest.json");
  manifest.focal_baseline.reset();
  manifest.save(data() / "nofb.json");
  EXPECT_EQ(run("eval --checkpoint " + quote(ck) + " --manifest " + quote(data() / "nofb.json") + " --out " +
                quote(dir_ / "e"))
                .code,
            2);
  EXPECT_EQ(run("eval --checkpoint " + quote(ck) + " --manifest " + quote(data() / "nofb.json") +
                " --focal-baseline 96 --out " + quote(dir_ / "e"))
                .code,
            0);
}

// ------------------------------------------------------------------- predict

TEST_F(Cli, PredictWritesDisparityInRange) {
  const fs::path ck = train("seg-attn", "run");
  const auto r = run("predict --checkpoint " + quote(ck) + pair_args() + " --out " + quote(dir_ / "p.png") +
                     " --color " + quote(dir_ / "c.png"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto disp = read_disparity(dir_ / "p.png");
  ASSERT_EQ(disp.disparity.numel(), 64u * 64u);
  for (std::size_t i = 0; i < disp.disparity.numel(); ++i) {
    EXPECT_GT(disp.disparity[i], 0.0f);
    EXPECT_LT(disp.disparity[i], 255.0f);
  }
  const auto color = png::read8(dir_ / "c.png", 3);
  EXPECT_EQ(color.height, 64u);
  EXPECT_EQ(color.width, 64u);
}

TEST_F(Cli, PredictBaselineWarnsAboutUnusedSeg) {
  const fs::path ck = train("baseline", "run");
  const auto r = run("predict --checkpoint " + quote(ck) + pair_args(true) + " --out " + quote(dir_ / "p.png"));
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("warning"), std::string::npos);
}

TEST_F(Cli, PredictSegCheckpointWithoutSegIsUsageError) {
  const fs::path ck = train("seg-attn", "run");
  const auto r = run("predict --checkpoint " + quote(ck) + pair_args(false) + " --out " + quote(dir_ / "p.png"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--seg"), std::string::npos);
}

TEST_F(Cli, PredictSizeMismatchNamesExpectedDims) {
  const fs::path ck = train("seg-attn", "run");
  ASSERT_EQ(run("gen-data --out " + quote(dir_ / "wide") + " --count 1 --width 96").code, 0);
  const fs::path w = dir_ / "wide";
  const auto r = run("predict --checkpoint " + quote(ck) + " --left " + quote(w / "000000_left.png") + " --right " +
                     quote(w / "000000_right.png") + " --seg " + quote(w / "000000_seg.png") + " --out " +
                     quote(dir_ / "p.png"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("64x64"), std::string::npos) << r.err;
}

// ----------------------------------------------------------------- attn-diff

TEST_F(Cli, AttnDiffOfSameCheckpointIsZero) {
  const fs::path ck = train("seg-attn", "run");
  const auto r = run("attn-diff --checkpoint-a " + quote(ck) + " --checkpoint-b " + quote(ck) + pair_args() +
                     " --out " + quote(dir_ / "d"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto heat = png::read8(dir_ / "d" / "heatmap.png", 3);
  for (auto v : heat.pixels) EXPECT_EQ(v, 0);
  const auto overlay = png::read8(dir_ / "d" / "overlay.png", 3);
  const auto left = png::read8(data() / "000000_left.png", 3);
  EXPECT_EQ(overlay.height, left.height);
  EXPECT_EQ(overlay.width, left.width);
}

TEST_F(Cli, AttnDiffOfDifferentModelsSpansFullRange) {
  const fs::path a = train("seg-attn", "a");
  const fs::path b = train("seg", "b");
  ASSERT_EQ(run("attn-diff --checkpoint-a " + quote(a) + " --checkpoint-b " + quote(b) + pair_args() + " --out " +
                quote(dir_ / "d"))
                .code,
            0);
  const auto heat = png::read8(dir_ / "d" / "heatmap.png", 3);
  const auto [lo, hi] = std::minmax_element(heat.pixels.begin(), heat.pixels.end());
  EXPECT_EQ(*hi, 255);
  EXPECT_LT(*lo, *hi);
}

TEST_F(Cli, AttnDiffRejectsChannelMismatch) {
  const fs::path a = train("seg-attn", "a");
  const fs::path b = train("baseline", "b");
  const auto r = run("attn-diff --checkpoint-a " + quote(a) + " --checkpoint-b " + quote(b) + pair_args() +
                     " --out " + quote(dir_ / "d"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("channels"), std::string::npos);
}

TEST_F(Cli, UnknownSubcommandIsUsageError) { EXPECT_EQ(run("frobnicate").code, 2); }

TEST_F(Cli, UnwritableOutputIsIoError) {
  std::ofstream(dir_ / "file") << "x";
  const auto r = run("gen-data --out " + quote(dir_ / "file" / "sub") + " --count 1");
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.err.find("usamnet: error:"), std::string::npos);
}
