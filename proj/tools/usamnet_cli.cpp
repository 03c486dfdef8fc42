// usamnet: dataset generation, training, evaluation, prediction and analysis.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "usamnet/data.hpp"
#include "usamnet/inference.hpp"
#include "usamnet/metrics.hpp"
#include "usamnet/model.hpp"
#include "usamnet/run_config.hpp"
#include "usamnet/train.hpp"

namespace fs = std::filesystem;
using namespace usam;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

// ------------------------------------------------------------------ gen-data

struct GenDataArgs {
  std::string out;
  SyntheticDatasetSpec spec;
};

int run_gen_data(const GenDataArgs& a) {
  const auto manifest = generate_synthetic_dataset(a.out, a.spec);
  std::printf("wrote %zu samples and %s\n", manifest.records.size(), (fs::path(a.out) / "manifest.json").c_str());
  return 0;
}

// --------------------------------------------------------------------- train

struct TrainArgs {
  std::string config;
  std::string resume;
  std::string variant;
  std::string manifest;
  std::string out;
  std::vector<std::string> overrides;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
};

int run_train(const TrainArgs& a) {
  RunConfig rc = a.config.empty() ? RunConfig{} : RunConfig::load(a.config);
  for (const auto& o : a.overrides) rc.apply_override(o);
  if (!a.variant.empty()) rc.set_variant(a.variant);
  if (!a.manifest.empty()) rc.train_manifest = a.manifest;
  if (!a.out.empty()) rc.output_dir = a.out;
  if (a.epochs) rc.train.epochs = *a.epochs;
  if (a.seed) rc.train.seed = *a.seed;
  rc.validate();
  if (rc.train_manifest.empty()) throw ConfigError("no training manifest (set train_manifest or --manifest)");

  const auto manifest = DatasetManifest::load(rc.train_manifest);
  const auto samples = load_dataset(manifest, rc.model);

  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) {
    resume = load_checkpoint(a.resume);
    if (resume->model.hash() != rc.model.hash())
      throw IncompatibleError("checkpoint " + a.resume + " was trained with model config " +
                              resume->model.to_json().dump() + ", run config has " + rc.model.to_json().dump());
  }

  make_dir(rc.output_dir);
  write_text(fs::path(rc.output_dir) / "effective_config.json", rc.to_json().dump(2) + "\n");

  auto model = build_model<float>(rc.model, rc.init_seed);
  TrainOptions opts;
  opts.out_dir = rc.output_dir;
  const auto result = train_epochs(model, samples, rc.train, resume, opts);

  double first = std::nan(""), last = std::nan("");
  for (const auto& e : result.log)
    if (!e.skipped) {
      if (std::isnan(first)) first = e.loss;
      last = e.loss;
    }
  std::printf("trained %zu steps (%zu skipped), epoch %llu, first loss %.6g, last loss %.6g -> %s\n",
              result.log.size(), result.skipped_batches,
              static_cast<unsigned long long>(result.checkpoint.epoch), first, last,
              (fs::path(rc.output_dir) / "last.ckpt").c_str());
  return 0;
}

// ---------------------------------------------------------------------- eval

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::optional<double> focal_baseline;
  std::string out;
  std::string config;
};

int run_eval(const EvalArgs& a) {
  RunConfig rc = a.config.empty() ? RunConfig{} : RunConfig::load(a.config);
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  if (!a.config.empty() && rc.model.hash() != ckpt.model.hash())
    throw IncompatibleError("checkpoint " + a.checkpoint + " does not match the model config in " + a.config);
  auto model = model_from_checkpoint(ckpt);
  const auto manifest = DatasetManifest::load(a.manifest);
  const auto samples = load_dataset(manifest, ckpt.model);
  const auto fb = a.focal_baseline ? a.focal_baseline : manifest.focal_baseline ? manifest.focal_baseline : rc.focal_baseline;
  if (!fb) throw ConfigError("no focal_baseline: pass --focal-baseline or record it in the manifest");
  const Evaluation e = evaluate_model(model, samples, *fb, rc.metric, rc.buckets);

  make_dir(a.out);
  const fs::path out(a.out);
  write_text(out / "report.csv", e.aggregate.csv());
  nlohmann::json j = e.aggregate.to_json();
  j["checkpoint"] = a.checkpoint;
  j["manifest"] = a.manifest;
  j["focal_baseline"] = *fb;
  j["model_config"] = ckpt.model.to_json();
  write_text(out / "report.json", j.dump(2) + "\n");
  write_text(out / "ard_curve.csv", e.aggregate.ard_curve_csv());
  std::printf("EPE %.4f  D1 %.3f%%  GD %s  (%llu valid pixels) -> %s\n", e.aggregate.epe, e.aggregate.d1,
              e.aggregate.gd ? (std::to_string(*e.aggregate.gd) + "%").c_str() : "n/a",
              static_cast<unsigned long long>(e.aggregate.valid_pixel_count), (out / "report.csv").c_str());
  return 0;
}

// ------------------------------------------------------------------- predict

StereoSample load_inputs(const ModelConfig& cfg, const std::string& left, const std::string& right,
                         const std::string& seg, bool warn_unused_seg) {
  StereoSample s;
  auto load = [&](const std::string& path) {
    const auto img = png::read8(path, 3);
    if (img.height != cfg.input_height || img.width != cfg.input_width)
      throw ConfigError(path + " is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                        ", checkpoint expects " + std::to_string(cfg.input_height) + "x" +
                        std::to_string(cfg.input_width));
    return image_to_tensor(img);
  };
  s.left = load(left);
  s.right = load(right);
  if (cfg.use_segmentation) {
    if (seg.empty()) throw UsageError("this checkpoint uses segmentation input; pass --seg");
    s.seg = load(seg);
  } else if (!seg.empty() && warn_unused_seg) {
    std::fprintf(stderr, "usamnet: warning: checkpoint has no segmentation input, ignoring --seg\n");
  }
  return s;
}

struct PredictArgs {
  std::string checkpoint, left, right, seg, out, color;
  float color_max = 0.0f;
};

int run_predict(const PredictArgs& a) {
  auto model = model_from_checkpoint(load_checkpoint(a.checkpoint));
  const StereoSample s = load_inputs(model.config(), a.left, a.right, a.seg, true);
  const Tensor<float> disp = predict_disparity(model, s);
  write_disparity(disp, a.out);
  if (!a.color.empty()) {
    float top = a.color_max;
    if (!(top > 0.0f))
      for (float v : disp.values()) top = std::max(top, v);
    write_rgb(colorize_disparity(disp, std::max(top, 1e-6f)), a.color);
  }
  float lo = disp[0], hi = disp[0];
  for (float v : disp.values()) lo = std::min(lo, v), hi = std::max(hi, v);
  std::printf("disparity range [%.3f, %.3f] px -> %s\n", lo, hi, a.out.c_str());
  return 0;
}

// ----------------------------------------------------------------- attn-diff

struct AttnDiffArgs {
  std::string checkpoint_a, checkpoint_b, left, right, seg, out;
};

int run_attn_diff(const AttnDiffArgs& a) {
  auto model_a = model_from_checkpoint(load_checkpoint(a.checkpoint_a));
  auto model_b = model_from_checkpoint(load_checkpoint(a.checkpoint_b));
  const auto& ca = model_a.config();
  const auto& cb = model_b.config();
  if (ca.input_channels() != cb.input_channels())
    throw UsageError("checkpoints take different inputs (" + std::to_string(ca.input_channels()) + " vs " +
                     std::to_string(cb.input_channels()) + " channels)");
  if (ca.input_height != cb.input_height || ca.input_width != cb.input_width)
    throw UsageError("checkpoints expect different input sizes");
  const StereoSample s = load_inputs(ca, a.left, a.right, a.seg, true);
  const Tensor<float> heat = attn_diff_heatmap(predict_disparity(model_a, s), predict_disparity(model_b, s));
  make_dir(a.out);
  const fs::path out(a.out);
  write_rgb(heat, out / "heatmap.png");
  write_rgb(heatmap_overlay(s.left, heat), out / "overlay.png");
  float peak = 0.0f;
  for (float v : heat.values()) peak = std::max(peak, v);
  std::printf("heatmap %s (max %.3f), overlay %s\n", (out / "heatmap.png").c_str(), peak,
              (out / "overlay.png").c_str());
  return 0;
}

// --------------------------------------------------------------- param-count

struct ParamCountArgs {
  std::string variant = "seg-attn";
  std::size_t height = 64, width = 64, divisor = 1;
  bool json = false;
};

int run_param_count(const ParamCountArgs& a) {
  RunConfig rc;
  rc.set_variant(a.variant);
  rc.model.input_height = a.height;
  rc.model.input_width = a.width;
  rc.model.channel_divisor = a.divisor;
  rc.model.validate();
  UsamNet<float> model(rc.model);
  const auto params = model.parameters();
  const std::size_t total = param_count(model);
  if (a.json) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& p : params)
      layers.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"count", p.tensor.numel()}});
    const nlohmann::json j{{"variant", a.variant}, {"model_config", rc.model.to_json()}, {"layers", layers},
                           {"total", total}};
    std::printf("%s\n", j.dump(2).c_str());
    return 0;
  }
  for (const auto& p : params)
    std::printf("%-32s %-20s %10zu\n", p.name.c_str(), shape_str(p.tensor.shape()).c_str(), p.tensor.numel());
  std::printf("%-32s %-20s %10zu\n", "total", "", total);
  return 0;
}

int exit_code(const Error& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const UsageError*>(&e)) return 2;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const NoValidPixelsError*>(&e)) return 3;
  if (dynamic_cast<const IoError*>(&e)) return 4;
  if (dynamic_cast<const FormatError*>(&e)) return 5;
  if (dynamic_cast<const IncompatibleError*>(&e)) return 6;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"usamnet: U-Net stereo disparity network with segmentation input and self-attention"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Render a synthetic stereo dataset and its manifest");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--count", gen.spec.count, "Number of samples")->capture_default_str();
  gen_cmd->add_option("--height", gen.spec.height, "Image height (multiple of 32)")->capture_default_str();
  gen_cmd->add_option("--width", gen.spec.width, "Image width (multiple of 32)")->capture_default_str();
  gen_cmd->add_option("--seed", gen.spec.seed, "Random seed")->capture_default_str();
  gen_cmd->add_option("--max-disparity", gen.spec.max_disparity, "Largest disparity in px (< width/4)")
      ->capture_default_str();
  gen_cmd->add_option("--min-shapes", gen.spec.min_shapes, "Fewest shapes per scene")->capture_default_str();
  gen_cmd->add_option("--max-shapes", gen.spec.max_shapes, "Most shapes per scene")->capture_default_str();
  gen_cmd->add_option("--split", gen.spec.split, "Manifest split tag")
      ->check(CLI::IsMember({"train", "test"}))
      ->capture_default_str();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a run config");
  train_cmd->add_option("--config", tr.config, "Run config JSON");
  train_cmd->add_option("--resume", tr.resume, "Checkpoint to resume from");
  train_cmd->add_option("--variant", tr.variant, "baseline|attn|seg|seg-attn")
      ->check(CLI::IsMember({"baseline", "attn", "seg", "seg-attn"}));
  train_cmd->add_option("--manifest", tr.manifest, "Training manifest (overrides train_manifest)");
  train_cmd->add_option("--out", tr.out, "Output directory (overrides output_dir)");
  train_cmd->add_option("--epochs", tr.epochs, "Number of epochs (overrides train.epochs)");
  train_cmd->add_option("--seed", tr.seed, "Training seed (overrides train.seed)");
  train_cmd->add_option("--set", tr.overrides, "Override any config field: key.path=value");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--manifest", ev.manifest, "Dataset manifest")->required();
  eval_cmd->add_option("--focal-baseline", ev.focal_baseline, "focal length x baseline (px*m) for depth buckets");
  eval_cmd->add_option("--out", ev.out, "Output directory")->required();
  eval_cmd->add_option("--config", ev.config, "Run config JSON (metric and bucket settings)");

  PredictArgs pr;
  auto* predict_cmd = app.add_subcommand("predict", "Predict a disparity map for one stereo pair");
  predict_cmd->add_option("--checkpoint", pr.checkpoint, "Checkpoint file")->required();
  predict_cmd->add_option("--left", pr.left, "Left image PNG")->required();
  predict_cmd->add_option("--right", pr.right, "Right image PNG")->required();
  predict_cmd->add_option("--seg", pr.seg, "Segmentation image PNG");
  predict_cmd->add_option("--out", pr.out, "Output 16-bit disparity PNG")->required();
  predict_cmd->add_option("--color", pr.color, "Optional colorized rendering PNG");
  predict_cmd->add_option("--color-max", pr.color_max, "Disparity mapped to the top of the colormap (default: max)");

  AttnDiffArgs ad;
  auto* diff_cmd = app.add_subcommand("attn-diff", "Heatmap of where two checkpoints disagree");
  diff_cmd->add_option("--checkpoint-a", ad.checkpoint_a, "First checkpoint")->required();
  diff_cmd->add_option("--checkpoint-b", ad.checkpoint_b, "Second checkpoint")->required();
  diff_cmd->add_option("--left", ad.left, "Left image PNG")->required();
  diff_cmd->add_option("--right", ad.right, "Right image PNG")->required();
  diff_cmd->add_option("--seg", ad.seg, "Segmentation image PNG");
  diff_cmd->add_option("--out", ad.out, "Output directory")->required();

  ParamCountArgs pc;
  auto* count_cmd = app.add_subcommand("param-count", "Per-layer and total parameter counts");
  count_cmd->add_option("--variant", pc.variant, "baseline|attn|seg|seg-attn")
      ->check(CLI::IsMember({"baseline", "attn", "seg", "seg-attn"}))
      ->capture_default_str();
  count_cmd->add_option("--height", pc.height, "Input height")->capture_default_str();
  count_cmd->add_option("--width", pc.width, "Input width")->capture_default_str();
  count_cmd->add_option("--divisor", pc.divisor, "Channel width divisor")->capture_default_str();
  count_cmd->add_flag("--json", pc.json, "Machine-readable output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "usamnet: error: %s\n", e.what());
    return 2;
  }

  try {
    if (*gen_cmd) return run_gen_data(gen);
    if (*train_cmd) return run_train(tr);
    if (*eval_cmd) return run_eval(ev);
    if (*predict_cmd) return run_predict(pr);
    if (*diff_cmd) return run_attn_diff(ad);
    if (*count_cmd) return run_param_count(pc);
  } catch (const Error& e) {
    std::fprintf(stderr, "usamnet: error: %s\n", e.what());
    return exit_code(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "usamnet: error: %s\n", e.what());
    return 1;
  }
  return 1;
}
