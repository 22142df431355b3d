#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "multiad/checkpoint.hpp"
#include "multiad/gradcheck.hpp"
#include "multiad/image_io.hpp"

namespace fs = std::filesystem;
using namespace multiad;

namespace {

int exit_code_for(const std::string& kind) {
  if (kind == "config") return 3;
  if (kind == "io") return 4;
  if (kind == "format") return 5;
  if (kind == "numeric") return 6;
  if (kind == "shape" || kind == "value") return 7;
  return 1;
}

int fail(const std::string& kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << std::endl;
  return exit_code_for(kind);
}

struct GenDataArgs {
  std::string out;
  std::uint64_t seed = 0;
  Index n_normal = 200, n_anomalous = 50, n_eval_normal = -1, size = 64;
};

int run_gen_data(const GenDataArgs& a) {
  SyntheticOptions opts{a.seed, a.n_normal, a.n_anomalous, a.n_eval_normal, a.size};
  const DatasetSplits splits = generate_synthetic_dataset(opts);
  write_dataset_dir(splits, a.out);
  std::cout << nlohmann::json{{"train", splits.train.size()}, {"eval", splits.eval.size()}, {"out", a.out}}.dump()
            << std::endl;
  return 0;
}

struct TrainArgs {
  std::string data, config, out;
  bool teacher_pretext = false;
};

int run_train(const TrainArgs& a) {
  PipelineConfig config = a.config.empty() ? PipelineConfig{} : load_config(a.config);
  if (a.teacher_pretext) config.train.teacher_mode = TeacherMode::kRotationPretext;
  const DatasetSplits data = load_dataset_dir(a.data, config.input_extent, config.backbone.in_channels);
  if (data.train.size() < 2) throw IoError(a.data + ": train/good needs at least 2 images");
  const auto start = std::chrono::steady_clock::now();
  Model model = init_model(config, data.train);
  const std::int64_t per_epoch = steps_per_epoch(model, data.train.size());
  double sum_g = 0.0, sum_s = 0.0;
  train_model(model, data.train, [&](const Model& m, const LossReport& r) {
    sum_g += r.loss_g;
    sum_s += r.loss_s;
    if (m.cursor == 0) {
      const double n = static_cast<double>(per_epoch);
      std::printf("epoch %lld  L_G %.6f  L_S %.6f  L_D %.6f\n", static_cast<long long>(m.epoch), sum_g / n,
                  sum_s / n, r.loss_d);
      std::fflush(stdout);
      sum_g = sum_s = 0.0;
    }
  });
  save_checkpoint(model, a.out);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cout << nlohmann::json{{"checkpoint", a.out}, {"steps", model.step}, {"seconds", seconds}}.dump() << std::endl;
  return 0;
}

struct EvalArgs {
  std::string ckpt, data, report, heatmaps;
};

int run_eval(const EvalArgs& a) {
  Model model = load_checkpoint(a.ckpt);
  const DatasetSplits data =
      load_dataset_dir(a.data, model.config.input_extent, model.config.backbone.in_channels);
  if (data.eval.empty()) throw IoError(a.data + ": no test images found");
  const MetricReport report = evaluate(model, data.eval);
  if (!a.heatmaps.empty()) {
    fs::create_directories(a.heatmaps);
    const std::vector<AnomalyResult> results = infer(model, data.eval);
    for (std::size_t i = 0; i < results.size(); ++i) {
      write_heatmap(results[i].fused, fs::path(a.heatmaps) / (data.eval[i].category + "_" + data.eval[i].name + ".pgm"));
    }
  }
  std::ofstream out(a.report);
  if (!out) throw IoError("cannot write " + a.report);
  out << report_json(model, report).dump(2) << '\n';
  std::cout << nlohmann::json{{"image_auroc", report.image_auroc}, {"pixel_auroc", report.pixel_auroc}}.dump()
            << std::endl;
  return 0;
}

struct InferArgs {
  std::string ckpt, image, heatmap;
};

int run_infer(const InferArgs& a) {
  Model model = load_checkpoint(a.ckpt);
  const PipelineConfig& c = model.config;
  Tensor<float> chw = image_to_tensor(read_pnm(a.image));
  if (chw.dim(0) != c.backbone.in_channels) {
    throw FormatError(a.image + ": expected " + std::to_string(c.backbone.in_channels) + " channel(s)");
  }
  Tensor<float> batch = chw.reshaped({1, chw.dim(0), chw.dim(1), chw.dim(2)});
  if (chw.dim(1) != c.input_extent || chw.dim(2) != c.input_extent) {
    batch = resize_bilinear(batch, c.input_extent, c.input_extent);
  }
  const AnomalyResult r = infer_batch(model, batch).front();
  const auto [lo, hi] = write_heatmap(r.fused, a.heatmap);
  std::cout << nlohmann::json{{"score", r.score}, {"map_min", lo}, {"map_max", hi}, {"heatmap", a.heatmap}}.dump()
            << std::endl;
  return 0;
}

struct GradcheckArgs {
  std::string op;
  std::size_t instances = 100;
  std::uint64_t seed = 0;
};

int run_gradcheck_cmd(const GradcheckArgs& a) {
  std::vector<std::string> ops = a.op.empty() ? gradcheck_ops() : std::vector<std::string>{a.op};
  std::size_t failures = 0;
  for (const std::string& op : ops) {
    const GradcheckSummary s = run_gradcheck(op, a.instances, a.seed);
    failures += s.failures;
    std::printf("%-14s instances %zu  failures %zu  max_rel_error %.3e  %.2fs\n", op.c_str(), s.instances,
                s.failures, s.max_rel_error, s.seconds);
  }
  if (failures > 0) return fail("numeric", std::to_string(failures) + " gradient check instance(s) exceeded tolerance");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale teacher-student anomaly detection"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic texture dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--seed", gen.seed, "Dataset seed");
  gen_cmd->add_option("--n-normal", gen.n_normal, "Training normals");
  gen_cmd->add_option("--n-anomalous", gen.n_anomalous, "Anomalous test images");
  gen_cmd->add_option("--n-eval-normal", gen.n_eval_normal, "Normal test images (default n-normal/4)");
  gen_cmd->add_option("--size", gen.size, "Image extent");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train a student against a frozen teacher");
  train_cmd->add_option("--data", train.data, "Dataset directory")->required();
  train_cmd->add_option("--config", train.config, "JSON configuration");
  train_cmd->add_option("--out", train.out, "Checkpoint path")->required();
  train_cmd->add_flag("--teacher-pretext", train.teacher_pretext, "Pretrain the teacher on rotation prediction");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Score the test split and write a JSON report");
  eval_cmd->add_option("--ckpt", eval.ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--data", eval.data, "Dataset directory")->required();
  eval_cmd->add_option("--report", eval.report, "Report path")->required();
  eval_cmd->add_option("--heatmaps", eval.heatmaps, "Optional directory for per-image heatmaps");

  InferArgs infer_args;
  auto* infer_cmd = app.add_subcommand("infer", "Score one image and write its heatmap");
  infer_cmd->add_option("--ckpt", infer_args.ckpt, "Checkpoint")->required();
  infer_cmd->add_option("--image", infer_args.image, "PGM/PPM image")->required();
  infer_cmd->add_option("--heatmap", infer_args.heatmap, "Output PGM")->required();

  GradcheckArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks in double precision");
  gc_cmd->add_option("--op", gc.op, "One operation (default: all)")
      ->check(CLI::IsMember(gradcheck_ops()));
  gc_cmd->add_option("--instances", gc.instances, "Random instances per operation");
  gc_cmd->add_option("--seed", gc.seed, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    fail("usage", e.what());
    return 2;
  }

  try {
    if (*gen_cmd) return run_gen_data(gen);
    if (*train_cmd) return run_train(train);
    if (*eval_cmd) return run_eval(eval);
    if (*infer_cmd) return run_infer(infer_args);
    if (*gc_cmd) return run_gradcheck_cmd(gc);
  } catch (const Error& e) {
    return fail(e.kind(), e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 1;
}
