#include "multiad/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "multiad/image_io.hpp"

namespace multiad {

namespace {

enum SeedStream : std::uint64_t {
  kTeacherInit = 1,
  kStudentInit = 2,
  kDiscriminatorInit = 3,
  kDropout = 4,
  kPretext = 5,
  kEpochOrder = 100,
};

constexpr ForwardMode kStudentFrozen{NormMode::kEval, false, true};
constexpr ForwardMode kStudentBatch{NormMode::kTrain, true, true};
constexpr ForwardMode kCalibration{NormMode::kTrain, true, false, 1.0};

std::vector<const LabeledSample*> pointers(std::span<const LabeledSample> samples) {
  std::vector<const LabeledSample*> out;
  for (const LabeledSample& s : samples) out.push_back(&s);
  return out;
}

std::vector<Tensor<float>> values(const FeaturePyramid<float>& p) {
  std::vector<Tensor<float>> out;
  for (const Var<float>& v : p.levels) out.push_back(v.value());
  return out;
}

void check_train_split(std::span<const LabeledSample> train) {
  if (train.size() < 2) throw ValueError("training needs at least 2 normal images");
  for (const LabeledSample& s : train) {
    if (s.anomalous) throw ValueError("training split contains anomalous image " + s.name);
  }
}

}  // namespace

ParamList<float> Model::named_tensors() {
  ParamList<float> out = teacher.parameters("teacher");
  for (auto& p : student.parameters("student")) out.push_back(p);
  for (auto& p : discriminator.parameters("discriminator")) out.push_back(p);
  return out;
}

ParamList<float> Model::student_parameters() { return student.parameters("student"); }

ParamList<float> Model::discriminator_parameters() { return discriminator.parameters("discriminator"); }

void calibrate_bn_statistics(BackboneParams<float>& params, std::span<const LabeledSample> images, Index count) {
  const auto n = std::min<std::size_t>(images.size(), static_cast<std::size_t>(count));
  if (n < 2) throw ValueError("batch-norm calibration needs at least 2 images");
  const auto ptrs = pointers(images.first(n));
  Tape<float> tape;
  forward_pyramid(tape.constant(stack_images(ptrs)), params, kCalibration);
}

void pretrain_teacher_rotation(Model& model, std::span<const LabeledSample> train) {
  check_train_split(train);
  const PipelineConfig& c = model.config;
  for (const LabeledSample& s : train) {
    if (s.image.dim(1) != s.image.dim(2)) throw ShapeError("rotation pretext needs square images");
  }
  Rng rng(derive_seed(c.train.seed, kPretext));
  const Index feat = c.backbone.widths.back();
  Tensor<float> head = he_normal<float>({4, feat}, feat, rng);
  Tensor<float> head_bias({4});
  ParamList<float> params = model.teacher.parameters("teacher");
  params.push_back({"head.weight", &head, true});
  params.push_back({"head.bias", &head_bias, true});
  const auto trainable = trainable_tensors(params);
  AdamState<float> adam;
  adam.options.lr = c.train.lr;
  const ForwardMode mode{NormMode::kTrain, true, true};
  const auto n = static_cast<Index>(train.size());
  const Index b = std::min<Index>(c.train.batch_size, n);
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (std::int64_t epoch = 0; epoch < c.train.pretext_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Index{0});
    for (Index i = n - 1; i > 0; --i) {
      std::swap(order[static_cast<std::size_t>(i)], order[rng.below(static_cast<std::uint64_t>(i + 1))]);
    }
    // Batches of one image would leave batch norm without a variance.
    for (Index start = 0; start + 2 <= n; start += b) {
      const Index m = std::min(b, n - start);
      const Index h = train[0].image.dim(1), ch = train[0].image.dim(0);
      Tensor<float> batch({m, ch, h, h});
      std::vector<int> labels;
      for (Index k = 0; k < m; ++k) {
        const Tensor<float>& img = train[static_cast<std::size_t>(order[static_cast<std::size_t>(start + k)])].image;
        const int quarter = static_cast<int>(rng.below(4));
        labels.push_back(quarter);
        for (Index c2 = 0; c2 < ch; ++c2) {
          for (Index y = 0; y < h; ++y) {
            for (Index x = 0; x < h; ++x) {
              Index sy = y, sx = x;
              for (int q = 0; q < quarter; ++q) {
                const Index t = sy;
                sy = sx;
                sx = h - 1 - t;
              }
              batch.at(k, c2, y, x) = img[(c2 * h + sy) * h + sx];
            }
          }
        }
      }
      Tape<float> tape;
      FeaturePyramid<float> pyr = forward_pyramid(tape.constant(batch), model.teacher, mode);
      Var<float> deepest = pyr.levels[c.backbone.widths.size() - 1];
      Var<float> logits = linear(global_avg_pool(deepest), tape.param(head), std::optional<Var<float>>(tape.param(head_bias)));
      Var<float> loss = softmax_cross_entropy(logits, std::span<const int>(labels));
      tape.backward(loss);
      adam_step(std::span<Tensor<float>* const>(trainable), adam);
      zero_grads(params);
    }
  }
}

Model allocate_model(const PipelineConfig& config) {
  config.validate();
  Model m;
  m.config = config;
  const std::uint64_t seed = config.train.seed;
  Rng teacher_rng(derive_seed(seed, kTeacherInit));
  Rng student_rng(derive_seed(seed, kStudentInit));
  Rng disc_rng(derive_seed(seed, kDiscriminatorInit));
  m.teacher = BackboneParams<float>::init(config.backbone, teacher_rng);
  m.student = BackboneParams<float>::init(config.backbone, student_rng);
  const Index grid = config.input_extent / 4;
  m.discriminator =
      DiscriminatorParams<float>::init(config.discriminator, config.backbone.widths.back(), grid, grid, disc_rng);
  m.dropout_rng = Rng(derive_seed(seed, kDropout));
  m.student_adam.options.lr = config.train.lr;
  m.discriminator_adam.options.lr = config.train.lr;
  m.refinement.levels.assign(config.backbone.level_count(), RefinementLevel{});
  return m;
}

Model init_model(const PipelineConfig& config, std::span<const LabeledSample> train) {
  config.validate();
  check_train_split(train);
  for (const LabeledSample& s : train) {
    if (s.image.rank() != 3 || s.image.dim(0) != config.backbone.in_channels ||
        s.image.dim(1) != config.input_extent || s.image.dim(2) != config.input_extent) {
      throw ShapeError("training image " + s.name + " has shape " + shape_string(s.image.shape()));
    }
  }
  Model m = allocate_model(config);
  if (config.train.teacher_mode == TeacherMode::kRotationPretext) pretrain_teacher_rotation(m, train);
  calibrate_bn_statistics(m.teacher, train, config.train.bn_calibration_images);
  calibrate_bn_statistics(m.student, train, config.train.bn_calibration_images);
  return m;
}

std::int64_t steps_per_epoch(const Model& model, std::size_t n_train) {
  const auto b = static_cast<std::size_t>(model.config.train.batch_size);
  return static_cast<std::int64_t>((n_train + b - 1) / b);
}

namespace {

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::int64_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, kEpochOrder + static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
  return order;
}

double scalar(const Var<float>& v) { return static_cast<double>(v.value()[0]); }

}  // namespace

LossReport train_step(Model& model, std::span<const LabeledSample> train) {
  check_train_split(train);
  const PipelineConfig& c = model.config;
  const auto order = epoch_order(c.train.seed, model.epoch, train.size());
  const auto b = static_cast<std::size_t>(c.train.batch_size);
  const std::size_t begin = static_cast<std::size_t>(model.cursor) * b;
  const std::size_t end = std::min(begin + b, train.size());
  std::vector<const LabeledSample*> batch;
  for (std::size_t i = begin; i < end; ++i) batch.push_back(&train[order[i]]);
  const Tensor<float> images = stack_images(batch);
  const auto m = static_cast<Index>(batch.size());
  const std::size_t deepest = c.backbone.widths.size() - 1;

  LossReport report;
  report.lambda = c.lambda;
  report.adversarial = c.discriminator_enabled;
  std::string term = "teacher forward";
  try {
    std::vector<Tensor<float>> teacher;
    {
      Tape<float> tape;
      teacher = values(forward_pyramid(tape.constant(images), model.teacher, kInference));
    }
    term = "student forward";
    Tape<float> tape;
    FeaturePyramid<float> student = forward_pyramid(tape.constant(images), model.student,
                                                        c.train.student_batch_stats ? kStudentBatch : kStudentFrozen);

    Var<float> loss_adv;
    if (c.discriminator_enabled) {
      term = "L_D";
      ParamList<float> dparams = model.discriminator_parameters();
      {
        Tape<float> dtape;
        const std::array<Var<float>, 2> parts{dtape.constant(teacher[deepest]),
                                              dtape.constant(student.levels[deepest].value())};
        Var<float> p = discriminator_forward(concat_batch<float>(parts), model.discriminator, model.dropout_rng,
                                             {NormMode::kTrain, true, true}, true);
        Var<float> loss_d = loss_discriminator(slice_batch(p, 0, m), slice_batch(p, m, m));
        report.loss_d = scalar(loss_d);
        dtape.backward(loss_d);
        const auto trainable = trainable_tensors(dparams);
        adam_step(std::span<Tensor<float>* const>(trainable), model.discriminator_adam);
        zero_grads(dparams);
      }
      term = "L_adv";
      const std::array<Var<float>, 2> parts{tape.constant(teacher[deepest]), student.levels[deepest]};
      Var<float> p = discriminator_forward(concat_batch<float>(parts), model.discriminator, model.dropout_rng,
                                           {NormMode::kTrain, false, false}, true);
      loss_adv = loss_adversarial(slice_batch(p, m, m));
      report.loss_adv = scalar(loss_adv);
    }

    term = "L_G";
    FeaturePyramid<float> teacher_vars;
    for (const Tensor<float>& t : teacher) teacher_vars.levels.push_back(tape.constant(t));
    Var<float> loss_g = loss_generator(normalize_pyramid(teacher_vars), normalize_pyramid(student));
    report.loss_g = scalar(loss_g);
    term = "L_S";
    Var<float> loss_s = c.discriminator_enabled ? loss_student(loss_g, loss_adv, c.lambda) : loss_g;
    report.loss_s = scalar(loss_s);
    tape.backward(loss_s);
    ParamList<float> sparams = model.student_parameters();
    const auto trainable = trainable_tensors(sparams);
    adam_step(std::span<Tensor<float>* const>(trainable), model.student_adam);
    zero_grads(sparams);
  } catch (const NumericError& e) {
    throw NumericError("step " + std::to_string(model.step) + ": non-finite value in " + term + " (" + e.what() +
                       ")");
  }

  model.step += 1;
  model.cursor += 1;
  if (model.cursor >= steps_per_epoch(model, train.size())) {
    model.cursor = 0;
    model.epoch += 1;
  }
  model.history.push_back(report);
  return report;
}

void train_model(Model& model, std::span<const LabeledSample> train, const StepCallback& on_step) {
  while (model.epoch < model.config.train.epochs) {
    const LossReport r = train_step(model, train);
    if (on_step) on_step(model, r);
  }
  calibrate_model_refinement(model, train);
}

void forward_levels(Model& model, const Tensor<float>& images, std::vector<Tensor<float>>& teacher_levels,
                    std::vector<Tensor<float>>& student_levels) {
  Tape<float> tape;
  Var<float> x = tape.constant(images);
  teacher_levels = values(forward_pyramid(x, model.teacher, kInference));
  student_levels = values(forward_pyramid(x, model.student, kInference));
}

std::vector<AnomalyResult> infer_batch(Model& model, const Tensor<float>& images) {
  const PipelineConfig& c = model.config;
  if (images.rank() != 4 || images.dim(1) != c.backbone.in_channels || images.dim(2) != c.input_extent ||
      images.dim(3) != c.input_extent) {
    throw ShapeError("infer: expected [b," + std::to_string(c.backbone.in_channels) + "," +
                     std::to_string(c.input_extent) + "," + std::to_string(c.input_extent) + "], got " +
                     shape_string(images.shape()));
  }
  std::vector<Tensor<float>> t, s;
  forward_levels(model, images, t, s);
  return compute_anomaly(t, s, model.refinement, c.inference, images.dim(2), images.dim(3));
}

std::vector<AnomalyResult> infer(Model& model, std::span<const LabeledSample> samples) {
  std::vector<AnomalyResult> out;
  const auto chunk = static_cast<std::size_t>(std::max<Index>(model.config.train.batch_size, 8));
  for (std::size_t i = 0; i < samples.size(); i += chunk) {
    const auto ptrs = pointers(samples.subspan(i, std::min(chunk, samples.size() - i)));
    for (AnomalyResult& r : infer_batch(model, stack_images(ptrs))) out.push_back(std::move(r));
  }
  return out;
}

void calibrate_model_refinement(Model& model, std::span<const LabeledSample> train) {
  InferenceOptions raw_only = model.config.inference;
  raw_only.mff_enabled = false;
  std::vector<std::vector<Tensor<float>>> maps;
  const auto chunk = static_cast<std::size_t>(std::max<Index>(model.config.train.batch_size, 8));
  for (std::size_t i = 0; i < train.size(); i += chunk) {
    const auto ptrs = pointers(train.subspan(i, std::min(chunk, train.size() - i)));
    std::vector<Tensor<float>> t, s;
    const Tensor<float> images = stack_images(ptrs);
    forward_levels(model, images, t, s);
    for (AnomalyResult& r : compute_anomaly(t, s, model.refinement, raw_only, images.dim(2), images.dim(3))) {
      std::vector<Tensor<float>> levels;
      for (const Map2<float>& lm : r.layer_maps) {
        Tensor<float> tm({1, 1, lm.rows(), lm.cols()});
        tm.data() = Eigen::Map<const VectorX<float>>(lm.data(), lm.size());
        levels.push_back(std::move(tm));
      }
      maps.push_back(std::move(levels));
    }
  }
  RefinementParams r = calibrate_refinement<float>(maps);
  // Stored as f32 in checkpoints; keep the in-memory values identical.
  for (RefinementLevel& level : r.levels) {
    level.mean = static_cast<float>(level.mean);
    level.var = static_cast<float>(level.var);
  }
  model.refinement = r;
}

MetricReport evaluate(Model& model, std::span<const LabeledSample> eval) {
  const std::vector<AnomalyResult> results = infer(model, eval);
  MetricReport report;
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  std::vector<Map2<float>> maps;
  std::vector<Map2<std::uint8_t>> masks;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    const LabeledSample& s = eval[i];
    const AnomalyResult& r = results[i];
    scores.push_back(r.score);
    labels.push_back(s.anomalous ? 1 : 0);
    (s.anomalous ? report.n_anomalous : report.n_normal) += 1;
    if (s.mask.rows() != r.fused.rows() || s.mask.cols() != r.fused.cols()) {
      throw ShapeError("evaluate: mask of " + s.category + "/" + s.name + " does not match the map extent");
    }
    const auto positives = static_cast<std::size_t>(s.mask.cast<Index>().sum());
    report.positive_pixels += positives;
    report.negative_pixels += static_cast<std::size_t>(s.mask.size()) - positives;
    maps.push_back(r.fused);
    masks.push_back(s.mask);
    report.images.push_back({s.name, s.category, s.anomalous, r.score, static_cast<double>(r.fused.minCoeff()),
                             static_cast<double>(r.fused.maxCoeff())});
  }
  report.image_auroc = auroc(scores, labels);
  report.pixel_auroc = pixel_auroc<float>(maps, masks);
  return report;
}

nlohmann::json report_json(const Model& model, const MetricReport& report) {
  using nlohmann::json;
  json images = json::array();
  for (const ImageScore& s : report.images) {
    images.push_back({{"name", s.name},
                      {"category", s.category},
                      {"anomalous", s.anomalous},
                      {"score", s.score},
                      {"map_min", s.map_min},
                      {"map_max", s.map_max}});
  }
  json losses = json::object();
  if (!model.history.empty()) {
    auto summarize = [&](auto field) {
      std::vector<double> v;
      for (const LossReport& r : model.history) v.push_back(field(r));
      std::vector<double> tail(v.end() - static_cast<std::ptrdiff_t>(std::min<std::size_t>(v.size(), 25)), v.end());
      return json{{"first", v.front()},
                  {"last", v.back()},
                  {"tail_mean", std::accumulate(tail.begin(), tail.end(), 0.0) / static_cast<double>(tail.size())}};
    };
    losses["L_G"] = summarize([](const LossReport& r) { return r.loss_g; });
    losses["L_S"] = summarize([](const LossReport& r) { return r.loss_s; });
    if (model.config.discriminator_enabled) {
      losses["L_D"] = summarize([](const LossReport& r) { return r.loss_d; });
      losses["L_adv"] = summarize([](const LossReport& r) { return r.loss_adv; });
    }
  }
  json refinement = json::array();
  for (const RefinementLevel& r : model.refinement.levels) {
    refinement.push_back({{"scale", r.scale}, {"bias", r.bias}, {"mean", r.mean}, {"var", r.var}});
  }
  return {{"image_auroc", report.image_auroc},
          {"pixel_auroc", report.pixel_auroc},
          {"counts",
           {{"normal", report.n_normal},
            {"anomalous", report.n_anomalous},
            {"positive_pixels", report.positive_pixels},
            {"negative_pixels", report.negative_pixels}}},
          {"training", {{"steps", model.step}, {"epochs", model.epoch}, {"losses", losses}}},
          {"refinement", refinement},
          {"images", images},
          {"config", to_json(model.config)}};
}

std::pair<double, double> write_heatmap(const Map2<float>& map, const std::filesystem::path& path) {
  const double lo = map.minCoeff(), hi = map.maxCoeff();
  Image img{map.cols(), map.rows(), 1, std::vector<std::uint8_t>(static_cast<std::size_t>(map.size()), 0)};
  if (hi > lo) {
    for (Index i = 0; i < map.size(); ++i) {
      img.pixels[static_cast<std::size_t>(i)] =
          static_cast<std::uint8_t>(std::lround(255.0 * (static_cast<double>(map.data()[i]) - lo) / (hi - lo)));
    }
  }
  write_pnm(path, img);
  return {lo, hi};
}

}  // namespace multiad
