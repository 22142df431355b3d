#include "multiad/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>
#include <numeric>

namespace multiad {

namespace {

double evaluate(GradcheckCase& c) {
  Tape<double> tape;
  return c.loss(tape).value()[0];
}

std::vector<Index> probe_coordinates(Index size, std::size_t cap, Rng& rng) {
  std::vector<Index> all(static_cast<std::size_t>(size));
  std::iota(all.begin(), all.end(), Index{0});
  if (cap == 0 || all.size() <= cap) return all;
  for (std::size_t i = 0; i < cap; ++i) std::swap(all[i], all[i + rng.below(all.size() - i)]);
  all.resize(cap);
  return all;
}

}  // namespace

GradcheckOutcome check_case(GradcheckCase& c, Rng& rng, std::size_t max_coords_per_tensor, double h) {
  for (Tensor<double>* t : c.wrt) t->zero_grad();
  {
    Tape<double> tape;
    Var<double> loss = c.loss(tape);
    tape.backward(loss);
  }
  std::vector<double> analytic, numeric;
  for (Tensor<double>* t : c.wrt) {
    const VectorX<double> grad = t->has_grad() ? VectorX<double>(t->grad()) : VectorX<double>::Zero(t->size());
    for (Index i : probe_coordinates(t->size(), max_coords_per_tensor, rng)) {
      const double saved = (*t)[i];
      (*t)[i] = saved + h;
      const double up = evaluate(c);
      (*t)[i] = saved - h;
      const double down = evaluate(c);
      (*t)[i] = saved;
      analytic.push_back(grad[i]);
      numeric.push_back((up - down) / (2.0 * h));
    }
    t->zero_grad();
  }
  const auto a = Eigen::Map<const VectorX<double>>(analytic.data(), static_cast<Index>(analytic.size()));
  const auto n = Eigen::Map<const VectorX<double>>(numeric.data(), static_cast<Index>(numeric.size()));
  const double scale = std::max({a.norm(), n.norm(), 1e-12});
  return {(a - n).norm() / scale, analytic.size()};
}

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

Index pick(Rng& rng, Index lo, Index hi) { return lo + static_cast<Index>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))); }

// Random linear functional of y, so every output element matters.
Var<double> project(Var<double> y, const Tensor<double>& weights) {
  Tape<double>& tape = *y.tape;
  const Index n = y.value().size();
  Var<double> flat = reshape(y, {1, n});
  return reshape(linear(flat, tape.constant(weights.reshaped({1, n}))), {1});
}

struct Pool {
  std::vector<std::unique_ptr<Tensor<double>>> tensors;
  Tensor<double>* add(Tensor<double> t) {
    tensors.push_back(std::make_unique<Tensor<double>>(std::move(t)));
    return tensors.back().get();
  }
};

GradcheckCase conv_case(Index dilation, Rng& rng) {
  auto pool = std::make_shared<Pool>();
  const Index b = pick(rng, 1, 2), cin = pick(rng, 1, 3), cout = pick(rng, 1, 3), k = pick(rng, 1, 3);
  const Index stride = pick(rng, 1, 2), padding = pick(rng, 0, dilation);
  const Index eff = (k - 1) * dilation + 1;
  const Index h = std::max<Index>(1, eff - 2 * padding) + pick(rng, 0, 4);
  const Index w = std::max<Index>(1, eff - 2 * padding) + pick(rng, 0, 4);
  Tensor<double>* x = pool->add(random_tensor({b, cin, h, w}, rng));
  Tensor<double>* kernel = pool->add(random_tensor({cout, cin, k, k}, rng));
  const Index oh = conv_output_extent(h, k, stride, padding, dilation);
  const Index ow = conv_output_extent(w, k, stride, padding, dilation);
  Tensor<double>* proj = pool->add(random_tensor({b * cout * oh * ow}, rng));
  const Conv2dOptions opts{stride, padding, dilation};
  return {{x, kernel}, [pool, x, kernel, proj, opts](Tape<double>& t) {
            return project(conv2d(t.param(*x), t.param(*kernel), opts), *proj);
          }};
}

GradcheckCase batch_norm_case(Rng& rng) {
  auto pool = std::make_shared<Pool>();
  const bool spatial = rng.below(2) == 1;
  const Index b = pick(rng, 2, 4), c = pick(rng, 1, 4);
  const Shape shape = spatial ? Shape{b, c, pick(rng, 1, 3), pick(rng, 1, 3)} : Shape{b, c};
  Tensor<double>* x = pool->add(random_tensor(shape, rng, -2.0, 2.0));
  Tensor<double>* gamma = pool->add(random_tensor({c}, rng, 0.5, 1.5));
  Tensor<double>* beta = pool->add(random_tensor({c}, rng));
  Tensor<double>* rmean = pool->add(random_tensor({c}, rng));
  Tensor<double>* rvar = pool->add(random_tensor({c}, rng, 0.5, 2.0));
  Tensor<double>* proj = pool->add(random_tensor({numel(shape)}, rng));
  const NormMode mode = rng.below(4) == 0 ? NormMode::kEval : NormMode::kTrain;
  return {{x, gamma, beta}, [pool, x, gamma, beta, rmean, rvar, proj, mode](Tape<double>& t) {
            BatchNormOptions opts{mode, 0.1, 1e-5, false};
            return project(batch_norm(t.param(*x), t.param(*gamma), t.param(*beta), *rmean, *rvar, opts), *proj);
          }};
}

GradcheckCase se_case(Rng& rng) {
  const Index c = 4 * pick(rng, 1, 2), b = pick(rng, 1, 2), h = pick(rng, 1, 4), w = pick(rng, 1, 4);
  struct State {
    Tensor<double> x, proj;
    SEParams<double> se;
  };
  auto s = std::make_shared<State>();
  s->x = random_tensor({b, c, h, w}, rng, -2.0, 2.0);
  s->se.reduce = random_tensor({c / 4, c}, rng);
  s->se.expand = random_tensor({c, c / 4}, rng);
  s->proj = random_tensor({b * c * h * w}, rng);
  return {{&s->x, &s->se.reduce, &s->se.expand}, [s](Tape<double>& t) {
            const ForwardMode mode{NormMode::kEval, false, true};
            return project(se_block(t.param(s->x), s->se, mode), s->proj);
          }};
}

BatchNormParams<double> random_bn(Index c, Rng& rng) {
  return {random_tensor({c}, rng, 0.5, 1.5), random_tensor({c}, rng, -0.5, 0.5), random_tensor({c}, rng, -0.5, 0.5),
          random_tensor({c}, rng, 0.5, 2.0)};
}

GradcheckCase res_block_case(Rng& rng) {
  const Index cin = 2 * pick(rng, 1, 2), width = rng.below(2) ? cin : 2 * cin;
  const Index dilation = pick(rng, 1, 2), b = 2, h = pick(rng, 3, 6), w = pick(rng, 3, 6);
  struct State {
    Tensor<double> x, proj;
    ResBlockParams<double> block;
    NormMode mode;
  };
  auto s = std::make_shared<State>();
  s->x = random_tensor({b, cin, h, w}, rng);
  s->block.dilation = dilation;
  s->block.conv1 = random_tensor({width, cin, 3, 3}, rng, -0.5, 0.5);
  s->block.bn1 = random_bn(width, rng);
  s->block.conv2 = random_tensor({width, width, 3, 3}, rng, -0.5, 0.5);
  s->block.bn2 = random_bn(width, rng);
  if (width != cin) s->block.projection = random_tensor({width, cin, 1, 1}, rng);
  s->proj = random_tensor({b * width * h * w}, rng);
  s->mode = rng.below(2) ? NormMode::kTrain : NormMode::kEval;
  std::vector<Tensor<double>*> wrt{&s->x, &s->block.conv1, &s->block.bn1.gamma, &s->block.bn1.beta,
                                   &s->block.conv2, &s->block.bn2.gamma, &s->block.bn2.beta};
  if (s->block.projection) wrt.push_back(&*s->block.projection);
  return {wrt, [s](Tape<double>& t) {
            const ForwardMode mode{s->mode, false, true};
            return project(res_block(t.param(s->x), s->block, mode), s->proj);
          }};
}

GradcheckCase discriminator_case(Rng& rng) {
  struct State {
    Tensor<double> x;
    DiscriminatorParams<double> d;
    std::uint64_t dropout_seed;
  };
  auto s = std::make_shared<State>();
  DiscriminatorConfig config;
  config.width_factor = 1.0 / 32.0;
  const Index c = pick(rng, 1, 3), h = pick(rng, 2, 3), w = pick(rng, 2, 3), b = pick(rng, 2, 3);
  s->x = random_tensor({b, c, h, w}, rng);
  s->d = DiscriminatorParams<double>::init(config, c, h, w, rng);
  for (auto& bn : s->d.bns) bn = random_bn(bn.gamma.size(), rng);
  s->dropout_seed = rng.next();
  std::vector<Tensor<double>*> wrt{&s->x};
  for (const NamedTensor<double>& p : s->d.parameters("d")) {
    if (p.trainable) wrt.push_back(p.tensor);
  }
  return {wrt, [s](Tape<double>& t) {
            Rng dropout_rng(s->dropout_seed);
            const ForwardMode mode{NormMode::kTrain, false, true};
            Var<double> p = discriminator_forward(t.param(s->x), s->d, dropout_rng, mode, true);
            return mean(log_clamped(p, kLogEps));
          }};
}

struct PyramidState {
  std::vector<Tensor<double>> teacher, student;
};

std::shared_ptr<PyramidState> random_pyramids(Rng& rng) {
  auto s = std::make_shared<PyramidState>();
  const Index levels = pick(rng, 1, 3), b = pick(rng, 1, 2);
  for (Index l = 0; l < levels; ++l) {
    const Shape shape{b, pick(rng, 1, 4), pick(rng, 1, 3), pick(rng, 1, 3)};
    s->teacher.push_back(random_tensor(shape, rng));
    s->student.push_back(random_tensor(shape, rng));
  }
  return s;
}

Var<double> pyramid_loss(Tape<double>& t, PyramidState& s) {
  FeaturePyramid<double> tp, sp;
  for (auto& x : s.teacher) tp.levels.push_back(t.param(x));
  for (auto& x : s.student) sp.levels.push_back(t.param(x));
  return loss_generator(normalize_pyramid(tp), normalize_pyramid(sp));
}

std::vector<Tensor<double>*> pyramid_wrt(PyramidState& s) {
  std::vector<Tensor<double>*> out;
  for (auto& x : s.teacher) out.push_back(&x);
  for (auto& x : s.student) out.push_back(&x);
  return out;
}

Tensor<double> random_probs(Index m, Rng& rng) { return random_tensor({m}, rng, 0.02, 0.98); }

GradcheckCase loss_d_case(Rng& rng) {
  auto pool = std::make_shared<Pool>();
  const Index m = pick(rng, 1, 6);
  Tensor<double>* real = pool->add(random_probs(m, rng));
  Tensor<double>* fake = pool->add(random_probs(m, rng));
  return {{real, fake},
          [pool, real, fake](Tape<double>& t) { return loss_discriminator(t.param(*real), t.param(*fake)); }};
}

GradcheckCase loss_adv_case(Rng& rng) {
  auto pool = std::make_shared<Pool>();
  Tensor<double>* fake = pool->add(random_probs(pick(rng, 1, 6), rng));
  return {{fake}, [pool, fake](Tape<double>& t) { return loss_adversarial(t.param(*fake)); }};
}

GradcheckCase loss_g_case(Rng& rng) {
  auto s = random_pyramids(rng);
  return {pyramid_wrt(*s), [s](Tape<double>& t) { return pyramid_loss(t, *s); }};
}

GradcheckCase loss_s_case(Rng& rng) {
  auto s = random_pyramids(rng);
  auto pool = std::make_shared<Pool>();
  Tensor<double>* fake = pool->add(random_probs(pick(rng, 1, 6), rng));
  const double lambda = rng.uniform(0.0, 1.0);
  auto wrt = pyramid_wrt(*s);
  wrt.push_back(fake);
  return {wrt, [s, pool, fake, lambda](Tape<double>& t) {
            return loss_student(pyramid_loss(t, *s), loss_adversarial(t.param(*fake)), lambda);
          }};
}

}  // namespace

const std::vector<std::string>& gradcheck_ops() {
  static const std::vector<std::string> ops{"conv2d_r1", "conv2d_r2",     "conv2d_r4", "batch_norm",
                                            "se_block",  "res_block",     "discriminator", "loss_g",
                                            "loss_d",    "loss_adv",      "loss_s"};
  return ops;
}

GradcheckCase make_gradcheck_case(const std::string& op, Rng& rng) {
  if (op == "conv2d_r1") return conv_case(1, rng);
  if (op == "conv2d_r2") return conv_case(2, rng);
  if (op == "conv2d_r4") return conv_case(4, rng);
  if (op == "batch_norm") return batch_norm_case(rng);
  if (op == "se_block") return se_case(rng);
  if (op == "res_block") return res_block_case(rng);
  if (op == "discriminator") return discriminator_case(rng);
  if (op == "loss_g") return loss_g_case(rng);
  if (op == "loss_d") return loss_d_case(rng);
  if (op == "loss_adv") return loss_adv_case(rng);
  if (op == "loss_s") return loss_s_case(rng);
  throw ValueError("gradcheck: unknown op " + op);
}

GradcheckSummary run_gradcheck(const std::string& op, std::size_t instances, std::uint64_t seed, double tolerance) {
  const auto start = std::chrono::steady_clock::now();
  GradcheckSummary summary{op, instances, 0, 0.0, 0.0};
  const auto& ops = gradcheck_ops();
  const auto stream = static_cast<std::uint64_t>(std::find(ops.begin(), ops.end(), op) - ops.begin());
  Rng rng(derive_seed(seed, stream));
  const std::size_t cap = op == "discriminator" ? 24 : 0;
  for (std::size_t i = 0; i < instances; ++i) {
    GradcheckCase c = make_gradcheck_case(op, rng);
    const GradcheckOutcome out = check_case(c, rng, cap);
    summary.max_rel_error = std::max(summary.max_rel_error, out.rel_error);
    if (!(out.rel_error < tolerance)) ++summary.failures;
  }
  summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return summary;
}

}  // namespace multiad
