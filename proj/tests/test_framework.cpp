#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "firework/data.hpp"
#include "firework/fieldops.hpp"
#include "firework/framework.hpp"
#include "oracles.hpp"

#include <cmath>
#include <random>
#include <sstream>

using namespace firework;

namespace {

RefinerParams<double> perturbed(RefinerParams<double> p, std::uint64_t seed, double sigma) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sigma);
  for (auto& a : p.arrays)
    if (a.name.rfind("head", 0) == 0)
      for (Index i = 0; i < a.value.size(); ++i) a.value[i] = n(rng);
  return p;
}

std::pair<VolumeD, VolumeD> smooth_pair(const Shape3& s, std::uint64_t seed) {
  const VolumeD fixed = oracle::smooth_volume(s, seed);
  const VolumeD moving = oracle::warp(fixed, oracle::smooth_field(s, 1.0, seed + 1));
  return {moving, fixed};
}

// Sampled parameter gradient check of a scalar loss of the params.
template <typename Loss>
double sampled_param_error(const RefinerParams<double>& p, const RefinerParams<double>& grads, Loss loss,
                           std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> analytic, numeric;
  for (std::size_t a = 0; a < p.arrays.size(); ++a) {
    std::uniform_int_distribution<Index> pick(0, p.arrays[a].value.size() - 1);
    for (int rep = 0; rep < 4; ++rep) {
      const Index i = pick(rng);
      auto eval = [&](double delta) {
        RefinerParams<double> q = p;
        q.arrays[a].value[i] += delta;
        return loss(q);
      };
      analytic.push_back(grads.arrays[a].value[i]);
      numeric.push_back((eval(1e-5) - eval(-1e-5)) / 2e-5);
    }
  }
  return oracle::relative_error(analytic, numeric);
}

}  // namespace

TEST_CASE("lr_schedule follows the polynomial decay") {
  CHECK(lr_schedule(0.0004, 1, 30) == 0.0004);
  CHECK(lr_schedule(0.123, 1, 7) == 0.123);
  CHECK(std::abs(lr_schedule(0.0004, 30, 30) - 0.0004 * std::pow(1.0 / 30.0, 0.9)) < 1e-12);
  for (int m = 2; m <= 30; ++m) CHECK(lr_schedule(0.0004, m, 30) < lr_schedule(0.0004, m - 1, 30));
  CHECK_THROWS_AS(lr_schedule(0.0004, 0, 30), std::invalid_argument);
  CHECK_THROWS_AS(lr_schedule(0.0004, 31, 30), std::invalid_argument);
}

TEST_CASE("TrainConfig validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.batch_size = 2;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.lr_init = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.window = 4;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.lambda = -1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("fresh networks on identical images give a total loss of -2") {
  const Shape3 s{8, 8, 8};
  const VolumeD img = oracle::smooth_volume(s, 1);
  TrainConfig cfg;
  for (FrameworkMode mode : {FrameworkMode::firework, FrameworkMode::baseline_cascade}) {
    CAPTURE(to_string(mode));
    cfg.mode = mode;
    RefinerParams<double> p = init_params<double>(RefinerConfig::for_mode(mode, 2));
    AdamState<double> opt(p);
    const LossParts<double> parts = mode == FrameworkMode::firework
                                        ? train_step_firework(p, opt, img, img, cfg, cfg.lr_init)
                                        : train_step_baseline(p, opt, img, img, cfg, cfg.lr_init);
    CHECK(parts.total == doctest::Approx(-2.0).epsilon(1e-4));
  }
}

TEST_CASE("one step on random data changes the parameters") {
  const Shape3 s{8, 8, 8};
  const VolumeD m = oracle::random_volume(s, 3), f = oracle::random_volume(s, 4);
  for (FrameworkMode mode : {FrameworkMode::firework, FrameworkMode::baseline_cascade}) {
    TrainConfig cfg;
    cfg.mode = mode;
    RefinerParams<double> p = init_params<double>(RefinerConfig::for_mode(mode, 5));
    const RefinerParams<double> before = p;
    AdamState<double> opt(p);
    if (mode == FrameworkMode::firework)
      train_step_firework(p, opt, m, f, cfg, cfg.lr_init);
    else
      train_step_baseline(p, opt, m, f, cfg, cfg.lr_init);
    int changed = 0;
    for (std::size_t a = 0; a < p.arrays.size(); ++a) changed += (p.arrays[a].value != before.arrays[a].value).any();
    CHECK(changed >= 1);
    CHECK(p.fingerprint() != before.fingerprint());
  }
}

TEST_CASE("every parameter array receives a finite non-zero gradient after one update") {
  const Shape3 s{8, 8, 8};
  const VolumeD m = oracle::random_volume(s, 6), f = oracle::random_volume(s, 7);
  for (FrameworkMode mode : {FrameworkMode::firework, FrameworkMode::baseline_cascade}) {
    CAPTURE(to_string(mode));
    TrainConfig cfg;
    cfg.mode = mode;
    RefinerParams<double> p = init_params<double>(RefinerConfig::for_mode(mode, 8));
    AdamState<double> opt(p);
    if (mode == FrameworkMode::firework)
      train_step_firework(p, opt, m, f, cfg, cfg.lr_init);
    else
      train_step_baseline(p, opt, m, f, cfg, cfg.lr_init);
    const StepGradient<double> sg = mode == FrameworkMode::firework ? firework_step_gradient(p, m, f, cfg)
                                                                    : baseline_step_gradient(p, m, f, cfg);
    for (const auto& a : sg.grads.arrays) {
      CAPTURE(a.name);
      CHECK(a.value.allFinite());
      CHECK(a.value.abs().maxCoeff() > 0.0);
    }
  }
}

TEST_CASE("two-stage firework gradient matches finite differences") {
  const Shape3 s{8, 8, 8};
  const auto [m, f] = smooth_pair(s, 9);
  TrainConfig cfg;
  cfg.window = 5;
  cfg.lambda = 1.0;
  const RefinerParams<double> p = perturbed(init_params<double>(RefinerConfig{8, 2, 6, 3, 10}), 11, 0.05);
  const StepGradient<double> sg = firework_step_gradient(p, m, f, cfg);
  const double err = sampled_param_error(
      p, sg.grads, [&](const RefinerParams<double>& q) { return firework_step_gradient(q, m, f, cfg).parts.total; },
      12);
  CHECK(err < 1e-3);

  cfg.detach_stage1 = true;
  const StepGradient<double> detached = firework_step_gradient(p, m, f, cfg);
  CHECK(detached.parts.total == sg.parts.total);
  CHECK(detached.grads.fingerprint() != sg.grads.fingerprint());
}

TEST_CASE("two-stage cascade gradient matches finite differences") {
  const Shape3 s{8, 8, 8};
  const auto [m, f] = smooth_pair(s, 13);
  TrainConfig cfg;
  cfg.window = 5;
  cfg.lambda = 1.0;
  cfg.mode = FrameworkMode::baseline_cascade;
  const RefinerParams<double> p =
      perturbed(init_params<double>(RefinerConfig::for_mode(FrameworkMode::baseline_cascade, 14)), 15, 0.05);
  const StepGradient<double> sg = baseline_step_gradient(p, m, f, cfg);
  const double err = sampled_param_error(
      p, sg.grads, [&](const RefinerParams<double>& q) { return baseline_step_gradient(q, m, f, cfg).parts.total; },
      16);
  CHECK(err < 1e-3);
}

TEST_CASE("cascade stage-2 field equals the sequential-warp path within interpolation error") {
  const Shape3 s{16, 16, 16};
  const auto [m, f] = smooth_pair(s, 17);
  TrainConfig cfg;
  cfg.mode = FrameworkMode::baseline_cascade;
  const RefinerParams<double> p =
      perturbed(init_params<double>(RefinerConfig::for_mode(FrameworkMode::baseline_cascade, 18)), 19, 0.02);
  const StepGradient<double> sg = baseline_step_gradient(p, m, f, cfg);
  const FieldD residual2 = baseline_forward(p, warp(m, sg.phi1), f);
  const VolumeD sequential = warp(warp(m, sg.phi1), residual2);
  const VolumeD composed = warp(m, sg.phi2);
  const double range = m.data.maxCoeff() - m.data.minCoeff();
  CHECK((sequential.data - composed.data).abs().maxCoeff() < 0.05 * range);
}

TEST_CASE("training loss decreases over 200 steps on a fixed synthetic pair") {
  const Shape3 s{16, 16, 16};
  const SyntheticPair<float> pair = gen_synthetic_pair<float>(20, s);
  for (FrameworkMode mode : {FrameworkMode::firework, FrameworkMode::baseline_cascade}) {
    CAPTURE(to_string(mode));
    TrainConfig cfg;
    cfg.mode = mode;
    RefinerParams<float> p = init_params<float>(RefinerConfig::for_mode(mode, 21));
    AdamState<float> opt(p);
    float first = 0, last = 0;
    for (int step = 1; step <= 200; ++step) {
      const LossParts<float> parts = mode == FrameworkMode::firework
                                         ? train_step_firework(p, opt, pair.moving, pair.fixed, cfg, cfg.lr_init)
                                         : train_step_baseline(p, opt, pair.moving, pair.fixed, cfg, cfg.lr_init);
      if (step == 1) first = parts.total;
      last = parts.total;
    }
    CHECK(last < first);
  }
}

TEST_CASE("firework inference: update rule, telescoping and stage-1 equivalence") {
  const Shape3 s{8, 8, 8};
  const VolumeF m = oracle::random_volume(s, 22).cast<float>(), f = oracle::random_volume(s, 23).cast<float>();
  const RefinerParams<float> p = perturbed(init_params<double>(RefinerConfig{8, 2, 6, 3, 24}), 25, 0.1).cast<float>();
  for (int T : {1, 3, 8}) {
    CAPTURE(T);
    const RegistrationResult<float> r = infer_firework(p, m, f, T);
    REQUIRE(r.step_count() == T);
    FieldF prev(s);
    Eigen::Array<double, Eigen::Dynamic, 3> sum = Eigen::Array<double, Eigen::Dynamic, 3>::Zero(s.size(), 3);
    for (const auto& step : r.steps) {
      CHECK(((step.field.data + step.update.data) - prev.data).abs().maxCoeff() <= 1e-6f);
      sum += step.update.data.cast<double>();
      prev = step.field;
    }
    CHECK((r.final_step().field.data.cast<double>() + sum).abs().maxCoeff() < 1e-5);
  }
  const StepGradient<float> sg = firework_step_gradient(p, m, f, TrainConfig{});
  CHECK((infer_firework(p, m, f, 1).final_step().field.data == sg.phi1.data).all());
  CHECK_THROWS_AS(infer_firework(p, m, f, 0), std::invalid_argument);
}

TEST_CASE("cascade inference with stub networks") {
  const Shape3 s{8, 8, 8};
  const VolumeD m = oracle::random_volume(s, 26), f = oracle::random_volume(s, 27);
  const ResidualFn<double> zero = [](const VolumeD& w, const VolumeD&) { return FieldD(w.shape); };
  for (int T : {1, 4}) {
    const RegistrationResult<double> r = infer_baseline(zero, m, f, T);
    for (const auto& step : r.steps) CHECK((step.field.data == 0.0).all());
  }
  const ResidualFn<double> shift = [](const VolumeD& w, const VolumeD&) {
    return FieldD::Constant(w.shape, 0.5, -0.25, 1.0);
  };
  const RegistrationResult<double> r = infer_baseline(shift, m, f, 5);
  CHECK((r.final_step().field.data.col(0) - 2.5).abs().maxCoeff() < 1e-12);
  CHECK((r.final_step().field.data.col(1) + 1.25).abs().maxCoeff() < 1e-12);
  CHECK((r.final_step().field.data.col(2) - 5.0).abs().maxCoeff() < 1e-12);

  const RefinerParams<double> p =
      perturbed(init_params<double>(RefinerConfig::for_mode(FrameworkMode::baseline_cascade, 28)), 29, 0.1);
  const RegistrationResult<double> one = infer_baseline(p, m, f, 1);
  CHECK((one.final_step().field.data == baseline_forward(p, m, f).data).all());
}

TEST_CASE("register_pair with an identity stub keeps equal labels perfect") {
  const Shape3 s{8, 8, 8};
  const VolumeD m = oracle::random_volume(s, 30);
  LabelVolume labels(s);
  for (Index i = 2; i < 6; ++i)
    for (Index j = 1; j < 7; ++j)
      for (Index k = 2; k < 5; ++k) labels(i, j, k) = i < 4 ? 1 : 2;
  FieldPredictor<double> stub;
  stub.mode = FrameworkMode::firework;
  stub.refine = [](const VolumeD& mv, const VolumeD&, const VolumeD&, const FieldD&) { return FieldD(mv.shape); };
  const PairRegistration<double> reg = register_pair(stub, m, m, &labels, &labels, 4);
  REQUIRE(reg.metrics.size() == 4);
  for (const auto& rec : reg.metrics) {
    CHECK(rec.dsc_mean == 1.0);
    CHECK(rec.assd_mean_mm == 0.0);
    CHECK(rec.folding_ratio == 0.0);
  }
  CHECK_THROWS_AS(register_pair(stub, m, m, &labels, &labels, 0), std::invalid_argument);
}

TEST_CASE("train logs one record per epoch and is deterministic") {
  const Shape3 s{8, 8, 8};
  std::vector<ImagePair<float>> pairs;
  for (std::uint64_t k = 0; k < 2; ++k) {
    const auto sp = gen_synthetic_pair<float>(40 + k, s);
    pairs.push_back({sp.moving, sp.fixed});
  }
  TrainConfig cfg;
  cfg.epochs = 1;
  const RefinerConfig net = RefinerConfig::for_mode(FrameworkMode::firework, 31);
  const auto one = train<float>({pairs[0]}, cfg, net);
  CHECK(one.log.size() == 1);
  CHECK(one.log[0].lr == cfg.lr_init);

  cfg.epochs = 3;
  int calls = 0;
  const auto a = train<float>(pairs, cfg, net, [&](const EpochRecord&) { ++calls; });
  const auto b = train<float>(pairs, cfg, net);
  CHECK(calls == 3);
  CHECK(a.params.fingerprint() == b.params.fingerprint());
  CHECK(a.params.fingerprint() != init_params<float>(net).fingerprint());

  std::ostringstream os;
  write_training_log_csv(os, a.log);
  std::istringstream is(os.str());
  std::string header, row;
  std::getline(is, header);
  CHECK(header == "epoch,lr,sim1,reg1,sim2,reg2,total");
  int rows = 0;
  while (std::getline(is, row)) ++rows;
  CHECK(rows == 3);

  CHECK_THROWS_AS(train<float>({}, cfg, net), std::invalid_argument);
  CHECK_THROWS_AS(train<float>(pairs, cfg, RefinerConfig::for_mode(FrameworkMode::baseline_cascade)),
                  std::invalid_argument);
}
