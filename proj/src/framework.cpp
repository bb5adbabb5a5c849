#include "firework/framework.hpp"

#include "firework/fieldops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace firework {

namespace {

template <typename Scalar>
void check_step(const LossParts<Scalar>& parts, const char* what) {
  if (!parts.all_finite()) {
    std::ostringstream os;
    os << what << ": non-finite loss (sim1=" << parts.sim1 << " reg1=" << parts.reg1 << " sim2=" << parts.sim2
       << " reg2=" << parts.reg2 << " total=" << parts.total << ")";
    throw std::runtime_error(os.str());
  }
}

template <typename Scalar>
void check_field(const DisplacementField<Scalar>& field, int step, const char* what) {
  if (!field.all_finite()) {
    throw std::runtime_error(std::string(what) + ": non-finite field at step " + std::to_string(step));
  }
}

template <typename Scalar>
void check_inputs(const Volume<Scalar>& moving, const Volume<Scalar>& fixed, int steps, const char* what) {
  require_same_shape(moving.shape, fixed.shape, what);
  if (steps < 1) throw std::invalid_argument(std::string(what) + ": step count must be >= 1");
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr_init > 0)) throw std::invalid_argument("TrainConfig: lr_init must be positive");
  if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
  if (!(lambda >= 0)) throw std::invalid_argument("TrainConfig: lambda must be non-negative");
  if (batch_size != 1) throw std::invalid_argument("TrainConfig: batch size must be 1");
  if (window < 1 || window % 2 == 0) throw std::invalid_argument("TrainConfig: window must be odd");
  if (t_infer < 1) throw std::invalid_argument("TrainConfig: t_infer must be >= 1");
}

double lr_schedule(double lr_init, int epoch, int total_epochs) {
  if (total_epochs < 1 || epoch < 1 || epoch > total_epochs) {
    throw std::invalid_argument("lr_schedule: epoch " + std::to_string(epoch) + " outside [1, " +
                                std::to_string(total_epochs) + "]");
  }
  return lr_init * std::pow(1.0 - double(epoch - 1) / double(total_epochs), 0.9);
}

template <typename Scalar>
AdamState<Scalar>::AdamState(const RefinerParams<Scalar>& params) {
  for (const auto& a : params.arrays) {
    m.push_back(Eigen::Array<Scalar, Eigen::Dynamic, 1>::Zero(a.value.size()));
    v.push_back(Eigen::Array<Scalar, Eigen::Dynamic, 1>::Zero(a.value.size()));
  }
}

template <typename Scalar>
void AdamState<Scalar>::apply(RefinerParams<Scalar>& params, const RefinerParams<Scalar>& grads, double lr) {
  ++step;
  const Scalar b1 = Scalar(beta1), b2 = Scalar(beta2);
  const Scalar c1 = Scalar(1.0 - std::pow(beta1, double(step)));
  const Scalar c2 = Scalar(1.0 - std::pow(beta2, double(step)));
  for (std::size_t i = 0; i < params.arrays.size(); ++i) {
    const auto& g = grads.arrays[i].value;
    m[i] = b1 * m[i] + (Scalar(1) - b1) * g;
    v[i] = b2 * v[i] + (Scalar(1) - b2) * g.square();
    params.arrays[i].value -= Scalar(lr) * (m[i] / c1) / ((v[i] / c2).sqrt() + Scalar(epsilon));
  }
}

template <typename Scalar>
StepGradient<Scalar> firework_step_gradient(const RefinerParams<Scalar>& params, const Volume<Scalar>& moving,
                                            const Volume<Scalar>& fixed, const TrainConfig& cfg) {
  require_same_shape(moving.shape, fixed.shape, "train_step_firework");
  const DisplacementField<Scalar> phi_init(moving.shape);

  NetworkCache<Scalar> stage1, stage2;
  const DisplacementField<Scalar> eps1 = refine(params, moving, moving, fixed, phi_init, &stage1);
  DisplacementField<Scalar> phi1(moving.shape, phi_init.data - eps1.data);
  const Volume<Scalar> warped1 = warp(moving, phi1);
  const DisplacementField<Scalar> eps2 = refine(params, moving, warped1, fixed, phi1, &stage2);
  DisplacementField<Scalar> phi2(moving.shape, phi1.data - eps2.data);

  const FireworkLossGradient<Scalar> loss =
      firework_loss_gradient(moving, fixed, phi1, phi2, Scalar(cfg.lambda), cfg.window);

  StepGradient<Scalar> out;
  out.parts = loss.parts;
  out.grads = params.zeros_like();

  // phi2 = phi1 - eps2
  const DisplacementField<Scalar> g_eps2(moving.shape, -loss.grad_phi2.data);
  const RefineInputGradients<Scalar> in2 = refine_backward(params, stage2, g_eps2, out.grads);
  DisplacementField<Scalar> g_phi1(moving.shape, loss.grad_phi1.data + loss.grad_phi2.data);
  if (!cfg.detach_stage1) {
    g_phi1.data += in2.field.data + warp_field_gradient(moving, phi1, in2.warped).data;
  }
  // phi1 = 0 - eps1
  const DisplacementField<Scalar> g_eps1(moving.shape, -g_phi1.data);
  refine_backward(params, stage1, g_eps1, out.grads);

  out.phi1 = std::move(phi1);
  out.phi2 = std::move(phi2);
  return out;
}

template <typename Scalar>
StepGradient<Scalar> baseline_step_gradient(const RefinerParams<Scalar>& params, const Volume<Scalar>& moving,
                                            const Volume<Scalar>& fixed, const TrainConfig& cfg) {
  require_same_shape(moving.shape, fixed.shape, "train_step_baseline");
  NetworkCache<Scalar> stage1, stage2;
  DisplacementField<Scalar> phi1 = baseline_forward(params, moving, fixed, &stage1);
  const Volume<Scalar> warped1 = warp(moving, phi1);
  const DisplacementField<Scalar> residual2 = baseline_forward(params, warped1, fixed, &stage2);
  DisplacementField<Scalar> phi2 = compose(phi1, residual2);

  const FireworkLossGradient<Scalar> loss =
      firework_loss_gradient(moving, fixed, phi1, phi2, Scalar(cfg.lambda), cfg.window);

  StepGradient<Scalar> out;
  out.parts = loss.parts;
  out.grads = params.zeros_like();

  const ComposeGradients<Scalar> gc = compose_backward(phi1, residual2, loss.grad_phi2);
  const BaselineInputGradients<Scalar> in2 = baseline_backward(params, stage2, gc.inner, out.grads);
  DisplacementField<Scalar> g_phi1(moving.shape, loss.grad_phi1.data + gc.outer.data);
  if (!cfg.detach_stage1) g_phi1.data += warp_field_gradient(moving, phi1, in2.warped).data;
  baseline_backward(params, stage1, g_phi1, out.grads);

  out.phi1 = std::move(phi1);
  out.phi2 = std::move(phi2);
  return out;
}

template <typename Scalar>
LossParts<Scalar> train_step_firework(RefinerParams<Scalar>& params, AdamState<Scalar>& optimizer,
                                      const Volume<Scalar>& moving, const Volume<Scalar>& fixed,
                                      const TrainConfig& cfg, double lr) {
  const StepGradient<Scalar> sg = firework_step_gradient(params, moving, fixed, cfg);
  check_step(sg.parts, "train_step_firework");
  optimizer.apply(params, sg.grads, lr);
  if (!params.all_finite()) throw std::runtime_error("train_step_firework: parameters became non-finite");
  return sg.parts;
}

template <typename Scalar>
LossParts<Scalar> train_step_baseline(RefinerParams<Scalar>& params, AdamState<Scalar>& optimizer,
                                      const Volume<Scalar>& moving, const Volume<Scalar>& fixed,
                                      const TrainConfig& cfg, double lr) {
  const StepGradient<Scalar> sg = baseline_step_gradient(params, moving, fixed, cfg);
  check_step(sg.parts, "train_step_baseline");
  optimizer.apply(params, sg.grads, lr);
  if (!params.all_finite()) throw std::runtime_error("train_step_baseline: parameters became non-finite");
  return sg.parts;
}

template <typename Scalar>
TrainResult<Scalar> train(const std::vector<ImagePair<Scalar>>& pairs, const TrainConfig& cfg,
                          const RefinerConfig& net, const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  if (pairs.empty()) throw std::invalid_argument("train: no training pairs");
  if (net.input_channels != RefinerConfig::for_mode(cfg.mode).input_channels) {
    throw std::invalid_argument("train: network input channels do not match the framework mode");
  }
  TrainResult<Scalar> out;
  out.params = init_params<Scalar>(net);
  AdamState<Scalar> optimizer(out.params);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t(0));

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = lr_schedule(cfg.lr_init, epoch, cfg.epochs);
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    for (std::size_t idx : order) {
      const ImagePair<Scalar>& pair = pairs[idx];
      const LossParts<Scalar> parts =
          cfg.mode == FrameworkMode::firework
              ? train_step_firework(out.params, optimizer, pair.moving, pair.fixed, cfg, lr)
              : train_step_baseline(out.params, optimizer, pair.moving, pair.fixed, cfg, lr);
      rec.sim1 += parts.sim1;
      rec.reg1 += parts.reg1;
      rec.sim2 += parts.sim2;
      rec.reg2 += parts.reg2;
      rec.total += parts.total;
    }
    const double n = double(pairs.size());
    rec.sim1 /= n;
    rec.reg1 /= n;
    rec.sim2 /= n;
    rec.reg2 /= n;
    rec.total /= n;
    out.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return out;
}

void write_training_log_csv(std::ostream& os, const std::vector<EpochRecord>& log) {
  os << "epoch,lr,sim1,reg1,sim2,reg2,total\n";
  char buf[256];
  for (const EpochRecord& r : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.10g,%.8f,%.8f,%.8f,%.8f,%.8f\n", r.epoch, r.lr, r.sim1, r.reg1, r.sim2,
                  r.reg2, r.total);
    os << buf;
  }
}

template <typename Scalar>
RegistrationResult<Scalar> infer_firework(const RefineFn<Scalar>& net, const Volume<Scalar>& moving,
                                          const Volume<Scalar>& fixed, int steps) {
  check_inputs(moving, fixed, steps, "infer_firework");
  RegistrationResult<Scalar> result;
  result.mode = FrameworkMode::firework;
  DisplacementField<Scalar> phi(moving.shape);
  for (int t = 1; t <= steps; ++t) {
    // The first step sees the unwarped moving image, as in training.
    DisplacementField<Scalar> eps = t == 1 ? net(moving, moving, fixed, phi) : net(moving, warp(moving, phi), fixed, phi);
    check_field(eps, t, "infer_firework");
    require_same_shape(eps.shape, moving.shape, "infer_firework");
    phi = DisplacementField<Scalar>(moving.shape, phi.data - eps.data);
    RegistrationStep<Scalar> step;
    step.warped = warp(moving, phi);
    step.field = phi;
    step.update = std::move(eps);
    result.steps.push_back(std::move(step));
  }
  return result;
}

template <typename Scalar>
RegistrationResult<Scalar> infer_firework(const RefinerParams<Scalar>& params, const Volume<Scalar>& moving,
                                          const Volume<Scalar>& fixed, int steps) {
  return infer_firework<Scalar>(FieldPredictor<Scalar>::from_params(params, FrameworkMode::firework).refine, moving,
                                fixed, steps);
}

template <typename Scalar>
RegistrationResult<Scalar> infer_baseline(const ResidualFn<Scalar>& net, const Volume<Scalar>& moving,
                                          const Volume<Scalar>& fixed, int steps) {
  check_inputs(moving, fixed, steps, "infer_baseline");
  RegistrationResult<Scalar> result;
  result.mode = FrameworkMode::baseline_cascade;
  DisplacementField<Scalar> phi(moving.shape);
  for (int t = 1; t <= steps; ++t) {
    DisplacementField<Scalar> residual = t == 1 ? net(moving, fixed) : net(warp(moving, phi), fixed);
    check_field(residual, t, "infer_baseline");
    require_same_shape(residual.shape, moving.shape, "infer_baseline");
    phi = t == 1 ? residual : compose(phi, residual);
    RegistrationStep<Scalar> step;
    step.warped = warp(moving, phi);
    step.field = phi;
    step.update = std::move(residual);
    result.steps.push_back(std::move(step));
  }
  return result;
}

template <typename Scalar>
RegistrationResult<Scalar> infer_baseline(const RefinerParams<Scalar>& params, const Volume<Scalar>& moving,
                                          const Volume<Scalar>& fixed, int steps) {
  return infer_baseline<Scalar>(FieldPredictor<Scalar>::from_params(params, FrameworkMode::baseline_cascade).residual,
                                moving, fixed, steps);
}

template <typename Scalar>
FieldPredictor<Scalar> FieldPredictor<Scalar>::from_params(const RefinerParams<Scalar>& params, FrameworkMode mode) {
  if (params.config.input_channels != RefinerConfig::for_mode(mode).input_channels) {
    throw std::invalid_argument("FieldPredictor: parameters do not match framework mode " + to_string(mode));
  }
  FieldPredictor<Scalar> p;
  p.mode = mode;
  if (mode == FrameworkMode::firework) {
    p.refine = [&params](const Volume<Scalar>& m, const Volume<Scalar>& w, const Volume<Scalar>& f,
                         const DisplacementField<Scalar>& phi) { return firework::refine(params, m, w, f, phi); };
  } else {
    p.residual = [&params](const Volume<Scalar>& w, const Volume<Scalar>& f) { return baseline_forward(params, w, f); };
  }
  return p;
}

template <typename Scalar>
RegistrationResult<Scalar> FieldPredictor<Scalar>::infer(const Volume<Scalar>& moving, const Volume<Scalar>& fixed,
                                                         int steps) const {
  if (mode == FrameworkMode::firework) {
    if (!refine) throw std::invalid_argument("FieldPredictor: no refinement network");
    return infer_firework(refine, moving, fixed, steps);
  }
  if (!residual) throw std::invalid_argument("FieldPredictor: no residual network");
  return infer_baseline(residual, moving, fixed, steps);
}

template <typename Scalar>
PairRegistration<Scalar> register_pair(const FieldPredictor<Scalar>& predictor, const Volume<Scalar>& moving,
                                       const Volume<Scalar>& fixed, const LabelVolume* moving_labels,
                                       const LabelVolume* fixed_labels, int steps) {
  check_inputs(moving, fixed, steps, "register_pair");
  if (moving_labels) require_same_shape(moving_labels->shape, moving.shape, "register_pair");
  if (fixed_labels) require_same_shape(fixed_labels->shape, fixed.shape, "register_pair");
  PairRegistration<Scalar> out;
  out.result = predictor.infer(moving, fixed, steps);
  if (moving_labels) {
    for (auto& step : out.result.steps) step.warped_labels = warp(*moving_labels, step.field, Interp::nearest);
  }
  if (moving_labels && fixed_labels) {
    std::set<int> rois = moving_labels->roi_ids();
    const std::set<int> fixed_rois = fixed_labels->roi_ids();
    rois.insert(fixed_rois.begin(), fixed_rois.end());
    out.metrics = evaluate(out.result, *fixed_labels, rois, fixed_labels->spacing);
  }
  return out;
}

template <typename Scalar>
PairRegistration<Scalar> register_pair(const RefinerParams<Scalar>& params, const Volume<Scalar>& moving,
                                       const Volume<Scalar>& fixed, const LabelVolume* moving_labels,
                                       const LabelVolume* fixed_labels, int steps, FrameworkMode mode) {
  return register_pair(FieldPredictor<Scalar>::from_params(params, mode), moving, fixed, moving_labels, fixed_labels,
                       steps);
}

#define FIREWORK_INSTANTIATE_FRAMEWORK(S)                                                                        \
  template struct AdamState<S>;                                                                                  \
  template struct FieldPredictor<S>;                                                                             \
  template StepGradient<S> firework_step_gradient(const RefinerParams<S>&, const Volume<S>&, const Volume<S>&,   \
                                                  const TrainConfig&);                                           \
  template StepGradient<S> baseline_step_gradient(const RefinerParams<S>&, const Volume<S>&, const Volume<S>&,   \
                                                  const TrainConfig&);                                           \
  template LossParts<S> train_step_firework(RefinerParams<S>&, AdamState<S>&, const Volume<S>&, const Volume<S>&, \
                                            const TrainConfig&, double);                                         \
  template LossParts<S> train_step_baseline(RefinerParams<S>&, AdamState<S>&, const Volume<S>&, const Volume<S>&, \
                                            const TrainConfig&, double);                                         \
  template TrainResult<S> train(const std::vector<ImagePair<S>>&, const TrainConfig&, const RefinerConfig&,      \
                                const std::function<void(const EpochRecord&)>&);                                 \
  template RegistrationResult<S> infer_firework(const RefineFn<S>&, const Volume<S>&, const Volume<S>&, int);    \
  template RegistrationResult<S> infer_firework(const RefinerParams<S>&, const Volume<S>&, const Volume<S>&, int); \
  template RegistrationResult<S> infer_baseline(const ResidualFn<S>&, const Volume<S>&, const Volume<S>&, int);  \
  template RegistrationResult<S> infer_baseline(const RefinerParams<S>&, const Volume<S>&, const Volume<S>&, int); \
  template PairRegistration<S> register_pair(const FieldPredictor<S>&, const Volume<S>&, const Volume<S>&,       \
                                             const LabelVolume*, const LabelVolume*, int);                       \
  template PairRegistration<S> register_pair(const RefinerParams<S>&, const Volume<S>&, const Volume<S>&,        \
                                             const LabelVolume*, const LabelVolume*, int, FrameworkMode);

FIREWORK_INSTANTIATE_FRAMEWORK(float)
FIREWORK_INSTANTIATE_FRAMEWORK(double)

}  // namespace firework
