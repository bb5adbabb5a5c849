// Two-stage training and iterative inference for field refinement, plus the
// continuous-deformation cascade it is compared against.
//
// Refinement (one shared network f):
//   eps_1 = f(I_m, I_m, I_f, 0)                 phi_1 = 0 - eps_1
//   eps_t = f(I_m, I_m o phi_{t-1}, I_f, phi_{t-1})   phi_t = phi_{t-1} - eps_t
// Cascade (one shared network g):
//   r_1 = g(I_m, I_f)                           phi_1 = r_1
//   r_t = g(I_m o phi_{t-1}, I_f)               phi_t = compose(phi_{t-1}, r_t)
// Training runs two steps of either scheme and minimises the four-term loss.

#pragma once

#include "firework/losses.hpp"
#include "firework/metrics.hpp"
#include "firework/refiner.hpp"
#include "firework/result.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

namespace firework {

struct TrainConfig {
  double lr_init = 4e-4;
  int epochs = 30;
  double lambda = 4.0;
  int batch_size = 1;
  int window = kDefaultNccWindow;
  int t_infer = 5;
  std::uint64_t seed = 0;
  FrameworkMode mode = FrameworkMode::firework;
  // Stops gradients flowing from the stage-2 network inputs back into
  // stage 1. Off by default; kept for ablations.
  bool detach_stage1 = false;

  void validate() const;
};

// lr_init * (1 - (epoch - 1) / total_epochs)^0.9 for epoch in [1, total_epochs].
double lr_schedule(double lr_init, int epoch, int total_epochs);

template <typename Scalar>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  std::vector<Eigen::Array<Scalar, Eigen::Dynamic, 1>> m;
  std::vector<Eigen::Array<Scalar, Eigen::Dynamic, 1>> v;

  explicit AdamState(const RefinerParams<Scalar>& params);
  void apply(RefinerParams<Scalar>& params, const RefinerParams<Scalar>& grads, double lr);
};

template <typename Scalar>
struct ImagePair {
  Volume<Scalar> moving;
  Volume<Scalar> fixed;
};

// Loss and parameter gradient of one two-stage pass, without updating.
template <typename Scalar>
struct StepGradient {
  LossParts<Scalar> parts;
  RefinerParams<Scalar> grads;
  DisplacementField<Scalar> phi1;
  DisplacementField<Scalar> phi2;
};

template <typename Scalar>
StepGradient<Scalar> firework_step_gradient(const RefinerParams<Scalar>& params, const Volume<Scalar>& moving,
                                            const Volume<Scalar>& fixed, const TrainConfig& cfg);

template <typename Scalar>
StepGradient<Scalar> baseline_step_gradient(const RefinerParams<Scalar>& params, const Volume<Scalar>& moving,
                                            const Volume<Scalar>& fixed, const TrainConfig& cfg);

// One Adam update. Returns the loss evaluated before the update. Throws
// std::runtime_error on a non-finite loss or non-finite parameters.
template <typename Scalar>
LossParts<Scalar> train_step_firework(RefinerParams<Scalar>& params, AdamState<Scalar>& optimizer,
                                      const Volume<Scalar>& moving, const Volume<Scalar>& fixed,
                                      const TrainConfig& cfg, double lr);

template <typename Scalar>
LossParts<Scalar> train_step_baseline(RefinerParams<Scalar>& params, AdamState<Scalar>& optimizer,
                                      const Volume<Scalar>& moving, const Volume<Scalar>& fixed,
                                      const TrainConfig& cfg, double lr);

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double sim1 = 0;
  double reg1 = 0;
  double sim2 = 0;
  double reg2 = 0;
  double total = 0;
};

template <typename Scalar>
struct TrainResult {
  RefinerParams<Scalar> params;
  std::vector<EpochRecord> log;
};

// Epochs x pairs with batch size 1. Pair order is reshuffled every epoch
// from cfg.seed; network weights come from net.seed.
template <typename Scalar>
TrainResult<Scalar> train(const std::vector<ImagePair<Scalar>>& pairs, const TrainConfig& cfg,
                          const RefinerConfig& net, const std::function<void(const EpochRecord&)>& on_epoch = {});

// Columns: epoch, lr, sim1, reg1, sim2, reg2, total.
void write_training_log_csv(std::ostream& os, const std::vector<EpochRecord>& log);

// Refinement network: (moving, warped moving, fixed, field) -> field error.
template <typename Scalar>
using RefineFn = std::function<DisplacementField<Scalar>(const Volume<Scalar>&, const Volume<Scalar>&,
                                                         const Volume<Scalar>&, const DisplacementField<Scalar>&)>;
// Cascade network: (warped moving, fixed) -> residual field.
template <typename Scalar>
using ResidualFn = std::function<DisplacementField<Scalar>(const Volume<Scalar>&, const Volume<Scalar>&)>;

template <typename Scalar>
RegistrationResult<Scalar> infer_firework(const RefineFn<Scalar>& net, const Volume<Scalar>& moving,
                                          const Volume<Scalar>& fixed, int steps);
template <typename Scalar>
RegistrationResult<Scalar> infer_firework(const RefinerParams<Scalar>& params, const Volume<Scalar>& moving,
                                          const Volume<Scalar>& fixed, int steps);

template <typename Scalar>
RegistrationResult<Scalar> infer_baseline(const ResidualFn<Scalar>& net, const Volume<Scalar>& moving,
                                          const Volume<Scalar>& fixed, int steps);
template <typename Scalar>
RegistrationResult<Scalar> infer_baseline(const RefinerParams<Scalar>& params, const Volume<Scalar>& moving,
                                          const Volume<Scalar>& fixed, int steps);

// Either kind of network, tagged with its framework.
template <typename Scalar>
struct FieldPredictor {
  FrameworkMode mode = FrameworkMode::firework;
  RefineFn<Scalar> refine;
  ResidualFn<Scalar> residual;

  static FieldPredictor from_params(const RefinerParams<Scalar>& params, FrameworkMode mode);
  RegistrationResult<Scalar> infer(const Volume<Scalar>& moving, const Volume<Scalar>& fixed, int steps) const;
};

template <typename Scalar>
struct PairRegistration {
  RegistrationResult<Scalar> result;
  // Empty unless both label volumes were given.
  std::vector<MetricsRecord> metrics;
};

// Runs inference, warps moving labels (nearest) at every step and, when
// fixed labels are given too, scores every step. ROIs are the union of both
// label volumes' ids.
template <typename Scalar>
PairRegistration<Scalar> register_pair(const FieldPredictor<Scalar>& predictor, const Volume<Scalar>& moving,
                                       const Volume<Scalar>& fixed, const LabelVolume* moving_labels,
                                       const LabelVolume* fixed_labels, int steps);

template <typename Scalar>
PairRegistration<Scalar> register_pair(const RefinerParams<Scalar>& params, const Volume<Scalar>& moving,
                                       const Volume<Scalar>& fixed, const LabelVolume* moving_labels,
                                       const LabelVolume* fixed_labels, int steps, FrameworkMode mode);

}  // namespace firework
