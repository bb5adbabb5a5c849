#pragma once

#include "firework/refiner.hpp"
#include "firework/types.hpp"

#include <optional>
#include <stdexcept>
#include <vector>

namespace firework {

template <typename Scalar>
struct RegistrationStep {
  // Full field after this step (phi_t).
  DisplacementField<Scalar> field;
  // What the network predicted at this step: the field error eps_t in
  // refinement mode, the residual subfield in baseline mode.
  DisplacementField<Scalar> update;
  // Moving image warped once by `field`.
  Volume<Scalar> warped;
  std::optional<LabelVolume> warped_labels;
};

template <typename Scalar>
struct RegistrationResult {
  FrameworkMode mode = FrameworkMode::firework;
  std::vector<RegistrationStep<Scalar>> steps;

  int step_count() const { return static_cast<int>(steps.size()); }
  const RegistrationStep<Scalar>& final_step() const {
    if (steps.empty()) throw std::logic_error("RegistrationResult: no steps");
    return steps.back();
  }
};

}  // namespace firework
