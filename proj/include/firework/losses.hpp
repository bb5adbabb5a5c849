// Similarity and smoothness terms, and the four-term two-stage objective.

#pragma once

#include "firework/types.hpp"

namespace firework {

inline constexpr double kNccEpsilon = 1e-5;
inline constexpr int kDefaultNccWindow = 9;

// Negated mean of the squared local normalized cross-correlation over
// cubic windows of side `window`. Windows are clipped at the volume border,
// so every window is a plain Pearson correlation over in-bounds voxels.
// A perfect (affine) match gives -1.
template <typename Scalar>
Scalar local_ncc(const Volume<Scalar>& a, const Volume<Scalar>& b, int window = kDefaultNccWindow);

template <typename Scalar>
struct NccGradient {
  Scalar value = 0;
  Volume<Scalar> grad_a;
  Volume<Scalar> grad_b;
};

template <typename Scalar>
NccGradient<Scalar> local_ncc_gradient(const Volume<Scalar>& a, const Volume<Scalar>& b,
                                       int window = kDefaultNccWindow);

// Mean squared forward difference of the field. Each axis contributes the
// mean over its difference pairs and all three components; the result is
// the average over the three axes.
template <typename Scalar>
Scalar grad_penalty(const DisplacementField<Scalar>& field);

template <typename Scalar>
DisplacementField<Scalar> grad_penalty_gradient(const DisplacementField<Scalar>& field);

template <typename Scalar>
struct LossParts {
  Scalar sim1 = 0;
  Scalar reg1 = 0;
  Scalar sim2 = 0;
  Scalar reg2 = 0;
  Scalar total = 0;
  Scalar lambda = 0;

  bool all_finite() const;
};

// sim(I_m o phi1, I_f) + lambda reg(phi1) + sim(I_m o phi2, I_f) + lambda reg(phi2)
template <typename Scalar>
LossParts<Scalar> firework_loss(const Volume<Scalar>& moving, const Volume<Scalar>& fixed,
                                const DisplacementField<Scalar>& phi1, const DisplacementField<Scalar>& phi2,
                                Scalar lambda, int window = kDefaultNccWindow);

template <typename Scalar>
struct FireworkLossGradient {
  LossParts<Scalar> parts;
  // Gradients of the total through both the warps and the regularizers.
  DisplacementField<Scalar> grad_phi1;
  DisplacementField<Scalar> grad_phi2;
  // The warped moving images I_m o phi1 and I_m o phi2.
  Volume<Scalar> warped1;
  Volume<Scalar> warped2;
};

template <typename Scalar>
FireworkLossGradient<Scalar> firework_loss_gradient(const Volume<Scalar>& moving, const Volume<Scalar>& fixed,
                                                    const DisplacementField<Scalar>& phi1,
                                                    const DisplacementField<Scalar>& phi2, Scalar lambda,
                                                    int window = kDefaultNccWindow);

}  // namespace firework
