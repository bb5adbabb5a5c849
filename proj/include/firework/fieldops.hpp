// Warping, composition and Jacobian analysis of displacement fields.
//
// A field u maps voxel x to the sample location x + u(x). All sampling
// clamps coordinates to the grid, so samples outside the volume read the
// nearest border voxel. Every function here is pure.

#pragma once

#include "firework/types.hpp"

namespace firework {

enum class Interp { linear, nearest };

// Row r holds the (i, j, k) voxel coordinates of linear index r.
Eigen::Matrix<Index, Eigen::Dynamic, 3> identity_grid(const Shape3& shape);

// out(x) = vol(x + u(x)). Linear mode is trilinear and differentiable in
// both the volume and the field.
template <typename Scalar>
Volume<Scalar> warp(const Volume<Scalar>& vol, const DisplacementField<Scalar>& field,
                    Interp mode = Interp::linear);

// Label warping is nearest-neighbour only; Interp::linear throws.
template <typename Scalar>
LabelVolume warp(const LabelVolume& labels, const DisplacementField<Scalar>& field,
                 Interp mode = Interp::nearest);

// Adjoint of linear warp with respect to the volume: scatters grad_out
// through the trilinear weights.
template <typename Scalar>
Volume<Scalar> warp_adjoint(const Volume<Scalar>& grad_out, const DisplacementField<Scalar>& field);

// Gradient of <grad_out, warp(vol, field)> with respect to the field.
// Components whose sample coordinate was clamped get zero gradient.
template <typename Scalar>
DisplacementField<Scalar> warp_field_gradient(const Volume<Scalar>& vol,
                                              const DisplacementField<Scalar>& field,
                                              const Volume<Scalar>& grad_out);

// u(x) = inner(x) + outer(x + inner(x)), with the outer field sampled
// trilinearly. warp(v, compose(a, b)) approximates warp(warp(v, a), b).
template <typename Scalar>
DisplacementField<Scalar> compose(const DisplacementField<Scalar>& outer,
                                  const DisplacementField<Scalar>& inner);

template <typename Scalar>
struct ComposeGradients {
  DisplacementField<Scalar> outer;
  DisplacementField<Scalar> inner;
};

template <typename Scalar>
ComposeGradients<Scalar> compose_backward(const DisplacementField<Scalar>& outer,
                                          const DisplacementField<Scalar>& inner,
                                          const DisplacementField<Scalar>& grad_out);

// det(I + grad u) per voxel. Central differences inside, one-sided at the
// faces. Needs every dimension >= 3.
template <typename Scalar>
Volume<Scalar> jacobian_determinant(const DisplacementField<Scalar>& field);

// Fraction of voxels whose Jacobian determinant is <= 0.
template <typename Scalar>
double folding_ratio(const DisplacementField<Scalar>& field);

}  // namespace firework
