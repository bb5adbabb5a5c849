#include "firework/fieldops.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

namespace firework {

namespace {

template <typename Scalar>
struct AxisSample {
  Index lo = 0;
  Index hi = 0;
  Scalar t = 0;
  // False when the raw coordinate fell outside the grid and was clamped.
  bool active = false;
};

template <typename Scalar>
AxisSample<Scalar> sample_axis(Scalar p, Index n) {
  if (n == 1) return {0, 0, Scalar(0), false};
  const Scalar top = Scalar(n - 1);
  AxisSample<Scalar> s;
  s.active = p >= Scalar(0) && p <= top;
  p = std::clamp(p, Scalar(0), top);
  s.lo = std::min<Index>(static_cast<Index>(std::floor(p)), n - 2);
  s.hi = s.lo + 1;
  s.t = p - Scalar(s.lo);
  return s;
}

// The eight trilinear corners of one sample point, with the derivative of
// each weight along each axis.
template <typename Scalar>
struct Trilinear {
  std::array<Index, 8> index;
  std::array<Scalar, 8> weight;
  std::array<std::array<Scalar, 8>, 3> dweight;
  std::array<bool, 3> active;

  Trilinear(const Shape3& shape, Scalar p0, Scalar p1, Scalar p2) {
    const std::array<AxisSample<Scalar>, 3> ax = {sample_axis(p0, shape.d), sample_axis(p1, shape.h),
                                                  sample_axis(p2, shape.w)};
    for (int c = 0; c < 8; ++c) {
      const int b0 = (c >> 2) & 1, b1 = (c >> 1) & 1, b2 = c & 1;
      const Index i = b0 ? ax[0].hi : ax[0].lo;
      const Index j = b1 ? ax[1].hi : ax[1].lo;
      const Index k = b2 ? ax[2].hi : ax[2].lo;
      index[c] = shape.index(i, j, k);
      const Scalar w0 = b0 ? ax[0].t : Scalar(1) - ax[0].t;
      const Scalar w1 = b1 ? ax[1].t : Scalar(1) - ax[1].t;
      const Scalar w2 = b2 ? ax[2].t : Scalar(1) - ax[2].t;
      const Scalar s0 = b0 ? Scalar(1) : Scalar(-1);
      const Scalar s1 = b1 ? Scalar(1) : Scalar(-1);
      const Scalar s2 = b2 ? Scalar(1) : Scalar(-1);
      weight[c] = w0 * w1 * w2;
      dweight[0][c] = s0 * w1 * w2;
      dweight[1][c] = w0 * s1 * w2;
      dweight[2][c] = w0 * w1 * s2;
    }
    for (int a = 0; a < 3; ++a) active[a] = ax[a].active;
  }
};

Index nearest_index(double p, Index n) {
  p = std::clamp(p, 0.0, double(n - 1));
  return std::min<Index>(static_cast<Index>(std::floor(p + 0.5)), n - 1);
}

template <typename Scalar, typename Fn>
void for_each_sample(const DisplacementField<Scalar>& field, Fn&& fn) {
  const Shape3& s = field.shape;
  Index n = 0;
  for (Index i = 0; i < s.d; ++i)
    for (Index j = 0; j < s.h; ++j)
      for (Index k = 0; k < s.w; ++k, ++n)
        fn(n, Scalar(i) + field.data(n, 0), Scalar(j) + field.data(n, 1), Scalar(k) + field.data(n, 2));
}

}  // namespace

Eigen::Matrix<Index, Eigen::Dynamic, 3> identity_grid(const Shape3& shape) {
  require_min_dims(shape, 1, "identity_grid");
  Eigen::Matrix<Index, Eigen::Dynamic, 3> grid(shape.size(), 3);
  Index n = 0;
  for (Index i = 0; i < shape.d; ++i)
    for (Index j = 0; j < shape.h; ++j)
      for (Index k = 0; k < shape.w; ++k, ++n) grid.row(n) << i, j, k;
  return grid;
}

template <typename Scalar>
Volume<Scalar> warp(const Volume<Scalar>& vol, const DisplacementField<Scalar>& field, Interp mode) {
  require_same_shape(vol.shape, field.shape, "warp");
  Volume<Scalar> out(vol.shape, vol.spacing);
  const Shape3& s = vol.shape;
  if (mode == Interp::nearest) {
    for_each_sample(field, [&](Index n, Scalar p0, Scalar p1, Scalar p2) {
      out.data[n] = vol.data[s.index(nearest_index(p0, s.d), nearest_index(p1, s.h), nearest_index(p2, s.w))];
    });
    return out;
  }
  for_each_sample(field, [&](Index n, Scalar p0, Scalar p1, Scalar p2) {
    const Trilinear<Scalar> tri(s, p0, p1, p2);
    Scalar acc = 0;
    for (int c = 0; c < 8; ++c) acc += tri.weight[c] * vol.data[tri.index[c]];
    out.data[n] = acc;
  });
  return out;
}

template <typename Scalar>
LabelVolume warp(const LabelVolume& labels, const DisplacementField<Scalar>& field, Interp mode) {
  require_same_shape(labels.shape, field.shape, "warp");
  if (mode != Interp::nearest) {
    throw std::invalid_argument("warp: label volumes require nearest-neighbour interpolation");
  }
  LabelVolume out(labels.shape, labels.spacing);
  const Shape3& s = labels.shape;
  for_each_sample(field, [&](Index n, Scalar p0, Scalar p1, Scalar p2) {
    out.data[n] = labels.data[s.index(nearest_index(p0, s.d), nearest_index(p1, s.h), nearest_index(p2, s.w))];
  });
  return out;
}

template <typename Scalar>
Volume<Scalar> warp_adjoint(const Volume<Scalar>& grad_out, const DisplacementField<Scalar>& field) {
  require_same_shape(grad_out.shape, field.shape, "warp_adjoint");
  Volume<Scalar> grad(grad_out.shape, grad_out.spacing);
  for_each_sample(field, [&](Index n, Scalar p0, Scalar p1, Scalar p2) {
    const Trilinear<Scalar> tri(grad_out.shape, p0, p1, p2);
    const Scalar g = grad_out.data[n];
    for (int c = 0; c < 8; ++c) grad.data[tri.index[c]] += tri.weight[c] * g;
  });
  return grad;
}

template <typename Scalar>
DisplacementField<Scalar> warp_field_gradient(const Volume<Scalar>& vol, const DisplacementField<Scalar>& field,
                                              const Volume<Scalar>& grad_out) {
  require_same_shape(vol.shape, field.shape, "warp_field_gradient");
  require_same_shape(grad_out.shape, field.shape, "warp_field_gradient");
  DisplacementField<Scalar> grad(field.shape);
  for_each_sample(field, [&](Index n, Scalar p0, Scalar p1, Scalar p2) {
    const Trilinear<Scalar> tri(vol.shape, p0, p1, p2);
    const Scalar g = grad_out.data[n];
    for (int a = 0; a < 3; ++a) {
      if (!tri.active[a]) continue;
      Scalar d = 0;
      for (int c = 0; c < 8; ++c) d += tri.dweight[a][c] * vol.data[tri.index[c]];
      grad.data(n, a) = d * g;
    }
  });
  return grad;
}

template <typename Scalar>
DisplacementField<Scalar> compose(const DisplacementField<Scalar>& outer, const DisplacementField<Scalar>& inner) {
  require_same_shape(outer.shape, inner.shape, "compose");
  DisplacementField<Scalar> out(inner.shape);
  for_each_sample(inner, [&](Index n, Scalar p0, Scalar p1, Scalar p2) {
    const Trilinear<Scalar> tri(inner.shape, p0, p1, p2);
    for (int a = 0; a < 3; ++a) {
      Scalar acc = 0;
      for (int c = 0; c < 8; ++c) acc += tri.weight[c] * outer.data(tri.index[c], a);
      out.data(n, a) = inner.data(n, a) + acc;
    }
  });
  return out;
}

template <typename Scalar>
ComposeGradients<Scalar> compose_backward(const DisplacementField<Scalar>& outer,
                                          const DisplacementField<Scalar>& inner,
                                          const DisplacementField<Scalar>& grad_out) {
  require_same_shape(outer.shape, inner.shape, "compose_backward");
  require_same_shape(grad_out.shape, inner.shape, "compose_backward");
  ComposeGradients<Scalar> g{DisplacementField<Scalar>(outer.shape), grad_out};
  for_each_sample(inner, [&](Index n, Scalar p0, Scalar p1, Scalar p2) {
    const Trilinear<Scalar> tri(inner.shape, p0, p1, p2);
    for (int comp = 0; comp < 3; ++comp) {
      const Scalar go = grad_out.data(n, comp);
      for (int c = 0; c < 8; ++c) g.outer.data(tri.index[c], comp) += tri.weight[c] * go;
      for (int a = 0; a < 3; ++a) {
        if (!tri.active[a]) continue;
        Scalar d = 0;
        for (int c = 0; c < 8; ++c) d += tri.dweight[a][c] * outer.data(tri.index[c], comp);
        g.inner.data(n, a) += d * go;
      }
    }
  });
  return g;
}

template <typename Scalar>
Volume<Scalar> jacobian_determinant(const DisplacementField<Scalar>& field) {
  const Shape3& s = field.shape;
  require_min_dims(s, 3, "jacobian_determinant");
  Volume<Scalar> det(s);
  const std::array<Index, 3> dims = {s.d, s.h, s.w};
  Index n = 0;
  for (Index i = 0; i < s.d; ++i)
    for (Index j = 0; j < s.h; ++j)
      for (Index k = 0; k < s.w; ++k, ++n) {
        const std::array<Index, 3> pos = {i, j, k};
        Eigen::Matrix<Scalar, 3, 3> jac = Eigen::Matrix<Scalar, 3, 3>::Identity();
        for (int a = 0; a < 3; ++a) {
          const Index stride = s.stride(a);
          Index lo = n - stride, hi = n + stride;
          Scalar scale = Scalar(0.5);
          if (pos[a] == 0) {
            lo = n;
            scale = 1;
          } else if (pos[a] == dims[a] - 1) {
            hi = n;
            scale = 1;
          }
          for (int c = 0; c < 3; ++c) jac(c, a) += scale * (field.data(hi, c) - field.data(lo, c));
        }
        det.data[n] = jac.determinant();
      }
  return det;
}

template <typename Scalar>
double folding_ratio(const DisplacementField<Scalar>& field) {
  const Volume<Scalar> det = jacobian_determinant(field);
  return double((det.data <= Scalar(0)).count()) / double(det.data.size());
}

#define FIREWORK_INSTANTIATE_FIELDOPS(S)                                                                 \
  template Volume<S> warp(const Volume<S>&, const DisplacementField<S>&, Interp);                      \
  template LabelVolume warp(const LabelVolume&, const DisplacementField<S>&, Interp);                  \
  template Volume<S> warp_adjoint(const Volume<S>&, const DisplacementField<S>&);                      \
  template DisplacementField<S> warp_field_gradient(const Volume<S>&, const DisplacementField<S>&,     \
                                                    const Volume<S>&);                                 \
  template DisplacementField<S> compose(const DisplacementField<S>&, const DisplacementField<S>&);     \
  template ComposeGradients<S> compose_backward(const DisplacementField<S>&, const DisplacementField<S>&, \
                                                const DisplacementField<S>&);                          \
  template Volume<S> jacobian_determinant(const DisplacementField<S>&);                                \
  template double folding_ratio(const DisplacementField<S>&);

FIREWORK_INSTANTIATE_FIELDOPS(float)
FIREWORK_INSTANTIATE_FIELDOPS(double)

}  // namespace firework
