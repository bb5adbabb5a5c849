#include "firework/losses.hpp"

#include "firework/fieldops.hpp"

#include <algorithm>
#include <stdexcept>

namespace firework {

namespace {

template <typename Scalar>
using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

// Sum over a cubic window of radius r, clipped at the border. Separable.
template <typename Scalar>
Array<Scalar> box_sum(const Array<Scalar>& x, const Shape3& s, Index r) {
  Array<Scalar> cur = x;
  Array<Scalar> next(x.size());
  for (int a = 0; a < 3; ++a) {
    const Index st = s.stride(a);
    const Index len = s[a];
    for (Index n = 0; n < cur.size(); ++n) {
      const Index pos = (n / st) % len;
      const Index lo = n - std::min(r, pos) * st;
      const Index hi = n + std::min(r, len - 1 - pos) * st;
      Scalar acc = 0;
      for (Index m = lo; m <= hi; m += st) acc += cur[m];
      next[n] = acc;
    }
    std::swap(cur, next);
  }
  return cur;
}

void check_window(int window) {
  if (window < 1 || window % 2 == 0) {
    throw std::invalid_argument("local_ncc: window must be a positive odd integer, got " + std::to_string(window));
  }
}

template <typename Scalar>
struct NccStats {
  Array<Scalar> count, sa, sb, saa, sbb, sab;
  Array<Scalar> cross, var_a, var_b, denom;
};

template <typename Scalar>
NccStats<Scalar> ncc_stats(const Volume<Scalar>& a, const Volume<Scalar>& b, int window) {
  require_same_shape(a.shape, b.shape, "local_ncc");
  check_window(window);
  const Index r = window / 2;
  const Shape3& s = a.shape;
  NccStats<Scalar> st;
  st.count = box_sum<Scalar>(Array<Scalar>::Ones(s.size()), s, r);
  st.sa = box_sum<Scalar>(a.data, s, r);
  st.sb = box_sum<Scalar>(b.data, s, r);
  st.saa = box_sum<Scalar>(a.data * a.data, s, r);
  st.sbb = box_sum<Scalar>(b.data * b.data, s, r);
  st.sab = box_sum<Scalar>(a.data * b.data, s, r);
  st.cross = st.sab - st.sa * st.sb / st.count;
  st.var_a = st.saa - st.sa * st.sa / st.count;
  st.var_b = st.sbb - st.sb * st.sb / st.count;
  st.denom = st.var_a * st.var_b + Scalar(kNccEpsilon);
  return st;
}

}  // namespace

template <typename Scalar>
Scalar local_ncc(const Volume<Scalar>& a, const Volume<Scalar>& b, int window) {
  const NccStats<Scalar> st = ncc_stats(a, b, window);
  return -(st.cross * st.cross / st.denom).mean();
}

template <typename Scalar>
NccGradient<Scalar> local_ncc_gradient(const Volume<Scalar>& a, const Volume<Scalar>& b, int window) {
  const NccStats<Scalar> st = ncc_stats(a, b, window);
  const Shape3& s = a.shape;
  const Index r = window / 2;
  const Scalar g = Scalar(-1) / Scalar(s.size());

  const Array<Scalar> d_cross = g * Scalar(2) * st.cross / st.denom;
  const Array<Scalar> cc_over_denom = st.cross * st.cross / (st.denom * st.denom);
  const Array<Scalar> d_var_a = -g * cc_over_denom * st.var_b;
  const Array<Scalar> d_var_b = -g * cc_over_denom * st.var_a;

  const Array<Scalar> g_sab = d_cross;
  const Array<Scalar> g_sa = -(d_cross * st.sb + Scalar(2) * d_var_a * st.sa) / st.count;
  const Array<Scalar> g_sb = -(d_cross * st.sa + Scalar(2) * d_var_b * st.sb) / st.count;

  // A clipped box window is symmetric, so the box sum is its own adjoint.
  const Array<Scalar> bsab = box_sum<Scalar>(g_sab, s, r);
  NccGradient<Scalar> out;
  out.value = -(st.cross * st.cross / st.denom).mean();
  out.grad_a = Volume<Scalar>(
      s, box_sum<Scalar>(g_sa, s, r) + Scalar(2) * a.data * box_sum<Scalar>(d_var_a, s, r) + b.data * bsab,
      a.spacing);
  out.grad_b = Volume<Scalar>(
      s, box_sum<Scalar>(g_sb, s, r) + Scalar(2) * b.data * box_sum<Scalar>(d_var_b, s, r) + a.data * bsab,
      b.spacing);
  return out;
}

template <typename Scalar>
Scalar grad_penalty(const DisplacementField<Scalar>& field) {
  const Shape3& s = field.shape;
  require_min_dims(s, 2, "grad_penalty");
  Scalar total = 0;
  for (int a = 0; a < 3; ++a) {
    const Index st = s.stride(a);
    const Index len = s[a];
    Scalar acc = 0;
    Index pairs = 0;
    for (Index n = 0; n < s.size(); ++n) {
      if ((n / st) % len == len - 1) continue;
      acc += (field.data.row(n + st) - field.data.row(n)).square().sum();
      ++pairs;
    }
    total += acc / Scalar(3 * pairs);
  }
  return total / Scalar(3);
}

template <typename Scalar>
DisplacementField<Scalar> grad_penalty_gradient(const DisplacementField<Scalar>& field) {
  const Shape3& s = field.shape;
  require_min_dims(s, 2, "grad_penalty");
  DisplacementField<Scalar> grad(s);
  for (int a = 0; a < 3; ++a) {
    const Index st = s.stride(a);
    const Index len = s[a];
    const Index pairs = s.size() / len * (len - 1);
    const Scalar scale = Scalar(2) / Scalar(9 * pairs);
    for (Index n = 0; n < s.size(); ++n) {
      if ((n / st) % len == len - 1) continue;
      const Eigen::Array<Scalar, 1, 3> d = scale * (field.data.row(n + st) - field.data.row(n));
      grad.data.row(n + st) += d;
      grad.data.row(n) -= d;
    }
  }
  return grad;
}

template <typename Scalar>
bool LossParts<Scalar>::all_finite() const {
  return std::isfinite(sim1) && std::isfinite(reg1) && std::isfinite(sim2) && std::isfinite(reg2) &&
         std::isfinite(total);
}

template <typename Scalar>
LossParts<Scalar> firework_loss(const Volume<Scalar>& moving, const Volume<Scalar>& fixed,
                                const DisplacementField<Scalar>& phi1, const DisplacementField<Scalar>& phi2,
                                Scalar lambda, int window) {
  if (!(lambda >= 0)) throw std::invalid_argument("firework_loss: lambda must be non-negative");
  require_same_shape(moving.shape, fixed.shape, "firework_loss");
  LossParts<Scalar> p;
  p.lambda = lambda;
  p.sim1 = local_ncc(warp(moving, phi1), fixed, window);
  p.reg1 = grad_penalty(phi1);
  p.sim2 = local_ncc(warp(moving, phi2), fixed, window);
  p.reg2 = grad_penalty(phi2);
  p.total = p.sim1 + lambda * p.reg1 + p.sim2 + lambda * p.reg2;
  return p;
}

template <typename Scalar>
FireworkLossGradient<Scalar> firework_loss_gradient(const Volume<Scalar>& moving, const Volume<Scalar>& fixed,
                                                    const DisplacementField<Scalar>& phi1,
                                                    const DisplacementField<Scalar>& phi2, Scalar lambda,
                                                    int window) {
  if (!(lambda >= 0)) throw std::invalid_argument("firework_loss: lambda must be non-negative");
  require_same_shape(moving.shape, fixed.shape, "firework_loss");
  FireworkLossGradient<Scalar> out;
  LossParts<Scalar>& p = out.parts;
  p.lambda = lambda;

  out.warped1 = warp(moving, phi1);
  out.warped2 = warp(moving, phi2);
  const NccGradient<Scalar> n1 = local_ncc_gradient(out.warped1, fixed, window);
  const NccGradient<Scalar> n2 = local_ncc_gradient(out.warped2, fixed, window);
  p.sim1 = n1.value;
  p.sim2 = n2.value;
  p.reg1 = grad_penalty(phi1);
  p.reg2 = grad_penalty(phi2);
  p.total = p.sim1 + lambda * p.reg1 + p.sim2 + lambda * p.reg2;

  out.grad_phi1 = warp_field_gradient(moving, phi1, n1.grad_a);
  out.grad_phi1.data += lambda * grad_penalty_gradient(phi1).data;
  out.grad_phi2 = warp_field_gradient(moving, phi2, n2.grad_a);
  out.grad_phi2.data += lambda * grad_penalty_gradient(phi2).data;
  return out;
}

#define FIREWORK_INSTANTIATE_LOSSES(S)                                                                     \
  template S local_ncc(const Volume<S>&, const Volume<S>&, int);                                           \
  template NccGradient<S> local_ncc_gradient(const Volume<S>&, const Volume<S>&, int);                     \
  template S grad_penalty(const DisplacementField<S>&);                                                    \
  template DisplacementField<S> grad_penalty_gradient(const DisplacementField<S>&);                        \
  template struct LossParts<S>;                                                                            \
  template LossParts<S> firework_loss(const Volume<S>&, const Volume<S>&, const DisplacementField<S>&,     \
                                      const DisplacementField<S>&, S, int);                                \
  template FireworkLossGradient<S> firework_loss_gradient(const Volume<S>&, const Volume<S>&,              \
                                                          const DisplacementField<S>&,                     \
                                                          const DisplacementField<S>&, S, int);

FIREWORK_INSTANTIATE_LOSSES(float)
FIREWORK_INSTANTIATE_LOSSES(double)

}  // namespace firework
