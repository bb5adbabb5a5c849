#include "firework/network.hpp"

#include <algorithm>
#include <stdexcept>

namespace firework {

namespace {

// Upper bound on output voxels per GEMM slab.
constexpr Index kSlabVoxels = 4096;

template <typename Scalar>
using Matrix = typename Tensor<Scalar>::Matrix;

struct Slab {
  Index z0, z1, offset, count;
};

template <typename Fn>
void for_each_slab(const Shape3& out, Fn&& fn) {
  const Index slice = out.h * out.w;
  const Index depth = std::max<Index>(1, kSlabVoxels / slice);
  for (Index z0 = 0; z0 < out.d; z0 += depth) {
    const Index z1 = std::min(out.d, z0 + depth);
    fn(Slab{z0, z1, z0 * slice, (z1 - z0) * slice});
  }
}

// Visits every (tap row, slab column, input index) triple; input index is
// -1 for taps that land in the zero padding.
template <typename Fn>
void for_each_tap(const Shape3& in, const Shape3& out, int stride, const Slab& slab, Index channels, Fn&& fn) {
  for (Index c = 0; c < channels; ++c) {
    for (int tz = 0; tz < 3; ++tz)
      for (int ty = 0; ty < 3; ++ty)
        for (int tx = 0; tx < 3; ++tx) {
          const Index row = c * kKernelTaps + (tz * 9 + ty * 3 + tx);
          Index col = 0;
          for (Index oz = slab.z0; oz < slab.z1; ++oz) {
            const Index iz = oz * stride + tz - 1;
            for (Index oy = 0; oy < out.h; ++oy) {
              const Index iy = oy * stride + ty - 1;
              const bool plane_ok = iz >= 0 && iz < in.d && iy >= 0 && iy < in.h;
              const Index base = plane_ok ? (iz * in.h + iy) * in.w : 0;
              for (Index ox = 0; ox < out.w; ++ox, ++col) {
                const Index ix = ox * stride + tx - 1;
                fn(c, row, col, (plane_ok && ix >= 0 && ix < in.w) ? base + ix : Index(-1));
              }
            }
          }
        }
  }
}

template <typename Scalar>
void im2col(const Tensor<Scalar>& in, const Shape3& out, int stride, const Slab& slab, Matrix<Scalar>& cols) {
  cols.resize(in.channels() * kKernelTaps, slab.count);
  for_each_tap(in.shape, out, stride, slab, in.channels(), [&](Index c, Index row, Index col, Index src) {
    cols(row, col) = src >= 0 ? in.data(c, src) : Scalar(0);
  });
}

template <typename Scalar>
void col2im_add(const Matrix<Scalar>& cols, const Shape3& out, int stride, const Slab& slab, Tensor<Scalar>& in) {
  for_each_tap(in.shape, out, stride, slab, in.channels(), [&](Index c, Index row, Index col, Index dst) {
    if (dst >= 0) in.data(c, dst) += cols(row, col);
  });
}

}  // namespace

Shape3 conv_output_shape(const Shape3& in, int stride) {
  if (stride < 1) throw std::invalid_argument("conv3d: stride must be positive");
  return {(in.d + stride - 1) / stride, (in.h + stride - 1) / stride, (in.w + stride - 1) / stride};
}

template <typename Scalar>
Tensor<Scalar> conv3d(const Tensor<Scalar>& in, const WeightMatrix<Scalar>& weight, const BiasVector<Scalar>& bias,
                      int stride) {
  if (weight.cols() != in.channels() * kKernelTaps || bias.size() != weight.rows()) {
    throw std::invalid_argument("conv3d: weight/bias do not match the input channel count");
  }
  const Shape3 os = conv_output_shape(in.shape, stride);
  Tensor<Scalar> out(weight.rows(), os);
  Matrix<Scalar> cols;
  for_each_slab(os, [&](const Slab& slab) {
    im2col(in, os, stride, slab, cols);
    out.data.middleCols(slab.offset, slab.count).noalias() = weight * cols;
  });
  out.data.colwise() += bias;
  return out;
}

template <typename Scalar>
void conv3d_backward(const Tensor<Scalar>& in, const WeightMatrix<Scalar>& weight, int stride,
                     const Tensor<Scalar>& grad_out, WeightMatrixMut<Scalar> grad_weight,
                     BiasVectorMut<Scalar> grad_bias, Tensor<Scalar>* grad_in) {
  const Shape3 os = conv_output_shape(in.shape, stride);
  require_same_shape(grad_out.shape, os, "conv3d_backward");
  if (grad_in != nullptr) require_same_shape(grad_in->shape, in.shape, "conv3d_backward");
  Matrix<Scalar> cols, grad_cols;
  for_each_slab(os, [&](const Slab& slab) {
    const auto g = grad_out.data.middleCols(slab.offset, slab.count);
    im2col(in, os, stride, slab, cols);
    grad_weight.noalias() += g * cols.transpose();
    if (grad_in != nullptr) {
      grad_cols.noalias() = weight.transpose() * g;
      col2im_add(grad_cols, os, stride, slab, *grad_in);
    }
  });
  grad_bias += grad_out.data.rowwise().sum();
}

template <typename Scalar>
void leaky_relu_inplace(Tensor<Scalar>& t) {
  t.data = t.data.unaryExpr([](Scalar v) { return v > Scalar(0) ? v : Scalar(kLeakySlope) * v; });
}

template <typename Scalar>
void leaky_relu_backward_inplace(const Tensor<Scalar>& out, Tensor<Scalar>& grad) {
  grad.data = grad.data.binaryExpr(out.data, [](Scalar g, Scalar y) { return y > Scalar(0) ? g : Scalar(kLeakySlope) * g; });
}

template <typename Scalar>
Tensor<Scalar> upsample2(const Tensor<Scalar>& in) {
  const Shape3& s = in.shape;
  const Shape3 os{2 * s.d, 2 * s.h, 2 * s.w};
  Tensor<Scalar> out(in.channels(), os);
  for (Index c = 0; c < in.channels(); ++c) {
    Index n = 0;
    for (Index i = 0; i < os.d; ++i)
      for (Index j = 0; j < os.h; ++j)
        for (Index k = 0; k < os.w; ++k, ++n) out.data(c, n) = in.data(c, s.index(i / 2, j / 2, k / 2));
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> upsample2_backward(const Tensor<Scalar>& grad_out, const Shape3& in_shape) {
  const Shape3 os{2 * in_shape.d, 2 * in_shape.h, 2 * in_shape.w};
  require_same_shape(grad_out.shape, os, "upsample2_backward");
  Tensor<Scalar> grad(grad_out.channels(), in_shape);
  for (Index c = 0; c < grad.channels(); ++c) {
    Index n = 0;
    for (Index i = 0; i < os.d; ++i)
      for (Index j = 0; j < os.h; ++j)
        for (Index k = 0; k < os.w; ++k, ++n) grad.data(c, in_shape.index(i / 2, j / 2, k / 2)) += grad_out.data(c, n);
  }
  return grad;
}

template <typename Scalar>
Tensor<Scalar> concat(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_shape(a.shape, b.shape, "concat");
  Tensor<Scalar> out(a.channels() + b.channels(), a.shape);
  out.data.topRows(a.channels()) = a.data;
  out.data.bottomRows(b.channels()) = b.data;
  return out;
}

#define FIREWORK_INSTANTIATE_NETWORK(S)                                                                      \
  template struct Tensor<S>;                                                                                 \
  template Tensor<S> conv3d(const Tensor<S>&, const WeightMatrix<S>&, const BiasVector<S>&, int);            \
  template void conv3d_backward(const Tensor<S>&, const WeightMatrix<S>&, int, const Tensor<S>&,             \
                                WeightMatrixMut<S>, BiasVectorMut<S>, Tensor<S>*);                           \
  template void leaky_relu_inplace(Tensor<S>&);                                                              \
  template void leaky_relu_backward_inplace(const Tensor<S>&, Tensor<S>&);                                   \
  template Tensor<S> upsample2(const Tensor<S>&);                                                            \
  template Tensor<S> upsample2_backward(const Tensor<S>&, const Shape3&);                                    \
  template Tensor<S> concat(const Tensor<S>&, const Tensor<S>&);

FIREWORK_INSTANTIATE_NETWORK(float)
FIREWORK_INSTANTIATE_NETWORK(double)

}  // namespace firework
