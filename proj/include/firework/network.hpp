// Dense 3D tensor layers with hand-written backward passes.
//
// A Tensor holds C channels over a Shape3 grid as a row-major C x N
// matrix, so each channel is one contiguous row. Convolutions are 3x3x3
// with zero padding 1 and run as im2col + GEMM over slabs of output slices.

#pragma once

#include "firework/types.hpp"

namespace firework {

template <typename Scalar>
struct Tensor {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Shape3 shape;
  Matrix data;

  Tensor() = default;
  Tensor(Index channels, const Shape3& s) : shape(s), data(Matrix::Zero(channels, s.size())) {}

  Index channels() const { return data.rows(); }
};

template <typename Scalar>
using WeightMatrix = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename Scalar>
using WeightMatrixMut = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename Scalar>
using BiasVector = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;
template <typename Scalar>
using BiasVectorMut = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;

inline constexpr int kKernelTaps = 27;
inline constexpr double kLeakySlope = 0.2;

// Output shape of a padded 3x3x3 convolution with the given stride.
Shape3 conv_output_shape(const Shape3& in, int stride);

// weight is Cout x (Cin * 27), tap order (cin, dz, dy, dx).
template <typename Scalar>
Tensor<Scalar> conv3d(const Tensor<Scalar>& in, const WeightMatrix<Scalar>& weight, const BiasVector<Scalar>& bias,
                      int stride);

// Accumulates into grad_weight / grad_bias. grad_in may be null; when not
// null it is accumulated into as well and must already have the input shape.
template <typename Scalar>
void conv3d_backward(const Tensor<Scalar>& in, const WeightMatrix<Scalar>& weight, int stride,
                     const Tensor<Scalar>& grad_out, WeightMatrixMut<Scalar> grad_weight,
                     BiasVectorMut<Scalar> grad_bias, Tensor<Scalar>* grad_in);

template <typename Scalar>
void leaky_relu_inplace(Tensor<Scalar>& t);

// Uses the activation output: its sign equals the sign of the input.
template <typename Scalar>
void leaky_relu_backward_inplace(const Tensor<Scalar>& out, Tensor<Scalar>& grad);

// Nearest-neighbour x2 upsampling.
template <typename Scalar>
Tensor<Scalar> upsample2(const Tensor<Scalar>& in);

template <typename Scalar>
Tensor<Scalar> upsample2_backward(const Tensor<Scalar>& grad_out, const Shape3& in_shape);

// Channel-wise concatenation [a; b].
template <typename Scalar>
Tensor<Scalar> concat(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

}  // namespace firework
