// The field refiner network and its parameters.
//
// One small 3D encoder-decoder serves both frameworks. In refinement mode it
// reads six channels (moving, warped moving, fixed, three field components)
// and predicts the error of the input field. In baseline mode it reads two
// channels (warped moving, fixed) and predicts a residual field. The output
// head is zero-initialized, so a fresh network predicts the zero field.

#pragma once

#include "firework/network.hpp"
#include "firework/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace firework {

enum class FrameworkMode { firework, baseline_cascade };

std::string to_string(FrameworkMode mode);
// Accepts "firework", "baseline" and "baseline_cascade".
FrameworkMode parse_framework_mode(const std::string& text);

struct RefinerConfig {
  int base_width = 8;
  int levels = 2;
  int input_channels = 6;
  int output_channels = 3;
  std::uint64_t seed = 0;

  static RefinerConfig for_mode(FrameworkMode mode, std::uint64_t seed = 0);
  // Spatial dims must be multiples of this.
  Index divisor() const { return Index(1) << levels; }
  void validate() const;
  bool operator==(const RefinerConfig&) const = default;
};

struct LayerSpec {
  std::string name;
  int in_channels;
  int out_channels;
  int stride;
  bool activation;
};

// enc0..encL, dec(L-1)..dec0, head.
std::vector<LayerSpec> layer_specs(const RefinerConfig& config);

template <typename Scalar>
struct ParamArray {
  std::string name;
  std::vector<Index> dims;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> value;
};

template <typename Scalar>
struct RefinerParams {
  RefinerConfig config;
  std::vector<ParamArray<Scalar>> arrays;

  Index parameter_count() const;
  // 64-bit FNV-1a over array names, dims and raw values, as 16 hex digits.
  std::string fingerprint() const;
  bool all_finite() const;
  RefinerParams zeros_like() const;

  template <typename Other>
  RefinerParams<Other> cast() const {
    RefinerParams<Other> out;
    out.config = config;
    for (const auto& a : arrays) out.arrays.push_back({a.name, a.dims, a.value.template cast<Other>()});
    return out;
  }
};

// Deterministic in config.seed. Kaiming-normal conv weights, zero biases,
// zero head.
template <typename Scalar>
RefinerParams<Scalar> init_params(const RefinerConfig& config);

// Activations kept by a forward pass for the backward pass.
template <typename Scalar>
struct NetworkCache {
  Tensor<Scalar> input;
  std::vector<Tensor<Scalar>> enc;
  std::vector<Tensor<Scalar>> cat;
  std::vector<Tensor<Scalar>> dec;
};

template <typename Scalar>
Tensor<Scalar> network_forward(const RefinerParams<Scalar>& params, Tensor<Scalar> input,
                               NetworkCache<Scalar>* cache = nullptr);

// Accumulates parameter gradients into `grads` (same layout as params) and
// returns the gradient with respect to the network input.
template <typename Scalar>
Tensor<Scalar> network_backward(const RefinerParams<Scalar>& params, const NetworkCache<Scalar>& cache,
                                const Tensor<Scalar>& grad_output, RefinerParams<Scalar>& grads);

// Predicted error of `field`: f(I_m, I_m o field, I_f, field).
template <typename Scalar>
DisplacementField<Scalar> refine(const RefinerParams<Scalar>& params, const Volume<Scalar>& moving,
                                 const Volume<Scalar>& warped, const Volume<Scalar>& fixed,
                                 const DisplacementField<Scalar>& field, NetworkCache<Scalar>* cache = nullptr);

template <typename Scalar>
struct RefineInputGradients {
  Volume<Scalar> moving;
  Volume<Scalar> warped;
  Volume<Scalar> fixed;
  DisplacementField<Scalar> field;
};

template <typename Scalar>
RefineInputGradients<Scalar> refine_backward(const RefinerParams<Scalar>& params, const NetworkCache<Scalar>& cache,
                                             const DisplacementField<Scalar>& grad_error,
                                             RefinerParams<Scalar>& grads);

// Residual field f(I_m o phi, I_f) of the continuous-deformation cascade.
template <typename Scalar>
DisplacementField<Scalar> baseline_forward(const RefinerParams<Scalar>& params, const Volume<Scalar>& warped,
                                           const Volume<Scalar>& fixed, NetworkCache<Scalar>* cache = nullptr);

template <typename Scalar>
struct BaselineInputGradients {
  Volume<Scalar> warped;
  Volume<Scalar> fixed;
};

template <typename Scalar>
BaselineInputGradients<Scalar> baseline_backward(const RefinerParams<Scalar>& params,
                                                 const NetworkCache<Scalar>& cache,
                                                 const DisplacementField<Scalar>& grad_residual,
                                                 RefinerParams<Scalar>& grads);

// Checkpoint container. Layout:
//   8 bytes   magic "FRWKCKPT"
//   uint32    format version (1), little-endian
//   uint32    header length in bytes, little-endian
//   header    UTF-8 JSON: mode, config, dtype, byte_order and one entry per
//             array with name, dims, offset and count
//   payload   float32 little-endian values of every array, in header order
struct Checkpoint {
  FrameworkMode mode = FrameworkMode::firework;
  RefinerParams<float> params;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace firework
