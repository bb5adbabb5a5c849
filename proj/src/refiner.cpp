#include "firework/refiner.hpp"

#include "binary_io.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <stdexcept>

namespace firework {

namespace {

template <typename Scalar>
WeightMatrix<Scalar> weight_of(const RefinerParams<Scalar>& p, std::size_t layer) {
  const auto& a = p.arrays[2 * layer];
  return WeightMatrix<Scalar>(a.value.data(), a.dims[0], a.value.size() / a.dims[0]);
}

template <typename Scalar>
BiasVector<Scalar> bias_of(const RefinerParams<Scalar>& p, std::size_t layer) {
  const auto& a = p.arrays[2 * layer + 1];
  return BiasVector<Scalar>(a.value.data(), a.value.size());
}

template <typename Scalar>
WeightMatrixMut<Scalar> weight_of(RefinerParams<Scalar>& p, std::size_t layer) {
  auto& a = p.arrays[2 * layer];
  return WeightMatrixMut<Scalar>(a.value.data(), a.dims[0], a.value.size() / a.dims[0]);
}

template <typename Scalar>
BiasVectorMut<Scalar> bias_of(RefinerParams<Scalar>& p, std::size_t layer) {
  auto& a = p.arrays[2 * layer + 1];
  return BiasVectorMut<Scalar>(a.value.data(), a.value.size());
}

// Position of each layer in layer_specs() order.
struct LayerIndex {
  int levels;
  std::size_t enc(int l) const { return std::size_t(l); }
  std::size_t dec(int l) const { return std::size_t(levels + 1 + (levels - 1 - l)); }
  std::size_t head() const { return std::size_t(2 * levels + 1); }
};

template <typename Scalar>
void check_divisible(const RefinerConfig& config, const Shape3& s) {
  const Index div = config.divisor();
  if (s.size() == 0 || s.d % div != 0 || s.h % div != 0 || s.w % div != 0) {
    throw std::invalid_argument("refiner: spatial shape " + s.str() + " must be divisible by " + std::to_string(div));
  }
}

template <typename Scalar>
Tensor<Scalar> field_to_error(const Tensor<Scalar>& out, DisplacementField<Scalar>& field) {
  field = DisplacementField<Scalar>(out.shape);
  for (int c = 0; c < 3; ++c) field.data.col(c) = out.data.row(c).transpose().array();
  return out;
}

template <typename Scalar>
Tensor<Scalar> field_grad_tensor(const DisplacementField<Scalar>& grad) {
  Tensor<Scalar> g(3, grad.shape);
  for (int c = 0; c < 3; ++c) g.data.row(c) = grad.data.col(c).transpose().matrix();
  return g;
}

template <typename Scalar>
Volume<Scalar> channel_volume(const Tensor<Scalar>& t, Index c, const Spacing& spacing) {
  return Volume<Scalar>(t.shape, t.data.row(c).transpose().array(), spacing);
}

}  // namespace

std::string to_string(FrameworkMode mode) {
  return mode == FrameworkMode::firework ? "firework" : "baseline_cascade";
}

FrameworkMode parse_framework_mode(const std::string& text) {
  if (text == "firework") return FrameworkMode::firework;
  if (text == "baseline" || text == "baseline_cascade") return FrameworkMode::baseline_cascade;
  throw std::invalid_argument("unknown framework mode '" + text + "'");
}

RefinerConfig RefinerConfig::for_mode(FrameworkMode mode, std::uint64_t seed) {
  RefinerConfig c;
  c.input_channels = mode == FrameworkMode::firework ? 6 : 2;
  c.seed = seed;
  return c;
}

void RefinerConfig::validate() const {
  if (base_width < 1 || levels < 1 || levels > 6) throw std::invalid_argument("RefinerConfig: invalid width or levels");
  if (input_channels != 6 && input_channels != 2) {
    throw std::invalid_argument("RefinerConfig: input_channels must be 6 (firework) or 2 (baseline)");
  }
  if (output_channels != 3) throw std::invalid_argument("RefinerConfig: output_channels must be 3");
}

std::vector<LayerSpec> layer_specs(const RefinerConfig& config) {
  config.validate();
  const int w = config.base_width;
  const int L = config.levels;
  std::vector<LayerSpec> specs;
  specs.push_back({"enc0", config.input_channels, w, 1, true});
  for (int l = 1; l <= L; ++l) specs.push_back({"enc" + std::to_string(l), w << (l - 1), w << l, 2, true});
  for (int l = L - 1; l >= 0; --l) specs.push_back({"dec" + std::to_string(l), (w << (l + 1)) + (w << l), w << l, 1, true});
  specs.push_back({"head", w, config.output_channels, 1, false});
  return specs;
}

template <typename Scalar>
Index RefinerParams<Scalar>::parameter_count() const {
  Index n = 0;
  for (const auto& a : arrays) n += a.value.size();
  return n;
}

template <typename Scalar>
std::string RefinerParams<Scalar>::fingerprint() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, std::size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& a : arrays) {
    mix(a.name.data(), a.name.size());
    for (Index d : a.dims) mix(&d, sizeof(d));
    mix(a.value.data(), sizeof(Scalar) * std::size_t(a.value.size()));
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

template <typename Scalar>
bool RefinerParams<Scalar>::all_finite() const {
  for (const auto& a : arrays)
    if (!a.value.allFinite()) return false;
  return true;
}

template <typename Scalar>
RefinerParams<Scalar> RefinerParams<Scalar>::zeros_like() const {
  RefinerParams<Scalar> z = *this;
  for (auto& a : z.arrays) a.value.setZero();
  return z;
}

template <typename Scalar>
RefinerParams<Scalar> init_params(const RefinerConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  RefinerParams<Scalar> p;
  p.config = config;
  for (const LayerSpec& spec : layer_specs(config)) {
    const Index fan_in = Index(spec.in_channels) * kKernelTaps;
    ParamArray<Scalar> weight{spec.name + ".weight", {spec.out_channels, spec.in_channels, 3, 3, 3},
                              Eigen::Array<Scalar, Eigen::Dynamic, 1>::Zero(spec.out_channels * fan_in)};
    if (spec.activation) {
      const double gain = std::sqrt(2.0 / (1.0 + kLeakySlope * kLeakySlope));
      std::normal_distribution<double> normal(0.0, gain / std::sqrt(double(fan_in)));
      for (Index i = 0; i < weight.value.size(); ++i) weight.value[i] = Scalar(normal(rng));
    }
    p.arrays.push_back(std::move(weight));
    p.arrays.push_back({spec.name + ".bias", {spec.out_channels},
                        Eigen::Array<Scalar, Eigen::Dynamic, 1>::Zero(spec.out_channels)});
  }
  return p;
}

template <typename Scalar>
Tensor<Scalar> network_forward(const RefinerParams<Scalar>& params, Tensor<Scalar> input, NetworkCache<Scalar>* cache) {
  const RefinerConfig& cfg = params.config;
  if (input.channels() != cfg.input_channels) {
    throw std::invalid_argument("network_forward: expected " + std::to_string(cfg.input_channels) +
                                " input channels, got " + std::to_string(input.channels()));
  }
  check_divisible<Scalar>(cfg, input.shape);
  const LayerIndex idx{cfg.levels};
  const int L = cfg.levels;

  std::vector<Tensor<Scalar>> enc(L + 1), cat(L), dec(L);
  enc[0] = conv3d(input, weight_of(params, idx.enc(0)), bias_of(params, idx.enc(0)), 1);
  leaky_relu_inplace(enc[0]);
  for (int l = 1; l <= L; ++l) {
    enc[l] = conv3d(enc[l - 1], weight_of(params, idx.enc(l)), bias_of(params, idx.enc(l)), 2);
    leaky_relu_inplace(enc[l]);
  }
  const Tensor<Scalar>* cur = &enc[L];
  for (int l = L - 1; l >= 0; --l) {
    cat[l] = concat(upsample2(*cur), enc[l]);
    dec[l] = conv3d(cat[l], weight_of(params, idx.dec(l)), bias_of(params, idx.dec(l)), 1);
    leaky_relu_inplace(dec[l]);
    cur = &dec[l];
  }
  Tensor<Scalar> out = conv3d(*cur, weight_of(params, idx.head()), bias_of(params, idx.head()), 1);
  if (cache != nullptr) {
    cache->input = std::move(input);
    cache->enc = std::move(enc);
    cache->cat = std::move(cat);
    cache->dec = std::move(dec);
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> network_backward(const RefinerParams<Scalar>& params, const NetworkCache<Scalar>& cache,
                                const Tensor<Scalar>& grad_output, RefinerParams<Scalar>& grads) {
  const int L = params.config.levels;
  const LayerIndex idx{L};

  std::vector<Tensor<Scalar>> g_enc(L + 1);
  for (int l = 0; l <= L; ++l) g_enc[l] = Tensor<Scalar>(cache.enc[l].channels(), cache.enc[l].shape);

  Tensor<Scalar> g_cur(cache.dec[0].channels(), cache.dec[0].shape);
  conv3d_backward(cache.dec[0], weight_of(params, idx.head()), 1, grad_output, weight_of(grads, idx.head()),
                  bias_of(grads, idx.head()), &g_cur);

  for (int l = 0; l < L; ++l) {
    leaky_relu_backward_inplace(cache.dec[l], g_cur);
    Tensor<Scalar> g_cat(cache.cat[l].channels(), cache.cat[l].shape);
    conv3d_backward(cache.cat[l], weight_of(params, idx.dec(l)), 1, g_cur, weight_of(grads, idx.dec(l)),
                    bias_of(grads, idx.dec(l)), &g_cat);
    const Index skip = cache.enc[l].channels();
    g_enc[l].data += g_cat.data.bottomRows(skip);
    Tensor<Scalar> g_up;
    g_up.shape = g_cat.shape;
    g_up.data = g_cat.data.topRows(g_cat.channels() - skip);
    const Shape3& below = (l + 1 < L) ? cache.dec[l + 1].shape : cache.enc[L].shape;
    g_cur = upsample2_backward(g_up, below);
  }
  g_enc[L].data += g_cur.data;

  for (int l = L; l >= 1; --l) {
    leaky_relu_backward_inplace(cache.enc[l], g_enc[l]);
    conv3d_backward(cache.enc[l - 1], weight_of(params, idx.enc(l)), 2, g_enc[l], weight_of(grads, idx.enc(l)),
                    bias_of(grads, idx.enc(l)), &g_enc[l - 1]);
  }
  leaky_relu_backward_inplace(cache.enc[0], g_enc[0]);
  Tensor<Scalar> g_in(cache.input.channels(), cache.input.shape);
  conv3d_backward(cache.input, weight_of(params, idx.enc(0)), 1, g_enc[0], weight_of(grads, idx.enc(0)),
                  bias_of(grads, idx.enc(0)), &g_in);
  return g_in;
}

template <typename Scalar>
DisplacementField<Scalar> refine(const RefinerParams<Scalar>& params, const Volume<Scalar>& moving,
                                 const Volume<Scalar>& warped, const Volume<Scalar>& fixed,
                                 const DisplacementField<Scalar>& field, NetworkCache<Scalar>* cache) {
  if (params.config.input_channels != 6) throw std::invalid_argument("refine: parameters are not in refinement mode");
  require_same_shape(moving.shape, warped.shape, "refine");
  require_same_shape(moving.shape, fixed.shape, "refine");
  require_same_shape(moving.shape, field.shape, "refine");
  Tensor<Scalar> in(6, moving.shape);
  in.data.row(0) = moving.data.transpose().matrix();
  in.data.row(1) = warped.data.transpose().matrix();
  in.data.row(2) = fixed.data.transpose().matrix();
  for (int c = 0; c < 3; ++c) in.data.row(3 + c) = field.data.col(c).transpose().matrix();
  DisplacementField<Scalar> error;
  field_to_error(network_forward(params, std::move(in), cache), error);
  return error;
}

template <typename Scalar>
RefineInputGradients<Scalar> refine_backward(const RefinerParams<Scalar>& params, const NetworkCache<Scalar>& cache,
                                             const DisplacementField<Scalar>& grad_error,
                                             RefinerParams<Scalar>& grads) {
  const Tensor<Scalar> g_in = network_backward(params, cache, field_grad_tensor(grad_error), grads);
  RefineInputGradients<Scalar> g;
  g.moving = channel_volume(g_in, 0, Spacing::Ones());
  g.warped = channel_volume(g_in, 1, Spacing::Ones());
  g.fixed = channel_volume(g_in, 2, Spacing::Ones());
  g.field = DisplacementField<Scalar>(g_in.shape);
  for (int c = 0; c < 3; ++c) g.field.data.col(c) = g_in.data.row(3 + c).transpose().array();
  return g;
}

template <typename Scalar>
DisplacementField<Scalar> baseline_forward(const RefinerParams<Scalar>& params, const Volume<Scalar>& warped,
                                           const Volume<Scalar>& fixed, NetworkCache<Scalar>* cache) {
  if (params.config.input_channels != 2) {
    throw std::invalid_argument("baseline_forward: parameters are not in baseline mode");
  }
  require_same_shape(warped.shape, fixed.shape, "baseline_forward");
  Tensor<Scalar> in(2, warped.shape);
  in.data.row(0) = warped.data.transpose().matrix();
  in.data.row(1) = fixed.data.transpose().matrix();
  DisplacementField<Scalar> residual;
  field_to_error(network_forward(params, std::move(in), cache), residual);
  return residual;
}

template <typename Scalar>
BaselineInputGradients<Scalar> baseline_backward(const RefinerParams<Scalar>& params,
                                                 const NetworkCache<Scalar>& cache,
                                                 const DisplacementField<Scalar>& grad_residual,
                                                 RefinerParams<Scalar>& grads) {
  const Tensor<Scalar> g_in = network_backward(params, cache, field_grad_tensor(grad_residual), grads);
  return {channel_volume(g_in, 0, Spacing::Ones()), channel_volume(g_in, 1, Spacing::Ones())};
}

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  const RefinerParams<float>& p = checkpoint.params;
  nlohmann::json header;
  header["mode"] = to_string(checkpoint.mode);
  header["dtype"] = "float32";
  header["byte_order"] = "little-endian";
  header["config"] = {{"base_width", p.config.base_width},
                      {"levels", p.config.levels},
                      {"input_channels", p.config.input_channels},
                      {"output_channels", p.config.output_channels},
                      {"seed", p.config.seed}};
  nlohmann::json arrays = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& a : p.arrays) {
    arrays.push_back({{"name", a.name}, {"dims", a.dims}, {"offset", offset}, {"count", a.value.size()}});
    offset += std::uint64_t(a.value.size()) * sizeof(float);
  }
  header["arrays"] = arrays;
  const std::string text = header.dump(2);

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  os.write("FRWKCKPT", 8);
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& a : p.arrays) detail::write_le(os, a.value.data(), std::size_t(a.value.size()));
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (is.gcount() != 8 || std::string(magic, 8) != "FRWKCKPT") {
    throw std::runtime_error("load_checkpoint: " + path + " is not a checkpoint file");
  }
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version));
  }
  const auto len = detail::read_le<std::uint32_t>(is);
  std::string text(len, '\0');
  is.read(text.data(), len);
  if (static_cast<std::uint32_t>(is.gcount()) != len) throw std::runtime_error("load_checkpoint: truncated header");
  const nlohmann::json header = nlohmann::json::parse(text);

  Checkpoint ck;
  ck.mode = parse_framework_mode(header.at("mode").get<std::string>());
  RefinerConfig& cfg = ck.params.config;
  const auto& jc = header.at("config");
  cfg.base_width = jc.at("base_width").get<int>();
  cfg.levels = jc.at("levels").get<int>();
  cfg.input_channels = jc.at("input_channels").get<int>();
  cfg.output_channels = jc.at("output_channels").get<int>();
  cfg.seed = jc.at("seed").get<std::uint64_t>();
  cfg.validate();

  const std::vector<LayerSpec> specs = layer_specs(cfg);
  const auto& arrays = header.at("arrays");
  if (arrays.size() != 2 * specs.size()) throw std::runtime_error("load_checkpoint: array count does not match config");
  for (const auto& ja : arrays) {
    ParamArray<float> a;
    a.name = ja.at("name").get<std::string>();
    a.dims = ja.at("dims").get<std::vector<Index>>();
    a.value.resize(ja.at("count").get<Index>());
    try {
      detail::read_le(is, a.value.data(), std::size_t(a.value.size()));
    } catch (const std::runtime_error&) {
      throw std::runtime_error("load_checkpoint: payload of " + path + " is truncated");
    }
    ck.params.arrays.push_back(std::move(a));
  }
  // Shapes must agree with the architecture implied by the config.
  const RefinerParams<float> expected = init_params<float>(cfg);
  for (std::size_t i = 0; i < expected.arrays.size(); ++i) {
    if (expected.arrays[i].name != ck.params.arrays[i].name || expected.arrays[i].dims != ck.params.arrays[i].dims) {
      throw std::runtime_error("load_checkpoint: array '" + ck.params.arrays[i].name + "' does not match config");
    }
  }
  return ck;
}

#define FIREWORK_INSTANTIATE_REFINER(S)                                                                         \
  template struct RefinerParams<S>;                                                                             \
  template RefinerParams<S> init_params(const RefinerConfig&);                                                  \
  template Tensor<S> network_forward(const RefinerParams<S>&, Tensor<S>, NetworkCache<S>*);                     \
  template Tensor<S> network_backward(const RefinerParams<S>&, const NetworkCache<S>&, const Tensor<S>&,        \
                                      RefinerParams<S>&);                                                       \
  template DisplacementField<S> refine(const RefinerParams<S>&, const Volume<S>&, const Volume<S>&,             \
                                       const Volume<S>&, const DisplacementField<S>&, NetworkCache<S>*);        \
  template RefineInputGradients<S> refine_backward(const RefinerParams<S>&, const NetworkCache<S>&,             \
                                                   const DisplacementField<S>&, RefinerParams<S>&);             \
  template DisplacementField<S> baseline_forward(const RefinerParams<S>&, const Volume<S>&, const Volume<S>&,   \
                                                 NetworkCache<S>*);                                             \
  template BaselineInputGradients<S> baseline_backward(const RefinerParams<S>&, const NetworkCache<S>&,         \
                                                       const DisplacementField<S>&, RefinerParams<S>&);

FIREWORK_INSTANTIATE_REFINER(float)
FIREWORK_INSTANTIATE_REFINER(double)

}  // namespace firework
