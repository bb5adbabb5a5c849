#include "firework/data.hpp"

#include "binary_io.hpp"
#include "firework/fieldops.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <stdexcept>

namespace firework {

namespace fs = std::filesystem;

namespace {

const char* kind_name(ValueKind kind) {
  switch (kind) {
    case ValueKind::scalar_real: return "scalar-real";
    case ValueKind::label_integer: return "label-integer";
    case ValueKind::vector_real: return "vector-real";
  }
  return "";
}

ValueKind parse_kind(const std::string& s) {
  if (s == "scalar-real") return ValueKind::scalar_real;
  if (s == "label-integer") return ValueKind::label_integer;
  if (s == "vector-real") return ValueKind::vector_real;
  throw std::runtime_error("volume header: unknown value_kind '" + s + "'");
}

fs::path header_path(const fs::path& p) { return fs::path(volume_stem(p).string() + ".json"); }
fs::path payload_path(const fs::path& p) { return fs::path(volume_stem(p).string() + ".raw"); }

void write_header(const fs::path& path, const VolumeHeader& h) {
  nlohmann::ordered_json j;
  j["version"] = h.version;
  j["shape"] = {h.shape.d, h.shape.h, h.shape.w};
  j["value_kind"] = kind_name(h.value_kind);
  j["components"] = h.components;
  j["spacing"] = {h.spacing[0], h.spacing[1], h.spacing[2]};
  j["byte_order"] = h.byte_order;
  std::ofstream os(header_path(path));
  if (!os) throw std::runtime_error("save_volume: cannot write " + header_path(path).string());
  os << j.dump(2) << "\n";
}

std::ofstream open_payload_for_write(const fs::path& path) {
  std::ofstream os(payload_path(path), std::ios::binary);
  if (!os) throw std::runtime_error("save_volume: cannot write " + payload_path(path).string());
  return os;
}

std::ifstream open_payload(const fs::path& path, const VolumeHeader& h) {
  const fs::path raw = payload_path(path);
  std::error_code ec;
  const auto bytes = fs::file_size(raw, ec);
  if (ec) throw std::runtime_error("load_volume: cannot read " + raw.string());
  if (bytes != h.payload_bytes()) {
    throw std::runtime_error("load_volume: payload size mismatch for " + raw.string() + " (header implies " +
                             std::to_string(h.payload_bytes()) + " bytes, file has " + std::to_string(bytes) + ")");
  }
  std::ifstream is(raw, std::ios::binary);
  if (!is) throw std::runtime_error("load_volume: cannot open " + raw.string());
  return is;
}

VolumeHeader expect_kind(const fs::path& path, ValueKind kind) {
  VolumeHeader h = read_volume_header(path);
  if (h.value_kind != kind) {
    throw std::runtime_error("load_volume: " + header_path(path).string() + " holds " + kind_name(h.value_kind) +
                             ", expected " + kind_name(kind));
  }
  return h;
}

// Separable Gaussian blur with clamp-to-border.
template <typename Scalar>
Eigen::Array<Scalar, Eigen::Dynamic, 1> gaussian_blur(const Eigen::Array<Scalar, Eigen::Dynamic, 1>& x,
                                                      const Shape3& s, double sigma) {
  if (sigma <= 0) return x;
  const Index r = std::max<Index>(1, Index(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(std::size_t(2 * r + 1));
  double norm = 0;
  for (Index i = -r; i <= r; ++i) norm += kernel[std::size_t(i + r)] = std::exp(-0.5 * double(i * i) / (sigma * sigma));
  for (double& k : kernel) k /= norm;

  Eigen::Array<Scalar, Eigen::Dynamic, 1> cur = x, next(x.size());
  for (int a = 0; a < 3; ++a) {
    const Index st = s.stride(a);
    const Index len = s[a];
    for (Index n = 0; n < cur.size(); ++n) {
      const Index pos = (n / st) % len;
      double acc = 0;
      for (Index i = -r; i <= r; ++i) {
        const Index q = std::clamp<Index>(pos + i, 0, len - 1);
        acc += kernel[std::size_t(i + r)] * double(cur[n + (q - pos) * st]);
      }
      next[n] = Scalar(acc);
    }
    std::swap(cur, next);
  }
  return cur;
}

template <typename Array>
Array crop_array(const Array& data, const Shape3& src, const Shape3& target, const char* what) {
  if (target.d < 1 || target.h < 1 || target.w < 1 || target.d > src.d || target.h > src.h || target.w > src.w) {
    throw std::invalid_argument(std::string(what) + ": target " + target.str() + " does not fit in " + src.str());
  }
  const Index o0 = (src.d - target.d) / 2, o1 = (src.h - target.h) / 2, o2 = (src.w - target.w) / 2;
  Array out(target.size());
  Index n = 0;
  for (Index i = 0; i < target.d; ++i)
    for (Index j = 0; j < target.h; ++j)
      for (Index k = 0; k < target.w; ++k, ++n) out[n] = data[src.index(i + o0, j + o1, k + o2)];
  return out;
}

}  // namespace

std::size_t VolumeHeader::payload_bytes() const {
  const std::size_t elem = value_kind == ValueKind::label_integer ? sizeof(std::int16_t) : sizeof(float);
  return std::size_t(shape.size()) * std::size_t(components) * elem;
}

fs::path volume_stem(const fs::path& path) {
  const auto ext = path.extension();
  if (ext == ".json" || ext == ".raw") return fs::path(path).replace_extension();
  return path;
}

VolumeHeader read_volume_header(const fs::path& path) {
  std::ifstream is(header_path(path));
  if (!is) throw std::runtime_error("load_volume: cannot open " + header_path(path).string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_volume: malformed header " + header_path(path).string() + ": " + e.what());
  }
  VolumeHeader h;
  h.version = j.at("version").get<int>();
  if (h.version != kVolumeFormatVersion) {
    throw std::runtime_error("load_volume: unknown format version " + std::to_string(h.version));
  }
  const auto shape = j.at("shape").get<std::vector<Index>>();
  if (shape.size() != 3 || shape[0] < 1 || shape[1] < 1 || shape[2] < 1) {
    throw std::runtime_error("load_volume: invalid shape in " + header_path(path).string());
  }
  h.shape = {shape[0], shape[1], shape[2]};
  h.value_kind = parse_kind(j.at("value_kind").get<std::string>());
  h.components = j.at("components").get<int>();
  if (h.components != (h.value_kind == ValueKind::vector_real ? 3 : 1)) {
    throw std::runtime_error("load_volume: component count does not match value kind");
  }
  const auto sp = j.at("spacing").get<std::vector<double>>();
  if (sp.size() != 3) throw std::runtime_error("load_volume: spacing must have 3 entries");
  h.spacing = Spacing(sp[0], sp[1], sp[2]);
  h.byte_order = j.at("byte_order").get<std::string>();
  if (h.byte_order != "little-endian") throw std::runtime_error("load_volume: unsupported byte order " + h.byte_order);
  return h;
}

template <typename Scalar>
void save_volume(const fs::path& path, const Volume<Scalar>& vol) {
  VolumeHeader h;
  h.shape = vol.shape;
  h.value_kind = ValueKind::scalar_real;
  h.spacing = vol.spacing;
  write_header(path, h);
  const Eigen::ArrayXf values = vol.data.template cast<float>();
  auto os = open_payload_for_write(path);
  detail::write_le(os, values.data(), std::size_t(values.size()));
}

void save_labels(const fs::path& path, const LabelVolume& labels) {
  if ((labels.data < std::numeric_limits<std::int16_t>::min()).any() ||
      (labels.data > std::numeric_limits<std::int16_t>::max()).any()) {
    throw std::invalid_argument("save_labels: label values must fit in 16 bits");
  }
  VolumeHeader h;
  h.shape = labels.shape;
  h.value_kind = ValueKind::label_integer;
  h.spacing = labels.spacing;
  write_header(path, h);
  const Eigen::Array<std::int16_t, Eigen::Dynamic, 1> values = labels.data.cast<std::int16_t>();
  auto os = open_payload_for_write(path);
  detail::write_le(os, values.data(), std::size_t(values.size()));
}

template <typename Scalar>
void save_field(const fs::path& path, const DisplacementField<Scalar>& field, const Spacing& spacing) {
  VolumeHeader h;
  h.shape = field.shape;
  h.value_kind = ValueKind::vector_real;
  h.components = 3;
  h.spacing = spacing;
  write_header(path, h);
  // Column-major storage already is component-major.
  const Eigen::Array<float, Eigen::Dynamic, 3> values = field.data.template cast<float>();
  auto os = open_payload_for_write(path);
  detail::write_le(os, values.data(), std::size_t(values.size()));
}

template <typename Scalar>
Volume<Scalar> load_volume(const fs::path& path) {
  const VolumeHeader h = expect_kind(path, ValueKind::scalar_real);
  auto is = open_payload(path, h);
  Eigen::ArrayXf values(h.shape.size());
  detail::read_le(is, values.data(), std::size_t(values.size()));
  return Volume<Scalar>(h.shape, values.cast<Scalar>(), h.spacing);
}

LabelVolume load_labels(const fs::path& path) {
  const VolumeHeader h = expect_kind(path, ValueKind::label_integer);
  auto is = open_payload(path, h);
  Eigen::Array<std::int16_t, Eigen::Dynamic, 1> values(h.shape.size());
  detail::read_le(is, values.data(), std::size_t(values.size()));
  return LabelVolume(h.shape, values.cast<std::int32_t>(), h.spacing);
}

template <typename Scalar>
DisplacementField<Scalar> load_field(const fs::path& path) {
  const VolumeHeader h = expect_kind(path, ValueKind::vector_real);
  auto is = open_payload(path, h);
  Eigen::Array<float, Eigen::Dynamic, 3> values(h.shape.size(), 3);
  detail::read_le(is, values.data(), std::size_t(values.size()));
  return DisplacementField<Scalar>(h.shape, values.cast<Scalar>());
}

template <typename Scalar>
Volume<Scalar> normalize_intensity(const Volume<Scalar>& vol) {
  if (!vol.data.allFinite()) throw std::invalid_argument("normalize_intensity: non-finite input");
  Volume<Scalar> out(vol.shape, vol.spacing);
  if (vol.data.size() == 0) return out;
  const Scalar lo = vol.data.minCoeff();
  const Scalar hi = vol.data.maxCoeff();
  if (hi > lo) out.data = (vol.data - lo) / (hi - lo);
  return out;
}

template <typename Scalar>
Volume<Scalar> center_crop(const Volume<Scalar>& vol, const Shape3& target) {
  return Volume<Scalar>(target, crop_array(vol.data, vol.shape, target, "center_crop"), vol.spacing);
}

LabelVolume center_crop(const LabelVolume& labels, const Shape3& target) {
  return LabelVolume(target, crop_array(labels.data, labels.shape, target, "center_crop"), labels.spacing);
}

template <typename Scalar>
DisplacementField<Scalar> random_smooth_field(std::uint64_t seed, const Shape3& shape, double amplitude,
                                              double smoothing_sigma) {
  if (!(amplitude >= 0)) throw std::invalid_argument("random_smooth_field: amplitude must be non-negative");
  DisplacementField<Scalar> field(shape);
  if (amplitude == 0 || shape.d < 3 || shape.h < 3 || shape.w < 3) return field;

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  // Blur on a padded grid so the statistics are the same at the border.
  const Index pad = Index(std::ceil(3.0 * std::max(smoothing_sigma, 0.0)));
  const Shape3 padded{shape.d + 2 * pad, shape.h + 2 * pad, shape.w + 2 * pad};
  Eigen::Array<double, Eigen::Dynamic, 3> noise(shape.size(), 3);
  for (int c = 0; c < 3; ++c) {
    Eigen::ArrayXd raw(padded.size());
    for (Index n = 0; n < raw.size(); ++n) raw[n] = normal(rng);
    noise.col(c) = crop_array(gaussian_blur<double>(raw, padded, smoothing_sigma), padded, shape, "random_smooth_field");
  }
  const double max_norm = noise.square().rowwise().sum().sqrt().maxCoeff();
  if (!(max_norm > 0)) return field;

  double amp = amplitude;
  for (int halvings = 0; halvings < 64; ++halvings, amp *= 0.5) {
    field.data = (noise * (amp / max_norm)).template cast<Scalar>();
    if (folding_ratio(field) == 0.0) return field;
  }
  field.data.setZero();
  return field;
}

template <typename Scalar>
SyntheticPair<Scalar> gen_synthetic_pair(std::uint64_t seed, const Shape3& shape, const SyntheticOptions& options) {
  require_min_dims(shape, 3, "gen_synthetic_pair");
  if (options.blobs < 4) throw std::invalid_argument("gen_synthetic_pair: need at least 4 blobs");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  const std::array<double, 3> dims = {double(shape.d), double(shape.h), double(shape.w)};
  LabelVolume labels(shape);
  Eigen::ArrayXd intensity(shape.size());
  for (int attempt = 0;; ++attempt) {
    labels.data.setZero();
    intensity.setConstant(0.1);
    for (int b = 0; b < options.blobs; ++b) {
      std::array<double, 3> center, radius;
      for (int a = 0; a < 3; ++a) {
        center[a] = dims[a] * (0.25 + 0.5 * unit(rng));
        radius[a] = dims[a] * (0.12 + 0.13 * unit(rng));
      }
      const double level = 0.35 + 0.65 * unit(rng);
      Index n = 0;
      for (Index i = 0; i < shape.d; ++i)
        for (Index j = 0; j < shape.h; ++j)
          for (Index k = 0; k < shape.w; ++k, ++n) {
            const double r2 = std::pow((double(i) - center[0]) / radius[0], 2) +
                              std::pow((double(j) - center[1]) / radius[1], 2) +
                              std::pow((double(k) - center[2]) / radius[2], 2);
            if (r2 <= 1.0) {
              labels.data[n] = b + 1;
              intensity[n] = level;
            }
          }
    }
    if (labels.roi_ids().size() >= 4) break;
    if (attempt > 100) throw std::runtime_error("gen_synthetic_pair: could not place 4 regions");
  }

  // Low-frequency texture so the similarity has structure inside regions.
  Eigen::ArrayXd texture(shape.size());
  for (Index n = 0; n < texture.size(); ++n) texture[n] = normal(rng);
  texture = gaussian_blur<double>(texture, shape, 2.0);
  const double tmax = texture.abs().maxCoeff();
  if (tmax > 0) intensity += 0.15 * texture / tmax;
  intensity = gaussian_blur<double>(intensity, shape, 1.0);

  SyntheticPair<Scalar> pair;
  pair.seed = seed;
  const std::uint64_t field_seed = rng();
  pair.gt_field = random_smooth_field<Scalar>(field_seed, shape, options.amplitude, options.smoothing_sigma);

  const Volume<Scalar> base(shape, typename Volume<Scalar>::Array(intensity.cast<Scalar>()));
  const Volume<Scalar> warped = warp(base, pair.gt_field);
  Volume<Scalar> fixed = base, moving = warped;
  for (Index n = 0; n < shape.size(); ++n) fixed.data[n] += Scalar(options.noise_sigma * normal(rng));
  for (Index n = 0; n < shape.size(); ++n) moving.data[n] += Scalar(options.noise_sigma * normal(rng));
  pair.fixed = normalize_intensity(fixed);
  pair.moving = normalize_intensity(moving);
  pair.labels_f = labels;
  pair.labels_m = warp(labels, pair.gt_field, Interp::nearest);
  return pair;
}

template <typename Scalar>
void save_pair(const fs::path& dir, const SyntheticPair<Scalar>& pair) {
  fs::create_directories(dir);
  save_volume(dir / "fixed", pair.fixed);
  save_volume(dir / "moving", pair.moving);
  save_labels(dir / "labels_f", pair.labels_f);
  save_labels(dir / "labels_m", pair.labels_m);
  save_field(dir / "gt_field", pair.gt_field, pair.fixed.spacing);
}

template <typename Scalar>
SyntheticPair<Scalar> load_pair(const fs::path& dir) {
  SyntheticPair<Scalar> p;
  p.fixed = load_volume<Scalar>(dir / "fixed");
  p.moving = load_volume<Scalar>(dir / "moving");
  p.labels_f = load_labels(dir / "labels_f");
  p.labels_m = load_labels(dir / "labels_m");
  if (fs::exists(dir / "gt_field.json")) p.gt_field = load_field<Scalar>(dir / "gt_field");
  return p;
}

std::vector<fs::path> list_pairs(const fs::path& root) {
  const fs::path pairs = root / "pairs";
  if (!fs::is_directory(pairs)) throw std::runtime_error("list_pairs: " + pairs.string() + " is not a directory");
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(pairs))
    if (entry.is_directory()) out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  return out;
}

#define FIREWORK_INSTANTIATE_DATA(S)                                                                        \
  template void save_volume(const fs::path&, const Volume<S>&);                                             \
  template void save_field(const fs::path&, const DisplacementField<S>&, const Spacing&);                   \
  template Volume<S> load_volume(const fs::path&);                                                          \
  template DisplacementField<S> load_field(const fs::path&);                                                \
  template Volume<S> normalize_intensity(const Volume<S>&);                                                 \
  template Volume<S> center_crop(const Volume<S>&, const Shape3&);                                          \
  template DisplacementField<S> random_smooth_field(std::uint64_t, const Shape3&, double, double);          \
  template SyntheticPair<S> gen_synthetic_pair(std::uint64_t, const Shape3&, const SyntheticOptions&);      \
  template void save_pair(const fs::path&, const SyntheticPair<S>&);                                        \
  template SyntheticPair<S> load_pair(const fs::path&);

FIREWORK_INSTANTIATE_DATA(float)
FIREWORK_INSTANTIATE_DATA(double)

}  // namespace firework
