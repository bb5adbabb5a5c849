// Volume files, preprocessing and synthetic registration pairs.
//
// A volume on disk is a pair of files sharing a stem: `<stem>.json`, a
// human-readable header, and `<stem>.raw`, the little-endian payload in
// raster order (last axis fastest). Header keys:
//   version     1
//   shape       [D, H, W]
//   value_kind  "scalar-real" (float32), "label-integer" (int16) or
//               "vector-real" (float32, 3 components stored component-major)
//   components  1 or 3
//   spacing     [s0, s1, s2] in mm, one per axis
//   byte_order  "little-endian"

#pragma once

#include "firework/types.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace firework {

enum class ValueKind { scalar_real, label_integer, vector_real };

struct VolumeHeader {
  Shape3 shape;
  ValueKind value_kind = ValueKind::scalar_real;
  int components = 1;
  Spacing spacing = Spacing::Ones();
  std::string byte_order = "little-endian";
  int version = 1;

  std::size_t payload_bytes() const;
};

inline constexpr int kVolumeFormatVersion = 1;

// `path` may be the stem or either of the two file names.
std::filesystem::path volume_stem(const std::filesystem::path& path);

VolumeHeader read_volume_header(const std::filesystem::path& path);

template <typename Scalar>
void save_volume(const std::filesystem::path& path, const Volume<Scalar>& vol);
void save_labels(const std::filesystem::path& path, const LabelVolume& labels);
template <typename Scalar>
void save_field(const std::filesystem::path& path, const DisplacementField<Scalar>& field,
                const Spacing& spacing = Spacing::Ones());

// Loaders throw std::runtime_error on a missing file, an unknown version,
// the wrong value kind, or a payload whose size disagrees with the header.
template <typename Scalar>
Volume<Scalar> load_volume(const std::filesystem::path& path);
LabelVolume load_labels(const std::filesystem::path& path);
template <typename Scalar>
DisplacementField<Scalar> load_field(const std::filesystem::path& path);

// (v - min) / (max - min); a constant volume maps to zeros.
template <typename Scalar>
Volume<Scalar> normalize_intensity(const Volume<Scalar>& vol);

// Symmetric crop; when the margin is odd the extra voxel comes off the high
// side, so a length-5 axis cropped to 2 keeps indices {1, 2}.
template <typename Scalar>
Volume<Scalar> center_crop(const Volume<Scalar>& vol, const Shape3& target);
LabelVolume center_crop(const LabelVolume& labels, const Shape3& target);

// Smoothed white noise rescaled so the largest displacement norm equals
// `amplitude`, then halved until the field has no folded voxels.
template <typename Scalar>
DisplacementField<Scalar> random_smooth_field(std::uint64_t seed, const Shape3& shape, double amplitude,
                                              double smoothing_sigma);

struct SyntheticOptions {
  double amplitude = 3.0;
  double smoothing_sigma = 4.0;
  int blobs = 6;
  double noise_sigma = 0.02;
};

template <typename Scalar>
struct SyntheticPair {
  Volume<Scalar> fixed;
  Volume<Scalar> moving;
  LabelVolume labels_f;
  LabelVolume labels_m;
  // moving = warp(base, gt_field).
  DisplacementField<Scalar> gt_field;
  std::uint64_t seed = 0;
};

template <typename Scalar>
SyntheticPair<Scalar> gen_synthetic_pair(std::uint64_t seed, const Shape3& shape,
                                         const SyntheticOptions& options = {});

// <dir>/{fixed,moving,labels_f,labels_m,gt_field}.{json,raw}
template <typename Scalar>
void save_pair(const std::filesystem::path& dir, const SyntheticPair<Scalar>& pair);
template <typename Scalar>
SyntheticPair<Scalar> load_pair(const std::filesystem::path& dir);

// Pair directories under <root>/pairs, sorted by name.
std::vector<std::filesystem::path> list_pairs(const std::filesystem::path& root);

}  // namespace firework
