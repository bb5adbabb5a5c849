// Dense grid types shared by every module.
//
// Grids are stored in raster order with the last axis fastest:
// index(i, j, k) = (i * H + j) * W + k for a grid of shape (D, H, W).
// Axis 0 is D, axis 1 is H, axis 2 is W. Displacement component c moves
// a sample along axis c and is measured in voxels of the target grid.

#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <set>
#include <string>

namespace firework {

using Index = Eigen::Index;
using Spacing = Eigen::Vector3d;

struct Shape3 {
  Index d = 0;
  Index h = 0;
  Index w = 0;

  Index size() const { return d * h * w; }
  Index operator[](int axis) const { return axis == 0 ? d : (axis == 1 ? h : w); }
  Index index(Index i, Index j, Index k) const { return (i * h + j) * w + k; }
  // Linear distance between neighbours along `axis`.
  Index stride(int axis) const { return axis == 0 ? h * w : (axis == 1 ? w : 1); }
  bool operator==(const Shape3&) const = default;
  std::string str() const;
};

// Throws std::invalid_argument naming `what` when the shapes differ.
void require_same_shape(const Shape3& a, const Shape3& b, const char* what);
// Throws std::invalid_argument if any dimension is < `min_dim`.
void require_min_dims(const Shape3& s, Index min_dim, const char* what);

template <typename Scalar>
struct Volume {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Shape3 shape;
  Array data;
  Spacing spacing = Spacing::Ones();

  Volume() = default;
  explicit Volume(const Shape3& s, const Spacing& sp = Spacing::Ones())
      : shape(s), data(Array::Zero(s.size())), spacing(sp) {}
  Volume(const Shape3& s, Array values, const Spacing& sp = Spacing::Ones());

  Scalar& operator()(Index i, Index j, Index k) { return data[shape.index(i, j, k)]; }
  Scalar operator()(Index i, Index j, Index k) const { return data[shape.index(i, j, k)]; }

  template <typename Other>
  Volume<Other> cast() const {
    return Volume<Other>(shape, data.template cast<Other>(), spacing);
  }
};

struct LabelVolume {
  using Array = Eigen::Array<std::int32_t, Eigen::Dynamic, 1>;

  Shape3 shape;
  Array data;
  Spacing spacing = Spacing::Ones();

  LabelVolume() = default;
  explicit LabelVolume(const Shape3& s, const Spacing& sp = Spacing::Ones())
      : shape(s), data(Array::Zero(s.size())), spacing(sp) {}
  LabelVolume(const Shape3& s, Array values, const Spacing& sp = Spacing::Ones());

  std::int32_t& operator()(Index i, Index j, Index k) { return data[shape.index(i, j, k)]; }
  std::int32_t operator()(Index i, Index j, Index k) const { return data[shape.index(i, j, k)]; }

  // Positive labels present in the volume. Background is 0.
  std::set<int> roi_ids() const;
};

// A per-voxel vector field; column c of `data` is the displacement along axis c.
template <typename Scalar>
struct DisplacementField {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 3>;

  Shape3 shape;
  Array data;

  DisplacementField() = default;
  explicit DisplacementField(const Shape3& s) : shape(s), data(Array::Zero(s.size(), 3)) {}
  DisplacementField(const Shape3& s, Array values);

  static DisplacementField Constant(const Shape3& s, Scalar u0, Scalar u1, Scalar u2) {
    DisplacementField f(s);
    f.data.col(0).setConstant(u0);
    f.data.col(1).setConstant(u1);
    f.data.col(2).setConstant(u2);
    return f;
  }

  bool all_finite() const { return data.allFinite(); }

  template <typename Other>
  DisplacementField<Other> cast() const {
    return DisplacementField<Other>(shape, data.template cast<Other>());
  }
};

using VolumeF = Volume<float>;
using VolumeD = Volume<double>;
using FieldF = DisplacementField<float>;
using FieldD = DisplacementField<double>;

}  // namespace firework
