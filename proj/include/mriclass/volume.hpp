#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <Eigen/Core>

namespace mriclass {

using Index = Eigen::Index;

struct Geometry {
  std::array<Index, 3> dims{1, 1, 1};
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};

  Index voxel_count() const { return dims[0] * dims[1] * dims[2]; }
  Index flat_index(Index x, Index y, Index z) const { return x + dims[0] * (y + dims[1] * z); }

  bool operator==(const Geometry&) const = default;
};

/// Scalar field on a regular grid, x-fastest storage, 32-bit samples.
struct Volume {
  Geometry geometry;
  Eigen::VectorXf data;

  static Volume zeros(const Geometry& g) { return {g, Eigen::VectorXf::Zero(g.voxel_count())}; }
  static Volume constant(const Geometry& g, float value) {
    return {g, Eigen::VectorXf::Constant(g.voxel_count(), value)};
  }

  float& at(Index x, Index y, Index z) { return data[geometry.flat_index(x, y, z)]; }
  float at(Index x, Index y, Index z) const { return data[geometry.flat_index(x, y, z)]; }
};

/// Binary voxel selection. Never empty.
class Mask {
 public:
  /// Validates that every sample is exactly 0 or 1 and at least one is 1.
  static Mask from_volume(const Volume& v);
  static Mask full(const Geometry& g);

  const Geometry& geometry() const { return geometry_; }
  /// Flat indices of the 1-voxels, ascending.
  const std::vector<Index>& indices() const { return indices_; }
  Index count() const { return static_cast<Index>(indices_.size()); }
  bool contains(Index flat) const { return inside_[flat] != 0; }
  Volume to_volume() const;

 private:
  Geometry geometry_;
  std::vector<std::uint8_t> inside_;
  std::vector<Index> indices_;
};

struct FeatureVector {
  Eigen::VectorXf values;
  std::vector<Index> voxel_index;
};

Volume read_volume(const std::filesystem::path& header);
void write_volume(const Volume& v, const std::filesystem::path& header);
Mask read_mask(const std::filesystem::path& header);
/// Sibling payload path of a `<name>.json` header.
std::filesystem::path payload_path(const std::filesystem::path& header);

/// Zero mean, unit population variance over the mask; zero outside it.
Volume normalize_in_mask(const Volume& v, const Mask& m);
Volume modulate(const Volume& prob, const Volume& jac_det);
Volume divide_by_icv(const Volume& v, double icv_mm3);
/// Applies the mask, zeroing every voxel outside it.
Volume apply_mask(const Volume& v, const Mask& m);

FeatureVector flatten_masked(const Volume& v, const Mask& m);
/// Inverse of flatten_masked: mask-interior voxels restored, `fill` elsewhere.
template <class Derived>
Volume unflatten(const Eigen::DenseBase<Derived>& values, const Mask& m, float fill = 0.0f);
inline Volume unflatten(const FeatureVector& f, const Mask& m, float fill = 0.0f) {
  return unflatten(f.values, m, fill);
}

void check_finite(const Volume& v);
void check_same_geometry(const Geometry& a, const Geometry& b);
void check_feature_count(Index got, Index expected);

template <class Derived>
Volume unflatten(const Eigen::DenseBase<Derived>& values, const Mask& m, float fill) {
  check_feature_count(values.size(), m.count());
  Volume out = Volume::constant(m.geometry(), fill);
  const auto& idx = m.indices();
  for (std::size_t i = 0; i < idx.size(); ++i) out.data[idx[i]] = static_cast<float>(values[static_cast<Index>(i)]);
  return out;
}

}  // namespace mriclass
