#pragma once

#include <array>

#include <Eigen/Core>

namespace mriclass::cnn {

using Index = Eigen::Index;

template <class Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <class Scalar>
using RowMatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// (batch, channels, nx, ny, nz), batch-major then channel, x fastest.
template <class Scalar>
struct Tensor5 {
  std::array<Index, 5> shape{0, 0, 0, 0, 0};
  VectorX<Scalar> data;

  Tensor5() = default;
  explicit Tensor5(const std::array<Index, 5>& s)
      : shape(s), data(VectorX<Scalar>::Zero(s[0] * s[1] * s[2] * s[3] * s[4])) {}

  /// Shaped tensor whose contents are left for the caller to fill.
  static Tensor5 uninitialized(const std::array<Index, 5>& s) {
    Tensor5 t;
    t.shape = s;
    t.data.resize(s[0] * s[1] * s[2] * s[3] * s[4]);
    return t;
  }

  Index batch() const { return shape[0]; }
  Index channels() const { return shape[1]; }
  std::array<Index, 3> spatial_dims() const { return {shape[2], shape[3], shape[4]}; }
  Index spatial() const { return shape[2] * shape[3] * shape[4]; }
  Index sample_size() const { return shape[1] * spatial(); }

  Scalar* sample(Index b) { return data.data() + b * sample_size(); }
  const Scalar* sample(Index b) const { return data.data() + b * sample_size(); }

  /// channels x spatial view of one sample.
  Eigen::Map<RowMatrixX<Scalar>> sample_matrix(Index b) { return {sample(b), channels(), spatial()}; }
  Eigen::Map<const RowMatrixX<Scalar>> sample_matrix(Index b) const { return {sample(b), channels(), spatial()}; }
};

}  // namespace mriclass::cnn
