#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "mriclass/cnn/tensor.hpp"
#include "mriclass/error.hpp"
#include "mriclass/rng.hpp"

namespace mriclass::cnn {

enum class Mode { Train, Inference };
enum class GradientRule { Plain, Guided };

inline constexpr Index kTaps = 27;

inline Index conv_out_dim(Index n, int stride) { return (n + stride - 1) / stride; }

// ---------------------------------------------------------------------------
// 3x3x3 convolution, "same" zero padding, stride 1 or 2.
//
// Kernels are stored (out, in*27) row-major; column c*27 + dz*9 + dy*3 + dx
// holds the tap applied to in[c, s*x + dx - 1, s*y + dy - 1, s*z + dz - 1].
// ---------------------------------------------------------------------------

/// Output x range [lo, hi) whose tap dx lands inside the input.
inline std::pair<Index, Index> valid_x_range(Index dx, int stride, Index nx, Index ox_n) {
  const Index lo = dx == 0 ? 1 : 0;
  const Index hi = nx < dx ? 0 : std::min(ox_n, (nx - dx) / stride + 1);
  return {lo, std::max(lo, hi)};
}

/// Unfolds one sample (channels x spatial) into a (channels*27) x out_spatial
/// patch matrix.
template <class Scalar>
void im2col(const Scalar* in, Index channels, const std::array<Index, 3>& dims, int stride,
            const std::array<Index, 3>& odims, RowMatrixX<Scalar>& cols) {
  const Index nx = dims[0], ny = dims[1], nz = dims[2];
  const Index ox_n = odims[0], oy_n = odims[1], oz_n = odims[2];
  const Index spatial = nx * ny * nz;
  cols.resize(channels * kTaps, ox_n * oy_n * oz_n);
  for (Index c = 0; c < channels; ++c) {
    const Scalar* src = in + c * spatial;
    for (Index dz = 0; dz < 3; ++dz)
      for (Index dy = 0; dy < 3; ++dy)
        for (Index dx = 0; dx < 3; ++dx) {
          const auto [lo, hi] = valid_x_range(dx, stride, nx, ox_n);
          Scalar* dst = cols.row(c * kTaps + dz * 9 + dy * 3 + dx).data();
          for (Index oz = 0; oz < oz_n; ++oz) {
            const Index iz = stride * oz + dz - 1;
            for (Index oy = 0; oy < oy_n; ++oy) {
              const Index iy = stride * oy + dy - 1;
              Scalar* row = dst + (oz * oy_n + oy) * ox_n;
              if (iz < 0 || iz >= nz || iy < 0 || iy >= ny) {
                std::fill(row, row + ox_n, Scalar(0));
                continue;
              }
              const Scalar* line = src + (iz * ny + iy) * nx + dx - 1;
              if (lo > 0) row[0] = Scalar(0);
              if (stride == 1)
                for (Index ox = lo; ox < hi; ++ox) row[ox] = line[ox];
              else
                for (Index ox = lo; ox < hi; ++ox) row[ox] = line[2 * ox];
              for (Index ox = hi; ox < ox_n; ++ox) row[ox] = Scalar(0);
            }
          }
        }
  }
}

/// Adjoint of im2col: scatters patch gradients back onto the sample.
template <class Scalar>
void col2im_add(const RowMatrixX<Scalar>& cols, Index channels, const std::array<Index, 3>& dims, int stride,
                const std::array<Index, 3>& odims, Scalar* out) {
  const Index nx = dims[0], ny = dims[1], nz = dims[2];
  const Index ox_n = odims[0], oy_n = odims[1], oz_n = odims[2];
  const Index spatial = nx * ny * nz;
  for (Index c = 0; c < channels; ++c) {
    Scalar* dst = out + c * spatial;
    for (Index dz = 0; dz < 3; ++dz)
      for (Index dy = 0; dy < 3; ++dy)
        for (Index dx = 0; dx < 3; ++dx) {
          const auto [lo, hi] = valid_x_range(dx, stride, nx, ox_n);
          const Scalar* src = cols.row(c * kTaps + dz * 9 + dy * 3 + dx).data();
          for (Index oz = 0; oz < oz_n; ++oz) {
            const Index iz = stride * oz + dz - 1;
            if (iz < 0 || iz >= nz) continue;
            for (Index oy = 0; oy < oy_n; ++oy) {
              const Index iy = stride * oy + dy - 1;
              if (iy < 0 || iy >= ny) continue;
              const Scalar* row = src + (oz * oy_n + oy) * ox_n;
              Scalar* line = dst + (iz * ny + iy) * nx + dx - 1;
              if (stride == 1)
                for (Index ox = lo; ox < hi; ++ox) line[ox] += row[ox];
              else
                for (Index ox = lo; ox < hi; ++ox) line[2 * ox] += row[ox];
            }
          }
        }
  }
}

template <class Scalar>
void check_conv_shapes(const Tensor5<Scalar>& in, const RowMatrixX<Scalar>& kernels, const VectorX<Scalar>& bias,
                       int stride) {
  require(stride == 1 || stride == 2, Errc::ShapeMismatch, "stride must be 1 or 2");
  require(kernels.cols() == in.channels() * kTaps, Errc::ShapeMismatch,
          "kernel expects " + std::to_string(kernels.cols() / kTaps) + " input channels, got " +
              std::to_string(in.channels()));
  require(bias.size() == kernels.rows(), Errc::ShapeMismatch, "bias length differs from output channels");
}

template <class Scalar>
Tensor5<Scalar> conv3d(const Tensor5<Scalar>& in, const RowMatrixX<Scalar>& kernels, const VectorX<Scalar>& bias,
                       int stride, std::vector<RowMatrixX<Scalar>>* cols_out = nullptr) {
  check_conv_shapes(in, kernels, bias, stride);
  const auto dims = in.spatial_dims();
  const std::array<Index, 3> odims{conv_out_dim(dims[0], stride), conv_out_dim(dims[1], stride),
                                   conv_out_dim(dims[2], stride)};
  auto out = Tensor5<Scalar>::uninitialized({in.batch(), kernels.rows(), odims[0], odims[1], odims[2]});
  RowMatrixX<Scalar> local;
  if (cols_out) cols_out->resize(static_cast<std::size_t>(in.batch()));
  for (Index b = 0; b < in.batch(); ++b) {
    RowMatrixX<Scalar>& cols = cols_out ? (*cols_out)[static_cast<std::size_t>(b)] : local;
    im2col(in.sample(b), in.channels(), dims, stride, odims, cols);
    auto o = out.sample_matrix(b);
    o.noalias() = kernels * cols;
    o.colwise() += bias;
  }
  return out;
}

template <class Scalar>
struct ConvGradients {
  RowMatrixX<Scalar> kernels;
  VectorX<Scalar> bias;
};

/// Reverse pass of conv3d. Parameter gradients are accumulated into `grads`
/// (sized on first use); returns the input gradient when `want_input`.
/// `cached_cols` may hold the forward pass's per-sample patch matrices.
template <class Scalar>
Tensor5<Scalar> conv3d_backward(const Tensor5<Scalar>& grad_out, const Tensor5<Scalar>& in,
                                const RowMatrixX<Scalar>& kernels, int stride, ConvGradients<Scalar>& grads,
                                bool want_input = true,
                                const std::vector<RowMatrixX<Scalar>>* cached_cols = nullptr) {
  require(stride == 1 || stride == 2, Errc::ShapeMismatch, "stride must be 1 or 2");
  const auto dims = in.spatial_dims();
  const std::array<Index, 3> odims{conv_out_dim(dims[0], stride), conv_out_dim(dims[1], stride),
                                   conv_out_dim(dims[2], stride)};
  require(kernels.cols() == in.channels() * kTaps && grad_out.channels() == kernels.rows() &&
              grad_out.batch() == in.batch() && grad_out.spatial_dims() == odims,
          Errc::ShapeMismatch, "conv3d_backward shapes disagree with forward");
  if (grads.kernels.rows() != kernels.rows() || grads.kernels.cols() != kernels.cols()) {
    grads.kernels = RowMatrixX<Scalar>::Zero(kernels.rows(), kernels.cols());
    grads.bias = VectorX<Scalar>::Zero(kernels.rows());
  }

  Tensor5<Scalar> grad_in;
  if (want_input) grad_in = Tensor5<Scalar>(in.shape);
  const bool cached = cached_cols && static_cast<Index>(cached_cols->size()) == in.batch();
  RowMatrixX<Scalar> local, grad_cols;
  for (Index b = 0; b < in.batch(); ++b) {
    const auto go = grad_out.sample_matrix(b);
    if (!cached) im2col(in.sample(b), in.channels(), dims, stride, odims, local);
    const RowMatrixX<Scalar>& cols = cached ? (*cached_cols)[static_cast<std::size_t>(b)] : local;
    grads.kernels.noalias() += go * cols.transpose();
    grads.bias += go.rowwise().sum();
    if (want_input) {
      grad_cols.noalias() = kernels.transpose() * go;
      col2im_add(grad_cols, in.channels(), dims, stride, odims, grad_in.sample(b));
    }
  }
  return grad_in;
}

// ---------------------------------------------------------------------------
// Batch normalization over (batch, spatial) per channel.
// ---------------------------------------------------------------------------

struct BatchNormSettings {
  double epsilon = 1e-5;
  double momentum = 0.99;
};

template <class Scalar>
struct BatchNormCache {
  Tensor5<Scalar> xhat;
  Eigen::VectorXd inv_std;
};

/// Training mode normalizes with batch moments and folds them into the
/// running statistics; inference mode uses the running statistics.
template <class Scalar>
Tensor5<Scalar> batchnorm(const Tensor5<Scalar>& x, const VectorX<Scalar>& scale, const VectorX<Scalar>& shift,
                          VectorX<Scalar>& running_mean, VectorX<Scalar>& running_var, Mode mode,
                          const BatchNormSettings& settings = {}, BatchNormCache<Scalar>* cache = nullptr) {
  const Index C = x.channels(), S = x.spatial(), B = x.batch();
  require(scale.size() == C && shift.size() == C && running_mean.size() == C && running_var.size() == C,
          Errc::ShapeMismatch, "batchnorm parameter length differs from channel count");
  Eigen::VectorXd mean(C), inv_std(C);
  if (mode == Mode::Train) {
    const Index count = B * S;
    if (count < 2) fail(Errc::DegenerateBatch, "batch normalization needs at least 2 values per channel");
    for (Index c = 0; c < C; ++c) {
      double sum = 0.0;
      for (Index b = 0; b < B; ++b) sum += x.sample_matrix(b).row(c).template cast<double>().sum();
      const double m = sum / static_cast<double>(count);
      double ss = 0.0;
      for (Index b = 0; b < B; ++b) ss += (x.sample_matrix(b).row(c).template cast<double>().array() - m).square().sum();
      const double var = ss / static_cast<double>(count);
      mean[c] = m;
      inv_std[c] = 1.0 / std::sqrt(var + settings.epsilon);
      running_mean[c] = static_cast<Scalar>(settings.momentum * running_mean[c] + (1.0 - settings.momentum) * m);
      running_var[c] = static_cast<Scalar>(settings.momentum * running_var[c] + (1.0 - settings.momentum) * var);
    }
  } else {
    mean = running_mean.template cast<double>();
    inv_std = (running_var.template cast<double>().array() + settings.epsilon).rsqrt();
  }

  auto out = Tensor5<Scalar>::uninitialized(x.shape);
  Tensor5<Scalar> xhat;
  if (cache) xhat = Tensor5<Scalar>::uninitialized(x.shape);
  for (Index b = 0; b < B; ++b) {
    for (Index c = 0; c < C; ++c) {
      const Scalar m = static_cast<Scalar>(mean[c]);
      const Scalar is = static_cast<Scalar>(inv_std[c]);
      auto xin = x.sample_matrix(b).row(c).array();
      if (cache) {
        auto xh = xhat.sample_matrix(b).row(c).array();
        xh = (xin - m) * is;
        out.sample_matrix(b).row(c).array() = scale[c] * xh + shift[c];
      } else {
        out.sample_matrix(b).row(c).array() = scale[c] * ((xin - m) * is) + shift[c];
      }
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = inv_std;
  }
  return out;
}

template <class Scalar>
struct BatchNormGradients {
  VectorX<Scalar> scale;
  VectorX<Scalar> shift;
};

template <class Scalar>
Tensor5<Scalar> batchnorm_backward(const Tensor5<Scalar>& dy, const BatchNormCache<Scalar>& cache,
                                   const VectorX<Scalar>& scale, Mode mode, BatchNormGradients<Scalar>& grads) {
  const Index C = dy.channels(), B = dy.batch();
  require(dy.shape == cache.xhat.shape, Errc::ShapeMismatch, "batchnorm_backward shape mismatch");
  if (grads.scale.size() != C) {
    grads.scale = VectorX<Scalar>::Zero(C);
    grads.shift = VectorX<Scalar>::Zero(C);
  }
  const double count = static_cast<double>(B * dy.spatial());
  auto dx = Tensor5<Scalar>::uninitialized(dy.shape);
  for (Index c = 0; c < C; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (Index b = 0; b < B; ++b) {
      auto g = dy.sample_matrix(b).row(c).template cast<double>().array();
      auto xh = cache.xhat.sample_matrix(b).row(c).template cast<double>().array();
      sum_dy += g.sum();
      sum_dy_xhat += (g * xh).sum();
    }
    grads.scale[c] += static_cast<Scalar>(sum_dy_xhat);
    grads.shift[c] += static_cast<Scalar>(sum_dy);
    const double gamma = static_cast<double>(scale[c]);
    const double is = cache.inv_std[c];
    for (Index b = 0; b < B; ++b) {
      auto g = dy.sample_matrix(b).row(c).template cast<double>().array();
      auto out = dx.sample_matrix(b).row(c).array();
      if (mode == Mode::Train) {
        auto xh = cache.xhat.sample_matrix(b).row(c).template cast<double>().array();
        out = (gamma * is / count * (count * g - sum_dy - xh * sum_dy_xhat)).template cast<Scalar>();
      } else {
        out = (gamma * is * g).template cast<Scalar>();
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Inverted dropout and ReLU.
// ---------------------------------------------------------------------------

/// Training mode keeps each element with probability 1 - rate and scales
/// survivors by 1/(1 - rate). `mask` receives the multiplier per element.
template <class Scalar>
Tensor5<Scalar> dropout(const Tensor5<Scalar>& x, double rate, Mode mode, Stream& rng,
                        VectorX<Scalar>* mask = nullptr) {
  require(rate >= 0.0 && rate < 1.0, Errc::InvalidArgument, "dropout rate must be in [0, 1)");
  if (mode == Mode::Inference || rate == 0.0) {
    if (mask) mask->setOnes(x.data.size());
    return x;
  }
  const Scalar keep_scale = static_cast<Scalar>(1.0 / (1.0 - rate));
  VectorX<Scalar> m(x.data.size());
  for (Index i = 0; i < m.size(); ++i) m[i] = rng.uniform() < rate ? Scalar(0) : keep_scale;
  auto out = Tensor5<Scalar>::uninitialized(x.shape);
  out.data = x.data.cwiseProduct(m);
  if (mask) *mask = std::move(m);
  return out;
}

template <class Scalar>
Tensor5<Scalar> relu(const Tensor5<Scalar>& x) {
  auto out = Tensor5<Scalar>::uninitialized(x.shape);
  out.data = x.data.cwiseMax(Scalar(0));
  return out;
}

/// Plain: pass where the forward input was > 0. Guided: additionally block
/// negative incoming gradient.
template <class Scalar>
Tensor5<Scalar> relu_backward(const Tensor5<Scalar>& forward_in, const Tensor5<Scalar>& grad_out,
                              GradientRule rule) {
  require(forward_in.shape == grad_out.shape, Errc::ShapeMismatch, "relu_backward shape mismatch");
  auto dx = Tensor5<Scalar>::uninitialized(grad_out.shape);
  for (Index i = 0; i < dx.data.size(); ++i) {
    const Scalar g = grad_out.data[i];
    const bool open = forward_in.data[i] > Scalar(0) && (rule == GradientRule::Plain || g >= Scalar(0));
    dx.data[i] = open ? g : Scalar(0);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Head: global average pool -> affine -> softmax, and the loss.
// ---------------------------------------------------------------------------

template <class Scalar>
struct HeadCache {
  Eigen::MatrixXd pooled;  // batch x channels
};

/// Returns logits (batch x classes).
template <class Scalar>
Eigen::MatrixXd head_logits(const Tensor5<Scalar>& features, const RowMatrixX<Scalar>& weights,
                            const VectorX<Scalar>& bias, HeadCache<Scalar>* cache = nullptr) {
  require(weights.cols() == features.channels() && bias.size() == weights.rows(), Errc::ShapeMismatch,
          "head expects " + std::to_string(weights.cols()) + " channels, got " + std::to_string(features.channels()));
  Eigen::MatrixXd pooled(features.batch(), features.channels());
  for (Index b = 0; b < features.batch(); ++b)
    pooled.row(b) = features.sample_matrix(b).template cast<double>().rowwise().mean().transpose();
  Eigen::MatrixXd logits = pooled * weights.template cast<double>().transpose();
  logits.rowwise() += bias.template cast<double>().transpose();
  if (cache) cache->pooled = std::move(pooled);
  return logits;
}

inline Eigen::MatrixXd softmax(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd p(logits.rows(), logits.cols());
  for (Index b = 0; b < logits.rows(); ++b) {
    Eigen::RowVectorXd e = (logits.row(b).array() - logits.row(b).maxCoeff()).exp();
    p.row(b) = e / e.sum();
  }
  return p;
}

template <class Scalar>
struct HeadGradients {
  RowMatrixX<Scalar> weights;
  VectorX<Scalar> bias;
};

template <class Scalar>
Tensor5<Scalar> head_backward(const Eigen::MatrixXd& dlogits, const HeadCache<Scalar>& cache,
                              const std::array<Index, 5>& feature_shape, const RowMatrixX<Scalar>& weights,
                              HeadGradients<Scalar>& grads) {
  if (grads.weights.rows() != weights.rows() || grads.weights.cols() != weights.cols()) {
    grads.weights = RowMatrixX<Scalar>::Zero(weights.rows(), weights.cols());
    grads.bias = VectorX<Scalar>::Zero(weights.rows());
  }
  grads.weights += (dlogits.transpose() * cache.pooled).template cast<Scalar>();
  grads.bias += dlogits.colwise().sum().transpose().template cast<Scalar>();
  const Eigen::MatrixXd dpooled = dlogits * weights.template cast<double>();
  Tensor5<Scalar> df(feature_shape);
  const double inv_s = 1.0 / static_cast<double>(df.spatial());
  for (Index b = 0; b < df.batch(); ++b)
    for (Index c = 0; c < df.channels(); ++c) df.sample_matrix(b).row(c).setConstant(static_cast<Scalar>(dpooled(b, c) * inv_s));
  return df;
}

inline constexpr double kProbClamp = 1e-7;

/// Mean over the batch of −Σ t·log(p), p clamped to [1e-7, 1 − 1e-7].
inline double bce_loss(const Eigen::MatrixXd& probs, const Eigen::MatrixXd& targets) {
  const Eigen::ArrayXXd p = probs.array().max(kProbClamp).min(1.0 - kProbClamp);
  return -(targets.array() * p.log()).sum() / static_cast<double>(probs.rows());
}

inline Eigen::MatrixXd bce_loss_grad(const Eigen::MatrixXd& probs, const Eigen::MatrixXd& targets) {
  Eigen::MatrixXd g(probs.rows(), probs.cols());
  const double inv_b = 1.0 / static_cast<double>(probs.rows());
  for (Index i = 0; i < probs.size(); ++i) {
    const double p = probs.data()[i];
    const bool clamped = p < kProbClamp || p > 1.0 - kProbClamp;
    g.data()[i] = clamped ? 0.0 : -targets.data()[i] / p * inv_b;
  }
  return g;
}

inline Eigen::MatrixXd softmax_backward(const Eigen::MatrixXd& probs, const Eigen::MatrixXd& dprobs) {
  Eigen::MatrixXd dz(probs.rows(), probs.cols());
  for (Index b = 0; b < probs.rows(); ++b) {
    const double dot = probs.row(b).dot(dprobs.row(b));
    dz.row(b) = probs.row(b).array() * (dprobs.row(b).array() - dot);
  }
  return dz;
}

// ---------------------------------------------------------------------------
// Adam.
// ---------------------------------------------------------------------------

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam update of `param` in place. `t` counts from 1.
template <class Scalar>
void adam_step(Eigen::Ref<VectorX<Scalar>> param, const Eigen::Ref<const VectorX<Scalar>>& grad,
               Eigen::Ref<VectorX<Scalar>> m, Eigen::Ref<VectorX<Scalar>> v, long t, double lr,
               const AdamSettings& s = {}) {
  require(param.size() == grad.size() && m.size() == param.size() && v.size() == param.size(), Errc::ShapeMismatch,
          "adam_step tensors differ in size");
  require(t >= 1, Errc::InvalidArgument, "adam step count starts at 1");
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(t));
  for (Index i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = s.beta1 * m[i] + (1.0 - s.beta1) * g;
    const double vi = s.beta2 * v[i] + (1.0 - s.beta2) * g * g;
    m[i] = static_cast<Scalar>(mi);
    v[i] = static_cast<Scalar>(vi);
    param[i] -= static_cast<Scalar>(lr * (mi / c1) / (std::sqrt(vi / c2) + s.epsilon));
  }
}

/// Learning rate halved after every `period` epochs.
inline double step_decay_lr(double base, int epoch, int period = 10) {
  return base * std::pow(0.5, epoch / period);
}

}  // namespace mriclass::cnn
