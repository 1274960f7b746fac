#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "mriclass/cnn/layers.hpp"
#include "mriclass/cnn/tensor.hpp"
#include "mriclass/error.hpp"
#include "mriclass/rng.hpp"

namespace mriclass::cnn {

/// All-convolutional network: each block is conv(3, stride 1) → dropout → BN →
/// ReLU → conv(3, stride 2) → dropout → BN → ReLU, followed by global average
/// pooling and an affine map to class logits.
struct Architecture {
  Index input_channels = 1;
  std::vector<Index> block_channels{16, 32, 32, 64, 64, 32, 16};
  Index classes = 2;

  Index conv_count() const { return 2 * static_cast<Index>(block_channels.size()); }
  Index conv_in(Index layer) const {
    if (layer == 0) return input_channels;
    return block_channels[static_cast<std::size_t>((layer - 1) / 2)];
  }
  Index conv_out(Index layer) const { return block_channels[static_cast<std::size_t>(layer / 2)]; }
  int conv_stride(Index layer) const { return layer % 2 == 0 ? 1 : 2; }

  bool operator==(const Architecture&) const = default;
};

enum class ParamKind { ConvKernel, ConvBias, BnScale, BnShift, HeadWeight, HeadBias };

/// The trainable tensors. Also used as the gradient and Adam-moment carrier.
template <class Scalar>
struct Params {
  std::vector<RowMatrixX<Scalar>> kernels;
  std::vector<VectorX<Scalar>> conv_bias;
  std::vector<VectorX<Scalar>> bn_scale;
  std::vector<VectorX<Scalar>> bn_shift;
  RowMatrixX<Scalar> head_weight;
  VectorX<Scalar> head_bias;

  static Params zeros(const Architecture& arch) {
    Params p;
    for (Index l = 0; l < arch.conv_count(); ++l) {
      p.kernels.push_back(RowMatrixX<Scalar>::Zero(arch.conv_out(l), arch.conv_in(l) * kTaps));
      p.conv_bias.push_back(VectorX<Scalar>::Zero(arch.conv_out(l)));
      p.bn_scale.push_back(VectorX<Scalar>::Zero(arch.conv_out(l)));
      p.bn_shift.push_back(VectorX<Scalar>::Zero(arch.conv_out(l)));
    }
    p.head_weight = RowMatrixX<Scalar>::Zero(arch.classes, arch.block_channels.back());
    p.head_bias = VectorX<Scalar>::Zero(arch.classes);
    return p;
  }

  /// Visits every tensor in the fixed serialization order as a flat span.
  template <class Fn>
  void for_each(Fn&& fn) {
    for (std::size_t l = 0; l < kernels.size(); ++l) {
      fn(ParamKind::ConvKernel, kernels[l].data(), kernels[l].size());
      fn(ParamKind::ConvBias, conv_bias[l].data(), conv_bias[l].size());
      fn(ParamKind::BnScale, bn_scale[l].data(), bn_scale[l].size());
      fn(ParamKind::BnShift, bn_shift[l].data(), bn_shift[l].size());
    }
    fn(ParamKind::HeadWeight, head_weight.data(), head_weight.size());
    fn(ParamKind::HeadBias, head_bias.data(), head_bias.size());
  }
  template <class Fn>
  void for_each(Fn&& fn) const {
    const_cast<Params*>(this)->for_each([&](ParamKind k, Scalar* d, Index n) { fn(k, static_cast<const Scalar*>(d), n); });
  }

  Index count() const {
    Index n = 0;
    for_each([&](ParamKind, const Scalar*, Index size) { n += size; });
    return n;
  }

  void set_zero() {
    for_each([](ParamKind, Scalar* d, Index n) { std::fill(d, d + n, Scalar(0)); });
  }
};

template <class Scalar>
struct CnnModel {
  Architecture arch;
  Params<Scalar> params;
  std::vector<VectorX<Scalar>> running_mean;
  std::vector<VectorX<Scalar>> running_var;
  // Global input standardization applied before the first layer.
  double input_mean = 0.0;
  double input_std = 1.0;

  Index trainable_parameter_count() const { return params.count(); }

  template <class Other>
  CnnModel<Other> cast() const {
    CnnModel<Other> m;
    m.arch = arch;
    m.params = Params<Other>::zeros(arch);
    auto src = flatten_params();
    Index off = 0;
    m.params.for_each([&](ParamKind, Other* d, Index n) {
      for (Index i = 0; i < n; ++i) d[i] = static_cast<Other>(src[off + i]);
      off += n;
    });
    for (std::size_t l = 0; l < running_mean.size(); ++l) {
      m.running_mean.push_back(running_mean[l].template cast<Other>());
      m.running_var.push_back(running_var[l].template cast<Other>());
    }
    m.input_mean = input_mean;
    m.input_std = input_std;
    return m;
  }

  VectorX<Scalar> flatten_params() const {
    VectorX<Scalar> out(params.count());
    Index off = 0;
    params.for_each([&](ParamKind, const Scalar* d, Index n) {
      std::copy(d, d + n, out.data() + off);
      off += n;
    });
    return out;
  }
};

/// He-normal conv kernels (std √(2/fan_in)), zero biases, BN scale 1 / shift 0,
/// head weights N(0, 1/fan_in). Running statistics start at mean 0, var 1.
template <class Scalar>
CnnModel<Scalar> init_model(const Architecture& arch, std::uint64_t seed) {
  require(!arch.block_channels.empty() && arch.input_channels >= 1 && arch.classes >= 2, Errc::InvalidArgument,
          "invalid architecture");
  CnnModel<Scalar> m;
  m.arch = arch;
  m.params = Params<Scalar>::zeros(arch);
  Stream rng = Seed(seed).stream("init");
  for (Index l = 0; l < arch.conv_count(); ++l) {
    const double sd = std::sqrt(2.0 / static_cast<double>(arch.conv_in(l) * kTaps));
    auto& k = m.params.kernels[static_cast<std::size_t>(l)];
    for (Index i = 0; i < k.size(); ++i) k.data()[i] = static_cast<Scalar>(sd * rng.normal());
    m.params.bn_scale[static_cast<std::size_t>(l)].setOnes();
    m.running_mean.push_back(VectorX<Scalar>::Zero(arch.conv_out(l)));
    m.running_var.push_back(VectorX<Scalar>::Ones(arch.conv_out(l)));
  }
  const double sd = std::sqrt(1.0 / static_cast<double>(arch.block_channels.back()));
  for (Index i = 0; i < m.params.head_weight.size(); ++i)
    m.params.head_weight.data()[i] = static_cast<Scalar>(sd * rng.normal());
  return m;
}

struct ForwardOptions {
  Mode mode = Mode::Inference;
  double dropout_rate = 0.2;
  BatchNormSettings batchnorm{};
  std::uint64_t dropout_seed = 0;
  std::uint64_t step = 0;  // dropout masks are a function of (seed, step, layer)
};

template <class Scalar>
struct LayerCache {
  Tensor5<Scalar> conv_in;
  std::vector<RowMatrixX<Scalar>> cols;
  VectorX<Scalar> dropout_mask;
  BatchNormCache<Scalar> bn;
  Tensor5<Scalar> relu_in;
};

template <class Scalar>
struct ForwardCache {
  Mode mode = Mode::Inference;
  std::vector<LayerCache<Scalar>> layers;
  std::array<Index, 5> feature_shape{};
  HeadCache<Scalar> head;
  Eigen::MatrixXd logits;
  Eigen::MatrixXd probs;
};

template <class Scalar>
Tensor5<Scalar> standardize_input(const CnnModel<Scalar>& model, const Tensor5<Scalar>& x) {
  auto out = Tensor5<Scalar>::uninitialized(x.shape);
  out.data = ((x.data.template cast<double>().array() - model.input_mean) / model.input_std).template cast<Scalar>();
  return out;
}

/// Runs the network on raw inputs and returns the logits. Training mode
/// updates the batchnorm running statistics of `model`.
template <class Scalar>
Eigen::MatrixXd forward(CnnModel<Scalar>& model, const Tensor5<Scalar>& input, const ForwardOptions& opts,
                        ForwardCache<Scalar>* cache = nullptr) {
  require(input.channels() == model.arch.input_channels, Errc::ShapeMismatch, "input channel count mismatch");
  Tensor5<Scalar> x = standardize_input(model, input);
  if (cache) {
    cache->mode = opts.mode;
    cache->layers.assign(static_cast<std::size_t>(model.arch.conv_count()), {});
  }
  const Seed dropout_root(opts.dropout_seed);
  for (Index l = 0; l < model.arch.conv_count(); ++l) {
    const auto ul = static_cast<std::size_t>(l);
    Tensor5<Scalar> y = conv3d(x, model.params.kernels[ul], model.params.conv_bias[ul], model.arch.conv_stride(l),
                               cache ? &cache->layers[ul].cols : nullptr);
    Stream rng = dropout_root.stream("dropout", opts.step * 1024 + static_cast<std::uint64_t>(l));
    VectorX<Scalar>* mask = cache ? &cache->layers[ul].dropout_mask : nullptr;
    y = dropout(y, opts.dropout_rate, opts.mode, rng, mask);
    BatchNormCache<Scalar>* bnc = cache ? &cache->layers[ul].bn : nullptr;
    y = batchnorm(y, model.params.bn_scale[ul], model.params.bn_shift[ul], model.running_mean[ul],
                  model.running_var[ul], opts.mode, opts.batchnorm, bnc);
    Tensor5<Scalar> a = relu(y);
    if (cache) {
      cache->layers[ul].conv_in = std::move(x);
      cache->layers[ul].relu_in = std::move(y);
    }
    x = std::move(a);
  }
  Eigen::MatrixXd logits =
      head_logits(x, model.params.head_weight, model.params.head_bias, cache ? &cache->head : nullptr);
  if (cache) {
    cache->feature_shape = x.shape;
    cache->logits = logits;
    cache->probs = softmax(logits);
  }
  return logits;
}

/// Inference-mode forward pass that leaves the model untouched.
template <class Scalar>
Eigen::MatrixXd forward_inference(const CnnModel<Scalar>& model, const Tensor5<Scalar>& input,
                                  ForwardCache<Scalar>* cache = nullptr) {
  ForwardOptions opts;
  opts.mode = Mode::Inference;
  return forward(const_cast<CnnModel<Scalar>&>(model), input, opts, cache);
}

/// Reverse pass from logit gradients. Accumulates parameter gradients into
/// `grads` (when given) and returns the gradient with respect to the raw input,
/// or an empty tensor when `want_input` is false.
template <class Scalar>
Tensor5<Scalar> backward(const CnnModel<Scalar>& model, const ForwardCache<Scalar>& cache,
                         const Eigen::MatrixXd& dlogits, Params<Scalar>* grads,
                         GradientRule rule = GradientRule::Plain, bool want_input = true) {
  HeadGradients<Scalar> hg;
  Tensor5<Scalar> g = head_backward(dlogits, cache.head, cache.feature_shape, model.params.head_weight, hg);
  if (grads) {
    grads->head_weight += hg.weights;
    grads->head_bias += hg.bias;
  }
  for (Index l = model.arch.conv_count() - 1; l >= 0; --l) {
    const auto ul = static_cast<std::size_t>(l);
    const auto& lc = cache.layers[ul];
    g = relu_backward(lc.relu_in, g, rule);
    BatchNormGradients<Scalar> bg;
    g = batchnorm_backward(g, lc.bn, model.params.bn_scale[ul], cache.mode, bg);
    if (lc.dropout_mask.size() == g.data.size()) g.data.array() *= lc.dropout_mask.array();
    ConvGradients<Scalar> cg;
    g = conv3d_backward(g, lc.conv_in, model.params.kernels[ul], model.arch.conv_stride(l), cg,
                        l > 0 || want_input, &lc.cols);
    if (grads) {
      grads->kernels[ul] += cg.kernels;
      grads->conv_bias[ul] += cg.bias;
      grads->bn_scale[ul] += bg.scale;
      grads->bn_shift[ul] += bg.shift;
    }
  }
  if (want_input) g.data *= static_cast<Scalar>(1.0 / model.input_std);
  return g;
}

inline Eigen::MatrixXd one_hot(const std::vector<int>& labels, Index classes) {
  Eigen::MatrixXd t = Eigen::MatrixXd::Zero(static_cast<Index>(labels.size()), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) t(static_cast<Index>(i), labels[i]) = 1.0;
  return t;
}

/// Loss and parameter gradients of one batch.
template <class Scalar>
double loss_and_gradients(CnnModel<Scalar>& model, const Tensor5<Scalar>& input, const std::vector<int>& labels,
                          const ForwardOptions& opts, Params<Scalar>& grads) {
  ForwardCache<Scalar> cache;
  forward(model, input, opts, &cache);
  const Eigen::MatrixXd targets = one_hot(labels, model.arch.classes);
  const double loss = bce_loss(cache.probs, targets);
  const Eigen::MatrixXd dlogits = softmax_backward(cache.probs, bce_loss_grad(cache.probs, targets));
  backward(model, cache, dlogits, &grads, GradientRule::Plain, false);
  return loss;
}

}  // namespace mriclass::cnn
