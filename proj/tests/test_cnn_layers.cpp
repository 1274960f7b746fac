#include <doctest.h>

#include <cmath>

#include "mriclass/cnn/model.hpp"
#include "mriclass/cnn/train.hpp"

using namespace mriclass;
using namespace mriclass::cnn;

namespace {

template <class S>
Tensor5<S> random_tensor(std::array<Index, 5> shape, Stream& rng) {
  Tensor5<S> t(shape);
  for (Index i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<S>(rng.normal());
  return t;
}

// Direct nested-loop convolution with zero padding.
Tensor5<double> naive_conv(const Tensor5<double>& in, const RowMatrixX<double>& k, const VectorX<double>& bias,
                           int stride) {
  const auto d = in.spatial_dims();
  const Index ox = conv_out_dim(d[0], stride), oy = conv_out_dim(d[1], stride), oz = conv_out_dim(d[2], stride);
  Tensor5<double> out({in.batch(), k.rows(), ox, oy, oz});
  for (Index b = 0; b < in.batch(); ++b)
    for (Index o = 0; o < k.rows(); ++o)
      for (Index z = 0; z < oz; ++z)
        for (Index y = 0; y < oy; ++y)
          for (Index x = 0; x < ox; ++x) {
            double acc = bias[o];
            for (Index c = 0; c < in.channels(); ++c)
              for (Index dz = 0; dz < 3; ++dz)
                for (Index dy = 0; dy < 3; ++dy)
                  for (Index dx = 0; dx < 3; ++dx) {
                    const Index ix = stride * x + dx - 1, iy = stride * y + dy - 1, iz = stride * z + dz - 1;
                    if (ix < 0 || iy < 0 || iz < 0 || ix >= d[0] || iy >= d[1] || iz >= d[2]) continue;
                    acc += k(o, c * 27 + dz * 9 + dy * 3 + dx) * in.sample(b)[c * in.spatial() + (iz * d[1] + iy) * d[0] + ix];
                  }
            out.sample(b)[o * ox * oy * oz + (z * oy + y) * ox + x] = acc;
          }
  return out;
}

}  // namespace

TEST_CASE("conv3d matches the nested-loop convolution") {
  Stream rng = Seed(11).stream("test");
  for (int trial = 0; trial < 16; ++trial) {
    const int stride = 1 + trial % 2;
    const Index ci = 1 + static_cast<Index>(rng.below(3)), co = 1 + static_cast<Index>(rng.below(4));
    auto in = random_tensor<double>({2, ci, 1 + Index(rng.below(7)), 1 + Index(rng.below(7)), 1 + Index(rng.below(7))}, rng);
    RowMatrixX<double> k = random_tensor<double>({1, 1, 1, co, ci * 27}, rng).data.reshaped<Eigen::RowMajor>(co, ci * 27);
    VectorX<double> bias = random_tensor<double>({1, 1, 1, 1, co}, rng).data;
    auto fast = conv3d(in, k, bias, stride);
    auto slow = naive_conv(in, k, bias, stride);
    REQUIRE(fast.shape == slow.shape);
    CHECK((fast.data - slow.data).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("conv3d output size is ceil(n / stride)") {
  CHECK(conv_out_dim(7, 2) == 4);
  CHECK(conv_out_dim(8, 2) == 4);
  CHECK(conv_out_dim(5, 1) == 5);
}

TEST_CASE("conv3d_backward is the adjoint of conv3d") {
  Stream rng = Seed(12).stream("test");
  for (int stride : {1, 2}) {
    auto in = random_tensor<double>({2, 2, 5, 4, 3}, rng);
    RowMatrixX<double> k = random_tensor<double>({1, 1, 1, 3, 54}, rng).data.reshaped<Eigen::RowMajor>(3, 54);
    VectorX<double> bias = VectorX<double>::Zero(3);
    auto out = conv3d(in, k, bias, stride);
    auto w = random_tensor<double>(out.shape, rng);
    ConvGradients<double> g;
    auto gin = conv3d_backward(w, in, k, stride, g);
    CHECK(gin.data.dot(in.data) == doctest::Approx(w.data.dot(out.data)).epsilon(1e-10));
    // Linear in the kernel as well.
    CHECK((g.kernels.array() * k.array()).sum() == doctest::Approx(w.data.dot(out.data)).epsilon(1e-10));
  }
}

TEST_CASE("conv3d_backward reuses forward patches exactly") {
  Stream rng = Seed(13).stream("test");
  for (int stride : {1, 2}) {
    for (Index n : {1, 2, 5}) {
      auto in = random_tensor<float>({3, 2, n, n + 1, 3}, rng);
      RowMatrixX<float> k = random_tensor<float>({1, 1, 1, 4, 54}, rng).data.reshaped<Eigen::RowMajor>(4, 54);
      VectorX<float> bias = VectorX<float>::Zero(4);
      std::vector<RowMatrixX<float>> cols;
      auto out = conv3d(in, k, bias, stride, &cols);
      auto w = random_tensor<float>(out.shape, rng);
      ConvGradients<float> fresh, reused;
      auto a = conv3d_backward(w, in, k, stride, fresh);
      auto b = conv3d_backward(w, in, k, stride, reused, true, &cols);
      CHECK(a.data == b.data);
      CHECK(fresh.kernels == reused.kernels);
    }
  }
}

TEST_CASE("conv3d rejects mismatched channels") {
  Tensor5<float> in({1, 2, 3, 3, 3});
  RowMatrixX<float> k = RowMatrixX<float>::Zero(4, 27);
  VectorX<float> b = VectorX<float>::Zero(4);
  CHECK_THROWS_AS(conv3d(in, k, b, 1), Error);
}

TEST_CASE("batchnorm training mode normalizes and updates running statistics") {
  Stream rng = Seed(13).stream("test");
  auto x = random_tensor<double>({3, 2, 2, 2, 2}, rng);
  x.data.array() = 5.0 + 2.0 * x.data.array();
  VectorX<double> scale = VectorX<double>::Ones(2), shift = VectorX<double>::Zero(2);
  VectorX<double> rm = VectorX<double>::Zero(2), rv = VectorX<double>::Ones(2);
  auto y = batchnorm(x, scale, shift, rm, rv, Mode::Train);
  for (Index c = 0; c < 2; ++c) {
    double sum = 0.0, ss = 0.0, xs = 0.0, xss = 0.0;
    for (Index b = 0; b < 3; ++b) {
      sum += y.sample_matrix(b).row(c).sum();
      ss += y.sample_matrix(b).row(c).squaredNorm();
      xs += x.sample_matrix(b).row(c).sum();
      xss += x.sample_matrix(b).row(c).squaredNorm();
    }
    CHECK(sum / 24.0 == doctest::Approx(0.0).epsilon(1e-9).scale(1.0));
    const double var = xss / 24.0 - (xs / 24.0) * (xs / 24.0);
    CHECK(ss / 24.0 == doctest::Approx(var / (var + 1e-5)));
    CHECK(rm[c] == doctest::Approx(0.01 * xs / 24.0));
    CHECK(rv[c] == doctest::Approx(0.99 + 0.01 * var));
  }
}

TEST_CASE("batchnorm training mode with one value per channel is degenerate") {
  Tensor5<float> x({1, 1, 1, 1, 1});
  VectorX<float> s = VectorX<float>::Ones(1), z = VectorX<float>::Zero(1), rm = z, rv = s;
  CHECK_THROWS_AS(batchnorm(x, s, z, rm, rv, Mode::Train), Error);
}

TEST_CASE("inverted dropout keeps the expected value") {
  Stream rng = Seed(14).stream("dropout");
  Tensor5<double> x({1, 1, 40, 40, 40});
  x.data.setOnes();
  VectorX<double> mask;
  auto y = dropout(x, 0.2, Mode::Train, rng, &mask);
  CHECK(y.data.mean() == doctest::Approx(1.0).epsilon(0.02));
  const double zeros = static_cast<double>((mask.array() == 0.0).count()) / static_cast<double>(mask.size());
  CHECK(zeros == doctest::Approx(0.2).epsilon(0.05));
  Stream rng2 = Seed(14).stream("dropout");
  CHECK(dropout(x, 0.2, Mode::Inference, rng2).data == x.data);
}

TEST_CASE("guided relu gate") {
  Tensor5<double> in({1, 1, 1, 1, 4}), g({1, 1, 1, 1, 4});
  in.data << 1.0, -1.0, 2.0, 0.0;
  g.data << 0.5, 0.5, -0.5, 0.5;
  auto plain = relu_backward(in, g, GradientRule::Plain);
  auto guided = relu_backward(in, g, GradientRule::Guided);
  CHECK(plain.data == (VectorX<double>(4) << 0.5, 0.0, -0.5, 0.0).finished());
  CHECK(guided.data == (VectorX<double>(4) << 0.5, 0.0, 0.0, 0.0).finished());
}

TEST_CASE("softmax cross-entropy gradient equals p - t over the batch") {
  Eigen::MatrixXd logits(2, 2);
  logits << 0.3, -0.2, 1.5, 0.1;
  const auto p = softmax(logits);
  const auto t = one_hot({1, 0}, 2);
  const auto dz = softmax_backward(p, bce_loss_grad(p, t));
  CHECK((dz - (p - t) / 2.0).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(bce_loss(p, t) == doctest::Approx(-(std::log(p(0, 1)) + std::log(p(1, 0))) / 2.0));
}

TEST_CASE("adam first step moves each parameter by the learning rate") {
  VectorX<double> p = VectorX<double>::Zero(3), m = p, v = p;
  VectorX<double> g(3);
  g << 2.0, -0.1, 0.0;
  adam_step<double>(p, g, m, v, 1, 0.01);
  CHECK(p[0] == doctest::Approx(-0.01).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(0.01).epsilon(1e-6));
  CHECK(p[2] == 0.0);
}

TEST_CASE("learning rate halves every ten epochs") {
  CHECK(step_decay_lr(0.001, 0) == 0.001);
  CHECK(step_decay_lr(0.001, 9) == 0.001);
  CHECK(step_decay_lr(0.001, 10) == 0.0005);
  CHECK(step_decay_lr(0.001, 25) == 0.00025);
}

TEST_CASE("parameter count is independent of the input grid") {
  auto m = init_model<float>(Architecture{}, 1);
  CHECK(m.trainable_parameter_count() == 596434);
  Stream rng = Seed(1).stream("x");
  for (Index n : {24, 32}) {
    auto logits = forward_inference(m, random_tensor<float>({1, 1, n, n, n}, rng));
    CHECK(logits.cols() == 2);
  }
}

namespace {

double loss_at(CnnModel<double> m, const Tensor5<double>& x, const std::vector<int>& labels, Mode mode) {
  ForwardOptions o;
  o.mode = mode;
  o.dropout_rate = 0.0;
  ForwardCache<double> cache;
  forward(m, x, o, &cache);
  return bce_loss(cache.probs, one_hot(labels, 2));
}

}  // namespace

TEST_CASE("training-mode gradients match finite differences") {
  Architecture arch;
  arch.block_channels = {3, 4};
  auto m = init_model<double>(arch, 3);
  Stream rng = Seed(3).stream("x");
  auto x = random_tensor<double>({3, 1, 5, 4, 6}, rng);
  const std::vector<int> labels{0, 1, 1};
  ForwardOptions o;
  o.mode = Mode::Train;
  o.dropout_rate = 0.0;
  Params<double> grads = Params<double>::zeros(arch);
  auto probe = m;
  loss_and_gradients(probe, x, labels, o, grads);

  std::vector<std::pair<double*, double*>> pairs;
  std::vector<std::pair<Index, Index>> sizes;
  Index worst = 0;
  double worst_err = 0.0;
  Params<double>& p = m.params;
  std::vector<double*> pd, gd;
  std::vector<Index> pn;
  p.for_each([&](ParamKind, double* d, Index n) { pd.push_back(d); pn.push_back(n); });
  grads.for_each([&](ParamKind, double* d, Index) { gd.push_back(d); });
  Index flat = 0;
  for (std::size_t t = 0; t < pd.size(); ++t) {
    for (Index i = 0; i < pn[t]; i += 1 + pn[t] / 7, ++flat) {
      const double saved = pd[t][i];
      pd[t][i] = saved + 1e-5;
      const double up = loss_at(m, x, labels, Mode::Train);
      pd[t][i] = saved - 1e-5;
      const double dn = loss_at(m, x, labels, Mode::Train);
      pd[t][i] = saved;
      const double fd = (up - dn) / 2e-5;
      const double err = std::abs(fd - gd[t][i]) / std::max({std::abs(fd), std::abs(gd[t][i]), 1e-6});
      if (err > worst_err) {
        worst_err = err;
        worst = flat;
      }
    }
  }
  INFO("worst parameter probe " << worst);
  CHECK(worst_err < 1e-4);
}
