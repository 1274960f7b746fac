#include <doctest.h>

#include <filesystem>

#include "mriclass/cnn/train.hpp"
#include "mriclass/error.hpp"
#include "mriclass/model_io.hpp"

using namespace mriclass;
using namespace mriclass::cnn;
namespace fs = std::filesystem;

namespace {

Architecture tiny() {
  Architecture a;
  a.block_channels = {4, 4};
  return a;
}

CnnData<float> toy_data(int n, Index side, std::uint64_t seed) {
  CnnData<float> d;
  d.dims = {side, side, side};
  Stream rng = Seed(seed).stream("toy");
  for (int i = 0; i < n; ++i) {
    VectorX<float> v(side * side * side);
    const int label = i % 2;
    for (Index k = 0; k < v.size(); ++k) v[k] = static_cast<float>(0.3 * rng.normal() + (k < v.size() / 2 ? label : 0));
    d.inputs.push_back(v);
    d.labels.push_back(label);
  }
  return d;
}

}  // namespace

TEST_CASE("a trailing single-sample batch is merged") {
  auto r = batch_ranges(9, 4);
  REQUIRE(r.size() == 2);
  CHECK(r[0] == std::pair<std::size_t, std::size_t>{0, 4});
  CHECK(r[1] == std::pair<std::size_t, std::size_t>{4, 9});
  CHECK(batch_ranges(8, 4).size() == 2);
  CHECK(batch_ranges(1, 4).size() == 1);
}

TEST_CASE("early stopping needs a strict improvement") {
  EarlyStopping s(3);
  CHECK(s.observe(0, 0.5));
  CHECK_FALSE(s.observe(1, 0.5));
  CHECK_FALSE(s.should_stop(2));
  CHECK(s.should_stop(3));
  CHECK(s.best_epoch() == 0);
}

TEST_CASE("training stops patience epochs after the last improvement and keeps that snapshot") {
  const auto data = toy_data(8, 6, 1);
  auto model = init_model<float>(tiny(), 2);
  TrainConfig cfg;
  cfg.patience = 20;
  cfg.max_epochs = 100;
  const int k = 7;
  std::vector<VectorX<float>> snapshots;
  auto scorer = [&](int epoch, const CnnModel<float>& m) {
    snapshots.push_back(m.flatten_params());
    return epoch <= k ? 0.5 + 0.01 * epoch : 0.4;
  };
  const auto r = train(model, data, data, cfg, scorer);
  CHECK(r.log.size() == static_cast<std::size_t>(k + 20 + 1));
  CHECK(r.log.back().epoch == k + 20);
  CHECK(r.best_epoch == k);
  CHECK(r.model.flatten_params() == snapshots[k]);
  CHECK(r.log[12].lr == 0.0005);
}

TEST_CASE("training is deterministic per seed") {
  const auto data = toy_data(10, 6, 3);
  TrainConfig cfg;
  cfg.max_epochs = 2;
  cfg.seed = 9;
  const auto a = train(init_model<float>(tiny(), 1), data, data, cfg);
  const auto b = train(init_model<float>(tiny(), 1), data, data, cfg);
  CHECK(a.model.flatten_params() == b.model.flatten_params());
  CHECK(a.log.back().train_loss == b.log.back().train_loss);
  CHECK_THROWS_AS(train(init_model<float>(tiny(), 1), data, CnnData<float>{data.dims, {}, {}}, cfg), Error);
}

TEST_CASE("inference output does not depend on batch composition") {
  auto m = init_model<float>(tiny(), 4);
  const auto data = toy_data(4, 6, 5);
  const std::size_t all[4] = {0, 1, 2, 3};
  const std::size_t one[1] = {2};
  const auto batched = softmax(forward_inference(m, make_batch(data, all)));
  const auto single = softmax(forward_inference(m, make_batch(data, one)));
  CHECK((batched.row(2) - single.row(0)).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(std::abs(batched.row(0).sum() - 1.0) < 1e-6);
}

TEST_CASE("guided backprop equals the plain gradient when every unit passes") {
  // Positive inputs, identity-like positive kernels and a positive class-1
  // head: every ReLU is open and every backward signal is nonnegative.
  Architecture a;
  a.block_channels = {2};
  auto m = init_model<double>(a, 1);
  for (auto& k : m.params.kernels) k.setConstant(0.05);
  for (auto& b : m.params.conv_bias) b.setConstant(0.1);
  m.params.head_weight.row(1).setConstant(1.0);
  m.params.head_weight.row(0).setConstant(-1.0);
  Tensor5<double> x({1, 1, 4, 4, 4});
  x.data.setLinSpaced(1.0, 2.0);
  const auto plain = input_gradient(m, x, 1, GradientRule::Plain);
  const auto guided = input_gradient(m, x, 1, GradientRule::Guided);
  CHECK((plain - guided).cwiseAbs().maxCoeff() == 0.0);
  CHECK(plain.cwiseAbs().maxCoeff() > 0.0);

  // A negative head weight makes the incoming gradient negative everywhere.
  m.params.head_weight.row(1).setConstant(-1.0);
  const auto blocked = input_gradient(m, x, 1, GradientRule::Guided);
  CHECK(blocked.cwiseAbs().maxCoeff() == 0.0);
  CHECK(input_gradient(m, x, 1, GradientRule::Plain).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("saliency averages correct positives and thresholds at a third of the peak") {
  auto m = init_model<float>(tiny(), 6);
  auto data = toy_data(6, 6, 7);
  const auto p = predict(m, data);
  for (std::size_t i = 0; i < data.size(); ++i) data.labels[i] = predicted_label(p[static_cast<Index>(i)]);
  const bool any_positive = std::count(data.labels.begin(), data.labels.end(), 1) > 0;
  if (any_positive) {
    const auto s = guided_backprop_saliency(m, data);
    const double peak = s.map.cwiseAbs().maxCoeff();
    CHECK(s.subjects == std::count(data.labels.begin(), data.labels.end(), 1));
    for (Index i = 0; i < s.map.size(); ++i) CHECK(s.above_threshold[i] == (std::abs(s.map[i]) >= peak / 3.0));
    if (peak > 0.0) CHECK(s.above_threshold.count() > 0);
  }
  std::fill(data.labels.begin(), data.labels.end(), 0);
  CHECK_THROWS_AS(guided_backprop_saliency(m, data), Error);
}

TEST_CASE("serialized cnn reproduces its scores bitwise") {
  const fs::path dir = fs::temp_directory_path() / "mriclass_test_cnn_io";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto m = init_model<float>(Architecture{}, 3);
  m.input_mean = 0.25;
  m.input_std = 1.5;
  m.running_mean[3].setConstant(0.1f);
  save_cnn(m, dir / "model.json", {{"pipeline", "modulated"}});
  const auto [back, meta] = load_cnn(dir / "model.json");
  CHECK(meta.at("pipeline") == "modulated");
  CHECK(back.flatten_params() == m.flatten_params());
  CHECK(back.running_mean[3] == m.running_mean[3]);
  const auto data = toy_data(2, 8, 4);
  CHECK(predict(back, data) == predict(m, data));
  CHECK(model_kind(dir / "model.json") == "cnn");
  CHECK_THROWS_AS(load_svm(dir / "model.json"), Error);
}
