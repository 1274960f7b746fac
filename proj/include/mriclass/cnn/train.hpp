#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <type_traits>
#include <vector>

#include "mriclass/cnn/model.hpp"
#include "mriclass/error.hpp"
#include "mriclass/rng.hpp"
#include "mriclass/stats.hpp"

namespace mriclass::cnn {

/// Subjects as flat volumes sharing one grid.
template <class Scalar>
struct CnnData {
  std::array<Index, 3> dims{0, 0, 0};
  std::vector<VectorX<Scalar>> inputs;
  std::vector<int> labels;

  std::size_t size() const { return inputs.size(); }
};

template <class Scalar>
Tensor5<Scalar> make_batch(const CnnData<Scalar>& data, std::span<const std::size_t> indices) {
  Tensor5<Scalar> t({static_cast<Index>(indices.size()), 1, data.dims[0], data.dims[1], data.dims[2]});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& v = data.inputs[indices[k]];
    require(v.size() == t.sample_size(), Errc::ShapeMismatch, "input volume size differs from the data grid");
    std::copy(v.data(), v.data() + v.size(), t.sample(static_cast<Index>(k)));
  }
  return t;
}

/// Global mean and population standard deviation over every voxel of every
/// input, one scalar pair per network.
template <class Scalar>
std::pair<double, double> fit_input_normalization(const CnnData<Scalar>& data) {
  require(!data.inputs.empty(), Errc::Empty, "no inputs to normalize");
  double sum = 0.0, count = 0.0;
  for (const auto& v : data.inputs) {
    sum += v.template cast<double>().sum();
    count += static_cast<double>(v.size());
  }
  const double mean = sum / count;
  double ss = 0.0;
  for (const auto& v : data.inputs) ss += (v.template cast<double>().array() - mean).square().sum();
  const double sd = std::sqrt(ss / count);
  return {mean, sd > 0.0 ? sd : 1.0};
}

struct TrainConfig {
  double learning_rate = 0.001;
  AdamSettings adam{};
  double dropout_rate = 0.2;
  int batch_size = 4;
  int lr_halving_epochs = 10;
  int patience = 20;
  int max_epochs = 200;
  BatchNormSettings batchnorm{};
  std::uint64_t seed = 0;
};

inline void validate(const TrainConfig& c) {
  require(c.learning_rate > 0.0 && c.adam.epsilon > 0.0 && c.adam.beta1 >= 0.0 && c.adam.beta1 < 1.0 &&
              c.adam.beta2 >= 0.0 && c.adam.beta2 < 1.0,
          Errc::ConfigError, "invalid optimizer settings");
  require(c.dropout_rate >= 0.0 && c.dropout_rate < 1.0, Errc::ConfigError, "dropout rate must be in [0,1)");
  require(c.batch_size >= 1 && c.lr_halving_epochs >= 1 && c.patience >= 1 && c.max_epochs >= 1, Errc::ConfigError,
          "batch size, lr period, patience and max epochs must be >= 1");
}

/// Tracks the best validation score; an epoch counts as an improvement only
/// when it strictly exceeds every earlier score.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}

  bool observe(int epoch, double score) {
    if (best_epoch_ < 0 || score > best_) {
      best_ = score;
      best_epoch_ = epoch;
      return true;
    }
    return false;
  }
  bool should_stop(int epoch) const { return best_epoch_ >= 0 && epoch - best_epoch_ >= patience_; }
  int best_epoch() const { return best_epoch_; }
  double best_score() const { return best_; }

 private:
  int patience_;
  int best_epoch_ = -1;
  double best_ = -std::numeric_limits<double>::infinity();
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_auc = 0.0;
  double lr = 0.0;
};

template <class Scalar>
struct TrainResult {
  CnnModel<Scalar> model;
  std::vector<EpochLog> log;
  int best_epoch = -1;
  double best_auc = 0.0;
};

template <class Scalar>
using ValidationScorer = std::function<double(int epoch, const CnnModel<Scalar>&)>;

/// Class-1 softmax probability per subject, inference mode.
template <class Scalar>
Eigen::VectorXd predict(const CnnModel<Scalar>& model, const CnnData<Scalar>& data, std::size_t batch_size = 8) {
  Eigen::VectorXd out(static_cast<Index>(data.size()));
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const Eigen::MatrixXd probs = softmax(forward_inference(model, make_batch(data, idx)));
    for (std::size_t k = 0; k < idx.size(); ++k) out[static_cast<Index>(idx[k])] = probs(static_cast<Index>(k), 1);
  }
  return out;
}

inline int predicted_label(double p1) { return p1 >= 0.5 ? 1 : 0; }

inline double validation_auc(const Eigen::VectorXd& p1, const std::vector<int>& labels) {
  stats::ScoredSet s;
  for (std::size_t i = 0; i < labels.size(); ++i)
    s.push_back({"", labels[i], p1[static_cast<Index>(i)], predicted_label(p1[static_cast<Index>(i)])});
  return stats::auc(s);
}

/// Consecutive batches of `batch_size` over `order`; a trailing batch of a
/// single sample is merged into the previous one so batch statistics exist.
inline std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t batch_size) {
  std::vector<std::pair<std::size_t, std::size_t>> r;
  for (std::size_t s = 0; s < n; s += batch_size) r.emplace_back(s, std::min(n, s + batch_size));
  if (r.size() > 1 && r.back().second - r.back().first == 1) {
    r[r.size() - 2].second = r.back().second;
    r.pop_back();
  }
  return r;
}

/// Adam with step decay, keeping the parameters of the epoch with the best
/// validation AUC and stopping after `patience` epochs without improvement.
/// `scorer`, when set, replaces the validation AUC computation.
template <class Scalar>
TrainResult<Scalar> train(CnnModel<Scalar> model, const CnnData<Scalar>& train_set, const CnnData<Scalar>& validation,
                          const TrainConfig& config,
                          const std::type_identity_t<ValidationScorer<Scalar>>& scorer = {}) {
  validate(config);
  if (validation.size() == 0) fail(Errc::EmptyValidation, "validation set is empty");
  require(train_set.size() > 0, Errc::Empty, "training set is empty");

  Params<Scalar> grads = Params<Scalar>::zeros(model.arch);
  Params<Scalar> m1 = Params<Scalar>::zeros(model.arch);
  Params<Scalar> m2 = Params<Scalar>::zeros(model.arch);
  const Seed root(config.seed);
  const std::uint64_t dropout_seed = root.child("dropout").value();

  TrainResult<Scalar> result;
  result.model = model;
  EarlyStopping stopper(config.patience);
  long step = 0;
  std::vector<std::size_t> order(train_set.size());
  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    const double lr = step_decay_lr(config.learning_rate, epoch, config.lr_halving_epochs);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Stream shuffler = root.stream("shuffle", static_cast<std::uint64_t>(epoch));
    shuffler.shuffle(std::span<std::size_t>(order));

    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (auto [begin, end] : batch_ranges(order.size(), static_cast<std::size_t>(config.batch_size))) {
      std::span<const std::size_t> idx(order.data() + begin, end - begin);
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(train_set.labels[i]);
      ++step;
      ForwardOptions opts;
      opts.mode = Mode::Train;
      opts.dropout_rate = config.dropout_rate;
      opts.batchnorm = config.batchnorm;
      opts.dropout_seed = dropout_seed;
      opts.step = static_cast<std::uint64_t>(step);
      grads.set_zero();
      const double loss = loss_and_gradients(model, make_batch(train_set, idx), labels, opts, grads);
      loss_sum += loss * static_cast<double>(idx.size());
      loss_count += idx.size();

      // Walk parameters, gradients and both moments in lockstep.
      std::vector<std::pair<Scalar*, Index>> p, g, a, b;
      model.params.for_each([&](ParamKind, Scalar* d, Index n) { p.emplace_back(d, n); });
      grads.for_each([&](ParamKind, Scalar* d, Index n) { g.emplace_back(d, n); });
      m1.for_each([&](ParamKind, Scalar* d, Index n) { a.emplace_back(d, n); });
      m2.for_each([&](ParamKind, Scalar* d, Index n) { b.emplace_back(d, n); });
      for (std::size_t t = 0; t < p.size(); ++t) {
        Eigen::Map<VectorX<Scalar>> pv(p[t].first, p[t].second), mv(a[t].first, a[t].second),
            vv(b[t].first, b[t].second);
        Eigen::Map<const VectorX<Scalar>> gv(g[t].first, g[t].second);
        adam_step<Scalar>(pv, gv, mv, vv, step, lr, config.adam);
      }
    }

    const double auc = scorer ? scorer(epoch, model) : validation_auc(predict(model, validation), validation.labels);
    result.log.push_back({epoch, loss_sum / static_cast<double>(loss_count), auc, lr});
    if (stopper.observe(epoch, auc)) result.model = model;
    if (stopper.should_stop(epoch)) break;
  }
  result.best_epoch = stopper.best_epoch();
  result.best_auc = stopper.best_score();
  return result;
}

/// Gradient of one class logit (linear output, no softmax) with respect to
/// the raw input, in inference mode.
template <class Scalar>
VectorX<Scalar> input_gradient(const CnnModel<Scalar>& model, const Tensor5<Scalar>& single, Index target_class,
                               GradientRule rule) {
  require(single.batch() == 1, Errc::ShapeMismatch, "input_gradient takes one sample");
  ForwardCache<Scalar> cache;
  forward_inference(model, single, &cache);
  Eigen::MatrixXd dlogits = Eigen::MatrixXd::Zero(1, model.arch.classes);
  dlogits(0, target_class) = 1.0;
  return backward(model, cache, dlogits, static_cast<Params<Scalar>*>(nullptr), rule).data;
}

struct SaliencyMap {
  Eigen::VectorXd map;
  Eigen::Array<bool, Eigen::Dynamic, 1> above_threshold;  // |map| >= max|map| / 3
  Index subjects = 0;
};

/// Guided-backpropagation saliency from the positive-class logit, averaged
/// over subjects of that class which the model classifies correctly.
template <class Scalar>
SaliencyMap guided_backprop_saliency(const CnnModel<Scalar>& model, const CnnData<Scalar>& data,
                                     int positive_class = 1) {
  const Eigen::VectorXd p1 = predict(model, data);
  SaliencyMap out;
  out.map = Eigen::VectorXd::Zero(data.dims[0] * data.dims[1] * data.dims[2]);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.labels[i] != positive_class || predicted_label(p1[static_cast<Index>(i)]) != positive_class) continue;
    const std::size_t idx[1] = {i};
    out.map += input_gradient(model, make_batch(data, idx), positive_class, GradientRule::Guided).template cast<double>();
    ++out.subjects;
  }
  if (out.subjects == 0) fail(Errc::NoCorrectPositives, "no correctly classified positive-class subject");
  out.map /= static_cast<double>(out.subjects);
  const double peak = out.map.cwiseAbs().maxCoeff();
  out.above_threshold = peak > 0.0 ? (out.map.array().abs() >= peak / 3.0).eval()
                                   : Eigen::Array<bool, Eigen::Dynamic, 1>::Constant(out.map.size(), false);
  return out;
}

}  // namespace mriclass::cnn
