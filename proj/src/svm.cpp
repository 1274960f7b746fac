#include "mriclass/svm.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <Eigen/Cholesky>

#include "mriclass/error.hpp"
#include "mriclass/rng.hpp"

namespace mriclass::svm {

namespace {

void check_labels(const Eigen::VectorXd& y, Index rows) {
  require(y.size() == rows, Errc::DimensionMismatch, "label count differs from row count");
  bool pos = false, neg = false;
  for (Index i = 0; i < y.size(); ++i) {
    require(y[i] == 1.0 || y[i] == -1.0, Errc::InvalidArgument, "labels must be +1 or -1");
    pos |= y[i] > 0;
    neg |= y[i] < 0;
  }
  if (!(pos && neg)) fail(Errc::SingleClass, "both classes must be present");
}

}  // namespace

Standardizer fit_standardizer(const Eigen::Ref<const RowMatrix>& X) {
  require(X.rows() >= 2, Errc::InvalidArgument, "standardizer needs at least 2 rows");
  Standardizer s;
  const double n = static_cast<double>(X.rows());
  s.mean = X.colwise().sum().transpose() / n;
  s.scale = ((X.rowwise() - s.mean.transpose()).array().square().colwise().sum().transpose() / n).sqrt();
  s.constant = s.scale.array() <= 1e-12 * s.mean.array().abs().max(1.0);
  for (Index j = 0; j < s.scale.size(); ++j) {
    if (s.constant[j]) s.scale[j] = 1.0;
  }
  return s;
}

RowMatrix Standardizer::apply(const Eigen::Ref<const RowMatrix>& X) const {
  require(X.cols() == feature_count(), Errc::DimensionMismatch,
          "expected " + std::to_string(feature_count()) + " features, got " + std::to_string(X.cols()));
  RowMatrix Z = (X.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
  for (Index j = 0; j < Z.cols(); ++j) {
    if (constant[j]) Z.col(j).setZero();
  }
  return Z;
}

double primal_objective(const Eigen::Ref<const RowMatrix>& Z, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                        double b, double C) {
  Eigen::VectorXd margins = (y.array() * ((Z * w).array() + b)).matrix();
  double hinge = (1.0 - margins.array()).max(0.0).sum();
  return 0.5 * (w.squaredNorm() + b * b) + C * hinge;
}

Eigen::VectorXd solve_dual_cd(const Eigen::Ref<const RowMatrix>& Z, const Eigen::VectorXd& y, double C,
                              const SolverOptions& opts, SolverTrace* trace) {
  if (!(C > 0.0)) fail(Errc::NonPositiveC, "C must be > 0");
  check_labels(y, Z.rows());
  const Index n = Z.rows();
  const Index d = Z.cols();

  Eigen::VectorXd alpha = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd w = Eigen::VectorXd::Zero(d);
  double b = 0.0;
  Eigen::VectorXd qdiag = Z.rowwise().squaredNorm().array() + 1.0;

  Eigen::VectorXd best_w = w;
  double best_b = b;
  double best_obj = primal_objective(Z, y, w, b, C);

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  Stream rng = Seed(opts.seed).stream("svm-order");

  SolverTrace local;
  for (int it = 0; it < opts.max_outer_iterations; ++it) {
    rng.shuffle(std::span<Index>(order));
    double pg_max = -std::numeric_limits<double>::infinity();
    double pg_min = std::numeric_limits<double>::infinity();
    for (Index i : order) {
      const double grad = y[i] * (Z.row(i).dot(w) + b) - 1.0;
      double pg = grad;
      if (alpha[i] <= 0.0) pg = std::min(grad, 0.0);
      else if (alpha[i] >= C) pg = std::max(grad, 0.0);
      pg_max = std::max(pg_max, pg);
      pg_min = std::min(pg_min, pg);
      if (pg == 0.0) continue;
      const double old = alpha[i];
      alpha[i] = std::clamp(old - grad / qdiag[i], 0.0, C);
      const double step = (alpha[i] - old) * y[i];
      w.noalias() += step * Z.row(i).transpose();
      b += step;
    }
    const double obj = primal_objective(Z, y, w, b, C);
    if (obj < best_obj) {
      best_obj = obj;
      best_w = w;
      best_b = b;
    }
    local.primal.push_back(best_obj);
    local.outer_iterations = it + 1;
    if (pg_max - pg_min < opts.tolerance) {
      local.converged = true;
      break;
    }
  }
  if (trace) *trace = std::move(local);

  Eigen::VectorXd out(d + 1);
  out << best_w, best_b;
  return out;
}

LinearSvmModel train_linear_svm(const Eigen::Ref<const RowMatrix>& X, const Eigen::VectorXd& y, double C,
                                const SolverOptions& opts, SolverTrace* trace) {
  if (!(C > 0.0)) fail(Errc::NonPositiveC, "C must be > 0");
  check_labels(y, X.rows());
  LinearSvmModel m;
  m.C = C;
  m.standardizer = fit_standardizer(X);
  const RowMatrix Z = m.standardizer.apply(X);
  Eigen::VectorXd wb = solve_dual_cd(Z, y, C, opts, trace);
  m.w = wb.head(Z.cols()).cast<float>();
  m.b = wb[Z.cols()];
  return m;
}

Eigen::VectorXd decision_scores(const LinearSvmModel& model, const Eigen::Ref<const RowMatrix>& X) {
  const RowMatrix Z = model.standardizer.apply(X);
  require(Z.cols() == model.feature_count(), Errc::DimensionMismatch, "feature count mismatch");
  return (Z * model.w.cast<double>()).array() + model.b;
}

std::vector<double> default_c_grid() { return {1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0}; }

double select_C(const Eigen::Ref<const RowMatrix>& X, const Eigen::VectorXd& y, std::span<const double> grid,
                std::uint64_t seed, int folds) {
  require(!grid.empty(), Errc::InvalidArgument, "empty C grid");
  check_labels(y, X.rows());
  if (grid.size() == 1) return grid[0];
  require(folds >= 2, Errc::InvalidArgument, "need at least 2 folds");

  // Stratified fold assignment: shuffle each class, deal round-robin.
  std::map<int, std::vector<Index>> classes;
  for (Index i = 0; i < y.size(); ++i) classes[y[i] > 0 ? 1 : -1].push_back(i);
  std::vector<int> fold_of(static_cast<std::size_t>(y.size()));
  Stream rng = Seed(seed).stream("cfolds");
  for (auto& [label, members] : classes) {
    if (static_cast<int>(members.size()) < folds) {
      fail(Errc::ClassTooSmall, "class " + std::to_string(label) + " has fewer members than folds");
    }
    rng.shuffle(std::span<Index>(members));
    for (std::size_t k = 0; k < members.size(); ++k) fold_of[members[k]] = static_cast<int>(k % folds);
  }

  std::vector<double> sorted(grid.begin(), grid.end());
  std::sort(sorted.begin(), sorted.end());
  double best_c = sorted.front();
  double best_acc = -1.0;
  for (double C : sorted) {
    double acc_sum = 0.0;
    for (int f = 0; f < folds; ++f) {
      std::vector<Index> tr, va;
      for (Index i = 0; i < y.size(); ++i) (fold_of[i] == f ? va : tr).push_back(i);
      RowMatrix Xtr = X(tr, Eigen::indexing::all);
      Eigen::VectorXd ytr = y(tr);
      SolverOptions opts;
      opts.seed = seed;
      LinearSvmModel m = train_linear_svm(Xtr, ytr, C, opts);
      RowMatrix Xva = X(va, Eigen::indexing::all);
      Eigen::VectorXd s = decision_scores(m, Xva);
      int correct = 0;
      for (std::size_t k = 0; k < va.size(); ++k) correct += predicted_class(s[static_cast<Index>(k)]) == static_cast<int>(y[va[k]]);
      acc_sum += static_cast<double>(correct) / static_cast<double>(va.size());
    }
    const double acc = acc_sum / folds;
    if (acc > best_acc) {
      best_acc = acc;
      best_c = C;
    }
  }
  return best_c;
}

RowMatrix pmap_coefficients(const Eigen::Ref<const RowMatrix>& Z) {
  const Index n = Z.rows();
  Eigen::MatrixXd gram = Z * Z.transpose();
  const double trace = gram.trace();
  if (!(trace > 0.0) || !std::isfinite(trace)) fail(Errc::DegenerateGram, "Gram matrix has zero trace");
  gram.diagonal().array() += 1e-8 * trace / static_cast<double>(n);
  Eigen::LLT<Eigen::MatrixXd> llt(gram);
  if (llt.info() != Eigen::Success) fail(Errc::DegenerateGram, "Gram matrix is not positive definite");
  RowMatrix coeffs = llt.solve(Eigen::MatrixXd(Z));
  if (!coeffs.allFinite()) fail(Errc::DegenerateGram, "Gram solve produced non-finite values");
  return coeffs;
}

std::pair<double, double> permutation_moments(const Eigen::Ref<const Eigen::VectorXd>& c,
                                              const Eigen::Ref<const Eigen::VectorXd>& y) {
  const double n = static_cast<double>(c.size());
  const double mean = c.sum() * y.sum() / n;
  const double css = (c.array() - c.mean()).square().sum();
  const double yss = (y.array() - y.mean()).square().sum();
  return {mean, css * yss / (n - 1.0)};
}

PMap analytic_pmap(const Eigen::Ref<const RowMatrix>& Z, const Eigen::VectorXd& y, double alpha) {
  require(Z.rows() >= 4, Errc::InvalidArgument, "p-map needs at least 4 subjects");
  require(alpha > 0.0 && alpha < 1.0, Errc::InvalidArgument, "alpha must be in (0,1)");
  check_labels(y, Z.rows());
  const RowMatrix coeffs = pmap_coefficients(Z);

  PMap out;
  out.alpha = alpha;
  out.p.resize(Z.cols());
  out.significant.resize(Z.cols());
  for (Index j = 0; j < Z.cols(); ++j) {
    const Eigen::VectorXd c = coeffs.col(j);
    const double w = c.dot(y);
    auto [mean, var] = permutation_moments(c, y);
    const double scale = c.squaredNorm() * y.squaredNorm();
    double p = 1.0;
    if (var > 1e-24 * scale && var > 0.0) {
      const double z = (w - mean) / std::sqrt(var);
      p = std::erfc(std::abs(z) / std::sqrt(2.0));
    }
    out.p[j] = std::clamp(p, 0.0, 1.0);
    out.significant[j] = out.p[j] <= alpha;
  }
  return out;
}

}  // namespace mriclass::svm
