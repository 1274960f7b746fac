#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Eigenvalues>

#include "mriclass/error.hpp"
#include "mriclass/rng.hpp"
#include "mriclass/svm.hpp"

using namespace mriclass;
using namespace mriclass::svm;

namespace {

RowMatrix random_matrix(Index n, Index d, Stream& rng) {
  RowMatrix X(n, d);
  for (Index i = 0; i < X.size(); ++i) X.data()[i] = rng.normal();
  return X;
}

Eigen::VectorXd balanced_labels(Index n) {
  Eigen::VectorXd y(n);
  for (Index i = 0; i < n; ++i) y[i] = i % 2 == 0 ? 1.0 : -1.0;
  return y;
}

// Projected gradient ascent on the box-constrained dual of the augmented
// problem, run to convergence. Returns (w, b).
std::pair<Eigen::VectorXd, double> reference_solve(const RowMatrix& Z, const Eigen::VectorXd& y, double C) {
  const Index n = Z.rows(), d = Z.cols();
  Eigen::MatrixXd A(n, d + 1);
  A << Z, Eigen::VectorXd::Ones(n);
  A = y.asDiagonal() * A;
  const Eigen::MatrixXd Q = A * A.transpose();
  const double L = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(Q).eigenvalues().maxCoeff();
  Eigen::VectorXd a = Eigen::VectorXd::Zero(n), z = a, prev = a;
  double t = 1.0;
  for (int it = 0; it < 200000; ++it) {
    const Eigen::VectorXd grad = Eigen::VectorXd::Ones(n) - Q * z;
    prev = a;
    a = (z + grad / L).cwiseMax(0.0).cwiseMin(C);
    const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    z = a + ((t - 1.0) / tn) * (a - prev);
    t = tn;
    if ((a - prev).norm() < 1e-14 * std::max(1.0, a.norm())) break;
  }
  const Eigen::VectorXd wb = A.transpose() * a;
  return {wb.head(d), wb[d]};
}

}  // namespace

TEST_CASE("dual coordinate descent reaches the reference primal objective") {
  Stream rng = Seed(21).stream("svm");
  for (int trial = 0; trial < 6; ++trial) {
    const Index n = 20 + static_cast<Index>(rng.below(20)), d = 5 + static_cast<Index>(rng.below(30));
    RowMatrix Z = random_matrix(n, d, rng);
    Eigen::VectorXd y = balanced_labels(n);
    Z.col(0) += 0.8 * y;
    const double C = std::pow(10.0, -2.0 + 3.0 * rng.uniform());
    const Eigen::VectorXd wb = solve_dual_cd(Z, y, C);
    const auto [w_ref, b_ref] = reference_solve(Z, y, C);
    const double ours = primal_objective(Z, y, wb.head(d), wb[d], C);
    const double ref = primal_objective(Z, y, w_ref, b_ref, C);
    CHECK(std::abs(ours - ref) / ref < 1e-4);
  }
}

TEST_CASE("two symmetric points give w = 1 and b = 0") {
  RowMatrix X(2, 1);
  X << 1.0, -1.0;
  Eigen::VectorXd y(2);
  y << 1.0, -1.0;
  const auto m = train_linear_svm(X, y, 10.0);
  CHECK(m.w[0] == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(std::abs(m.b) < 1e-3);
}

TEST_CASE("separable data is fitted exactly") {
  Stream rng = Seed(22).stream("svm");
  RowMatrix X = random_matrix(40, 8, rng);
  Eigen::VectorXd y = balanced_labels(40);
  X.col(3) += 3.0 * y;
  const auto m = train_linear_svm(X, y, 1.0);
  const Eigen::VectorXd s = decision_scores(m, X);
  for (Index i = 0; i < 40; ++i) CHECK(predicted_class(s[i]) == static_cast<int>(y[i]));
}

TEST_CASE("solver trace is monotone and converges") {
  Stream rng = Seed(23).stream("svm");
  RowMatrix Z = random_matrix(30, 12, rng);
  SolverTrace trace;
  solve_dual_cd(Z, balanced_labels(30), 0.5, {}, &trace);
  CHECK(trace.converged);
  for (std::size_t k = 1; k < trace.primal.size(); ++k) CHECK(trace.primal[k] <= trace.primal[k - 1]);
}

TEST_CASE("standardizer z-scores columns and neutralizes constant ones") {
  RowMatrix X(3, 2);
  X << 1.0, 5.0, 2.0, 5.0, 3.0, 5.0;
  const auto s = fit_standardizer(X);
  CHECK(s.constant[1]);
  CHECK_FALSE(s.constant[0]);
  const RowMatrix Z = s.apply(X);
  CHECK(Z.col(0).mean() == doctest::Approx(0.0).scale(1.0));
  CHECK(Z.col(0).squaredNorm() / 3.0 == doctest::Approx(1.0));
  CHECK(Z.col(1).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("decision scores reject a wrong feature count") {
  RowMatrix X(2, 1);
  X << 1.0, -1.0;
  Eigen::VectorXd y(2);
  y << 1.0, -1.0;
  const auto m = train_linear_svm(X, y, 1.0);
  CHECK_THROWS_AS(decision_scores(m, RowMatrix::Zero(2, 3)), Error);
  CHECK_THROWS_AS(train_linear_svm(X, y, 0.0), Error);
}

TEST_CASE("C selection breaks ties toward the smallest value") {
  Stream rng = Seed(24).stream("svm");
  RowMatrix X = random_matrix(30, 4, rng);
  Eigen::VectorXd y = balanced_labels(30);
  X.col(0) += 10.0 * y;
  const std::vector<double> grid{100.0, 1.0, 10.0};
  CHECK(select_C(X, y, grid, 1, 5) == 1.0);
  const std::vector<double> single{3.0};
  CHECK(select_C(X, y, single, 1, 5) == 3.0);
  CHECK(default_c_grid().front() == 1e-3);
  CHECK(default_c_grid().back() == 100.0);
}

TEST_CASE("permutation moments are exact under full enumeration") {
  Eigen::VectorXd c(6), y(6);
  c << 0.3, -1.2, 0.7, 2.0, -0.4, 0.1;
  y << 1, 1, -1, 1, -1, -1;
  std::vector<int> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  double sum = 0.0, ss = 0.0;
  int count = 0;
  do {
    double v = 0.0;
    for (int i = 0; i < 6; ++i) v += c[i] * y[perm[static_cast<std::size_t>(i)]];
    sum += v;
    ss += v * v;
    ++count;
  } while (std::next_permutation(perm.begin(), perm.end()));
  const double mean = sum / count, var = ss / count - mean * mean;
  const auto [m, v] = permutation_moments(c, y);
  CHECK(count == 720);
  CHECK(m == doctest::Approx(mean).epsilon(1e-12));
  CHECK(v == doctest::Approx(var).epsilon(1e-12));
}

TEST_CASE("balanced labels give a zero null mean") {
  Eigen::VectorXd c(4), y(4);
  c << 1.0, 2.0, 3.0, 4.0;
  y << 1, -1, 1, -1;
  CHECK(permutation_moments(c, y).first == 0.0);
}

TEST_CASE("analytic p-values track a Monte-Carlo permutation null") {
  Stream rng = Seed(25).stream("pmap");
  RowMatrix Z = random_matrix(16, 10, rng);
  Eigen::VectorXd y = balanced_labels(16);
  Z.col(2) += 1.5 * y;
  const auto pm = analytic_pmap(Z, y, 0.05);
  const RowMatrix K = pmap_coefficients(Z);
  const Eigen::VectorXd w = K.transpose() * y;

  std::vector<int> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  Eigen::VectorXi extreme = Eigen::VectorXi::Zero(10);
  const int draws = 4000;
  for (int t = 0; t < draws; ++t) {
    rng.shuffle(std::span<int>(perm));
    Eigen::VectorXd yp(16);
    for (int i = 0; i < 16; ++i) yp[i] = y[perm[static_cast<std::size_t>(i)]];
    const Eigen::VectorXd wp = K.transpose() * yp;
    // Balanced labels: the permutation null is centred at zero.
    for (Index j = 0; j < 10; ++j)
      if (std::abs(wp[j]) >= std::abs(w[j])) ++extreme[j];
  }
  double mad = 0.0;
  for (Index j = 0; j < 10; ++j) mad += std::abs(pm.p[j] - extreme[j] / static_cast<double>(draws));
  CHECK(mad / 10.0 < 0.05);
  CHECK(pm.significant[2]);
  CHECK(pm.p[2] < 0.05);
}

TEST_CASE("p-map of a rank-deficient gram matrix still solves") {
  RowMatrix Z = RowMatrix::Zero(4, 3);
  Z.col(0) << 1, -1, 1, -1;
  Eigen::VectorXd y(4);
  y << 1, -1, 1, -1;
  const auto pm = analytic_pmap(Z, y);
  CHECK(pm.p[1] == 1.0);
  CHECK(pm.p[2] == 1.0);
  CHECK_THROWS_AS(pmap_coefficients(RowMatrix::Zero(3, 2)), Error);
}
