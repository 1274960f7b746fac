#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace mriclass::svm {

using Index = Eigen::Index;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Per-feature z-scoring fitted on training rows. Constant columns keep
/// scale 1 and map to 0.
struct Standardizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;
  Eigen::Array<bool, Eigen::Dynamic, 1> constant;

  Index feature_count() const { return mean.size(); }
  RowMatrix apply(const Eigen::Ref<const RowMatrix>& X) const;
};

Standardizer fit_standardizer(const Eigen::Ref<const RowMatrix>& X);

struct LinearSvmModel {
  Eigen::VectorXf w;
  double b = 0.0;
  double C = 1.0;
  Standardizer standardizer;

  Index feature_count() const { return w.size(); }
};

struct SolverOptions {
  double tolerance = 1e-6;  // projected-gradient spread at which the dual is declared solved
  int max_outer_iterations = 20000;
  std::uint64_t seed = 0;   // coordinate order
};

struct SolverTrace {
  std::vector<double> primal;  // incumbent primal objective after each outer pass
  int outer_iterations = 0;
  bool converged = false;
};

/// ½(‖w‖² + b²) + C Σ max(0, 1 − yᵢ(w·zᵢ + b)), the bias entering as an extra
/// constant-1 feature. `Z` is already standardized.
double primal_objective(const Eigen::Ref<const RowMatrix>& Z, const Eigen::VectorXd& y,
                        const Eigen::VectorXd& w, double b, double C);

/// Dual coordinate descent on 0 <= α <= C for standardized inputs. Returns
/// the weights with the bias appended as the last entry.
Eigen::VectorXd solve_dual_cd(const Eigen::Ref<const RowMatrix>& Z, const Eigen::VectorXd& y, double C,
                              const SolverOptions& opts = {}, SolverTrace* trace = nullptr);

/// Standardizes `X` on itself and fits the linear SVM. `y` holds ±1.
LinearSvmModel train_linear_svm(const Eigen::Ref<const RowMatrix>& X, const Eigen::VectorXd& y, double C,
                                const SolverOptions& opts = {}, SolverTrace* trace = nullptr);

/// w·standardize(x) + b per row.
Eigen::VectorXd decision_scores(const LinearSvmModel& model, const Eigen::Ref<const RowMatrix>& X);
/// sign(score), 0 mapped to +1.
inline int predicted_class(double score) { return score >= 0.0 ? 1 : -1; }

std::vector<double> default_c_grid();

/// Grid value maximizing mean stratified k-fold validation accuracy; ties go
/// to the smallest C.
double select_C(const Eigen::Ref<const RowMatrix>& X, const Eigen::VectorXd& y, std::span<const double> grid,
                std::uint64_t seed, int folds = 5);

struct PMap {
  Eigen::VectorXd p;
  double alpha = 0.05;
  Eigen::Array<bool, Eigen::Dynamic, 1> significant;
};

/// Analytic approximation of the label-permutation null of the minimum-norm
/// SVM weights ŵ = Zᵀ(ZZᵀ + εI)⁻¹y. Uncorrected two-sided p-values.
PMap analytic_pmap(const Eigen::Ref<const RowMatrix>& Z, const Eigen::VectorXd& y, double alpha = 0.05);

/// Rows of Zᵀ(ZZᵀ + εI)⁻¹ laid out as columns: column j holds the
/// coefficients mapping labels to ŵ_j.
RowMatrix pmap_coefficients(const Eigen::Ref<const RowMatrix>& Z);

/// Null mean and variance of c·y_π over uniformly random permutations π.
std::pair<double, double> permutation_moments(const Eigen::Ref<const Eigen::VectorXd>& c,
                                              const Eigen::Ref<const Eigen::VectorXd>& y);

}  // namespace mriclass::svm
