#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace mriclass::stats {

using Index = Eigen::Index;

struct ScoredSubject {
  std::string subject_id;
  int true_label = 0;  // 0 or 1
  double score = 0.0;
  int predicted_label = 0;
};

using ScoredSet = std::vector<ScoredSubject>;

enum class Metric { Auc, Accuracy };
enum class CiMethod { CorrectedResampledT, BootstrapPercentile };

std::string_view to_string(Metric m);
std::string_view to_string(CiMethod m);

struct ConfidenceInterval {
  double point = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  double level = 0.95;
  CiMethod method = CiMethod::CorrectedResampledT;
};

/// Mann-Whitney estimate: fraction of positive/negative pairs where the
/// positive scores higher, ties counting one half.
double auc(std::span<const ScoredSubject> scores);
double accuracy(std::span<const ScoredSubject> scores);
double evaluate(Metric m, std::span<const ScoredSubject> scores);

// Special functions.
double regularized_beta(double a, double b, double x);
double regularized_gamma_q(double a, double x);
double student_t_cdf(double t, double df);
double student_t_quantile(double p, double df);
/// Upper tail P(X > x) of the chi-square distribution.
double chi_square_sf(double x, double df);

/// mean ± t_{J−1,(1+level)/2} · sqrt((1/J + n_test/n_train) s²) over the J
/// per-iteration values of an overlapping-resample cross-validation.
ConfidenceInterval corrected_resampled_ci(std::span<const double> values, double n_train, double n_test,
                                          double level = 0.95);

/// Linear-interpolation quantile (type 7) of an ascending-sorted sample.
double sorted_quantile(std::span<const double> sorted, double q);

/// Percentile interval of `metric` over the given index resamples.
ConfidenceInterval bootstrap_ci_from_resamples(std::span<const ScoredSubject> scores, Metric metric,
                                               std::span<const std::vector<Index>> resamples, double level);

/// B with-replacement resamples of subjects. AUC resamples holding a single
/// class are redrawn, up to 100·B draws in total.
ConfidenceInterval bootstrap_ci(std::span<const ScoredSubject> scores, Metric metric, int B = 500,
                                double level = 0.95, std::uint64_t seed = 0);

/// n_ab counts subjects where classifier A is correct (a=1) or wrong (a=0)
/// and likewise for B.
struct ContingencyTable {
  std::int64_t n00 = 0;
  std::int64_t n01 = 0;
  std::int64_t n10 = 0;
  std::int64_t n11 = 0;

  std::int64_t total() const { return n00 + n01 + n10 + n11; }
};

/// Aligns two prediction sets on subject_id.
ContingencyTable contingency_table(std::span<const ScoredSubject> a, std::span<const ScoredSubject> b);

struct McNemarResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

/// Continuity-corrected (|n01 − n10| − 1)² / (n01 + n10) against χ²₁.
McNemarResult mcnemar(const ContingencyTable& t);
inline double bonferroni_threshold(double alpha, int comparisons) { return alpha / comparisons; }

}  // namespace mriclass::stats
