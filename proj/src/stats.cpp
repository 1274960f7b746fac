#include "mriclass/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "mriclass/error.hpp"
#include "mriclass/rng.hpp"

namespace mriclass::stats {

std::string_view to_string(Metric m) { return m == Metric::Auc ? "auc" : "accuracy"; }

std::string_view to_string(CiMethod m) {
  return m == CiMethod::CorrectedResampledT ? "corrected_resampled_t" : "bootstrap_percentile";
}

double auc(std::span<const ScoredSubject> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a].score < scores[b].score; });

  // Rank sum of positives with tied groups sharing their mean rank; all
  // quantities are multiples of 1/2 and stay exact in double.
  double rank_sum_pos = 0.0;
  double n_pos = 0.0, n_neg = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]].score == scores[order[i]].score) ++j;
    const double mean_rank = 0.5 * static_cast<double>(i + 1 + j + 1);
    for (std::size_t k = i; k <= j; ++k) {
      if (scores[order[k]].true_label == 1) {
        rank_sum_pos += mean_rank;
        n_pos += 1.0;
      } else {
        n_neg += 1.0;
      }
    }
    i = j + 1;
  }
  if (n_pos == 0.0 || n_neg == 0.0) fail(Errc::SingleClass, "AUC needs both classes");
  const double u = rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0;
  return u / (n_pos * n_neg);
}

double accuracy(std::span<const ScoredSubject> scores) {
  if (scores.empty()) fail(Errc::Empty, "accuracy of an empty set");
  std::size_t correct = 0;
  for (const auto& s : scores) correct += s.predicted_label == s.true_label;
  return static_cast<double>(correct) / static_cast<double>(scores.size());
}

double evaluate(Metric m, std::span<const ScoredSubject> scores) {
  return m == Metric::Auc ? auc(scores) : accuracy(scores);
}

namespace {

// Continued fraction for the incomplete beta function (modified Lentz).
double beta_continued_fraction(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-16;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) break;
  }
  return h;
}

}  // namespace

double regularized_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double regularized_gamma_q(double a, double x) {
  if (x <= 0.0) return 1.0;
  const double log_front = -x + a * std::log(x) - std::lgamma(a);
  if (x < a + 1.0) {
    // Series for P(a, x).
    double ap = a, sum = 1.0 / a, del = sum;
    for (int n = 0; n < 100000; ++n) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::abs(del) < std::abs(sum) * 1e-17) break;
    }
    return 1.0 - sum * std::exp(log_front);
  }
  // Continued fraction for Q(a, x).
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a, c = 1.0 / tiny, d = 1.0 / b, h = d;
  for (int i = 1; i <= 100000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-16) break;
  }
  return std::exp(log_front) * h;
}

double student_t_cdf(double t, double df) {
  const double tail = 0.5 * regularized_beta(0.5 * df, 0.5, df / (df + t * t));
  return t >= 0.0 ? 1.0 - tail : tail;
}

double student_t_quantile(double p, double df) {
  require(p > 0.0 && p < 1.0 && df > 0.0, Errc::InvalidArgument, "t quantile needs p in (0,1) and df > 0");
  if (p == 0.5) return 0.0;
  if (p < 0.5) return -student_t_quantile(1.0 - p, df);
  double lo = 0.0, hi = 1.0;
  while (student_t_cdf(hi, df) < p) hi *= 2.0;
  for (int i = 0; i < 200 && hi - lo > 1e-15 * hi; ++i) {
    const double mid = 0.5 * (lo + hi);
    (student_t_cdf(mid, df) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

double chi_square_sf(double x, double df) {
  if (x <= 0.0) return 1.0;
  return regularized_gamma_q(0.5 * df, 0.5 * x);
}

ConfidenceInterval corrected_resampled_ci(std::span<const double> values, double n_train, double n_test,
                                          double level) {
  if (values.size() < 2) fail(Errc::TooFewIterations, "corrected resampled t-test needs J >= 2");
  require(n_train > 0 && n_test > 0, Errc::InvalidArgument, "n_train and n_test must be positive");
  require(level > 0.0 && level < 1.0, Errc::InvalidArgument, "level must be in (0,1)");
  const double J = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= J;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double var = ss / (J - 1.0);
  const double t = student_t_quantile(0.5 * (1.0 + level), J - 1.0);
  const double half = t * std::sqrt((1.0 / J + n_test / n_train) * var);
  return {mean, mean - half, mean + half, level, CiMethod::CorrectedResampledT};
}

double sorted_quantile(std::span<const double> sorted, double q) {
  require(!sorted.empty(), Errc::Empty, "quantile of an empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

ConfidenceInterval bootstrap_ci_from_resamples(std::span<const ScoredSubject> scores, Metric metric,
                                               std::span<const std::vector<Index>> resamples, double level) {
  require(level > 0.0 && level < 1.0, Errc::InvalidArgument, "level must be in (0,1)");
  require(!resamples.empty(), Errc::InvalidArgument, "no resamples");
  std::vector<double> values;
  values.reserve(resamples.size());
  ScoredSet draw;
  for (const auto& idx : resamples) {
    draw.clear();
    for (Index i : idx) draw.push_back(scores[static_cast<std::size_t>(i)]);
    values.push_back(evaluate(metric, draw));
  }
  std::sort(values.begin(), values.end());
  ConfidenceInterval ci;
  ci.point = evaluate(metric, scores);
  ci.lower = sorted_quantile(values, 0.5 * (1.0 - level));
  ci.upper = sorted_quantile(values, 0.5 * (1.0 + level));
  ci.level = level;
  ci.method = CiMethod::BootstrapPercentile;
  return ci;
}

ConfidenceInterval bootstrap_ci(std::span<const ScoredSubject> scores, Metric metric, int B, double level,
                                std::uint64_t seed) {
  if (scores.empty()) fail(Errc::Empty, "bootstrap of an empty set");
  require(B >= 1, Errc::InvalidArgument, "B must be >= 1");
  evaluate(metric, scores);  // point estimate must exist

  Stream rng = Seed(seed).stream("bootstrap");
  const auto n = static_cast<std::uint64_t>(scores.size());
  std::vector<std::vector<Index>> resamples;
  resamples.reserve(static_cast<std::size_t>(B));
  const long long cap = 100LL * B;
  long long draws = 0;
  while (static_cast<int>(resamples.size()) < B) {
    if (++draws > cap) fail(Errc::MetricUndefined, "too many single-class bootstrap resamples");
    std::vector<Index> idx(scores.size());
    bool pos = false, neg = false;
    for (auto& i : idx) {
      i = static_cast<Index>(rng.below(n));
      (scores[static_cast<std::size_t>(i)].true_label == 1 ? pos : neg) = true;
    }
    if (metric == Metric::Auc && !(pos && neg)) continue;
    resamples.push_back(std::move(idx));
  }
  auto ci = bootstrap_ci_from_resamples(scores, metric, resamples, level);
  // Guard the invariant lower <= point <= upper for degenerate distributions.
  ci.lower = std::min(ci.lower, ci.point);
  ci.upper = std::max(ci.upper, ci.point);
  return ci;
}

ContingencyTable contingency_table(std::span<const ScoredSubject> a, std::span<const ScoredSubject> b) {
  std::map<std::string_view, const ScoredSubject*> by_id;
  for (const auto& s : b) by_id.emplace(s.subject_id, &s);
  if (by_id.size() != b.size() || a.size() != b.size()) {
    fail(Errc::FeatureMismatch, "prediction sets do not cover the same subjects");
  }
  ContingencyTable t;
  for (const auto& sa : a) {
    auto it = by_id.find(sa.subject_id);
    if (it == by_id.end()) fail(Errc::FeatureMismatch, "subject " + sa.subject_id + " missing from second set");
    if (it->second->true_label != sa.true_label) fail(Errc::FeatureMismatch, "label disagreement for " + sa.subject_id);
    const bool ca = sa.predicted_label == sa.true_label;
    const bool cb = it->second->predicted_label == it->second->true_label;
    if (ca && cb) ++t.n11;
    else if (ca) ++t.n10;
    else if (cb) ++t.n01;
    else ++t.n00;
  }
  return t;
}

McNemarResult mcnemar(const ContingencyTable& t) {
  const auto discordant = t.n01 + t.n10;
  if (discordant <= 0) fail(Errc::NoDisagreement, "classifiers agree on every subject");
  const double diff = std::abs(static_cast<double>(t.n01 - t.n10)) - 1.0;
  McNemarResult r;
  r.statistic = diff * diff / static_cast<double>(discordant);
  r.p_value = chi_square_sf(r.statistic, 1.0);
  return r;
}

}  // namespace mriclass::stats
