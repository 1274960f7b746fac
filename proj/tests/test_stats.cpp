#include <doctest.h>

#include <cmath>

#include "mriclass/error.hpp"
#include "mriclass/rng.hpp"
#include "mriclass/stats.hpp"

using namespace mriclass;
using namespace mriclass::stats;

namespace {

ScoredSet make_set(const std::vector<int>& labels, const std::vector<double>& scores) {
  ScoredSet s;
  for (std::size_t i = 0; i < labels.size(); ++i)
    s.push_back({"s" + std::to_string(i), labels[i], scores[i], scores[i] >= 0.5 ? 1 : 0});
  return s;
}

double pair_auc(const ScoredSet& s) {
  double num = 0.0, den = 0.0;
  for (const auto& p : s)
    for (const auto& n : s)
      if (p.true_label == 1 && n.true_label == 0) {
        num += p.score > n.score ? 1.0 : (p.score == n.score ? 0.5 : 0.0);
        den += 1.0;
      }
  return num / den;
}

Errc code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::ConfigError;
}

}  // namespace

TEST_CASE("auc equals pair enumeration including ties") {
  Stream rng = Seed(31).stream("auc");
  for (int t = 0; t < 50; ++t) {
    const int n = 4 + static_cast<int>(rng.below(40));
    std::vector<int> labels;
    std::vector<double> scores;
    for (int i = 0; i < n; ++i) {
      labels.push_back(i < 2 ? i : static_cast<int>(rng.below(2)));
      scores.push_back(static_cast<double>(rng.below(6)) / 5.0);
    }
    const auto s = make_set(labels, scores);
    CHECK(auc(s) == pair_auc(s));
  }
}

TEST_CASE("auc edge values and errors") {
  CHECK(auc(make_set({0, 0, 1, 1}, {0.1, 0.2, 0.8, 0.9})) == 1.0);
  CHECK(auc(make_set({0, 0, 1, 1}, {0.9, 0.8, 0.2, 0.1})) == 0.0);
  CHECK(auc(make_set({0, 1}, {0.5, 0.5})) == 0.5);
  CHECK(code_of([] { auc(make_set({1, 1}, {0.1, 0.2})); }) == Errc::SingleClass);
  CHECK(accuracy(make_set({0, 1, 1}, {0.2, 0.7, 0.1})) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("student t quantiles") {
  CHECK(student_t_quantile(0.975, 19) == doctest::Approx(2.093024054).epsilon(1e-8));
  CHECK(student_t_quantile(0.975, 1) == doctest::Approx(12.70620474).epsilon(1e-8));
  CHECK(student_t_quantile(0.95, 4) == doctest::Approx(2.131846786).epsilon(1e-8));
  CHECK(student_t_quantile(0.5, 7) == doctest::Approx(0.0).scale(1.0));
  CHECK(student_t_cdf(student_t_quantile(0.025, 9), 9) == doctest::Approx(0.025).epsilon(1e-10));
}

TEST_CASE("chi-square upper tail") {
  CHECK(chi_square_sf(3.841458821, 1) == doctest::Approx(0.05).epsilon(1e-8));
  CHECK(chi_square_sf(4.05, 1) == doctest::Approx(std::erfc(std::sqrt(4.05 / 2.0))).epsilon(1e-12));
  CHECK(chi_square_sf(5.991464547, 2) == doctest::Approx(0.05).epsilon(1e-8));
  CHECK(chi_square_sf(0.0, 1) == 1.0);
}

TEST_CASE("corrected resampled interval widens the naive t interval") {
  std::vector<double> v;
  Stream rng = Seed(32).stream("cv");
  for (int j = 0; j < 20; ++j) v.push_back(0.8 + 0.05 * rng.normal());
  const auto ci = corrected_resampled_ci(v, 90.0, 10.0);
  double mean = 0.0, ss = 0.0;
  for (double x : v) mean += x / 20.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double naive = 2.093024054 * std::sqrt(ss / 19.0 / 20.0);
  CHECK(ci.point == doctest::Approx(mean));
  CHECK((ci.upper - ci.lower) / 2.0 / naive == doctest::Approx(std::sqrt(1.0 + 20.0 / 9.0)).epsilon(1e-9));

  const std::vector<double> flat(5, 0.7);
  const auto z = corrected_resampled_ci(flat, 9.0, 1.0);
  CHECK(z.lower == 0.7);
  CHECK(z.upper == 0.7);
  const std::vector<double> one{0.5};
  CHECK(code_of([&] { corrected_resampled_ci(one, 9.0, 1.0); }) == Errc::TooFewIterations);
}

TEST_CASE("type 7 quantiles") {
  const std::vector<double> s{1.0, 2.0, 3.0, 4.0};
  CHECK(sorted_quantile(s, 0.0) == 1.0);
  CHECK(sorted_quantile(s, 1.0) == 4.0);
  CHECK(sorted_quantile(s, 0.5) == 2.5);
  CHECK(sorted_quantile(s, 0.25) == doctest::Approx(1.75));
}

TEST_CASE("bootstrap interval over an enumerated resample set") {
  // All 27 ordered resamples of three subjects.
  const auto s = make_set({0, 1, 1}, {0.2, 0.9, 0.4});
  std::vector<std::vector<Index>> resamples;
  std::vector<double> acc;
  for (Index a = 0; a < 3; ++a)
    for (Index b = 0; b < 3; ++b)
      for (Index c = 0; c < 3; ++c) {
        resamples.push_back({a, b, c});
        const int correct = (a != 2) + (b != 2) + (c != 2);
        acc.push_back(correct / 3.0);
      }
  std::sort(acc.begin(), acc.end());
  const auto ci = bootstrap_ci_from_resamples(s, Metric::Accuracy, resamples, 0.9);
  CHECK(ci.lower == doctest::Approx(sorted_quantile(acc, 0.05)));
  CHECK(ci.upper == doctest::Approx(sorted_quantile(acc, 0.95)));
  CHECK(ci.point == doctest::Approx(2.0 / 3.0));
  CHECK(ci.method == CiMethod::BootstrapPercentile);
}

TEST_CASE("bootstrap is reproducible and brackets the estimate") {
  Stream rng = Seed(33).stream("b");
  std::vector<int> labels;
  std::vector<double> scores;
  for (int i = 0; i < 60; ++i) {
    labels.push_back(i % 2);
    scores.push_back(0.3 * (i % 2) + 0.5 * rng.uniform());
  }
  const auto s = make_set(labels, scores);
  const auto a = bootstrap_ci(s, Metric::Auc, 500, 0.95, 4);
  const auto b = bootstrap_ci(s, Metric::Auc, 500, 0.95, 4);
  CHECK(a.lower == b.lower);
  CHECK(a.upper == b.upper);
  CHECK(a.lower <= a.point);
  CHECK(a.point <= a.upper);
  CHECK(a.upper - a.lower < 0.4);
}

TEST_CASE("mcnemar statistic and p-value") {
  const auto r = mcnemar({0, 15, 5, 0});
  CHECK(r.statistic == doctest::Approx(4.05));
  CHECK(r.p_value == doctest::Approx(0.0441).epsilon(0.0005 / 0.0441));
  const auto e = mcnemar({3, 10, 10, 7});
  CHECK(e.statistic == doctest::Approx(0.05));
  CHECK(e.p_value == doctest::Approx(0.823).epsilon(0.001 / 0.823));
  CHECK(code_of([] { mcnemar({4, 0, 0, 6}); }) == Errc::NoDisagreement);
  CHECK(bonferroni_threshold(0.05, 4) == 0.0125);
}

TEST_CASE("contingency table aligns subjects by id") {
  auto a = make_set({0, 1, 1, 0}, {0.1, 0.9, 0.2, 0.8});
  auto b = make_set({0, 1, 1, 0}, {0.7, 0.6, 0.9, 0.3});
  std::reverse(b.begin(), b.end());
  const auto t = contingency_table(a, b);
  // a correct: s0 s1; b correct: s1 s2 s3.
  CHECK(t.n11 == 1);
  CHECK(t.n10 == 1);
  CHECK(t.n01 == 2);
  CHECK(t.n00 == 0);
  CHECK(t.total() == 4);
  b.pop_back();
  CHECK_THROWS_AS(contingency_table(a, b), Error);
}
