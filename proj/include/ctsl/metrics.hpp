#pragma once

// Survival evaluation: concordance, Kaplan-Meier, log-rank, median split.

#include <cstddef>
#include <vector>

namespace ctsl::metrics {

struct SurvivalOutcome {
  double time = 0.0;
  int event = 0;
  double risk = 0.0;
};

// Harrell's C: pairs with t_i < t_j and event_i are comparable; a higher
// risk for i scores 1, a risk tie 0.5. Time ties are not comparable.
// O(n log n). Throws when no pair is comparable.
double c_index(const std::vector<SurvivalOutcome>& outcomes);

struct KmStep {
  double time = 0.0;
  double survival = 1.0;  // S just after `time`
  std::size_t at_risk = 0;
  std::size_t events = 0;
  std::size_t censored = 0;
};

struct KmCurve {
  std::vector<KmStep> steps;  // one per distinct observed time
  double at(double t) const;  // right-continuous, S(t) = 1 before the first event
};

KmCurve km_curve(const std::vector<double>& times, const std::vector<int>& events);

struct LogRankResult {
  double statistic = 0.0;
  double p_value = 1.0;
  double observed_minus_expected = 0.0;  // for group A
  double variance = 0.0;
};

LogRankResult log_rank(const std::vector<double>& times_a, const std::vector<int>& events_a,
                       const std::vector<double>& times_b, const std::vector<int>& events_b);

// Regularised upper incomplete gamma Q(a, x).
double regularized_gamma_q(double a, double x);
// Survival function of the chi-square distribution with `dof` degrees of freedom.
double chi_square_sf(double x, double dof);

struct Strata {
  std::vector<std::size_t> high;  // indices with risk > median
  std::vector<std::size_t> low;
  double median = 0.0;  // lower median for even n
};

Strata stratify_median(const std::vector<double>& risks);

}  // namespace ctsl::metrics
