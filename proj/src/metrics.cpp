#include "ctsl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace ctsl::metrics {
namespace {

class Fenwick {
 public:
  explicit Fenwick(std::size_t n) : tree_(n + 1, 0) {}
  void add(std::size_t i) {
    for (++i; i < tree_.size(); i += i & (~i + 1)) ++tree_[i];
  }
  // count of inserted positions < i
  std::uint64_t prefix(std::size_t i) const {
    std::uint64_t s = 0;
    for (; i > 0; i -= i & (~i + 1)) s += tree_[i];
    return s;
  }

 private:
  std::vector<std::uint64_t> tree_;
};

void check_group(const std::vector<double>& times, const std::vector<int>& events, const char* what) {
  if (times.size() != events.size()) throw std::invalid_argument(std::string(what) + ": times and events differ in length");
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (!std::isfinite(times[i])) throw std::invalid_argument(std::string(what) + ": non-finite time");
    if (events[i] != 0 && events[i] != 1) throw std::invalid_argument(std::string(what) + ": events must be 0 or 1");
  }
}

// Lentz continued fraction for Q(a, x), x >= a + 1.
double gamma_q_fraction(double a, double x) {
  const double tiny = std::numeric_limits<double>::min() / std::numeric_limits<double>::epsilon();
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 10000; ++i) {
    const double an = -double(i) * (double(i) - a);
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
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

// Series for P(a, x), x < a + 1.
double gamma_p_series(double a, double x) {
  double ap = a;
  double sum = 1.0 / a;
  double del = sum;
  for (int n = 0; n < 10000; ++n) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::abs(del) < std::abs(sum) * 1e-17) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

}  // namespace

double c_index(const std::vector<SurvivalOutcome>& outcomes) {
  const std::size_t n = outcomes.size();
  for (const auto& o : outcomes) {
    if (!std::isfinite(o.time) || !std::isfinite(o.risk)) throw std::invalid_argument("c_index: non-finite outcome");
  }
  // Dense ranks of the risk values.
  std::vector<double> levels;
  levels.reserve(n);
  for (const auto& o : outcomes) levels.push_back(o.risk);
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  auto rank_of = [&](double r) { return std::size_t(std::lower_bound(levels.begin(), levels.end(), r) - levels.begin()); };

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return outcomes[a].time > outcomes[b].time; });

  // Walk from the longest time down; the tree holds subjects with strictly
  // larger times than the current group.
  Fenwick tree(levels.size());
  std::uint64_t inserted = 0, concordant = 0, tied = 0, comparable = 0;
  std::size_t k = 0;
  while (k < n) {
    std::size_t end = k;
    while (end < n && outcomes[order[end]].time == outcomes[order[k]].time) ++end;
    for (std::size_t m = k; m < end; ++m) {
      const auto& o = outcomes[order[m]];
      if (o.event != 1) continue;
      const std::size_t r = rank_of(o.risk);
      const std::uint64_t below = tree.prefix(r);
      const std::uint64_t upto = tree.prefix(r + 1);
      concordant += below;
      tied += upto - below;
      comparable += inserted;
    }
    for (std::size_t m = k; m < end; ++m) {
      tree.add(rank_of(outcomes[order[m]].risk));
      ++inserted;
    }
    k = end;
  }
  if (comparable == 0) throw std::invalid_argument("c_index: no comparable pairs");
  return (2.0 * double(concordant) + double(tied)) / (2.0 * double(comparable));
}

double KmCurve::at(double t) const {
  double s = 1.0;
  for (const KmStep& step : steps) {
    if (step.time > t) break;
    s = step.survival;
  }
  return s;
}

KmCurve km_curve(const std::vector<double>& times, const std::vector<int>& events) {
  check_group(times, events, "km_curve");
  std::vector<std::size_t> order(times.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] < times[b]; });
  KmCurve curve;
  double s = 1.0;
  std::size_t at_risk = times.size();
  std::size_t k = 0;
  while (k < order.size()) {
    KmStep step;
    step.time = times[order[k]];
    step.at_risk = at_risk;
    while (k < order.size() && times[order[k]] == step.time) {
      if (events[order[k]] == 1) {
        ++step.events;
      } else {
        ++step.censored;
      }
      ++k;
    }
    if (step.events > 0) s = s * double(at_risk - step.events) / double(at_risk);
    step.survival = s;
    at_risk -= step.events + step.censored;
    curve.steps.push_back(step);
  }
  return curve;
}

LogRankResult log_rank(const std::vector<double>& times_a, const std::vector<int>& events_a,
                       const std::vector<double>& times_b, const std::vector<int>& events_b) {
  check_group(times_a, events_a, "log_rank");
  check_group(times_b, events_b, "log_rank");
  if (times_a.empty() || times_b.empty()) throw std::invalid_argument("log_rank: both groups must be non-empty");

  struct Obs {
    double time;
    int event;
    int group;
  };
  std::vector<Obs> all;
  for (std::size_t i = 0; i < times_a.size(); ++i) all.push_back({times_a[i], events_a[i], 0});
  for (std::size_t i = 0; i < times_b.size(); ++i) all.push_back({times_b[i], events_b[i], 1});
  std::stable_sort(all.begin(), all.end(), [](const Obs& x, const Obs& y) { return x.time < y.time; });

  double n_a = double(times_a.size()), n_b = double(times_b.size());
  double diff = 0.0, var = 0.0;
  bool any_event = false;
  std::size_t k = 0;
  while (k < all.size()) {
    double d_a = 0, d_b = 0, c_a = 0, c_b = 0;
    const double t = all[k].time;
    for (; k < all.size() && all[k].time == t; ++k) {
      const bool a = all[k].group == 0;
      if (all[k].event == 1) {
        (a ? d_a : d_b) += 1.0;
      } else {
        (a ? c_a : c_b) += 1.0;
      }
    }
    const double d = d_a + d_b;
    if (d > 0.0) {
      any_event = true;
      const double n = n_a + n_b;
      // O_A - E_A written so that swapping the groups negates it exactly.
      diff += (d_a * n_b - d_b * n_a) / n;
      if (n > 1.0) var += (d * (n_a * n_b) * (n - d)) / (n * n * (n - 1.0));
    }
    n_a -= d_a + c_a;
    n_b -= d_b + c_b;
  }
  if (!any_event) throw std::invalid_argument("log_rank: no events");
  if (!(var > 0.0)) throw std::invalid_argument("log_rank: zero variance");
  LogRankResult r;
  r.observed_minus_expected = diff;
  r.variance = var;
  r.statistic = diff * diff / var;
  r.p_value = chi_square_sf(r.statistic, 1.0);
  return r;
}

double regularized_gamma_q(double a, double x) {
  if (!(a > 0.0) || x < 0.0 || std::isnan(x)) throw std::invalid_argument("regularized_gamma_q: need a > 0 and x >= 0");
  if (x == 0.0) return 1.0;
  if (std::isinf(x)) return 0.0;
  if (x < a + 1.0) return 1.0 - gamma_p_series(a, x);
  return gamma_q_fraction(a, x);
}

double chi_square_sf(double x, double dof) {
  if (x <= 0.0) return 1.0;
  return regularized_gamma_q(0.5 * dof, 0.5 * x);
}

Strata stratify_median(const std::vector<double>& risks) {
  if (risks.size() < 2) throw std::invalid_argument("stratify_median: need at least two subjects");
  std::vector<double> sorted = risks;
  std::sort(sorted.begin(), sorted.end());
  Strata s;
  s.median = sorted[(sorted.size() - 1) / 2];
  for (std::size_t i = 0; i < risks.size(); ++i) (risks[i] > s.median ? s.high : s.low).push_back(i);
  return s;
}

}  // namespace ctsl::metrics
