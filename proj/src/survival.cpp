#include "ctsl/survival.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace ctsl::survival {
namespace {

// Indices sorted by descending time; equal times stay in input order.
std::vector<std::size_t> by_time_desc(const Eigen::VectorXd& time) {
  std::vector<std::size_t> order(time.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return time[a] > time[b]; });
  return order;
}

void check_outcomes(const Eigen::VectorXd& time, const Eigen::VectorXi& event, Eigen::Index n) {
  if (time.size() != n || event.size() != n) throw std::invalid_argument("cox: outcome length mismatch");
  bool any = false;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!std::isfinite(time[i]) || time[i] <= 0.0) throw std::invalid_argument("cox: times must be positive and finite");
    if (event[i] != 0 && event[i] != 1) throw std::invalid_argument("cox: events must be 0 or 1");
    any = any || event[i] == 1;
  }
  if (!any) throw std::invalid_argument("cox: no events");
}

void compute_baseline(CoxModel& m, const Eigen::MatrixXd& z, const Eigen::VectorXd& time, const Eigen::VectorXi& event) {
  const Eigen::VectorXd eta = z * m.theta;
  const auto order = by_time_desc(time);
  std::vector<double> times, incs;
  double s0 = 0.0;
  std::size_t k = 0;
  while (k < order.size()) {
    const double t = time[order[k]];
    std::size_t end = k;
    double deaths = 0.0;
    while (end < order.size() && time[order[end]] == t) {
      s0 += std::exp(eta[order[end]]);
      deaths += event[order[end]];
      ++end;
    }
    if (deaths > 0.0) {
      times.push_back(t);
      incs.push_back(deaths / s0);
    }
    k = end;
  }
  std::reverse(times.begin(), times.end());
  std::reverse(incs.begin(), incs.end());
  m.baseline_times = times;
  m.baseline_increments = incs;
  m.baseline_cumulative.resize(incs.size());
  double c = 0.0;
  for (std::size_t i = 0; i < incs.size(); ++i) m.baseline_cumulative[i] = c += incs[i];
}

}  // namespace

std::vector<std::size_t> correlation_filter(const Eigen::MatrixXd& x, double threshold) {
  if (x.cols() == 0) throw std::invalid_argument("correlation_filter: no features");
  if (x.rows() < 3) throw std::invalid_argument("correlation_filter: need at least 3 samples");
  if (!(threshold > 0.0 && threshold <= 1.0)) throw std::invalid_argument("correlation_filter: threshold must be in (0, 1]");
  const Eigen::Index n = x.rows(), p = x.cols();
  Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
  Eigen::VectorXd norms = centered.colwise().norm();
  std::vector<std::size_t> kept;
  for (Eigen::Index j = 0; j < p; ++j) {
    const double scale = std::max(1.0, x.col(j).cwiseAbs().maxCoeff());
    if (!(norms[j] > 1e-12 * scale * std::sqrt(double(n)))) continue;  // constant
    bool drop = false;
    for (std::size_t k : kept) {
      const double r = centered.col(j).dot(centered.col(Eigen::Index(k))) / (norms[j] * norms[Eigen::Index(k)]);
      if (std::abs(r) > threshold || std::abs(r) >= 1.0 - 1e-12) {
        drop = true;
        break;
      }
    }
    if (!drop) kept.push_back(std::size_t(j));
  }
  return kept;
}

Eigen::VectorXd CoxModel::raw_coefficients() const {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(Eigen::Index(n_features));
  for (std::size_t k = 0; k < kept.size(); ++k) out[Eigen::Index(kept[k])] = theta[Eigen::Index(k)] / scales[Eigen::Index(k)];
  return out;
}

Eigen::MatrixXd CoxModel::standardize(const Eigen::MatrixXd& x) const {
  if (x.cols() != Eigen::Index(n_features)) throw std::invalid_argument("cox: feature length mismatch");
  Eigen::MatrixXd z(x.rows(), Eigen::Index(kept.size()));
  for (std::size_t k = 0; k < kept.size(); ++k) {
    const auto j = Eigen::Index(kept[k]);
    z.col(Eigen::Index(k)) = (x.col(j).array() - means[Eigen::Index(k)]) / scales[Eigen::Index(k)];
  }
  return z;
}

double cox_objective(const Eigen::MatrixXd& x, const Eigen::VectorXd& time, const Eigen::VectorXi& event,
                     const Eigen::VectorXd& theta, double penalizer, Eigen::VectorXd* grad, Eigen::MatrixXd* hessian) {
  const Eigen::Index n = x.rows(), p = x.cols();
  if (theta.size() != p) throw std::invalid_argument("cox: coefficient length mismatch");
  if (time.size() != n || event.size() != n) throw std::invalid_argument("cox: outcome length mismatch");
  const Eigen::VectorXd eta = x * theta;
  const auto order = by_time_desc(time);

  double value = 0.0;
  double s0 = 0.0;
  Eigen::VectorXd s1 = Eigen::VectorXd::Zero(p);
  Eigen::MatrixXd s2;
  if (hessian) s2 = Eigen::MatrixXd::Zero(p, p);
  if (grad) *grad = Eigen::VectorXd::Zero(p);
  if (hessian) *hessian = Eigen::MatrixXd::Zero(p, p);

  std::size_t k = 0;
  while (k < order.size()) {
    const double t = time[order[k]];
    std::size_t end = k;
    // Everyone tied at t joins the risk set before the events at t are scored.
    while (end < order.size() && time[order[end]] == t) {
      const Eigen::Index i = Eigen::Index(order[end]);
      const double w = std::exp(eta[i]);
      s0 += w;
      if (grad || hessian) s1.noalias() += w * x.row(i).transpose();
      if (hessian) s2.selfadjointView<Eigen::Lower>().rankUpdate(x.row(i).transpose(), w);
      ++end;
    }
    for (std::size_t m = k; m < end; ++m) {
      const Eigen::Index i = Eigen::Index(order[m]);
      if (event[i] != 1) continue;
      value -= eta[i] - std::log(s0);
      if (grad) *grad -= x.row(i).transpose() - s1 / s0;
      if (hessian) {
        const Eigen::VectorXd mean = s1 / s0;
        Eigen::MatrixXd full = s2.selfadjointView<Eigen::Lower>();
        *hessian += full / s0 - mean * mean.transpose();
      }
    }
    k = end;
  }
  value += penalizer * theta.squaredNorm();
  if (grad) *grad += 2.0 * penalizer * theta;
  if (hessian) hessian->diagonal().array() += 2.0 * penalizer;
  return value;
}

CoxModel fit_cox(const Eigen::MatrixXd& x, const Eigen::VectorXd& time, const Eigen::VectorXi& event,
                 const CoxConfig& cfg) {
  const Eigen::Index n = x.rows();
  if (n == 0 || x.cols() == 0) throw std::invalid_argument("cox: empty design matrix");
  if (!x.allFinite()) throw std::invalid_argument("cox: non-finite covariates");
  if (!(cfg.penalizer >= 0.0)) throw std::invalid_argument("cox: penalizer must be non-negative");
  check_outcomes(time, event, n);

  CoxModel m;
  m.n_features = std::size_t(x.cols());
  m.penalizer = cfg.penalizer;
  if (cfg.filter && n >= 3) {
    m.kept = correlation_filter(x, cfg.correlation_threshold);
  } else {
    m.kept.resize(std::size_t(x.cols()));
    std::iota(m.kept.begin(), m.kept.end(), 0);
  }
  const Eigen::Index p = Eigen::Index(m.kept.size());
  m.means.resize(p);
  m.scales.resize(p);
  for (Eigen::Index k = 0; k < p; ++k) {
    const auto col = x.col(Eigen::Index(m.kept[std::size_t(k)]));
    m.means[k] = col.mean();
    const double sd = std::sqrt((col.array() - m.means[k]).square().sum() / double(n));
    m.scales[k] = sd > 0.0 ? sd : 1.0;
  }
  const Eigen::MatrixXd z = m.standardize(x);
  m.theta = Eigen::VectorXd::Zero(p);

  Eigen::VectorXd grad;
  Eigen::MatrixXd hess;
  double value = cox_objective(z, time, event, m.theta, cfg.penalizer, &grad, &hess);
  if (!std::isfinite(value)) throw std::runtime_error("cox: non-finite objective at the start");
  m.objective_trace.push_back(value);
  for (m.iterations = 0; m.iterations < cfg.max_iterations; ++m.iterations) {
    if (p == 0 || grad.lpNorm<Eigen::Infinity>() < cfg.tolerance) {
      m.converged = true;
      break;
    }
    Eigen::VectorXd step;
    double ridge = 0.0;
    for (int attempt = 0;; ++attempt) {
      Eigen::MatrixXd h = hess;
      h.diagonal().array() += ridge;
      Eigen::LDLT<Eigen::MatrixXd> ldlt(h);
      if (ldlt.info() == Eigen::Success && ldlt.isPositive() && (ldlt.vectorD().array() > 0.0).all()) {
        step = ldlt.solve(grad);
        if (step.allFinite()) break;
      }
      if (attempt >= 6) throw std::runtime_error("cox: Hessian is singular even after ridge regularisation");
      ridge = ridge == 0.0 ? 1e-8 * std::max(1.0, hess.diagonal().cwiseAbs().maxCoeff()) : ridge * 100.0;
    }
    // Step halving until the objective decreases.
    double t = 1.0;
    bool accepted = false;
    Eigen::VectorXd next;
    double next_value = 0.0;
    for (int halvings = 0; halvings < 40; ++halvings, t *= 0.5) {
      next = m.theta - t * step;
      next_value = cox_objective(z, time, event, next, cfg.penalizer);
      if (std::isfinite(next_value) && next_value <= value) {
        accepted = true;
        break;
      }
    }
    if (!accepted) break;  // no descent possible at machine precision
    m.theta = next;
    value = cox_objective(z, time, event, m.theta, cfg.penalizer, &grad, &hess);
    m.objective_trace.push_back(value);
  }
  if (!m.converged && p > 0 && grad.lpNorm<Eigen::Infinity>() < cfg.tolerance) m.converged = true;
  compute_baseline(m, z, time, event);
  return m;
}

CoxModel fit_cox(const std::vector<FusedSample>& samples, const CoxConfig& cfg) {
  if (samples.empty()) throw std::invalid_argument("cox: no samples");
  const std::size_t p = samples.front().x.size();
  Eigen::MatrixXd x(Eigen::Index(samples.size()), Eigen::Index(p));
  Eigen::VectorXd time(Eigen::Index(samples.size()));
  Eigen::VectorXi event(Eigen::Index(samples.size()));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].x.size() != p) throw std::invalid_argument("cox: samples differ in feature length");
    for (std::size_t j = 0; j < p; ++j) x(Eigen::Index(i), Eigen::Index(j)) = samples[i].x[j];
    time[Eigen::Index(i)] = samples[i].time;
    event[Eigen::Index(i)] = samples[i].event;
  }
  return fit_cox(x, time, event, cfg);
}

double linear_predictor(const Eigen::VectorXd& theta, const Eigen::VectorXd& standardized) {
  if (theta.size() != standardized.size()) throw std::invalid_argument("cox: feature length mismatch");
  return theta.dot(standardized);
}

Eigen::VectorXd predict_risk(const CoxModel& model, const Eigen::MatrixXd& x) {
  if (!model.fitted()) throw std::logic_error("cox: model not fitted");
  return model.standardize(x) * model.theta;
}

double predict_risk(const CoxModel& model, const std::vector<double>& x) {
  Eigen::MatrixXd row(1, Eigen::Index(x.size()));
  for (std::size_t j = 0; j < x.size(); ++j) row(0, Eigen::Index(j)) = x[j];
  return predict_risk(model, row)[0];
}

double cumulative_baseline_hazard(const CoxModel& model, double t) {
  const auto it = std::upper_bound(model.baseline_times.begin(), model.baseline_times.end(), t);
  if (it == model.baseline_times.begin()) return 0.0;
  return model.baseline_cumulative[std::size_t(it - model.baseline_times.begin()) - 1];
}

double hazard_at(const CoxModel& model, const std::vector<double>& x, double t) {
  const auto it = std::lower_bound(model.baseline_times.begin(), model.baseline_times.end(), t);
  if (it == model.baseline_times.end() || *it != t) return 0.0;
  return model.baseline_increments[std::size_t(it - model.baseline_times.begin())] * std::exp(predict_risk(model, x));
}

Attribution linear_attribution(const CoxModel& model, const Eigen::MatrixXd& x, std::size_t image_offset,
                               std::size_t top_k) {
  if (!model.fitted()) throw std::logic_error("linear_attribution: model not fitted");
  if (x.rows() == 0) throw std::invalid_argument("linear_attribution: no samples");
  const Eigen::MatrixXd z = model.standardize(x);
  const Eigen::RowVectorXd background = z.colwise().mean();
  Attribution out;
  out.phi = (z.rowwise() - background) * model.theta.asDiagonal();
  out.risk = z * model.theta;
  const Eigen::Index n = x.rows(), p = z.cols();
  out.image_positive.assign(std::size_t(n), 0.0);
  out.image_negative.assign(std::size_t(n), 0.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<double> pos, neg;
    for (Eigen::Index k = 0; k < p; ++k) {
      if (model.kept[std::size_t(k)] < image_offset) continue;
      const double v = out.phi(i, k);
      if (v > 0.0) pos.push_back(v);
      if (v < 0.0) neg.push_back(v);
    }
    std::sort(pos.begin(), pos.end(), std::greater<>());
    std::sort(neg.begin(), neg.end());
    for (std::size_t k = 0; k < std::min(top_k, pos.size()); ++k) out.image_positive[std::size_t(i)] += pos[k];
    for (std::size_t k = 0; k < std::min(top_k, neg.size()); ++k) out.image_negative[std::size_t(i)] += neg[k];
  }
  for (Eigen::Index k = 0; k < p; ++k) out.ranking.push_back({model.kept[std::size_t(k)], out.phi.col(k).cwiseAbs().mean()});
  std::stable_sort(out.ranking.begin(), out.ranking.end(),
                   [](const FeatureRank& a, const FeatureRank& b) { return a.mean_abs > b.mean_abs; });
  return out;
}

}  // namespace ctsl::survival
