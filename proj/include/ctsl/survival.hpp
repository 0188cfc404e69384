#pragma once

// Penalised Cox proportional hazards on fused [EHR, image] features, with a
// greedy correlation filter, Breslow baseline and exact linear attribution.

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace ctsl::survival {

struct FusedSample {
  std::string study_id;
  std::vector<double> x;  // concat[ehr, image]
  double time = 0.0;
  int event = 0;
};

// Greedy scan in index order: constant columns are dropped, then column j is
// dropped when |pearson r| with an already kept column exceeds `threshold`
// (perfectly collinear columns are always dropped).
std::vector<std::size_t> correlation_filter(const Eigen::MatrixXd& x, double threshold);

struct CoxConfig {
  double penalizer = 1e-2;
  double correlation_threshold = 0.9;
  bool filter = true;
  std::size_t max_iterations = 100;
  double tolerance = 1e-6;  // on the gradient infinity norm
};

struct CoxModel {
  std::size_t n_features = 0;  // width of the raw fused vector
  std::vector<std::size_t> kept;  // raw indices, sorted
  Eigen::VectorXd means;  // per kept feature
  Eigen::VectorXd scales;
  Eigen::VectorXd theta;  // on standardised kept features
  double penalizer = 0.0;
  std::vector<double> baseline_times;  // distinct event times
  std::vector<double> baseline_increments;  // Breslow jumps
  std::vector<double> baseline_cumulative;
  std::size_t iterations = 0;
  bool converged = false;
  std::vector<double> objective_trace;  // accepted iterates

  bool fitted() const { return n_features > 0; }
  // Coefficients per raw feature on the raw scale; zero for dropped features.
  Eigen::VectorXd raw_coefficients() const;
  Eigen::MatrixXd standardize(const Eigen::MatrixXd& x) const;
};

// Sum-form negative log partial likelihood with Breslow ties plus
// penalizer * |theta|^2. x is the design matrix already in model units.
double cox_objective(const Eigen::MatrixXd& x, const Eigen::VectorXd& time, const Eigen::VectorXi& event,
                     const Eigen::VectorXd& theta, double penalizer, Eigen::VectorXd* grad = nullptr,
                     Eigen::MatrixXd* hessian = nullptr);

CoxModel fit_cox(const Eigen::MatrixXd& x, const Eigen::VectorXd& time, const Eigen::VectorXi& event,
                 const CoxConfig& cfg = {});
CoxModel fit_cox(const std::vector<FusedSample>& samples, const CoxConfig& cfg = {});

// Linear predictor theta^T standardize(x).
double predict_risk(const CoxModel& model, const std::vector<double>& x);
Eigen::VectorXd predict_risk(const CoxModel& model, const Eigen::MatrixXd& x);
// theta^T z for an already standardised kept-feature vector z.
double linear_predictor(const Eigen::VectorXd& theta, const Eigen::VectorXd& standardized);

// Breslow cumulative baseline hazard H0(t), right-continuous step function.
double cumulative_baseline_hazard(const CoxModel& model, double t);
// Baseline jump at t (zero away from event times) times exp(risk).
double hazard_at(const CoxModel& model, const std::vector<double>& x, double t);

struct FeatureRank {
  std::size_t feature = 0;  // raw index
  double mean_abs = 0.0;
};

struct Attribution {
  Eigen::MatrixXd phi;  // [n, kept] contributions
  Eigen::VectorXd risk;
  std::vector<double> image_positive;  // per sample, sum of the top positive image contributions
  std::vector<double> image_negative;  // per sample, sum of the top negative image contributions
  std::vector<FeatureRank> ranking;  // by mean |phi|, descending
};

// Exact SHAP values of the linear predictor against the column means of x:
// phi_ik = theta_k (z_ik - mean_i z_ik). Raw features with index >=
// image_offset form the image block that is aggregated per sample.
Attribution linear_attribution(const CoxModel& model, const Eigen::MatrixXd& x, std::size_t image_offset,
                               std::size_t top_k = 5);

}  // namespace ctsl::survival
