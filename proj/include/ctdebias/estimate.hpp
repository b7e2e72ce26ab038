#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "ctdebias/common.hpp"
#include "ctdebias/filter.hpp"
#include "ctdebias/model.hpp"
#include "ctdebias/simulate.hpp"

namespace ctdebias {

enum class Method { ls, bc, iv };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::bc: return "bc";
    case Method::iv: return "iv";
    default: return "ls";
  }
}

inline Method method_from_string(const std::string& s) {
  if (s == "ls" || s == "LS") return Method::ls;
  if (s == "bc" || s == "BC") return Method::bc;
  if (s == "iv" || s == "IV") return Method::iv;
  throw ConfigError("unknown estimator '" + s + "'");
}

/// Assembled regression: covariate rows are features of the smoothed jet,
/// response rows are the smoothed order-m derivative. The tilde parts carry
/// the second, independently filtered copy used by the IV estimator.
struct RegressionData {
  Eigen::MatrixXd covariates;  // n' x feature_count
  Eigen::MatrixXd responses;   // n' x state_dim
  std::optional<Eigen::MatrixXd> iv_covariates;
  std::optional<Eigen::MatrixXd> iv_responses;

  int count() const { return static_cast<int>(covariates.rows()); }
};

/// Covariance of the filtered noise across jet coordinates:
/// cov[(l,d),(l',d')] = Sigma_eps(l,l') * sum_k D(d,k) D(d',k), flattened as
/// kappa = d * state_dim + l.
struct FilterNoiseCov {
  Eigen::MatrixXd cov;  // K x K
};

/// Corrections subtracted from the least-squares normal equations by the BC
/// estimator.
struct BiasCorrections {
  Eigen::MatrixXd gram;   // feature_count x feature_count
  Eigen::MatrixXd cross;  // feature_count x state_dim
};

struct EstimatorOutput {
  Method method = Method::ls;
  Eigen::MatrixXd theta;  // feature_count x state_dim
  Eigen::MatrixXd gram;   // the matrix that was actually inverted
  double pe_stat = 0.0;   // sigma_min(covariates) / sqrt(n')
  double gram_condition = 0.0;
  int sample_count = 0;
};

/// Persistency-of-excitation statistic sigma_min(Phi) / sqrt(n').
inline double pe_diagnostic(const Eigen::MatrixXd& covariates) {
  if (covariates.rows() == 0) return 0.0;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(covariates);
  return svd.singularValues().minCoeff() / std::sqrt(static_cast<double>(covariates.rows()));
}

namespace detail {

constexpr double singular_rel_tol = 1e-12;

/// Solve G x = R for symmetric G via eigendecomposition; reports conditioning
/// and throws when G is numerically singular. `context` distinguishes the
/// failing gram in the error message.
inline Eigen::MatrixXd solve_symmetric(const Eigen::MatrixXd& G, const Eigen::MatrixXd& R,
                                       const std::string& context, double pe_stat,
                                       double* condition) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(G);
  const Eigen::VectorXd lambda = eig.eigenvalues();
  const double lo = lambda.cwiseAbs().minCoeff();
  const double hi = lambda.cwiseAbs().maxCoeff();
  if (!(hi > 0) || lo <= hi * singular_rel_tol)
    throw NumericalError(context + " is numerically singular (pe_stat=" +
                             std::to_string(pe_stat) + ")",
                         pe_stat);
  if (condition) *condition = hi / lo;
  return eig.eigenvectors() * lambda.cwiseInverse().asDiagonal() *
         eig.eigenvectors().transpose() * R;
}

}  // namespace detail

/// Builds covariate and response rows from a smoothed jet.
inline RegressionData assemble(const JetSeries& jet, const FeatureModel& model) {
  if (jet.dim() != model.state_dim)
    throw ConfigError("jet channel count does not match the model");
  if (jet.max_deriv() < model.order)
    throw ConfigError("jet carries derivatives up to order " +
                      std::to_string(jet.max_deriv()) + " but the model needs " +
                      std::to_string(model.order));
  if (jet.count() == 0) throw ConfigError("empty jet: no full filter window fits");
  RegressionData data;
  data.covariates.resize(jet.count(), model.feature_count());
  data.responses.resize(jet.count(), model.state_dim);
  for (int j = 0; j < jet.count(); ++j) {
    data.covariates.row(j) = eval_features(model, jet.point(j), jet.time(j)).transpose();
    data.responses.row(j) = jet.deriv[model.order].row(j);
  }
  return data;
}

/// Plain least squares through the normal equations of the assembled
/// regression. Biased downward under measurement noise; the baseline the BC
/// and IV estimators improve on.
inline EstimatorOutput ls_estimate(const RegressionData& data) {
  if (data.count() == 0) throw ConfigError("empty regression data");
  const double n = data.count();
  EstimatorOutput out;
  out.method = Method::ls;
  out.sample_count = data.count();
  out.gram = data.covariates.transpose() * data.covariates / n;
  out.pe_stat = pe_diagnostic(data.covariates);
  const Eigen::MatrixXd moment = data.covariates.transpose() * data.responses / n;
  out.theta = detail::solve_symmetric(out.gram, moment, "least-squares gram", out.pe_stat,
                                      &out.gram_condition);
  return out;
}

/// Noise covariance of the jet coordinates produced by one bank.
inline FilterNoiseCov filter_noise_cov(const FilterBank& bank, const NoiseModel& noise) {
  const int dx = static_cast<int>(noise.covariance.rows());
  const int orders = bank.spec.max_deriv + 1;
  const Eigen::MatrixXd overlap = bank.coeffs * bank.coeffs.transpose();
  Eigen::MatrixXd cov(orders * dx, orders * dx);
  for (int d = 0; d < orders; ++d)
    for (int dp = 0; dp < orders; ++dp)
      cov.block(d * dx, dp * dx, dx, dx) = overlap(d, dp) * noise.covariance;
  return {cov};
}

/// Second-order noise-bias estimates for the quadratic sums of the normal
/// equations. Applying the bias operator to the products phi_a * phi_b and
/// phi_a * y_c and expanding with the Leibniz rule gives, per sample,
///   gram:  (1/2)<H_a, C> phi_b + (1/2)<H_b, C> phi_a + grad_a^T C grad_b
///   cross: (1/2)<H_a, C> y_c + grad_a^T C e_(c,m)
/// where e_(c,m) selects the order-m coordinate of channel c (the response is
/// itself a jet coordinate, so its gradient is that basis vector).
inline BiasCorrections bias_corrections(const RegressionData& data, const JetSeries& jet,
                                        const FeatureModel& model, const FilterNoiseCov& noise_cov) {
  if (data.count() != jet.count())
    throw ConfigError("regression data and jet disagree on sample count");
  const int d_phi = model.feature_count();
  const int dx = model.state_dim;
  const int K = model.coord_count();
  if (noise_cov.cov.rows() < K)
    throw ConfigError("filter noise covariance is smaller than the model's coordinates");
  const Eigen::MatrixXd C = noise_cov.cov.topLeftCorner(K, K);

  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(d_phi, d_phi);
  Eigen::MatrixXd cross = Eigen::MatrixXd::Zero(d_phi, dx);
  Eigen::VectorXd hc(d_phi);
  for (int j = 0; j < jet.count(); ++j) {
    const Eigen::MatrixXd u = jet.point(j);
    const double t = jet.time(j);
    const Eigen::MatrixXd grad = eval_gradient(model, u, t);
    const auto hess = eval_hessian(model, u, t);
    for (int a = 0; a < d_phi; ++a) hc[a] = 0.5 * hess[a].cwiseProduct(C).sum();
    const Eigen::VectorXd phi = data.covariates.row(j);
    const Eigen::VectorXd y = data.responses.row(j);
    const Eigen::MatrixXd gradC = grad * C;  // d_phi x K
    gram += hc * phi.transpose() + phi * hc.transpose() + gradC * grad.transpose();
    cross += hc * y.transpose() + gradC.middleCols(model.order * dx, dx);
  }
  gram /= jet.count();
  cross /= jet.count();
  gram = 0.5 * (gram + gram.transpose()).eval();  // exact symmetry
  return {gram, cross};
}

/// Bias-corrected least squares: the LS normal equations with the estimated
/// noise-induced terms subtracted. Reduces to LS exactly when the noise
/// covariance is zero.
inline EstimatorOutput bc_estimate(const RegressionData& data,
                                   const BiasCorrections& corrections) {
  if (data.count() == 0) throw ConfigError("empty regression data");
  const double n = data.count();
  EstimatorOutput out;
  out.method = Method::bc;
  out.sample_count = data.count();
  out.pe_stat = pe_diagnostic(data.covariates);
  out.gram = data.covariates.transpose() * data.covariates / n - corrections.gram;
  const Eigen::MatrixXd moment =
      data.covariates.transpose() * data.responses / n - corrections.cross;
  out.theta = detail::solve_symmetric(
      out.gram, moment, "bias-corrected gram (possible over-correction at low SNR)",
      out.pe_stat, &out.gram_condition);
  return out;
}

/// Covariates and responses for the IV estimator from two staggered jets on
/// the same time grid. Each covariate row carries its own small embedded bias
/// correction (zero for harmonic or linear features); responses stay raw.
inline RegressionData iv_assemble(const JetSeries& jet_hat, const JetSeries& jet_tilde,
                                  const FeatureModel& model, const FilterNoiseCov& cov_hat,
                                  const FilterNoiseCov& cov_tilde) {
  if (jet_hat.count() != jet_tilde.count() ||
      std::abs(jet_hat.t0 - jet_tilde.t0) > 1e-12 * std::max(1.0, std::abs(jet_hat.t0)) ||
      std::abs(jet_hat.step - jet_tilde.step) > 1e-15)
    throw ConfigError("staggered jets must share their evaluation time grid");
  const int K = model.coord_count();
  const Eigen::MatrixXd Ch = cov_hat.cov.topLeftCorner(K, K);
  const Eigen::MatrixXd Ct = cov_tilde.cov.topLeftCorner(K, K);

  RegressionData hat = assemble(jet_hat, model);
  RegressionData tilde = assemble(jet_tilde, model);
  for (int j = 0; j < hat.count(); ++j) {
    const auto hess_hat = eval_hessian(model, jet_hat.point(j), jet_hat.time(j));
    const auto hess_tilde = eval_hessian(model, jet_tilde.point(j), jet_tilde.time(j));
    for (int a = 0; a < model.feature_count(); ++a) {
      hat.covariates(j, a) -= 0.5 * hess_hat[a].cwiseProduct(Ch).sum();
      tilde.covariates(j, a) -= 0.5 * hess_tilde[a].cwiseProduct(Ct).sum();
    }
  }
  RegressionData data;
  data.covariates = std::move(hat.covariates);
  data.responses = std::move(hat.responses);
  data.iv_covariates = std::move(tilde.covariates);
  data.iv_responses = std::move(tilde.responses);
  return data;
}

/// Instrumental-variables estimator with the symmetrized cross-gram. The two
/// staggered jets see disjoint noise samples, so the noise cross terms average
/// out instead of biasing the gram.
inline EstimatorOutput iv_estimate(const RegressionData& data) {
  if (!data.iv_covariates || !data.iv_responses)
    throw ConfigError("IV estimation needs the staggered covariates");
  if (data.count() == 0) throw ConfigError("empty regression data");
  const double n = data.count();
  const Eigen::MatrixXd& hat = data.covariates;
  const Eigen::MatrixXd& tilde = *data.iv_covariates;
  EstimatorOutput out;
  out.method = Method::iv;
  out.sample_count = data.count();
  out.pe_stat = pe_diagnostic(hat);
  const Eigen::MatrixXd cross = hat.transpose() * tilde / n;
  out.gram = 0.5 * (cross + cross.transpose());
  const Eigen::MatrixXd moment =
      (tilde.transpose() * data.responses + hat.transpose() * (*data.iv_responses)) /
      (2.0 * n);
  out.theta = detail::solve_symmetric(out.gram, moment, "IV cross-gram", out.pe_stat,
                                      &out.gram_condition);
  return out;
}

}  // namespace ctdebias
