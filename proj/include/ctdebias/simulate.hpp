#pragma once

#include <Eigen/Dense>
#include <boost/numeric/odeint.hpp>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ctdebias/common.hpp"
#include "ctdebias/model.hpp"

namespace ctdebias {

/// Measurement noise covariance. The scalar shorthand sigma^2 expands to
/// sigma^2 * I.
struct NoiseModel {
  Eigen::MatrixXd covariance;

  static NoiseModel isotropic(double sigma2, int dim) {
    return {sigma2 * Eigen::MatrixXd::Identity(dim, dim)};
  }

  bool zero() const { return covariance.isZero(0.0); }

  /// Symmetric factor L with L L^T = covariance. Rejects non-PSD inputs.
  Eigen::MatrixXd factor() const {
    const double scale = std::max(1.0, covariance.cwiseAbs().maxCoeff());
    if ((covariance - covariance.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
      throw ConfigError("noise covariance must be symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(covariance);
    Eigen::VectorXd lambda = eig.eigenvalues();
    for (int i = 0; i < lambda.size(); ++i) {
      if (lambda[i] < -1e-12 * scale)
        throw ConfigError("noise covariance is not positive semidefinite");
      lambda[i] = std::sqrt(std::max(lambda[i], 0.0));
    }
    return eig.eigenvectors() * lambda.asDiagonal() * eig.eigenvectors().transpose();
  }
};

/// Ground-truth trajectory description: integrate the order-m system from the
/// initial jet (orders 0..m-1 stacked channel-major) and sample the position
/// at t = i*h for i in 1..n.
struct TrajectoryConfig {
  FeatureModel model;
  Eigen::MatrixXd theta0;   // feature_count x state_dim
  Eigen::VectorXd initial;  // order * state_dim values
  int samples = 0;          // n
  double step = 0.0;        // h
  double rtol = 1e-10;
  double atol = 1e-12;

  void validate() const {
    model.validate();
    if (theta0.rows() != model.feature_count() || theta0.cols() != model.state_dim)
      throw ConfigError("theta0 must be feature_count x state_dim");
    if (initial.size() != model.order * model.state_dim)
      throw ConfigError("initial jet must supply order * state_dim values");
    if (samples < 1) throw ConfigError("sample count must be positive");
    if (!(step > 0)) throw ConfigError("sample period must be positive");
    if (!(rtol > 0) || !(atol > 0)) throw ConfigError("integrator tolerances must be positive");
  }
};

/// Clean positions x(i*h), i in 1..n, by adaptive Dormand-Prince 5(4) with
/// dense output. The order-m equation is integrated as a first-order system
/// over the jet coordinates.
inline Eigen::MatrixXd integrate(const TrajectoryConfig& cfg) {
  namespace ode = boost::numeric::odeint;
  cfg.validate();
  const int dx = cfg.model.state_dim;
  const int m = cfg.model.order;
  using State = std::vector<double>;

  auto system = [&](const State& s, State& ds, double t) {
    for (int d = 0; d + 1 < m; ++d)
      for (int l = 0; l < dx; ++l) ds[d * dx + l] = s[(d + 1) * dx + l];
    Eigen::MatrixXd u = Eigen::MatrixXd::Zero(m + 1, dx);
    for (int d = 0; d < m; ++d)
      for (int l = 0; l < dx; ++l) u(d, l) = s[d * dx + l];
    const Eigen::VectorXd top = rhs(cfg.model, cfg.theta0, u, t);
    for (int l = 0; l < dx; ++l) ds[(m - 1) * dx + l] = top[l];
  };

  State s0(cfg.initial.data(), cfg.initial.data() + cfg.initial.size());
  auto stepper =
      ode::make_dense_output(cfg.atol, cfg.rtol, ode::runge_kutta_dopri5<State>());
  stepper.initialize(s0, 0.0, cfg.step);

  Eigen::MatrixXd out(cfg.samples, dx);
  const double t_end = cfg.samples * cfg.step;
  int i = 1;
  State probe(m * dx);
  while (i <= cfg.samples) {
    std::pair<double, double> interval;
    try {
      interval = stepper.do_step(system);
    } catch (const std::exception& e) {
      throw NumericalError("integrator failed near t=" +
                           std::to_string(stepper.current_time()) + ": " + e.what());
    }
    for (double v : stepper.current_state())
      if (!std::isfinite(v))
        throw NumericalError("integrator produced non-finite state at t=" +
                             std::to_string(stepper.current_time()));
    while (i <= cfg.samples && i * cfg.step <= interval.second + 1e-14 * t_end) {
      stepper.calc_state(i * cfg.step, probe);
      for (int l = 0; l < dx; ++l) out(i - 1, l) = probe[l];
      ++i;
    }
  }
  return out;
}

/// Measurement series z_i = x_i + L g_i with g_i i.i.d. standard normal from a
/// generator seeded by `seed`. Identical (seed, shape) reproduces the series
/// bit for bit on a given platform.
inline Eigen::MatrixXd add_noise(const Eigen::MatrixXd& clean, const NoiseModel& noise,
                                 std::uint64_t seed) {
  if (noise.covariance.rows() != clean.cols() || noise.covariance.cols() != clean.cols())
    throw ConfigError("noise covariance dimension does not match the series");
  const Eigen::MatrixXd L = noise.factor();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXd z = clean;
  Eigen::VectorXd g(clean.cols());
  for (int i = 0; i < clean.rows(); ++i) {
    for (int l = 0; l < g.size(); ++l) g[l] = gauss(rng);
    z.row(i) += (L * g).transpose();
  }
  return z;
}

}  // namespace ctdebias
