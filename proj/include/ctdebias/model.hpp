#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "ctdebias/common.hpp"

namespace ctdebias {

/// One monomial coeff * prod_i coord[i]^power[i] over the extended
/// coordinates. Coordinate kappa = d * state_dim + channel addresses the
/// order-d derivative of that channel; kappa = (m+1) * state_dim addresses
/// time.
struct MonomialTerm {
  double coeff = 0.0;
  std::vector<std::pair<int, int>> powers;  // (coordinate, exponent > 0)
};

/// Polynomial feature map over state derivatives and time, with exact
/// gradients and Hessians. The dynamics read: order-m derivative of the state
/// equals features(u, t)^T theta.
struct FeatureModel {
  int state_dim = 0;  // channels
  int order = 0;      // m: the derivative order being modeled
  std::vector<std::vector<MonomialTerm>> features;

  int feature_count() const { return static_cast<int>(features.size()); }
  int coord_count() const { return (order + 1) * state_dim; }
  int time_coord() const { return coord_count(); }

  void validate() const {
    if (state_dim < 1) throw ConfigError("model needs at least one state channel");
    if (order < 1) throw ConfigError("model order must be at least 1");
    if (features.empty()) throw ConfigError("model needs at least one feature");
    const int highest = (order - 1) * state_dim + (state_dim - 1);
    for (const auto& feature : features)
      for (const auto& term : feature) {
        if (!std::isfinite(term.coeff)) throw ConfigError("non-finite feature coefficient");
        for (const auto& [coord, power] : term.powers) {
          if (power < 0) throw ConfigError("negative exponent in feature");
          if (coord == time_coord()) continue;
          if (coord < 0 || coord > highest)
            throw ConfigError(
                "features may only reference derivatives below the model order");
        }
      }
  }
};

namespace detail {

inline double int_pow(double base, int exp) {
  double out = 1.0;
  for (int i = 0; i < exp; ++i) out *= base;
  return out;
}

/// Coordinate value from the extended point; time is the last coordinate.
inline double coord_value(const Eigen::MatrixXd& u, int state_dim, int coord, double t) {
  if (coord == static_cast<int>(u.size())) return t;
  return u(coord / state_dim, coord % state_dim);
}

}  // namespace detail

/// Exact evaluation of all features at extended point u ((m+1) x state_dim
/// with row d = order-d derivatives) and time t.
inline Eigen::VectorXd eval_features(const FeatureModel& model, const Eigen::MatrixXd& u,
                                     double t) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(model.feature_count());
  for (int a = 0; a < model.feature_count(); ++a)
    for (const auto& term : model.features[a]) {
      double value = term.coeff;
      for (const auto& [coord, power] : term.powers)
        value *= detail::int_pow(detail::coord_value(u, model.state_dim, coord, t), power);
      out[a] += value;
    }
  return out;
}

/// Analytic gradient, feature_count x coord_count. Time is held fixed, and
/// columns for order-m coordinates are identically zero since features may
/// not depend on them.
inline Eigen::MatrixXd eval_gradient(const FeatureModel& model, const Eigen::MatrixXd& u,
                                     double t) {
  const int K = model.coord_count();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(model.feature_count(), K);
  for (int a = 0; a < model.feature_count(); ++a)
    for (const auto& term : model.features[a])
      for (std::size_t i = 0; i < term.powers.size(); ++i) {
        const auto [coord, power] = term.powers[i];
        if (coord >= K) continue;  // time derivative not part of the gradient
        double value = term.coeff * power *
                       detail::int_pow(detail::coord_value(u, model.state_dim, coord, t),
                                       power - 1);
        for (std::size_t o = 0; o < term.powers.size(); ++o)
          if (o != i)
            value *= detail::int_pow(
                detail::coord_value(u, model.state_dim, term.powers[o].first, t),
                term.powers[o].second);
        out(a, coord) += value;
      }
  return out;
}

/// Analytic Hessians, one coord_count x coord_count matrix per feature;
/// symmetric by construction.
inline std::vector<Eigen::MatrixXd> eval_hessian(const FeatureModel& model,
                                                 const Eigen::MatrixXd& u, double t) {
  const int K = model.coord_count();
  std::vector<Eigen::MatrixXd> out(model.feature_count(), Eigen::MatrixXd::Zero(K, K));
  for (int a = 0; a < model.feature_count(); ++a)
    for (const auto& term : model.features[a]) {
      const auto& pw = term.powers;
      for (std::size_t i = 0; i < pw.size(); ++i) {
        if (pw[i].first >= K) continue;
        // d^2 / d coord_i^2
        if (pw[i].second >= 2) {
          double value = term.coeff * pw[i].second * (pw[i].second - 1) *
                         detail::int_pow(
                             detail::coord_value(u, model.state_dim, pw[i].first, t),
                             pw[i].second - 2);
          for (std::size_t o = 0; o < pw.size(); ++o)
            if (o != i)
              value *= detail::int_pow(
                  detail::coord_value(u, model.state_dim, pw[o].first, t), pw[o].second);
          out[a](pw[i].first, pw[i].first) += value;
        }
        // mixed d^2 / d coord_i d coord_j, j > i
        for (std::size_t jj = i + 1; jj < pw.size(); ++jj) {
          if (pw[jj].first >= K) continue;
          double value = term.coeff * pw[i].second * pw[jj].second *
                         detail::int_pow(
                             detail::coord_value(u, model.state_dim, pw[i].first, t),
                             pw[i].second - 1) *
                         detail::int_pow(
                             detail::coord_value(u, model.state_dim, pw[jj].first, t),
                             pw[jj].second - 1);
          for (std::size_t o = 0; o < pw.size(); ++o)
            if (o != i && o != jj)
              value *= detail::int_pow(
                  detail::coord_value(u, model.state_dim, pw[o].first, t), pw[o].second);
          out[a](pw[i].first, pw[jj].first) += value;
          out[a](pw[jj].first, pw[i].first) += value;
        }
      }
    }
  return out;
}

/// Model right-hand side: features(u, t)^T theta, the order-m derivative
/// predicted at the extended point.
inline Eigen::VectorXd rhs(const FeatureModel& model, const Eigen::MatrixXd& theta,
                           const Eigen::MatrixXd& u, double t) {
  if (theta.rows() != model.feature_count() || theta.cols() != model.state_dim)
    throw ConfigError("parameter matrix must be feature_count x state_dim");
  return theta.transpose() * eval_features(model, u, t);
}

/// Van der Pol oscillator written as a second-order scalar autoregression:
/// y'' = theta_1 (1 - y^2) y' + theta_2 y.
inline FeatureModel vdp_model() {
  FeatureModel m;
  m.state_dim = 1;
  m.order = 2;
  m.features = {
      {{1.0, {{1, 1}}}, {-1.0, {{0, 2}, {1, 1}}}},  // (1 - y^2) y'
      {{1.0, {{0, 1}}}},                            // y
  };
  return m;
}

inline Eigen::MatrixXd vdp_true_theta() {
  Eigen::MatrixXd theta(2, 1);
  theta << 40.0, -400.0;
  return theta;
}

/// Lorenz system as a first-order autoregression with the five-feature library
/// x1, x2, x3, x1*x2, x1*x3.
inline FeatureModel lorenz_model() {
  FeatureModel m;
  m.state_dim = 3;
  m.order = 1;
  m.features = {
      {{1.0, {{0, 1}}}},
      {{1.0, {{1, 1}}}},
      {{1.0, {{2, 1}}}},
      {{1.0, {{0, 1}, {1, 1}}}},
      {{1.0, {{0, 1}, {2, 1}}}},
  };
  return m;
}

inline Eigen::MatrixXd lorenz_true_theta() {
  Eigen::MatrixXd theta(5, 3);
  theta << -10.0, 28.0, 0.0,
            10.0, -1.0, 0.0,
             0.0,  0.0, -8.0 / 3.0,
             0.0,  0.0, 1.0,
             0.0, -1.0, 0.0;
  return theta;
}

}  // namespace ctdebias
