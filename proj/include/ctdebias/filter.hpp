#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "ctdebias/common.hpp"

namespace ctdebias {

/// Which window columns a filter bank may use. Parity-masked supports are the
/// building blocks of the staggered pair used by the IV estimator.
enum class Support { full, odd_columns, even_columns };

inline const char* to_string(Support s) {
  switch (s) {
    case Support::odd_columns: return "odd-columns";
    case Support::even_columns: return "even-columns";
    default: return "full";
  }
}

inline Support support_from_string(const std::string& s) {
  if (s == "full") return Support::full;
  if (s == "odd-columns" || s == "odd") return Support::odd_columns;
  if (s == "even-columns" || s == "even") return Support::even_columns;
  throw ConfigError("unknown filter support '" + s + "'");
}

/// Design parameters of a local-polynomial differentiation filter.
///
/// A bank built from this spec consumes `window` consecutive samples taken at
/// period `step`, and produces estimates of derivative orders 0..max_deriv at
/// an evaluation time located `eval_index - 1` sample periods after the first
/// sample of the window. The bank differentiates polynomials of degree
/// < accuracy exactly.
struct FilterSpec {
  int window = 0;         // N: samples per window
  int accuracy = 0;       // p: exact on polynomials of degree < p
  int max_deriv = 0;      // m: highest derivative row produced
  double eval_index = 0;  // i0: 1-based window position, half-integers allowed
  double step = 1.0;      // h: sample period
  Support support = Support::full;

  /// Spec with the evaluation time at the window midpoint, which minimizes
  /// the bias constants.
  static FilterSpec centered(int window, int accuracy, int max_deriv,
                             double step, Support sup = Support::full) {
    return {window, accuracy, max_deriv, 0.5 * (window + 1), step, sup};
  }

  /// 1-based sample indices the bank may touch.
  std::vector<int> support_indices() const {
    std::vector<int> ks;
    const int start = (support == Support::even_columns) ? 2 : 1;
    const int stride = (support == Support::full) ? 1 : 2;
    for (int k = start; k <= window; k += stride) ks.push_back(k);
    return ks;
  }

  void validate() const {
    if (window < 1) throw ConfigError("filter window must be positive");
    if (max_deriv < 0) throw ConfigError("derivative order must be nonnegative");
    if (accuracy <= max_deriv)
      throw ConfigError("accuracy order p must exceed derivative order m (got p=" +
                        std::to_string(accuracy) + ", m=" + std::to_string(max_deriv) + ")");
    const int avail = (support == Support::full) ? window : window / 2;
    if (avail < accuracy)
      throw ConfigError("window supplies " + std::to_string(avail) +
                        " samples but the design needs " + std::to_string(accuracy));
    if (!(step > 0)) throw ConfigError("sample period must be positive");
    if (eval_index < 1.0 || eval_index > static_cast<double>(window))
      throw ConfigError("evaluation position must lie within the window");
  }
};

/// Linear system D * lhs = rhs expressing the exact-differentiation
/// ("natural") conditions: lhs(a, j) = (k_a - i0)^j h^j / j! over supported
/// sample indices k_a, rhs(d, j) = delta_dj.
struct ConstraintSystem {
  Eigen::MatrixXd lhs;       // |support| x p
  Eigen::MatrixXd rhs;       // (m+1) x p
  std::vector<int> samples;  // 1-based indices the lhs rows refer to
};

inline ConstraintSystem build_constraints(const FilterSpec& spec) {
  spec.validate();
  const auto ks = spec.support_indices();
  const int rows = static_cast<int>(ks.size());
  if (rows < spec.accuracy)
    throw ConfigError("constraint system underdetermined: support has " +
                      std::to_string(rows) + " samples, need " +
                      std::to_string(spec.accuracy));
  ConstraintSystem cs;
  cs.samples = ks;
  cs.lhs.resize(rows, spec.accuracy);
  for (int a = 0; a < rows; ++a) {
    const double u = (ks[a] - spec.eval_index) * spec.step;
    double term = 1.0;  // u^j / j!
    for (int j = 0; j < spec.accuracy; ++j) {
      cs.lhs(a, j) = term;
      term *= u / (j + 1);
    }
  }
  cs.rhs = Eigen::MatrixXd::Zero(spec.max_deriv + 1, spec.accuracy);
  for (int d = 0; d <= spec.max_deriv; ++d) cs.rhs(d, d) = 1.0;
  return cs;
}

/// Differentiation filter bank: coeffs(d, k-1) multiplies the k-th window
/// sample to produce the order-d derivative estimate.
struct FilterBank {
  FilterSpec spec;
  Eigen::MatrixXd coeffs;  // (m+1) x N
};

namespace detail {

/// Legendre values P_q(s) and derivatives up to order `derivs`, from the
/// three-term recurrence differentiated with the Leibniz rule.
/// Returns (derivs+1) x count with entry (d, q) = P_q^{(d)}(s).
inline Eigen::MatrixXd legendre_derivatives(double s, int count, int derivs) {
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(derivs + 1, count);
  if (count == 0) return P;
  P(0, 0) = 1.0;
  if (count > 1) {
    P(0, 1) = s;
    if (derivs > 0) P(1, 1) = 1.0;
  }
  for (int q = 1; q + 1 < count; ++q) {
    for (int d = 0; d <= derivs; ++d) {
      const double lower = (d > 0) ? d * P(d - 1, q) : 0.0;
      P(d, q + 1) = ((2 * q + 1) * (s * P(d, q) + lower) - q * P(d, q - 1)) / (q + 1);
    }
  }
  return P;
}

}  // namespace detail

/// Minimum-Frobenius-norm bank satisfying the natural conditions.
///
/// The constraints are re-expressed in Legendre polynomials on the normalized
/// window coordinate before QR factorization; the monomial normal equations
/// contain a Hilbert-type matrix and lose all accuracy beyond small windows.
inline FilterBank design_filter(const FilterSpec& spec) {
  spec.validate();
  const auto ks = spec.support_indices();
  const int rows = static_cast<int>(ks.size());
  const int p = spec.accuracy;
  const int m = spec.max_deriv;
  if (rows < p)
    throw ConfigError("constraint system underdetermined: support has " +
                      std::to_string(rows) + " samples, need " + std::to_string(p));

  // Local sample times relative to the evaluation time, mapped onto [-1, 1].
  Eigen::VectorXd u(rows);
  for (int a = 0; a < rows; ++a) u[a] = (ks[a] - spec.eval_index) * spec.step;
  const double lo = u.minCoeff(), hi = u.maxCoeff();
  const double center = 0.5 * (lo + hi);
  double half = 0.5 * (hi - lo);
  if (!(half > 0)) half = 1.0;  // single-sample support

  Eigen::MatrixXd basis(rows, p);
  for (int a = 0; a < rows; ++a)
    basis.row(a) = detail::legendre_derivatives((u[a] - center) / half, p, 0).row(0);

  // Derivatives of the basis at the evaluation time u = 0, back in time units.
  const double s0 = (0.0 - center) / half;
  Eigen::MatrixXd targets = detail::legendre_derivatives(s0, p, m);
  double scale = 1.0;
  for (int d = 0; d <= m; ++d, scale /= half) targets.row(d) *= scale;

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(basis);
  if (qr.rank() < p)
    throw NumericalError("rank-deficient constraint system (rank " +
                         std::to_string(qr.rank()) + " < " + std::to_string(p) + ")");

  // Row d of the bank is the minimum-norm w with basis^T w = targets.row(d):
  // w = Q * R^{-T} * P^T b, which lies in range(basis).
  const Eigen::MatrixXd R = qr.matrixR().topLeftCorner(p, p);
  Eigen::MatrixXd y = qr.colsPermutation().transpose() * targets.transpose();  // p x (m+1)
  R.transpose().triangularView<Eigen::Lower>().solveInPlace(y);
  Eigen::MatrixXd padded = Eigen::MatrixXd::Zero(rows, m + 1);
  padded.topRows(p) = y;
  const Eigen::MatrixXd weights = qr.householderQ() * padded;  // rows x (m+1)

  FilterBank bank{spec, Eigen::MatrixXd::Zero(m + 1, spec.window)};
  for (int a = 0; a < rows; ++a) bank.coeffs.col(ks[a] - 1) = weights.row(a).transpose();
  return bank;
}

/// Closed-form D = B (A^T A)^{-1} A^T on the raw monomial constraints.
/// Reference path for cross-checking design_filter; the normal equations are
/// only trustworthy for small windows.
inline FilterBank design_filter_oracle(const FilterSpec& spec) {
  spec.validate();
  if (spec.window > 25)
    throw ConfigError("monomial normal equations are unreliable beyond N=25");
  const ConstraintSystem cs = build_constraints(spec);
  Eigen::MatrixXd gram = cs.lhs.transpose() * cs.lhs;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(gram);
  if (!lu.isInvertible())
    throw NumericalError("numerically singular normal equations in filter design");
  const Eigen::MatrixXd weights = cs.rhs * lu.solve(cs.lhs.transpose());
  FilterBank bank{spec, Eigen::MatrixXd::Zero(spec.max_deriv + 1, spec.window)};
  for (std::size_t a = 0; a < cs.samples.size(); ++a)
    bank.coeffs.col(cs.samples[a] - 1) = weights.col(static_cast<int>(a));
  return bank;
}

/// Pair of banks on disjoint odd/even sample indices sharing the same
/// evaluation time. Outputs driven by independent noise samples are therefore
/// stochastically independent, which is what the IV estimator needs.
inline std::pair<FilterBank, FilterBank> design_staggered_pair(const FilterSpec& spec) {
  FilterSpec odd = spec;
  odd.support = Support::odd_columns;
  FilterSpec even = spec;
  even.support = Support::even_columns;
  odd.validate();
  even.validate();
  return {design_filter(odd), design_filter(even)};
}

/// Euclidean norm of each derivative row; scales as N^{-d-1/2} h^{-d}.
inline Eigen::VectorXd row_norms(const FilterBank& bank) {
  return bank.coeffs.rowwise().norm();
}

/// Smoothed signal value and derivatives on the filter time grid.
/// deriv[d] holds the order-d estimates, one row per window position.
struct JetSeries {
  std::vector<Eigen::MatrixXd> deriv;  // deriv[d]: count x dim
  double t0 = 0.0;                     // first evaluation time
  double step = 0.0;

  int count() const { return deriv.empty() ? 0 : static_cast<int>(deriv[0].rows()); }
  int max_deriv() const { return static_cast<int>(deriv.size()) - 1; }
  int dim() const { return deriv.empty() ? 0 : static_cast<int>(deriv[0].cols()); }
  double time(int j) const { return t0 + j * step; }

  Eigen::VectorXd times() const {
    Eigen::VectorXd t(count());
    for (int j = 0; j < t.size(); ++j) t[j] = time(j);
    return t;
  }

  /// Extended point (max_deriv+1) x dim at window position j.
  Eigen::MatrixXd point(int j) const {
    Eigen::MatrixXd u(deriv.size(), dim());
    for (std::size_t d = 0; d < deriv.size(); ++d) u.row(static_cast<int>(d)) = deriv[d].row(j);
    return u;
  }
};

/// Slides the bank across the series: deriv[d](j, l) = sum_k coeffs(d, k) *
/// samples(j + k, l). Channels are filtered independently; the jet exists only
/// where a full window fits, so it has rows(samples) - N + 1 entries.
inline JetSeries apply(const FilterBank& bank, const Eigen::MatrixXd& samples,
                       double t_start) {
  const int n = static_cast<int>(samples.rows());
  const int dim = static_cast<int>(samples.cols());
  const int N = bank.spec.window;
  if (n < N)
    throw ConfigError("series of length " + std::to_string(n) +
                      " is shorter than the filter window " + std::to_string(N));
  const int count = n - N + 1;
  JetSeries jet;
  jet.step = bank.spec.step;
  jet.t0 = t_start + (bank.spec.eval_index - 1.0) * bank.spec.step;
  jet.deriv.assign(bank.spec.max_deriv + 1, Eigen::MatrixXd(count, dim));
  for (int d = 0; d <= bank.spec.max_deriv; ++d) {
    const Eigen::VectorXd w = bank.coeffs.row(d);
    for (int l = 0; l < dim; ++l) {
      const auto col = samples.col(l);
      for (int j = 0; j < count; ++j) jet.deriv[d](j, l) = w.dot(col.segment(j, N));
    }
  }
  return jet;
}

}  // namespace ctdebias
