#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <random>

#include "ctdebias/filter.hpp"
#include "oracles.hpp"

using namespace ctdebias;

namespace {

double rel_diff(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const double scale = std::max(a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff());
  if (scale == 0.0) return 0.0;
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

/// Analytic d-th derivative of t^j at t.
double monomial_deriv(double t, int j, int d) {
  if (d > j) return 0.0;
  double factor = 1.0;
  for (int i = 0; i < d; ++i) factor *= (j - i);
  return factor * std::pow(t, j - d);
}

/// One window of t^j sampled at t_start + (k-1) h, checked against the
/// analytic derivatives at the evaluation time.
void check_polynomial_exactness(const FilterBank& bank, double t_start, double tol) {
  const auto& spec = bank.spec;
  Eigen::MatrixXd window(spec.window, 1);
  for (int j = 0; j < spec.accuracy; ++j) {
    double scale = 1.0;
    for (int k = 1; k <= spec.window; ++k) {
      const double t = t_start + (k - 1) * spec.step;
      window(k - 1, 0) = std::pow(t, j);
      scale = std::max(scale, std::abs(window(k - 1, 0)));
    }
    const JetSeries jet = apply(bank, window, t_start);
    REQUIRE(jet.count() == 1);
    const double t_eval = t_start + (spec.eval_index - 1.0) * spec.step;
    for (int d = 0; d <= spec.max_deriv; ++d) {
      const double want = monomial_deriv(t_eval, j, d);
      const double have = jet.deriv[d](0, 0);
      const double denom = std::max(scale, std::abs(want));
      REQUIRE(std::abs(have - want) <= tol * denom);
    }
  }
}

}  // namespace

TEST_CASE("constraint system matches the defining formula") {
  SECTION("three-point first-derivative design") {
    const ConstraintSystem cs = build_constraints({3, 2, 1, 2.0, 1.0, Support::full});
    Eigen::MatrixXd lhs(3, 2);
    lhs << 1, -1, 1, 0, 1, 1;
    Eigen::MatrixXd rhs(2, 2);
    rhs << 1, 0, 0, 1;
    REQUIRE(rel_diff(cs.lhs, lhs) < 1e-14);
    REQUIRE(rel_diff(cs.rhs, rhs) < 1e-14);
  }
  SECTION("quadratic column carries h^2/2") {
    const ConstraintSystem cs = build_constraints({3, 3, 0, 2.0, 0.5, Support::full});
    REQUIRE(cs.lhs(0, 2) == Catch::Approx(0.125));
    REQUIRE(cs.lhs(1, 2) == Catch::Approx(0.0).margin(1e-15));
    REQUIRE(cs.lhs(2, 2) == Catch::Approx(0.125));
  }
  SECTION("five-point system against a symbolic evaluation") {
    const ConstraintSystem cs = build_constraints({5, 4, 2, 3.0, 1.0, Support::full});
    Eigen::MatrixXd want(5, 4);
    want << 1, -2, 2, -4.0 / 3.0,
            1, -1, 0.5, -1.0 / 6.0,
            1, 0, 0, 0,
            1, 1, 0.5, 1.0 / 6.0,
            1, 2, 2, 4.0 / 3.0;
    REQUIRE(rel_diff(cs.lhs, want) < 1e-14);
  }
  SECTION("rejects more constraints than supported samples") {
    REQUIRE_THROWS_AS(build_constraints({4, 3, 1, 2.5, 1.0, Support::odd_columns}),
                      ConfigError);
  }
  SECTION("rejects invalid spec fields") {
    REQUIRE_THROWS_AS(build_constraints({3, 1, 1, 2.0, 1.0, Support::full}), ConfigError);
    REQUIRE_THROWS_AS(build_constraints({3, 2, 1, 4.0, 1.0, Support::full}), ConfigError);
    REQUIRE_THROWS_AS(build_constraints({3, 2, 1, 2.0, -1.0, Support::full}), ConfigError);
  }
}

TEST_CASE("minimum-norm designs reproduce the hand-solved cases") {
  SECTION("N=3 p=2: averaging row and central difference") {
    const FilterBank bank = design_filter({3, 2, 1, 2.0, 1.0, Support::full});
    Eigen::MatrixXd want(2, 3);
    want << 1.0 / 3, 1.0 / 3, 1.0 / 3, -0.5, 0, 0.5;
    REQUIRE(rel_diff(bank.coeffs, want) < 1e-12);
  }
  SECTION("N=3 p=3: interpolation forces the smoothing row") {
    const FilterBank bank = design_filter({3, 3, 1, 2.0, 1.0, Support::full});
    Eigen::MatrixXd want(2, 3);
    want << 0, 1, 0, -0.5, 0, 0.5;
    REQUIRE(rel_diff(bank.coeffs, want) < 1e-12);
  }
  SECTION("polynomial exactness across random specs") {
    std::mt19937 rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
      FilterSpec spec;
      spec.accuracy = 1 + rng() % 8;
      spec.max_deriv = static_cast<int>(rng() % std::min(spec.accuracy, 4));
      spec.window = spec.accuracy + static_cast<int>(rng() % 30);
      spec.step = std::pow(10.0, -static_cast<double>(rng() % 4));
      spec.eval_index = (trial % 2 == 0) ? 0.5 * (spec.window + 1)
                                         : 1.0 + static_cast<double>(rng() % spec.window);
      spec.support = Support::full;
      const double t_start = -1.0 + 0.1 * static_cast<double>(rng() % 20);
      check_polynomial_exactness(design_filter(spec), t_start, 1e-8);
    }
  }
  SECTION("rows lie in the span of the constraint columns") {
    for (const auto& spec : {FilterSpec::centered(11, 4, 2, 0.1),
                             FilterSpec::centered(17, 6, 1, 1.0),
                             FilterSpec{9, 3, 1, 2.0, 0.5, Support::full}}) {
      const FilterBank bank = design_filter(spec);
      const ConstraintSystem cs = build_constraints(spec);
      // projection onto range(A) via the oracle solver
      const Eigen::MatrixXd normal = cs.lhs.transpose() * cs.lhs;
      for (int d = 0; d <= spec.max_deriv; ++d) {
        Eigen::VectorXd row(cs.samples.size());
        for (std::size_t a = 0; a < cs.samples.size(); ++a)
          row[static_cast<int>(a)] = bank.coeffs(d, cs.samples[a] - 1);
        const Eigen::VectorXd projected =
            cs.lhs * oracles::solve_gauss(normal, cs.lhs.transpose() * row);
        REQUIRE((row - projected).cwiseAbs().maxCoeff() <=
                1e-8 * std::max(1.0, row.cwiseAbs().maxCoeff()));
      }
    }
  }
}

TEST_CASE("normal-equation oracle agrees with the stable design") {
  SECTION("three-point case to high precision") {
    const FilterSpec spec{3, 2, 1, 2.0, 1.0, Support::full};
    REQUIRE(rel_diff(design_filter(spec).coeffs, design_filter_oracle(spec).coeffs) < 1e-10);
  }
  SECTION("wide smoothing window") {
    const FilterSpec spec = FilterSpec::centered(21, 6, 2, 1.0);
    REQUIRE(rel_diff(design_filter(spec).coeffs, design_filter_oracle(spec).coeffs) < 1e-8);
  }
  SECTION("forced interpolation") {
    const FilterBank bank = design_filter_oracle({3, 3, 0, 2.0, 1.0, Support::full});
    Eigen::MatrixXd want(1, 3);
    want << 0, 1, 0;
    REQUIRE(rel_diff(bank.coeffs, want) < 1e-10);
  }
  SECTION("full sweep stays within 1e-8") {
    double worst = 0.0;
    for (int p = 1; p <= 8; ++p)
      for (int m = 0; m <= std::min(3, p - 1); ++m)
        for (int N = p; N <= 21; ++N) {
          const FilterSpec spec = FilterSpec::centered(N, p, m, 1.0);
          worst = std::max(
              worst, rel_diff(design_filter(spec).coeffs, design_filter_oracle(spec).coeffs));
        }
    REQUIRE(worst <= 1e-8);
  }
  SECTION("refuses windows beyond its conditioning limit") {
    REQUIRE_THROWS_AS(design_filter_oracle(FilterSpec::centered(26, 4, 1, 1.0)), ConfigError);
  }
}

TEST_CASE("staggered pair") {
  SECTION("four-point affine fits at the window midpoint") {
    const auto [odd, even] = design_staggered_pair({4, 2, 1, 2.5, 1.0, Support::full});
    Eigen::MatrixXd want_odd(2, 4), want_even(2, 4);
    want_odd << 0.25, 0, 0.75, 0, -0.5, 0, 0.5, 0;
    want_even << 0, 0.75, 0, 0.25, 0, -0.5, 0, 0.5;
    REQUIRE(rel_diff(odd.coeffs, want_odd) < 1e-12);
    REQUIRE(rel_diff(even.coeffs, want_even) < 1e-12);
  }
  SECTION("supports are disjoint and exhaustive") {
    const auto [odd, even] = design_staggered_pair(FilterSpec::centered(50, 6, 2, 0.01));
    for (int k = 0; k < 50; ++k) {
      const bool odd_used = odd.coeffs.col(k).cwiseAbs().maxCoeff() > 0;
      const bool even_used = even.coeffs.col(k).cwiseAbs().maxCoeff() > 0;
      REQUIRE(odd_used == (k % 2 == 0));   // 1-based odd indices
      REQUIRE(even_used == (k % 2 == 1));
    }
  }
  SECTION("both banks differentiate polynomials exactly") {
    const auto [odd, even] = design_staggered_pair(FilterSpec::centered(50, 6, 2, 0.02));
    check_polynomial_exactness(odd, 0.3, 1e-8);
    check_polynomial_exactness(even, 0.3, 1e-8);
  }
  SECTION("rejects supports too small for the constraints") {
    REQUIRE_THROWS_AS(design_staggered_pair(FilterSpec::centered(10, 6, 2, 1.0)), ConfigError);
  }
}

TEST_CASE("filter application") {
  SECTION("quadratic series reproduces its jet everywhere") {
    const FilterBank bank = design_filter(FilterSpec::centered(9, 4, 2, 0.05));
    const int n = 40;
    Eigen::MatrixXd z(n, 1);
    for (int i = 0; i < n; ++i) {
      const double t = (i + 1) * 0.05;
      z(i, 0) = 1.0 + 2.0 * t + 3.0 * t * t;
    }
    const JetSeries jet = apply(bank, z, 0.05);
    REQUIRE(jet.count() == n - 9 + 1);
    for (int j = 0; j < jet.count(); ++j) {
      const double t = jet.time(j);
      REQUIRE(jet.deriv[0](j, 0) == Catch::Approx(1 + 2 * t + 3 * t * t).epsilon(1e-9));
      REQUIRE(jet.deriv[1](j, 0) == Catch::Approx(2 + 6 * t).epsilon(1e-9));
      REQUIRE(jet.deriv[2](j, 0) == Catch::Approx(6.0).epsilon(1e-9));
    }
  }
  SECTION("constant series smooths to itself with zero derivatives") {
    const FilterBank bank = design_filter(FilterSpec::centered(7, 3, 2, 0.1));
    Eigen::MatrixXd z = Eigen::MatrixXd::Constant(20, 2, 4.25);
    const JetSeries jet = apply(bank, z, 0.0);
    REQUIRE((jet.deriv[0].array() - 4.25).abs().maxCoeff() < 1e-12);
    REQUIRE(jet.deriv[1].cwiseAbs().maxCoeff() < 1e-11);
    REQUIRE(jet.deriv[2].cwiseAbs().maxCoeff() < 1e-10);
  }
  SECTION("sine derivative error follows the bandwidth-power law") {
    // estimate the rate constant at one scale, then bound a finer scale
    const int N = 50;
    auto worst_err = [&](double h) {
      const FilterBank bank = design_filter(FilterSpec::centered(N, 6, 2, h));
      const int n = N + static_cast<int>(std::ceil(2.0 * M_PI / (2.0 * M_PI * h))) + 200;
      Eigen::MatrixXd z(n, 1);
      for (int i = 0; i < n; ++i) z(i, 0) = std::sin(2.0 * M_PI * (i + 1) * h);
      const JetSeries jet = apply(bank, z, h);
      double worst = 0.0;
      for (int j = 0; j < jet.count(); ++j)
        worst = std::max(worst, std::abs(jet.deriv[1](j, 0) -
                                         2.0 * M_PI * std::cos(2.0 * M_PI * jet.time(j))));
      return worst;
    };
    const double coarse = worst_err(2e-3), fine = worst_err(1e-3);
    const double constant = coarse / std::pow(N * 2e-3, 4);  // p - m = 4
    REQUIRE(fine <= 2.0 * constant * std::pow(N * 1e-3, 4));
  }
  SECTION("multi-channel series are filtered independently") {
    const FilterBank bank = design_filter(FilterSpec::centered(5, 3, 1, 0.1));
    Eigen::MatrixXd z(12, 2);
    for (int i = 0; i < 12; ++i) {
      const double t = (i + 1) * 0.1;
      z(i, 0) = t;
      z(i, 1) = -2.0 * t;
    }
    const JetSeries jet = apply(bank, z, 0.1);
    REQUIRE((jet.deriv[1].col(0).array() - 1.0).abs().maxCoeff() < 1e-10);
    REQUIRE((jet.deriv[1].col(1).array() + 2.0).abs().maxCoeff() < 1e-10);
  }
  SECTION("series shorter than the window is rejected") {
    const FilterBank bank = design_filter(FilterSpec::centered(9, 3, 1, 0.1));
    REQUIRE_THROWS_AS(apply(bank, Eigen::MatrixXd::Zero(8, 1), 0.0), ConfigError);
  }
}

TEST_CASE("row norms") {
  SECTION("three-point norms") {
    const Eigen::VectorXd norms = row_norms(design_filter({3, 2, 1, 2.0, 1.0, Support::full}));
    REQUIRE(norms[0] == Catch::Approx(1.0 / std::sqrt(3.0)).epsilon(1e-12));
    REQUIRE(norms[1] == Catch::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
  }
  SECTION("doubling the window scales rows by the bandwidth law") {
    const Eigen::VectorXd n101 = row_norms(design_filter(FilterSpec::centered(101, 6, 2, 1.0)));
    const Eigen::VectorXd n201 = row_norms(design_filter(FilterSpec::centered(201, 6, 2, 1.0)));
    REQUIRE(std::abs(n201[0] / n101[0] / std::pow(2.0, -0.5) - 1.0) < 0.1);
    REQUIRE(std::abs(n201[1] / n101[1] / std::pow(2.0, -1.5) - 1.0) < 0.1);
  }
  SECTION("scaled norms vary under 10 percent across window doublings") {
    for (int d = 0; d <= 2; ++d) {
      double lo = 1e300, hi = 0.0;
      for (int N : {101, 201, 401}) {
        const Eigen::VectorXd norms =
            row_norms(design_filter(FilterSpec::centered(N, 6, 2, 1.0)));
        const double scaled = norms[d] * std::pow(static_cast<double>(N), d + 0.5);
        lo = std::min(lo, scaled);
        hi = std::max(hi, scaled);
      }
      REQUIRE((hi - lo) / lo < 0.10);
    }
  }
}

TEST_CASE("dense least-squares oracle cross-checks the banks") {
  std::mt19937 rng(99);
  std::normal_distribution<double> gauss(0.0, 1.0);
  SECTION("random windows, cubic accuracy") {
    for (int trial = 0; trial < 20; ++trial) {
      const FilterSpec spec = FilterSpec::centered(9 + 2 * (trial % 4), 3, 1, 0.1);
      const FilterBank bank = design_filter(spec);
      Eigen::MatrixXd window(spec.window, 1);
      for (int k = 0; k < spec.window; ++k) window(k, 0) = gauss(rng);
      const Eigen::MatrixXd want = oracles::dense_lsq_jet(window, spec);
      const JetSeries jet = apply(bank, window, 0.0);
      for (int d = 0; d <= spec.max_deriv; ++d)
        REQUIRE(jet.deriv[d](0, 0) ==
                Catch::Approx(want(d, 0)).epsilon(1e-7).margin(1e-9));
    }
  }
  SECTION("staggered support restricts the fit to supported samples") {
    FilterSpec spec = FilterSpec::centered(12, 3, 1, 0.2);
    spec.support = Support::odd_columns;
    const FilterBank bank = design_filter(spec);
    Eigen::MatrixXd window(spec.window, 1);
    for (int k = 0; k < spec.window; ++k) window(k, 0) = gauss(rng);
    const Eigen::MatrixXd want = oracles::dense_lsq_jet(window, spec);
    const JetSeries jet = apply(bank, window, 0.0);
    for (int d = 0; d <= spec.max_deriv; ++d)
      REQUIRE(jet.deriv[d](0, 0) == Catch::Approx(want(d, 0)).epsilon(1e-7).margin(1e-9));
  }
}
