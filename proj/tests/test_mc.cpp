#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <cstdlib>

#include "ctdebias/mc.hpp"
#include "ctdebias/model.hpp"

using namespace ctdebias;

namespace {

ExperimentConfig small_vdp(int reps, double sigma2, std::uint64_t seed = 400) {
  ExperimentConfig cfg;
  cfg.trajectory.model = vdp_model();
  cfg.trajectory.theta0 = vdp_true_theta();
  cfg.trajectory.initial = Eigen::Vector2d(0.0, 0.001);
  cfg.trajectory.samples = 600;
  cfg.trajectory.step = 5e-4;
  cfg.noise = NoiseModel::isotropic(sigma2, 1);
  cfg.filter = FilterSpec::centered(20, 6, 2, 5e-4);
  cfg.estimators = {Method::ls, Method::bc, Method::iv};
  cfg.replications = reps;
  cfg.base_seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("Monte Carlo studies") {
  SECTION("zero noise: no spread, deterministic filter bias only") {
    const McResult result = run_mc(small_vdp(3, 0.0));
    for (const auto& ms : result.summary.methods)
      for (const auto& ps : ms.params) {
        REQUIRE(ps.std_pct == 0.0);
        REQUIRE(std::abs(ps.bias_pct) < 0.5);
        REQUIRE(ps.rmse_pct == Catch::Approx(std::abs(ps.bias_pct)));
      }
  }
  SECTION("identical config and seed reproduce the estimates exactly") {
    const McResult a = run_mc(small_vdp(2, 0.01));
    const McResult b = run_mc(small_vdp(2, 0.01));
    for (std::size_t mi = 0; mi < a.estimates.size(); ++mi)
      for (std::size_t r = 0; r < a.estimates[mi].size(); ++r)
        REQUIRE((a.estimates[mi][r] - b.estimates[mi][r]).cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("thread cap does not change the results") {
    const McResult wide = run_mc(small_vdp(8, 0.01));
    setenv("CTDEBIAS_THREADS", "1", 1);
    const McResult serial = run_mc(small_vdp(8, 0.01));
    unsetenv("CTDEBIAS_THREADS");
    for (std::size_t mi = 0; mi < wide.estimates.size(); ++mi)
      for (std::size_t r = 0; r < wide.estimates[mi].size(); ++r)
        REQUIRE((wide.estimates[mi][r] - serial.estimates[mi][r]).cwiseAbs().maxCoeff() ==
                0.0);
  }
  SECTION("scalar identity rmse^2 = bias^2 + std^2 holds exactly as computed") {
    const McResult result = run_mc(small_vdp(10, 0.01));
    for (const auto& ms : result.summary.methods)
      for (const auto& ps : ms.params)
        REQUIRE(ps.rmse_pct * ps.rmse_pct ==
                Catch::Approx(ps.bias_pct * ps.bias_pct + ps.std_pct * ps.std_pct)
                    .epsilon(1e-9));
  }
  SECTION("estimator failures abort with the replication index") {
    ExperimentConfig cfg = small_vdp(3, 0.01);
    cfg.trajectory.theta0.setZero();  // y stays at 0: features are degenerate
    cfg.trajectory.initial = Eigen::Vector2d(0.0, 0.0);
    cfg.noise = NoiseModel::isotropic(0.0, 1);
    try {
      run_mc(cfg);
      FAIL("expected a numerical error");
    } catch (const NumericalError& e) {
      REQUIRE(std::string(e.what()).find("replication 0") != std::string::npos);
    }
  }
  SECTION("config validation") {
    ExperimentConfig cfg = small_vdp(0, 0.01);
    REQUIRE_THROWS_AS(run_mc(cfg), ConfigError);
    cfg = small_vdp(1, 0.01);
    cfg.estimators.clear();
    REQUIRE_THROWS_AS(run_mc(cfg), ConfigError);
    cfg = small_vdp(1, 0.01);
    cfg.filter.max_deriv = 1;  // below the model order
    REQUIRE_THROWS_AS(run_mc(cfg), ConfigError);
  }
}

TEST_CASE("kernel density estimate") {
  SECTION("standard normal density at the origin") {
    std::mt19937_64 rng(1234);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Eigen::VectorXd samples(10000);
    for (int i = 0; i < samples.size(); ++i) samples[i] = gauss(rng);
    const auto [grid, density] = kde(samples);
    int mid = 0;
    for (int g = 1; g < grid.size(); ++g)
      if (std::abs(grid[g]) < std::abs(grid[mid])) mid = g;
    REQUIRE(std::abs(density[mid] - 1.0 / std::sqrt(2.0 * M_PI)) /
                (1.0 / std::sqrt(2.0 * M_PI)) < 0.10);
  }
  SECTION("two-point sample is symmetric and bimodal") {
    Eigen::VectorXd samples(2);
    samples << -1.0, 1.0;
    const auto [grid, density] = kde(samples);
    const int n = static_cast<int>(grid.size());
    for (int g = 0; g < n; ++g)
      REQUIRE(density[g] == Catch::Approx(density[n - 1 - g]).epsilon(1e-9));
    const int quarter = n / 4;
    REQUIRE(density[quarter] > density[n / 2]);  // peak near each sample
  }
  SECTION("density integrates to one") {
    std::mt19937_64 rng(99);
    std::normal_distribution<double> gauss(2.0, 3.0);
    Eigen::VectorXd samples(5000);
    for (int i = 0; i < samples.size(); ++i) samples[i] = gauss(rng);
    const auto [grid, density] = kde(samples);
    double integral = 0.0;
    for (int g = 1; g < grid.size(); ++g)
      integral += 0.5 * (density[g] + density[g - 1]) * (grid[g] - grid[g - 1]);
    REQUIRE(std::abs(integral - 1.0) < 1e-3);
  }
  SECTION("degenerate samples are rejected") {
    REQUIRE_THROWS_AS(kde(Eigen::VectorXd::Ones(5)), ConfigError);
    REQUIRE_THROWS_AS(kde(Eigen::VectorXd::Ones(1)), ConfigError);
  }
}

TEST_CASE("filter rate study") {
  SECTION("needs at least four scales") {
    RateStudyConfig cfg;
    cfg.windows = {10, 20, 30};
    cfg.steps = {0.1, 0.05, 0.025};
    REQUIRE_THROWS_AS(filter_rate_study(cfg), ConfigError);
  }
  SECTION("bias slope on sin tracks the accuracy gap") {
    RateStudyConfig cfg;
    cfg.accuracy = 6;
    cfg.max_deriv = 2;
    cfg.windows = {50, 50, 50, 50, 50};
    cfg.steps = {0.032, 0.016, 0.008, 0.004, 0.002};
    cfg.draws = 500;
    cfg.seed = 1;
    const RateReport report = filter_rate_study(cfg);
    REQUIRE(std::abs(report.bias_slope_vs_span - 4.0) < 0.5);
  }
  SECTION("zero signal has no bias at any scale") {
    RateStudyConfig cfg;
    cfg.accuracy = 4;
    cfg.max_deriv = 1;
    cfg.windows = {20, 30, 40, 50};
    cfg.steps = {0.1, 0.1, 0.1, 0.1};
    cfg.zero_signal = true;
    cfg.draws = 100;
    const RateReport report = filter_rate_study(cfg);
    for (const auto& row : report.scales) REQUIRE(row[2] == 0.0);
    REQUIRE(std::abs(report.bias_slope_vs_span) < 1e-9);
  }
  SECTION("theory targets follow the bandwidth exponent") {
    RateStudyConfig cfg;
    cfg.accuracy = 6;
    cfg.max_deriv = 2;
    cfg.alpha = 0.9;
    cfg.windows = {10, 20, 40, 80};
    cfg.steps = {0.1, 0.05, 0.025, 0.0125};
    cfg.draws = 100;
    const RateReport report = filter_rate_study(cfg);
    REQUIRE(report.beta_theory == Catch::Approx(0.4));
    REQUIRE(report.gamma_theory == Catch::Approx((5.0 * 0.9 - 4.0) / 2.0));
  }
}

TEST_CASE("estimator rate study") {
  SECTION("no noise makes the three estimators coincide") {
    EstimatorRateConfig cfg;
    cfg.base = small_vdp(1, 0.0);
    cfg.base.trajectory.samples = 1000;
    cfg.steps = {5e-4, 2.5e-4, 1.25e-4};
    cfg.alpha = 0.9;
    const EstimatorRateReport report = estimator_rate_study(cfg);
    for (const auto& point : report.points) {
      REQUIRE(point.abs_bias_pct[0] == Catch::Approx(point.abs_bias_pct[1]).margin(1e-9));
      REQUIRE(point.abs_bias_pct[0] == Catch::Approx(point.abs_bias_pct[2]).margin(0.05));
    }
  }
  SECTION("least squares carries the largest bias at every scale") {
    EstimatorRateConfig cfg;
    cfg.base = small_vdp(60, 0.01, 900);
    cfg.base.trajectory.samples = 1000;
    cfg.base.filter = FilterSpec::centered(50, 6, 2, 5e-4);
    cfg.steps = {5e-4, 2.5e-4};
    // two scales are enough for the ordering check; the slope fit needs 3
    cfg.steps.push_back(1.25e-4);
    const EstimatorRateReport report = estimator_rate_study(cfg);
    REQUIRE(report.ls_dominated);
  }
}
