#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "ctdebias/common.hpp"
#include "ctdebias/estimate.hpp"
#include "ctdebias/filter.hpp"
#include "ctdebias/model.hpp"
#include "ctdebias/simulate.hpp"

namespace ctdebias {

/// One Monte Carlo study: a single clean trajectory, noise redrawn per
/// replication with seed base_seed + r, and every requested estimator applied
/// to the same noisy series.
struct ExperimentConfig {
  TrajectoryConfig trajectory;
  NoiseModel noise;
  FilterSpec filter;
  std::vector<Method> estimators;
  int replications = 1;
  std::uint64_t base_seed = 0;

  void validate() const {
    trajectory.validate();
    filter.validate();
    if (filter.max_deriv < trajectory.model.order)
      throw ConfigError("filter must produce derivatives up to the model order");
    if (estimators.empty()) throw ConfigError("no estimators requested");
    if (replications < 1) throw ConfigError("replications must be at least 1");
    if (noise.covariance.rows() != trajectory.model.state_dim)
      throw ConfigError("noise covariance dimension does not match the model");
  }
};

/// Designed banks and precomputed noise covariances shared by all
/// replications of a study.
struct EstimationContext {
  FeatureModel model;
  NoiseModel noise;
  FilterBank full;
  FilterBank odd;
  FilterBank even;
  FilterNoiseCov cov_full;
  FilterNoiseCov cov_odd;
  FilterNoiseCov cov_even;
  bool has_staggered = false;
};

inline EstimationContext make_context(const FeatureModel& model, const FilterSpec& spec,
                                      const NoiseModel& noise, bool with_staggered) {
  EstimationContext ctx;
  ctx.model = model;
  ctx.noise = noise;
  ctx.full = design_filter(spec);
  ctx.cov_full = filter_noise_cov(ctx.full, noise);
  if (with_staggered) {
    auto pair = design_staggered_pair(spec);
    ctx.odd = std::move(pair.first);
    ctx.even = std::move(pair.second);
    ctx.cov_odd = filter_noise_cov(ctx.odd, noise);
    ctx.cov_even = filter_noise_cov(ctx.even, noise);
    ctx.has_staggered = true;
  }
  return ctx;
}

/// One estimator applied to one measurement series.
inline EstimatorOutput run_method(const EstimationContext& ctx, Method method,
                                  const Eigen::MatrixXd& measurements, double t_start) {
  switch (method) {
    case Method::ls: {
      const JetSeries jet = apply(ctx.full, measurements, t_start);
      return ls_estimate(assemble(jet, ctx.model));
    }
    case Method::bc: {
      const JetSeries jet = apply(ctx.full, measurements, t_start);
      const RegressionData data = assemble(jet, ctx.model);
      return bc_estimate(data, bias_corrections(data, jet, ctx.model, ctx.cov_full));
    }
    case Method::iv: {
      if (!ctx.has_staggered)
        throw ConfigError("IV estimation requested without staggered banks");
      const JetSeries jet_hat = apply(ctx.odd, measurements, t_start);
      const JetSeries jet_tilde = apply(ctx.even, measurements, t_start);
      return iv_estimate(
          iv_assemble(jet_hat, jet_tilde, ctx.model, ctx.cov_odd, ctx.cov_even));
    }
  }
  throw ConfigError("unknown estimator");
}

struct ParamStats {
  std::string label;
  double bias_pct = 0.0;
  double std_pct = 0.0;
  double rmse_pct = 0.0;
};

struct MethodSummary {
  Method method = Method::ls;
  std::vector<ParamStats> params;
  double opnorm_bias_pct = 0.0;
  double opnorm_rmsd_pct = 0.0;
  double opnorm_rmse_pct = 0.0;
};

struct McSummary {
  std::vector<MethodSummary> methods;
  int replications = 0;
  std::uint64_t base_seed = 0;
};

struct McResult {
  std::vector<Method> methods;
  // estimates[method index][replication] = theta
  std::vector<std::vector<Eigen::MatrixXd>> estimates;
  McSummary summary;
};

inline std::string param_label(int row, int col, int state_dim) {
  std::string label = "theta" + std::to_string(row + 1);
  if (state_dim > 1) label += "_" + std::to_string(col + 1);
  return label;
}

inline int worker_count(int replications) {
  unsigned n = std::thread::hardware_concurrency();
  if (n == 0) n = 1;
  if (const char* cap = std::getenv("CTDEBIAS_THREADS")) {
    const long v = std::strtol(cap, nullptr, 10);
    if (v >= 1) n = std::min<unsigned>(n, static_cast<unsigned>(v));
  }
  return static_cast<int>(std::min<unsigned>(n, static_cast<unsigned>(replications)));
}

inline double opnorm(const Eigen::MatrixXd& a) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
  return a.size() == 0 ? 0.0 : svd.singularValues().maxCoeff();
}

/// Runs the study. The clean trajectory is integrated once and reused; a
/// failing replication aborts the whole study so paired statistics stay
/// honest. Replications execute concurrently (capped by CTDEBIAS_THREADS) and
/// aggregation is ordered by replication index, so results are deterministic.
inline McResult run_mc(const ExperimentConfig& cfg) {
  cfg.validate();
  const bool wants_iv =
      std::find(cfg.estimators.begin(), cfg.estimators.end(), Method::iv) !=
      cfg.estimators.end();
  const EstimationContext ctx =
      make_context(cfg.trajectory.model, cfg.filter, cfg.noise, wants_iv);
  const Eigen::MatrixXd clean = integrate(cfg.trajectory);
  const double t_start = cfg.trajectory.step;

  McResult result;
  result.methods = cfg.estimators;
  result.estimates.assign(cfg.estimators.size(),
                          std::vector<Eigen::MatrixXd>(cfg.replications));

  std::atomic<int> next{0};
  std::mutex failure_mutex;
  std::exception_ptr failure;
  int failed_rep = -1;

  auto worker = [&]() {
    for (;;) {
      const int r = next.fetch_add(1);
      if (r >= cfg.replications) return;
      {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (failure) return;
      }
      try {
        const Eigen::MatrixXd z = add_noise(clean, cfg.noise, cfg.base_seed + r);
        for (std::size_t mi = 0; mi < cfg.estimators.size(); ++mi)
          result.estimates[mi][r] = run_method(ctx, cfg.estimators[mi], z, t_start).theta;
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure || r < failed_rep) {
          failure = std::current_exception();
          failed_rep = r;
        }
      }
    }
  };

  const int workers = worker_count(cfg.replications);
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) {
    try {
      std::rethrow_exception(failure);
    } catch (const NumericalError& e) {
      throw NumericalError("replication " + std::to_string(failed_rep) + ": " + e.what(),
                           e.pe_stat);
    } catch (const std::exception& e) {
      throw NumericalError("replication " + std::to_string(failed_rep) + ": " + e.what());
    }
  }

  // Summary statistics, normalized by the true parameter magnitudes.
  const Eigen::MatrixXd& theta0 = cfg.trajectory.theta0;
  const double theta0_norm = opnorm(theta0);
  result.summary.replications = cfg.replications;
  result.summary.base_seed = cfg.base_seed;
  for (std::size_t mi = 0; mi < cfg.estimators.size(); ++mi) {
    const auto& reps = result.estimates[mi];
    MethodSummary ms;
    ms.method = cfg.estimators[mi];
    Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(theta0.rows(), theta0.cols());
    for (const auto& th : reps) mean += th;
    mean /= cfg.replications;
    Eigen::MatrixXd var = Eigen::MatrixXd::Zero(theta0.rows(), theta0.cols());
    double rmsd_sq = 0.0;
    for (const auto& th : reps) {
      const Eigen::MatrixXd d = th - mean;
      var += d.cwiseProduct(d);
      const double dev = opnorm(d);
      rmsd_sq += dev * dev;
    }
    var /= cfg.replications;
    rmsd_sq /= cfg.replications;
    for (int r = 0; r < theta0.rows(); ++r)
      for (int c = 0; c < theta0.cols(); ++c) {
        ParamStats ps;
        ps.label = param_label(r, c, static_cast<int>(theta0.cols()));
        const double denom = std::abs(theta0(r, c));
        if (denom > 0) {
          ps.bias_pct = (mean(r, c) - theta0(r, c)) / denom * 100.0;
          ps.std_pct = std::sqrt(var(r, c)) / denom * 100.0;
        } else {
          ps.bias_pct = mean(r, c);  // absolute when the true value is zero
          ps.std_pct = std::sqrt(var(r, c));
        }
        ps.rmse_pct = std::hypot(ps.bias_pct, ps.std_pct);
        ms.params.push_back(std::move(ps));
      }
    ms.opnorm_bias_pct = opnorm(mean - theta0) / theta0_norm * 100.0;
    ms.opnorm_rmsd_pct = std::sqrt(rmsd_sq) / theta0_norm * 100.0;
    ms.opnorm_rmse_pct = std::hypot(ms.opnorm_bias_pct, ms.opnorm_rmsd_pct);
    result.summary.methods.push_back(std::move(ms));
  }
  return result;
}

/// Gaussian kernel density estimate with the Silverman rule-of-thumb
/// bandwidth 1.06 sigma r^{-1/5}, evaluated on a uniform grid spanning
/// mean +- 4 sigma.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> kde(const Eigen::VectorXd& samples,
                                                       int grid_points = 256) {
  const int r = static_cast<int>(samples.size());
  if (r < 2) throw ConfigError("kernel density estimate needs at least 2 samples");
  const double mean = samples.mean();
  const double sd =
      std::sqrt((samples.array() - mean).square().sum() / (r - 1));
  if (!(sd > 0)) throw ConfigError("kernel density estimate of identical samples");
  if (grid_points < 2) throw ConfigError("kernel density grid needs at least 2 points");
  const double bw = 1.06 * sd * std::pow(static_cast<double>(r), -0.2);
  Eigen::VectorXd grid(grid_points), density(grid_points);
  const double lo = mean - 4.0 * sd, hi = mean + 4.0 * sd;
  const double norm = 1.0 / (r * bw * std::sqrt(2.0 * M_PI));
  for (int g = 0; g < grid_points; ++g) {
    grid[g] = lo + (hi - lo) * g / (grid_points - 1);
    density[g] = norm * ((samples.array() - grid[g]) / bw).square().unaryExpr([](double q) {
                   return std::exp(-0.5 * q);
                 }).sum();
  }
  return {grid, density};
}

/// Empirical consistency rates of a filter family against Theorem targets
/// beta = (p - m)(1 - alpha), gamma = ((2m + 1) alpha - 2m) / 2.
struct RateReport {
  double alpha = 0.0;
  double beta_theory = 0.0;
  double gamma_theory = 0.0;
  double bias_slope_vs_h = 0.0;     // fit of log bias against log h
  double bias_slope_vs_span = 0.0;  // ... against log(N h); target p - m
  double fluct_slope_vs_h = 0.0;    // fit of log fourth-root against log h
  double fluct_slope_vs_n = 0.0;    // ... against log N; target -(m + 1/2)
  // per scale: N, h, worst-case bias, fourth root of the fluctuation moment
  std::vector<std::array<double, 4>> scales;
};

struct RateStudyConfig {
  int accuracy = 6;
  int max_deriv = 2;
  std::vector<int> windows;   // N per scale
  std::vector<double> steps;  // h per scale
  double alpha = 0.0;         // exponent used for the theoretical targets
  int draws = 10000;          // noise draws per scale
  std::uint64_t seed = 0;
  bool zero_signal = false;   // replace sin(t) by the zero signal
};

namespace detail {

inline double fit_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  const double denom = n * sxx - sx * sx;
  if (std::abs(denom) < 1e-12) return std::numeric_limits<double>::quiet_NaN();
  return (n * sxy - sx * sy) / denom;
}

/// d-th derivative of sin(t).
inline double sin_deriv(double t, int d) {
  switch (d % 4) {
    case 0: return std::sin(t);
    case 1: return std::cos(t);
    case 2: return -std::sin(t);
    default: return -std::cos(t);
  }
}

}  // namespace detail

/// Measures, per scale, the worst-case bias of the order-m output on sin(t)
/// and the fourth root of the noise-driven fluctuation moment, then fits
/// log-log slopes along every axis that varies.
inline RateReport filter_rate_study(const RateStudyConfig& cfg) {
  if (cfg.windows.size() != cfg.steps.size())
    throw ConfigError("rate study needs matching window and step lists");
  if (cfg.windows.size() < 4) throw ConfigError("rate study needs at least 4 scales");
  RateReport report;
  report.alpha = cfg.alpha;
  report.beta_theory = (cfg.accuracy - cfg.max_deriv) * (1.0 - cfg.alpha);
  report.gamma_theory = ((2.0 * cfg.max_deriv + 1.0) * cfg.alpha - 2.0 * cfg.max_deriv) / 2.0;

  std::vector<double> log_h, log_n, log_span, log_bias, log_fluct;
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t i = 0; i < cfg.windows.size(); ++i) {
    const int N = cfg.windows[i];
    const double h = cfg.steps[i];
    const FilterSpec spec = FilterSpec::centered(N, cfg.accuracy, cfg.max_deriv, h);
    const FilterBank bank = design_filter(spec);

    // Bias: full sweep over at least one period of sin.
    const int n = N + std::max(16, static_cast<int>(std::ceil(2.0 * M_PI / h)));
    Eigen::MatrixXd signal(n, 1);
    for (int s = 0; s < n; ++s)
      signal(s, 0) = cfg.zero_signal ? 0.0 : std::sin((s + 1) * h);
    const JetSeries jet = apply(bank, signal, h);
    double worst = 0.0;
    for (int j = 0; j < jet.count(); ++j) {
      const double truth =
          cfg.zero_signal ? 0.0 : detail::sin_deriv(jet.time(j), cfg.max_deriv);
      worst = std::max(worst, std::abs(jet.deriv[cfg.max_deriv](j, 0) - truth));
    }

    // Fluctuation: unit-variance noise through the order-m row.
    const Eigen::VectorXd row = bank.coeffs.row(cfg.max_deriv);
    double moment4 = 0.0;
    Eigen::VectorXd g(N);
    for (int dr = 0; dr < cfg.draws; ++dr) {
      for (int k = 0; k < N; ++k) g[k] = gauss(rng);
      const double v = row.dot(g);
      moment4 += v * v * v * v;
    }
    moment4 /= cfg.draws;

    report.scales.push_back({static_cast<double>(N), h, worst, std::pow(moment4, 0.25)});
    log_h.push_back(std::log(h));
    log_n.push_back(std::log(static_cast<double>(N)));
    log_span.push_back(std::log(N * h));
    log_bias.push_back(std::log(std::max(worst, 1e-300)));
    log_fluct.push_back(std::log(std::max(std::pow(moment4, 0.25), 1e-300)));
  }
  report.bias_slope_vs_h = detail::fit_slope(log_h, log_bias);
  report.bias_slope_vs_span = detail::fit_slope(log_span, log_bias);
  report.fluct_slope_vs_h = detail::fit_slope(log_h, log_fluct);
  report.fluct_slope_vs_n = detail::fit_slope(log_n, log_fluct);
  return report;
}

/// Mean-bias decay of the three estimators across sampling periods at fixed
/// duration. The bandwidth follows N = N_base (h_base / h)^alpha rounded to
/// even, so the theory's coupled limit applies.
struct EstimatorRateConfig {
  ExperimentConfig base;
  std::vector<double> steps;
  double alpha = 0.9;
};

struct EstimatorRatePoint {
  double step = 0.0;
  int window = 0;
  // per estimator: worst-parameter |mean bias| percent
  std::vector<double> abs_bias_pct;
};

struct EstimatorRateReport {
  std::vector<Method> methods;
  std::vector<EstimatorRatePoint> points;
  std::vector<double> slopes;  // log |bias| vs log h per estimator
  bool ls_dominated = true;    // every non-LS estimator beats LS at every scale
};

inline EstimatorRateReport estimator_rate_study(const EstimatorRateConfig& cfg) {
  if (cfg.steps.size() < 3) throw ConfigError("estimator rate study needs at least 3 steps");
  EstimatorRateReport report;
  report.methods = cfg.base.estimators;
  const double duration = cfg.base.trajectory.samples * cfg.base.trajectory.step;
  std::vector<std::vector<double>> log_bias(report.methods.size());
  std::vector<double> log_h;
  for (double h : cfg.steps) {
    ExperimentConfig ec = cfg.base;
    ec.trajectory.step = h;
    ec.trajectory.samples = static_cast<int>(std::llround(duration / h));
    int window = static_cast<int>(std::llround(
        cfg.base.filter.window *
        std::pow(cfg.base.trajectory.step / h, cfg.alpha)));
    window += window % 2;  // keep parity so the staggered pair stays balanced
    ec.filter.window = std::max(window, cfg.base.filter.window);
    ec.filter.step = h;
    ec.filter.eval_index = 0.5 * (ec.filter.window + 1);
    const McResult mc = run_mc(ec);
    EstimatorRatePoint point;
    point.step = h;
    point.window = ec.filter.window;
    for (std::size_t mi = 0; mi < report.methods.size(); ++mi) {
      double worst = 0.0;
      for (const auto& ps : mc.summary.methods[mi].params)
        worst = std::max(worst, std::abs(ps.bias_pct));
      point.abs_bias_pct.push_back(worst);
      log_bias[mi].push_back(std::log(std::max(worst, 1e-12)));
    }
    log_h.push_back(std::log(h));
    report.points.push_back(std::move(point));
  }
  for (std::size_t mi = 0; mi < report.methods.size(); ++mi)
    report.slopes.push_back(detail::fit_slope(log_h, log_bias[mi]));
  // ordering check: LS, when present, should have the largest bias everywhere
  std::ptrdiff_t ls_at = -1;
  for (std::size_t mi = 0; mi < report.methods.size(); ++mi)
    if (report.methods[mi] == Method::ls) ls_at = static_cast<std::ptrdiff_t>(mi);
  if (ls_at >= 0)
    for (const auto& point : report.points)
      for (std::size_t mi = 0; mi < report.methods.size(); ++mi)
        if (static_cast<std::ptrdiff_t>(mi) != ls_at &&
            point.abs_bias_pct[mi] >= point.abs_bias_pct[ls_at])
          report.ls_dominated = false;
  return report;
}

}  // namespace ctdebias
