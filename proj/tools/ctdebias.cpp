// Command-line front end: design filters, simulate trajectories, run single
// estimates, Monte Carlo studies, and rate studies.
//
// Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O
// error.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "ctdebias/io.hpp"

namespace fs = std::filesystem;
using namespace ctdebias;

namespace {

fs::path ensure_dir(const std::string& dir) {
  fs::path path(dir);
  std::error_code ec;
  fs::create_directories(path, ec);
  if (ec) throw IoError("cannot create output directory " + dir);
  return path;
}

/// Removes the files a failed run already wrote, so no partial study output
/// survives without a manifest.
struct OutputTracker {
  fs::path dir;
  std::vector<std::string> files;

  fs::path add(const std::string& name) {
    files.push_back(name);
    return dir / name;
  }
  void discard() {
    for (const auto& name : files) {
      std::error_code ec;
      fs::remove(dir / name, ec);
    }
  }
};

NoiseModel noise_from_flag(const std::string& sigma, int state_dim) {
  try {
    std::size_t used = 0;
    const double value = std::stod(sigma, &used);
    if (used == sigma.size()) return NoiseModel::isotropic(value, state_dim);
  } catch (const std::exception&) {
  }
  if (!sigma.empty() && sigma.front() == '[') {
    NoiseModel noise{matrix_from_json(json::parse(sigma))};
    return noise;
  }
  return NoiseModel{matrix_from_json(detail::load_json(sigma))};
}

int cmd_design(const std::string& spec_path, const std::string& out_dir, bool staggered) {
  const FilterSpec spec = filter_spec_from_file(spec_path);
  OutputTracker out{ensure_dir(out_dir)};
  Manifest manifest;
  manifest.config = to_json(spec);
  if (staggered) {
    const auto [odd, even] = design_staggered_pair(spec);
    write_filter_bank(odd, out.add("filter_odd.csv"), out.add("filter_odd.json"));
    write_filter_bank(even, out.add("filter_even.csv"), out.add("filter_even.json"));
    std::cout << "row norms (odd support):  " << row_norms(odd).transpose() << "\n";
    std::cout << "row norms (even support): " << row_norms(even).transpose() << "\n";
  } else {
    const FilterBank bank = design_filter(spec);
    write_filter_bank(bank, out.add("filter.csv"), out.add("filter.json"));
    std::cout << "row norms: " << row_norms(bank).transpose() << "\n";
  }
  manifest.outputs = out.files;
  manifest.write(out.dir);
  return 0;
}

int cmd_simulate(const std::string& model_spec, const std::string& config_path,
                 std::uint64_t seed, const std::string& out_dir) {
  json j = detail::load_json(config_path);
  if (!model_spec.empty()) j["model"] = model_spec;
  const TrajectoryConfig cfg = trajectory_from_json(j);
  const NoiseModel noise = noise_from_json(j, cfg.model.state_dim);
  const Eigen::MatrixXd clean = integrate(cfg);
  const Eigen::MatrixXd measured = add_noise(clean, noise, seed);
  OutputTracker out{ensure_dir(out_dir)};
  write_trajectory_csv(out.add("trajectory.csv"), cfg.step, clean, measured);
  Manifest manifest;
  manifest.config = j;
  manifest.seeds = {{"seed", seed}};
  manifest.extra = {{"rtol", cfg.rtol}, {"atol", cfg.atol}};
  manifest.outputs = out.files;
  manifest.write(out.dir);
  std::cout << "wrote " << (out.dir / "trajectory.csv").string() << " (" << cfg.samples
            << " rows)\n";
  return 0;
}

int cmd_estimate(const std::string& data_path, const std::string& model_spec,
                 const std::string& filter_path, const std::string& method_name,
                 const std::string& sigma, const std::string& out_dir,
                 double pe_threshold) {
  const FeatureModel model = model_from_spec(model_spec);
  const Method method = method_from_string(method_name);
  const Dataset data = read_trajectory_csv(data_path);
  if (data.times.size() < 2) throw ConfigError("data file has fewer than 2 samples");
  const double step = data.times[1] - data.times[0];
  if (!(step > 0)) throw ConfigError("data times must be increasing");
  for (int i = 2; i < data.times.size(); ++i)
    if (std::abs(data.times[i] - data.times[i - 1] - step) > 1e-6 * step)
      throw ConfigError("data is not uniformly sampled");
  if (data.measurements.cols() != model.state_dim)
    throw ConfigError("data channel count does not match the model");

  FilterSpec spec = filter_spec_from_file(filter_path);
  spec.step = step;  // the data grid is authoritative
  spec.validate();
  const NoiseModel noise = noise_from_flag(sigma, model.state_dim);
  const EstimationContext ctx = make_context(model, spec, noise, method == Method::iv);
  const EstimatorOutput result = run_method(ctx, method, data.measurements, data.times[0]);

  OutputTracker out{ensure_dir(out_dir)};
  {
    auto stream = detail::open_out(out.add("estimate.json"));
    stream << to_json(result).dump(2) << "\n";
  }
  Manifest manifest;
  manifest.config = {{"data", data_path},   {"model", model_spec},
                     {"filter", to_json(spec)}, {"method", method_name},
                     {"sigma", sigma}};
  if (method == Method::iv)
    manifest.extra["staggered_supports"] = {to_string(ctx.odd.spec.support),
                                            to_string(ctx.even.spec.support)};
  manifest.outputs = out.files;
  manifest.write(out.dir);

  std::cout << "theta_hat =\n" << result.theta << "\n";
  std::cout << "pe_stat = " << result.pe_stat << "\n";
  if (result.pe_stat < pe_threshold)
    std::cerr << "warning: excitation statistic " << result.pe_stat
              << " is below the threshold " << pe_threshold << "\n";
  return 0;
}

int cmd_mc(const std::string& config_path, const std::string& out_dir) {
  const json j = detail::load_json(config_path);
  const ExperimentConfig cfg = experiment_from_json(j);
  OutputTracker out{ensure_dir(out_dir)};
  try {
    const McResult result = run_mc(cfg);
    const int state_dim = cfg.trajectory.model.state_dim;
    write_reps_csv(out.add("reps.csv"), result, state_dim);
    write_summary_csv(out.add("summary.csv"), result.summary);
    for (std::size_t mi = 0; mi < result.methods.size(); ++mi) {
      const auto& reps = result.estimates[mi];
      if (reps.size() < 2) continue;
      const auto& first = reps[0];
      for (int r = 0; r < first.rows(); ++r)
        for (int c = 0; c < first.cols(); ++c) {
          Eigen::VectorXd samples(reps.size());
          for (std::size_t rep = 0; rep < reps.size(); ++rep)
            samples[static_cast<int>(rep)] = reps[rep](r, c);
          if ((samples.array() - samples[0]).abs().maxCoeff() == 0.0) continue;
          const auto [grid, density] = kde(samples);
          write_kde_csv(out.add("kde_" + std::string(to_string(result.methods[mi])) + "_" +
                                param_label(r, c, state_dim) + ".csv"),
                        grid, density);
        }
    }
    Manifest manifest;
    manifest.config = j;
    manifest.seeds = {{"base_seed", cfg.base_seed}, {"replications", cfg.replications}};
    if (cfg.replications == 1)
      manifest.extra["single_replication_std_zero"] = true;
    manifest.outputs = out.files;
    manifest.write(out.dir);
  } catch (...) {
    out.discard();
    throw;
  }
  std::cout << "wrote " << (out.dir / "summary.csv").string() << "\n";
  return 0;
}

int cmd_rates(const std::string& config_path, const std::string& out_dir) {
  const json j = detail::load_json(config_path);
  const std::string mode = j.value("mode", "filter");
  OutputTracker out{ensure_dir(out_dir)};
  try {
    Manifest manifest;
    manifest.config = j;
    if (mode == "filter") {
      RateStudyConfig cfg;
      cfg.accuracy = j.at("p").get<int>();
      cfg.max_deriv = j.at("m").get<int>();
      for (const auto& v : j.at("windows")) cfg.windows.push_back(v.get<int>());
      for (const auto& v : j.at("steps")) cfg.steps.push_back(v.get<double>());
      cfg.alpha = j.value("alpha", 0.0);
      cfg.draws = j.value("draws", 10000);
      cfg.seed = j.value("seed", static_cast<std::uint64_t>(0));
      cfg.zero_signal = j.value("signal", std::string("sin")) == "zero";
      const RateReport report = filter_rate_study(cfg);
      {
        auto stream = detail::open_out(out.add("rates.csv"));
        stream << "N,h,bias,fluct4root\n";
        for (const auto& row : report.scales)
          stream << static_cast<int>(row[0]) << "," << detail::fmt(row[1]) << ","
                 << detail::fmt(row[2]) << "," << detail::fmt(row[3]) << "\n";
      }
      {
        auto stream = detail::open_out(out.add("report.json"));
        stream << json{{"alpha", report.alpha},
                       {"beta_theory", report.beta_theory},
                       {"gamma_theory", report.gamma_theory},
                       {"bias_slope_vs_h", report.bias_slope_vs_h},
                       {"bias_slope_vs_span", report.bias_slope_vs_span},
                       {"fluct_slope_vs_h", report.fluct_slope_vs_h},
                       {"fluct_slope_vs_n", report.fluct_slope_vs_n}}
                      .dump(2)
               << "\n";
      }
      manifest.seeds = {{"seed", cfg.seed}};
      std::cout << "bias slope vs log(Nh): " << report.bias_slope_vs_span
                << "  fluctuation slope vs log(N): " << report.fluct_slope_vs_n << "\n";
    } else if (mode == "estimator") {
      EstimatorRateConfig cfg;
      cfg.base = experiment_from_json(j);
      for (const auto& v : j.at("steps")) cfg.steps.push_back(v.get<double>());
      cfg.alpha = j.value("alpha", 0.9);
      const EstimatorRateReport report = estimator_rate_study(cfg);
      {
        auto stream = detail::open_out(out.add("rates.csv"));
        stream << "h,N,method,abs_bias_pct\n";
        for (const auto& point : report.points)
          for (std::size_t mi = 0; mi < report.methods.size(); ++mi)
            stream << detail::fmt(point.step) << "," << point.window << ","
                   << to_string(report.methods[mi]) << ","
                   << detail::fmt(point.abs_bias_pct[mi]) << "\n";
      }
      {
        json slopes = json::object();
        for (std::size_t mi = 0; mi < report.methods.size(); ++mi)
          slopes[to_string(report.methods[mi])] = report.slopes[mi];
        auto stream = detail::open_out(out.add("report.json"));
        stream << json{{"slopes", slopes}, {"ls_dominated", report.ls_dominated}}.dump(2)
               << "\n";
      }
      manifest.seeds = {{"base_seed", cfg.base.base_seed},
                        {"replications", cfg.base.replications}};
      std::cout << "LS dominated at every scale: " << (report.ls_dominated ? "yes" : "no")
                << "\n";
    } else {
      throw ConfigError("rates mode must be 'filter' or 'estimator'");
    }
    manifest.outputs = out.files;
    manifest.write(out.dir);
  } catch (...) {
    out.discard();
    throw;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continuous-time nonlinear autoregression identification toolkit"};
  app.set_version_flag("--version", std::string(version));
  app.require_subcommand(1);

  std::string spec_path, out_dir, model_spec, config_path, data_path, filter_path;
  std::string method_name = "ls", sigma = "0";
  std::uint64_t seed = 0;
  bool staggered = false;
  double pe_threshold = 1e-6;

  auto* design = app.add_subcommand("design", "Design a differentiation filter bank");
  design->add_option("--spec", spec_path, "Filter spec JSON {N,p,m,i0,h,support}")->required();
  design->add_option("--out", out_dir, "Output directory")->required();
  design->add_flag("--staggered", staggered, "Design the odd/even staggered pair");

  auto* simulate = app.add_subcommand("simulate", "Integrate a trajectory and add noise");
  simulate->add_option("--model", model_spec, "Built-in name (vdp, lorenz) or model JSON path");
  simulate->add_option("--config", config_path, "Trajectory config JSON")->required();
  simulate->add_option("--seed", seed, "Noise seed");
  simulate->add_option("--out", out_dir, "Output directory")->required();

  auto* estimate = app.add_subcommand("estimate", "Run one estimator on a data file");
  estimate->add_option("--data", data_path, "Trajectory CSV")->required();
  estimate->add_option("--model", model_spec, "Built-in name or model JSON path")->required();
  estimate->add_option("--filter", filter_path, "Filter spec JSON")->required();
  estimate->add_option("--method", method_name, "ls, bc, or iv")->required();
  estimate->add_option("--sigma", sigma, "Noise variance: scalar or matrix (JSON/file)");
  estimate->add_option("--out", out_dir, "Output directory")->required();
  estimate->add_option("--pe-threshold", pe_threshold, "Excitation warning threshold");

  auto* mc = app.add_subcommand("mc", "Run a Monte Carlo study");
  mc->add_option("--config", config_path, "Experiment config JSON")->required();
  mc->add_option("--out", out_dir, "Output directory")->required();

  auto* rates = app.add_subcommand("rates", "Run a consistency-rate study");
  rates->add_option("--config", config_path, "Rate study config JSON")->required();
  rates->add_option("--out", out_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
    if (design->parsed()) return cmd_design(spec_path, out_dir, staggered);
    if (simulate->parsed()) return cmd_simulate(model_spec, config_path, seed, out_dir);
    if (estimate->parsed())
      return cmd_estimate(data_path, model_spec, filter_path, method_name, sigma, out_dir,
                          pe_threshold);
    if (mc->parsed()) return cmd_mc(config_path, out_dir);
    if (rates->parsed()) return cmd_rates(config_path, out_dir);
    return 2;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
