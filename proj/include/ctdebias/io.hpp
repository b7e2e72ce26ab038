#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ctdebias/common.hpp"
#include "ctdebias/estimate.hpp"
#include "ctdebias/filter.hpp"
#include "ctdebias/mc.hpp"
#include "ctdebias/model.hpp"
#include "ctdebias/simulate.hpp"

namespace ctdebias {

using json = nlohmann::json;

namespace detail {

/// Shortest representation that round-trips a double.
inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

inline json load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Filter specs and banks

inline json to_json(const FilterSpec& spec) {
  return json{{"N", spec.window},     {"p", spec.accuracy}, {"m", spec.max_deriv},
              {"i0", spec.eval_index}, {"h", spec.step},     {"support", to_string(spec.support)}};
}

inline FilterSpec filter_spec_from_json(const json& j) {
  try {
    FilterSpec spec;
    spec.window = j.at("N").get<int>();
    spec.accuracy = j.at("p").get<int>();
    spec.max_deriv = j.at("m").get<int>();
    spec.step = j.value("h", 1.0);
    spec.eval_index = j.value("i0", 0.5 * (spec.window + 1));
    spec.support = support_from_string(j.value("support", "full"));
    spec.validate();
    return spec;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad filter spec: ") + e.what());
  }
}

inline FilterSpec filter_spec_from_file(const std::filesystem::path& path) {
  return filter_spec_from_json(detail::load_json(path));
}

/// Coefficient CSV (`d,k,coeff`) plus a JSON sidecar with the design fields.
inline void write_filter_bank(const FilterBank& bank, const std::filesystem::path& csv_path,
                              const std::filesystem::path& sidecar_path) {
  auto out = detail::open_out(csv_path);
  out << "d,k,coeff\n";
  for (int d = 0; d < bank.coeffs.rows(); ++d)
    for (int k = 0; k < bank.coeffs.cols(); ++k)
      out << d << "," << (k + 1) << "," << detail::fmt(bank.coeffs(d, k)) << "\n";
  auto sc = detail::open_out(sidecar_path);
  sc << to_json(bank.spec).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Feature models

/// Parses {d_x, m, features: [[{coeff, powers: {"x<l>.<d>": e, "t": e}}]]}.
inline FeatureModel model_from_json(const json& j) {
  try {
    FeatureModel model;
    model.state_dim = j.at("d_x").get<int>();
    model.order = j.at("m").get<int>();
    for (const auto& feature : j.at("features")) {
      std::vector<MonomialTerm> terms;
      for (const auto& jterm : feature) {
        MonomialTerm term;
        term.coeff = jterm.at("coeff").get<double>();
        const json powers = jterm.value("powers", json::object());
        for (const auto& [key, value] : powers.items()) {
          const int exponent = value.get<int>();
          if (exponent == 0) continue;
          int coord;
          if (key == "t") {
            coord = model.time_coord();
          } else {
            if (key.size() < 4 || key[0] != 'x')
              throw ConfigError("bad coordinate name '" + key + "' (want x<l>.<d> or t)");
            const auto dot = key.find('.');
            if (dot == std::string::npos)
              throw ConfigError("bad coordinate name '" + key + "' (want x<l>.<d> or t)");
            const int channel = std::stoi(key.substr(1, dot - 1));
            const int order = std::stoi(key.substr(dot + 1));
            if (channel < 1 || channel > model.state_dim)
              throw ConfigError("coordinate '" + key + "' channel out of range");
            coord = order * model.state_dim + (channel - 1);
          }
          term.powers.emplace_back(coord, exponent);
        }
        terms.push_back(std::move(term));
      }
      model.features.push_back(std::move(terms));
    }
    model.validate();
    return model;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad model config: ") + e.what());
  }
}

/// Built-in name ("vdp", "lorenz") or a path to a model config JSON.
inline FeatureModel model_from_spec(const std::string& name_or_path) {
  if (name_or_path == "vdp") return vdp_model();
  if (name_or_path == "lorenz") return lorenz_model();
  return model_from_json(detail::load_json(name_or_path));
}

inline FeatureModel model_from_spec(const json& j) {
  if (j.is_string()) return model_from_spec(j.get<std::string>());
  return model_from_json(j);
}

// ---------------------------------------------------------------------------
// Matrices and noise

inline Eigen::MatrixXd matrix_from_json(const json& j) {
  if (!j.is_array() || j.empty()) throw ConfigError("expected a nonempty matrix");
  if (!j[0].is_array()) {  // flat array = column vector
    Eigen::MatrixXd m(j.size(), 1);
    for (std::size_t r = 0; r < j.size(); ++r) m(static_cast<int>(r), 0) = j[r].get<double>();
    return m;
  }
  const std::size_t cols = j[0].size();
  Eigen::MatrixXd m(j.size(), cols);
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (j[r].size() != cols) throw ConfigError("ragged matrix rows");
    for (std::size_t c = 0; c < cols; ++c)
      m(static_cast<int>(r), static_cast<int>(c)) = j[r][c].get<double>();
  }
  return m;
}

inline json to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (int r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

/// Accepts "sigma2": scalar shorthand for sigma^2 I, or "sigma": full matrix.
inline NoiseModel noise_from_json(const json& j, int state_dim) {
  if (j.contains("sigma2")) return NoiseModel::isotropic(j.at("sigma2").get<double>(), state_dim);
  if (j.contains("sigma")) {
    NoiseModel noise{matrix_from_json(j.at("sigma"))};
    if (noise.covariance.rows() != state_dim || noise.covariance.cols() != state_dim)
      throw ConfigError("noise covariance must be d_x x d_x");
    return noise;
  }
  throw ConfigError("config needs 'sigma2' (scalar) or 'sigma' (matrix)");
}

// ---------------------------------------------------------------------------
// Experiment configs

inline TrajectoryConfig trajectory_from_json(const json& j) {
  try {
    TrajectoryConfig cfg;
    cfg.model = model_from_spec(j.at("model"));
    cfg.theta0 = matrix_from_json(j.at("theta0"));
    const Eigen::MatrixXd x0 = matrix_from_json(j.at("x0"));
    cfg.initial = Eigen::Map<const Eigen::VectorXd>(x0.data(), x0.size());
    cfg.samples = j.at("n").get<int>();
    cfg.step = j.at("h").get<double>();
    cfg.rtol = j.value("rtol", 1e-10);
    cfg.atol = j.value("atol", 1e-12);
    cfg.validate();
    return cfg;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad trajectory config: ") + e.what());
  }
}

inline ExperimentConfig experiment_from_json(const json& j) {
  try {
    ExperimentConfig cfg;
    cfg.trajectory = trajectory_from_json(j);
    cfg.noise = noise_from_json(j, cfg.trajectory.model.state_dim);
    json jf = j.at("filter");
    if (!jf.contains("h")) jf["h"] = cfg.trajectory.step;
    cfg.filter = filter_spec_from_json(jf);
    if (j.contains("estimators"))
      for (const auto& name : j.at("estimators"))
        cfg.estimators.push_back(method_from_string(name.get<std::string>()));
    else
      cfg.estimators = {Method::ls, Method::bc, Method::iv};
    cfg.replications = j.value("replications", 1);
    cfg.base_seed = j.value("base_seed", static_cast<std::uint64_t>(0));
    cfg.validate();
    return cfg;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad experiment config: ") + e.what());
  }
}

inline ExperimentConfig experiment_from_file(const std::filesystem::path& path) {
  return experiment_from_json(detail::load_json(path));
}

// ---------------------------------------------------------------------------
// Trajectory CSV

inline void write_trajectory_csv(const std::filesystem::path& path, double step,
                                 const Eigen::MatrixXd& clean,
                                 const Eigen::MatrixXd& measured) {
  if (clean.rows() != measured.rows() || clean.cols() != measured.cols())
    throw ConfigError("clean and measured series must have matching shapes");
  auto out = detail::open_out(path);
  out << "t";
  for (int c = 0; c < clean.cols(); ++c) out << ",x" << (c + 1);
  for (int c = 0; c < clean.cols(); ++c) out << ",z" << (c + 1);
  out << "\n";
  for (int i = 0; i < clean.rows(); ++i) {
    out << detail::fmt((i + 1) * step);
    for (int c = 0; c < clean.cols(); ++c) out << "," << detail::fmt(clean(i, c));
    for (int c = 0; c < clean.cols(); ++c) out << "," << detail::fmt(measured(i, c));
    out << "\n";
  }
}

struct Dataset {
  Eigen::VectorXd times;
  Eigen::MatrixXd measurements;  // z columns; falls back to x columns if no z
};

inline Dataset read_trajectory_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("empty data file " + path.string());
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  std::vector<int> z_cols, x_cols;
  int t_col = -1;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == "t") t_col = static_cast<int>(c);
    else if (!header[c].empty() && header[c][0] == 'z') z_cols.push_back(static_cast<int>(c));
    else if (!header[c].empty() && header[c][0] == 'x') x_cols.push_back(static_cast<int>(c));
  }
  if (t_col < 0) throw ConfigError("data file lacks a 't' column");
  const std::vector<int>& cols = z_cols.empty() ? x_cols : z_cols;
  if (cols.empty()) throw ConfigError("data file lacks measurement columns");
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    if (row.size() != header.size()) throw ConfigError("ragged row in " + path.string());
    rows.push_back(std::move(row));
  }
  Dataset data;
  data.times.resize(rows.size());
  data.measurements.resize(rows.size(), cols.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    data.times[static_cast<int>(r)] = rows[r][t_col];
    for (std::size_t c = 0; c < cols.size(); ++c)
      data.measurements(static_cast<int>(r), static_cast<int>(c)) = rows[r][cols[c]];
  }
  return data;
}

// ---------------------------------------------------------------------------
// Estimates and study outputs

inline json to_json(const EstimatorOutput& out) {
  std::vector<double> flat;
  for (int r = 0; r < out.theta.rows(); ++r)
    for (int c = 0; c < out.theta.cols(); ++c) flat.push_back(out.theta(r, c));
  return json{{"method", to_string(out.method)},
              {"theta_hat", flat},
              {"theta_rows", out.theta.rows()},
              {"theta_cols", out.theta.cols()},
              {"pe_stat", out.pe_stat},
              {"n_prime", out.sample_count},
              {"gram_condition", out.gram_condition}};
}

inline void write_reps_csv(const std::filesystem::path& path, const McResult& result,
                           int state_dim) {
  auto out = detail::open_out(path);
  out << "rep,method";
  if (!result.estimates.empty() && !result.estimates[0].empty()) {
    const auto& first = result.estimates[0][0];
    for (int r = 0; r < first.rows(); ++r)
      for (int c = 0; c < first.cols(); ++c) out << "," << param_label(r, c, state_dim);
  }
  out << "\n";
  const int reps = result.estimates.empty() ? 0 : static_cast<int>(result.estimates[0].size());
  for (int rep = 0; rep < reps; ++rep)
    for (std::size_t mi = 0; mi < result.methods.size(); ++mi) {
      out << rep << "," << to_string(result.methods[mi]);
      const auto& th = result.estimates[mi][rep];
      for (int r = 0; r < th.rows(); ++r)
        for (int c = 0; c < th.cols(); ++c) out << "," << detail::fmt(th(r, c));
      out << "\n";
    }
}

inline void write_summary_csv(const std::filesystem::path& path, const McSummary& summary) {
  auto out = detail::open_out(path);
  out << "method,param,bias_pct,std_pct,rmse_pct\n";
  for (const auto& ms : summary.methods) {
    for (const auto& ps : ms.params)
      out << to_string(ms.method) << "," << ps.label << "," << detail::fmt(ps.bias_pct)
          << "," << detail::fmt(ps.std_pct) << "," << detail::fmt(ps.rmse_pct) << "\n";
    out << to_string(ms.method) << ",opnorm," << detail::fmt(ms.opnorm_bias_pct) << ","
        << detail::fmt(ms.opnorm_rmsd_pct) << "," << detail::fmt(ms.opnorm_rmse_pct) << "\n";
  }
}

inline void write_kde_csv(const std::filesystem::path& path, const Eigen::VectorXd& grid,
                          const Eigen::VectorXd& density) {
  auto out = detail::open_out(path);
  out << "grid,density\n";
  for (int g = 0; g < grid.size(); ++g)
    out << detail::fmt(grid[g]) << "," << detail::fmt(density[g]) << "\n";
}

// ---------------------------------------------------------------------------
// Run manifest

/// Every output directory gets exactly one manifest naming all other files the
/// run wrote. Written atomically (temp file + rename) once the run succeeded.
struct Manifest {
  json config;
  json seeds = json::object();
  std::vector<std::string> outputs;
  json extra = json::object();

  void write(const std::filesystem::path& dir) const {
    json j{{"tool", "ctdebias"},
           {"version", version},
           {"created_utc", timestamp()},
           {"config", config},
           {"seeds", seeds},
           {"outputs", outputs}};
    for (const auto& [key, value] : extra.items()) j[key] = value;
    const auto tmp = dir / ".manifest.json.tmp";
    {
      auto out = detail::open_out(tmp);
      out << j.dump(2) << "\n";
    }
    std::error_code ec;
    std::filesystem::rename(tmp, dir / "manifest.json", ec);
    if (ec) throw IoError("cannot finalize manifest in " + dir.string());
  }

  static std::string timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::tm tm_utc{};
    gmtime_r(&t, &tm_utc);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buf;
  }
};

}  // namespace ctdebias
