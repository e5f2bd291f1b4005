#pragma once

// JSON serialisation of fit and bootstrap results, plus the run-metadata
// files every CLI command writes. Loaded fits regenerate their conditional
// samples deterministically from the recorded seed instead of storing the
// draws on disk.

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dast/inference.hpp"

namespace dast {

inline constexpr const char* kArtifactVersion = "0.1.0";

namespace serialize {

using nlohmann::json;

inline json to_json(const Vector& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline json to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

inline Vector vector_from_json(const json& a) {
  Vector v(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) v[i] = a[i].get<double>();
  return v;
}

inline Matrix matrix_from_json(const json& a) {
  if (a.empty()) return Matrix();
  Matrix m(a.size(), a[0].size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j)
      m(i, j) = a[i][j].get<double>();
  return m;
}

inline json params_to_json(const ParamLayout& layout, const Params& p) {
  json j;
  j["beta"] = p.beta;
  if (layout.has_sigma2) j["sigma2"] = p.sigma2;
  if (layout.has_phi) j["phi"] = p.phi;
  if (layout.has_impact) {
    j["alpha"] = p.alpha;
    j["gamma"] = p.gamma;
  }
  if (layout.has_psi_t) j["psi_t"] = p.psi_t;
  return j;
}

inline Params params_from_json(const json& j) {
  Params p;
  p.beta = j.at("beta").get<std::vector<double>>();
  if (j.contains("sigma2")) p.sigma2 = j["sigma2"].get<double>();
  if (j.contains("phi")) p.phi = j["phi"].get<double>();
  if (j.contains("alpha")) p.alpha = j["alpha"].get<double>();
  if (j.contains("gamma")) p.gamma = j["gamma"].get<double>();
  if (j.contains("psi_t")) p.psi_t = j["psi_t"].get<double>();
  return p;
}

inline json config_to_json(const McmlConfig& c) {
  return json{{"max_outer_iters", c.max_outer_iters},
              {"inner_grad_tol", c.inner_grad_tol},
              {"inner_max_iters", c.inner_max_iters},
              {"outer_param_tol", c.outer_param_tol},
              {"outer_loglik_tol", c.outer_loglik_tol},
              {"mc_samples", c.mala.n_samples},
              {"burnin", c.mala.burnin},
              {"thin", c.mala.thin},
              {"target_accept", c.mala.target_accept},
              {"seed", c.seed}};
}

inline McmlConfig config_from_json(const json& j) {
  McmlConfig c;
  c.max_outer_iters = j.value("max_outer_iters", c.max_outer_iters);
  c.inner_grad_tol = j.value("inner_grad_tol", c.inner_grad_tol);
  c.inner_max_iters = j.value("inner_max_iters", c.inner_max_iters);
  c.outer_param_tol = j.value("outer_param_tol", c.outer_param_tol);
  c.outer_loglik_tol = j.value("outer_loglik_tol", c.outer_loglik_tol);
  c.mala.n_samples = j.value("mc_samples", c.mala.n_samples);
  c.mala.burnin = j.value("burnin", c.mala.burnin);
  c.mala.thin = j.value("thin", c.mala.thin);
  c.mala.target_accept = j.value("target_accept", c.mala.target_accept);
  c.seed = j.value("seed", c.seed);
  return c;
}

inline json fit_to_json(const FitResult& fit) {
  json j;
  j["model"] = to_string(fit.kind);
  j["n_beta"] = fit.layout.n_beta;
  j["parameter_names"] = fit.layout.natural_names();
  j["transformed_names"] = fit.layout.names();
  j["estimate"] = params_to_json(fit.layout, fit.estimate);
  j["estimate_transformed"] = to_json(fit.estimate_transformed);
  if (fit.se_transformed.size() > 0) {
    j["se_transformed"] = to_json(fit.se_transformed);
    j["se_natural"] = to_json(fit.se_natural);
  }
  if (fit.hessian.size() > 0) j["hessian"] = to_json(fit.hessian);
  json trace = json::array();
  for (const auto& [psi, rel] : fit.outer_trace)
    trace.push_back({{"psi", to_json(psi)}, {"rel_loglik", rel}});
  j["outer_trace"] = trace;
  j["ess_history"] = fit.ess_history;
  j["mala_acceptance"] = fit.mala_acceptance;
  j["converged"] = fit.converged;
  j["penalty"] = {{"lambda1", fit.penalty.lambda1},
                  {"lambda2", fit.penalty.lambda2},
                  {"enabled", fit.penalty.enabled}};
  j["penalty_used"] = fit.penalty_used;
  j["seed"] = fit.seed;
  j["n_records"] = fit.n_records;
  j["n_sites"] = fit.n_sites;
  j["warnings"] = fit.warnings;
  j["config"] = config_to_json(fit.config);
  return j;
}

inline FitResult fit_from_json(const json& j) {
  FitResult fit;
  fit.kind = model_kind_from_string(j.at("model").get<std::string>());
  fit.layout = ParamLayout::make(fit.kind, j.at("n_beta").get<int>());
  fit.estimate = params_from_json(j.at("estimate"));
  fit.estimate_transformed = vector_from_json(j.at("estimate_transformed"));
  if (j.contains("se_transformed")) {
    fit.se_transformed = vector_from_json(j["se_transformed"]);
    fit.se_natural = vector_from_json(j["se_natural"]);
  }
  if (j.contains("hessian")) fit.hessian = matrix_from_json(j["hessian"]);
  for (const auto& e : j.at("outer_trace"))
    fit.outer_trace.emplace_back(vector_from_json(e.at("psi")),
                                 e.at("rel_loglik").get<double>());
  fit.ess_history = j.value("ess_history", std::vector<double>{});
  fit.mala_acceptance = j.value("mala_acceptance", 0.0);
  fit.converged = j.at("converged").get<bool>();
  fit.penalty.lambda1 = j.at("penalty").at("lambda1").get<double>();
  fit.penalty.lambda2 = j.at("penalty").at("lambda2").get<double>();
  fit.penalty.enabled = j.at("penalty").at("enabled").get<bool>();
  fit.penalty_used = j.value("penalty_used", false);
  fit.seed = j.at("seed").get<std::uint64_t>();
  fit.n_records = j.at("n_records").get<int>();
  fit.n_sites = j.at("n_sites").get<int>();
  fit.warnings = j.value("warnings", std::string());
  fit.config = config_from_json(j.at("config"));
  return fit;
}

inline void save_fit(const FitResult& fit, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << fit_to_json(fit).dump(2) << '\n';
}

inline FitResult load_fit(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  json j;
  in >> j;
  return fit_from_json(j);
}

// A loaded fit has no draws; regenerate them at the recorded seed. The
// site-count checksum guards against pairing a fit with the wrong dataset.
inline void ensure_samples(FitResult& fit, const LatentModel& model) {
  if (fit.samples) return;
  if (model.n_records() != fit.n_records || model.n_sites() != fit.n_sites)
    throw std::runtime_error(
        "fit/dataset mismatch: fit was made on " +
        std::to_string(fit.n_records) + " records / " +
        std::to_string(fit.n_sites) + " sites, dataset has " +
        std::to_string(model.n_records()) + " / " +
        std::to_string(model.n_sites()));
  Rng rng = Rng::substream(fit.seed, "fit-final");
  fit.samples = std::make_shared<ConditionalSamples>(
      mala_sample(model, fit.estimate, fit.config.mala, rng));
}

inline json bootstrap_to_json(const BootstrapResult& b) {
  json j;
  j["names"] = b.names;
  j["b_requested"] = b.b_requested;
  j["dropped"] = b.dropped;
  j["high_drop_warning"] = b.high_drop_warning;
  j["point_bc"] = b.point_bc;
  j["ci_lower"] = b.ci_lower;
  j["ci_upper"] = b.ci_upper;
  j["replicates"] = to_json(b.replicates);
  return j;
}

}  // namespace serialize
}  // namespace dast
