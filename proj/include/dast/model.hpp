#pragma once

// Model assembly: parameter vectors and their transformed-scale packing,
// the record -> latent-site mapping, design matrices, and forward
// simulation of counts. One LatentModel drives the likelihood machinery
// for DAST and for the latent-Gaussian comparators (GLMM, S, ST).

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SVD>

#include "dast/covariance.hpp"
#include "dast/data.hpp"
#include "dast/impact.hpp"
#include "dast/rng.hpp"

namespace dast {

enum class ModelKind { dast, glm, glmm, spatial_s, spacetime_st };

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::dast: return "dast";
    case ModelKind::glm: return "glm";
    case ModelKind::glmm: return "glmm";
    case ModelKind::spatial_s: return "s";
    case ModelKind::spacetime_st: return "st";
  }
  return "?";
}

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "dast") return ModelKind::dast;
  if (s == "glm") return ModelKind::glm;
  if (s == "glmm") return ModelKind::glmm;
  if (s == "s") return ModelKind::spatial_s;
  if (s == "st") return ModelKind::spacetime_st;
  throw std::invalid_argument("unknown model kind: " + s);
}

// Full parameter vector; models use the blocks their layout names.
struct Params {
  std::vector<double> beta;
  double sigma2 = 1.0;
  double phi = 1.0;    // spatial range
  double alpha = 0.5;  // immediate MDA impact
  double gamma = 1.0;  // impact decay scale, years
  double psi_t = 1.0;  // temporal range of the ST comparator

  ImpactParams impact() const { return {alpha, gamma}; }
};

// Optimisation happens on the unconstrained scale:
// beta as-is, log sigma2, log phi, logit alpha, log gamma, log psi_t.
struct ParamLayout {
  ModelKind kind;
  int n_beta = 1;
  bool has_sigma2 = false;
  bool has_phi = false;
  bool has_impact = false;
  bool has_psi_t = false;

  static ParamLayout make(ModelKind kind, int n_beta) {
    ParamLayout l;
    l.kind = kind;
    l.n_beta = n_beta;
    switch (kind) {
      case ModelKind::glm: break;
      case ModelKind::glmm: l.has_sigma2 = true; break;
      case ModelKind::spatial_s:
        l.has_sigma2 = l.has_phi = true;
        break;
      case ModelKind::spacetime_st:
        l.has_sigma2 = l.has_phi = l.has_psi_t = true;
        break;
      case ModelKind::dast:
        l.has_sigma2 = l.has_phi = l.has_impact = true;
        break;
    }
    return l;
  }

  int size() const {
    return n_beta + (has_sigma2 ? 1 : 0) + (has_phi ? 1 : 0) +
           (has_impact ? 2 : 0) + (has_psi_t ? 1 : 0);
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (int i = 0; i < n_beta; ++i)
      out.push_back("beta[" + std::to_string(i) + "]");
    if (has_sigma2) out.push_back("log_sigma2");
    if (has_phi) out.push_back("log_phi");
    if (has_impact) {
      out.push_back("logit_alpha");
      out.push_back("log_gamma");
    }
    if (has_psi_t) out.push_back("log_psi_t");
    return out;
  }

  std::vector<std::string> natural_names() const {
    std::vector<std::string> out;
    for (int i = 0; i < n_beta; ++i)
      out.push_back("beta[" + std::to_string(i) + "]");
    if (has_sigma2) out.push_back("sigma2");
    if (has_phi) out.push_back("phi");
    if (has_impact) {
      out.push_back("alpha");
      out.push_back("gamma");
    }
    if (has_psi_t) out.push_back("psi_t");
    return out;
  }

  Vector pack(const Params& p) const {
    Vector v(size());
    int k = 0;
    for (int i = 0; i < n_beta; ++i) v[k++] = p.beta[i];
    if (has_sigma2) v[k++] = std::log(p.sigma2);
    if (has_phi) v[k++] = std::log(p.phi);
    if (has_impact) {
      v[k++] = logit(p.alpha);
      v[k++] = std::log(p.gamma);
    }
    if (has_psi_t) v[k++] = std::log(p.psi_t);
    return v;
  }

  Params unpack(const Vector& v) const {
    if (v.size() != size())
      throw std::invalid_argument("parameter vector has wrong length");
    Params p;
    int k = 0;
    p.beta.resize(n_beta);
    for (int i = 0; i < n_beta; ++i) p.beta[i] = v[k++];
    if (has_sigma2) p.sigma2 = std::exp(v[k++]);
    if (has_phi) p.phi = std::exp(v[k++]);
    if (has_impact) {
      p.alpha = inverse_logit(v[k++]);
      p.gamma = std::exp(v[k++]);
    }
    if (has_psi_t) p.psi_t = std::exp(v[k++]);
    return p;
  }

  // Values of the natural parameters, in natural_names() order.
  std::vector<double> natural_values(const Params& p) const {
    std::vector<double> out;
    for (int i = 0; i < n_beta; ++i) out.push_back(p.beta[i]);
    if (has_sigma2) out.push_back(p.sigma2);
    if (has_phi) out.push_back(p.phi);
    if (has_impact) {
      out.push_back(p.alpha);
      out.push_back(p.gamma);
    }
    if (has_psi_t) out.push_back(p.psi_t);
    return out;
  }

  // d(natural)/d(transformed), used for delta-method standard errors.
  std::vector<double> jacobian_diag(const Params& p) const {
    std::vector<double> out;
    for (int i = 0; i < n_beta; ++i) out.push_back(1.0);
    if (has_sigma2) out.push_back(p.sigma2);
    if (has_phi) out.push_back(p.phi);
    if (has_impact) {
      out.push_back(p.alpha * (1.0 - p.alpha));
      out.push_back(p.gamma);
    }
    if (has_psi_t) out.push_back(p.psi_t);
    return out;
  }

  int index_of(const std::string& transformed_name) const {
    auto ns = names();
    for (std::size_t i = 0; i < ns.size(); ++i)
      if (ns[i] == transformed_name) return static_cast<int>(i);
    return -1;
  }
};

struct ModelOptions {
  bool include_cumulative_mda = true;  // comparators: add c(x,t) column
  ImpactMode impact_mode = ImpactMode::exponential_decay;
  double matern_nu = 0.5;  // fixed; never optimised
};

// Correlation matrix R (unit diagonal) plus dR/d(range parameter) for each
// active range, in transformed-parameter index order.
struct CorrDerivs {
  Matrix corr;
  std::vector<std::pair<int, Matrix>> d_range;  // (layout index, dR/d theta)
};

class LatentModel {
 public:
  ModelKind kind = ModelKind::dast;
  ModelOptions options;
  ParamLayout layout;

  Matrix design;             // n_rec x p
  Eigen::VectorXi examined;  // m_i
  Eigen::VectorXi positive;  // y_i
  std::vector<int> site_of;  // record -> latent site (empty for GLM)
  std::vector<PointTime> sites;

  // decay bookkeeping: records sharing (iu, t) share one decay group
  std::vector<int> decay_group_of;
  std::vector<const MdaHistory*> group_history;
  std::vector<double> group_time;

  int n_records() const { return static_cast<int>(examined.size()); }
  int n_sites() const { return static_cast<int>(sites.size()); }
  int n_latent() const { return n_sites(); }
  bool has_latent() const { return kind != ModelKind::glm; }
  bool has_decay() const { return kind == ModelKind::dast; }

  // log prod(1 - f) and d/dalpha, d/dgamma per record for given impact
  // parameters; all zero when the model carries no decay term.
  struct DecayCache {
    std::vector<double> log_factor, d_alpha, d_gamma;
  };

  DecayCache decay_cache(const Params& p) const {
    DecayCache c;
    c.log_factor.assign(n_records(), 0.0);
    c.d_alpha.assign(n_records(), 0.0);
    c.d_gamma.assign(n_records(), 0.0);
    if (!has_decay()) return c;
    std::vector<DecayTerms> per_group(group_history.size());
    for (std::size_t g = 0; g < group_history.size(); ++g)
      per_group[g] = decay_terms(*group_history[g], group_time[g], p.impact(),
                                 options.impact_mode);
    for (int i = 0; i < n_records(); ++i) {
      const DecayTerms& d = per_group[decay_group_of[i]];
      c.log_factor[i] = d.log_factor;
      c.d_alpha[i] = d.d_alpha;
      c.d_gamma[i] = d.d_gamma;
    }
    return c;
  }

  CorrDerivs corr_derivs(const Params& p, bool with_derivs) const {
    CorrDerivs out;
    const int n = n_sites();
    out.corr = Matrix::Identity(n, n);
    if (kind == ModelKind::glmm) return out;  // iid effects

    const int phi_idx = layout.index_of("log_phi");
    const int psi_idx = layout.index_of("log_psi_t");
    Matrix d_phi, d_psi;
    if (with_derivs) {
      d_phi = Matrix::Zero(n, n);
      if (kind == ModelKind::spacetime_st) d_psi = Matrix::Zero(n, n);
    }
    const double nu = options.matern_nu;
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) {
        double h = distance(sites[i].loc, sites[j].loc);
        double rho;
        double drho_dphi;
        if (nu == 0.5) {
          rho = std::exp(-h / p.phi);
          drho_dphi = rho * h / (p.phi * p.phi);
        } else {
          rho = matern_corr(h, p.phi, nu);
          // d/dx [x^nu K_nu(x)] = -x^nu K_{nu-1}(x), x = h/phi
          double x = h / p.phi;
          if (x > 0.0 && x <= 705.0) {
            double log_norm = (nu - 1.0) * std::log(2.0) + std::lgamma(nu);
            double dx = std::exp(nu * std::log(x) - log_norm) *
                        std::cyl_bessel_k(std::abs(nu - 1.0), x);
            drho_dphi = dx * h / (p.phi * p.phi);
          } else {
            drho_dphi = 0.0;
          }
        }
        if (kind == ModelKind::spacetime_st) {
          double dt = std::abs(sites[i].t - sites[j].t);
          double rho_t = std::exp(-dt / p.psi_t);
          double v = rho * rho_t;
          out.corr(i, j) = out.corr(j, i) = v;
          if (with_derivs) {
            d_phi(i, j) = d_phi(j, i) = drho_dphi * rho_t;
            d_psi(i, j) = d_psi(j, i) = v * dt / (p.psi_t * p.psi_t);
          }
        } else {
          out.corr(i, j) = out.corr(j, i) = rho;
          if (with_derivs) d_phi(i, j) = d_phi(j, i) = drho_dphi;
        }
      }
    }
    if (with_derivs && phi_idx >= 0)
      out.d_range.emplace_back(phi_idx, std::move(d_phi));
    if (with_derivs && psi_idx >= 0)
      out.d_range.emplace_back(psi_idx, std::move(d_psi));
    return out;
  }

  // linear predictor eta_i = x_i' beta + S(site_i)
  Vector linear_predictor(const Params& p, const Vector& latent) const {
    Vector beta = Eigen::Map<const Vector>(p.beta.data(), p.beta.size());
    Vector eta = design * beta;
    if (has_latent())
      for (int i = 0; i < n_records(); ++i) eta[i] += latent[site_of[i]];
    return eta;
  }

  // Simulate counts under the model at the given parameters, reusing the
  // dataset design (locations, times, m_i, MDA histories).
  Eigen::VectorXi simulate_counts(const Params& p, Rng& rng) const {
    Vector latent = Vector::Zero(std::max(n_sites(), 1));
    if (has_latent()) {
      CorrDerivs cd = corr_derivs(p, false);
      Matrix sigma = p.sigma2 * cd.corr;
      CholFactor chol = factor_with_jitter(sigma, p.sigma2);
      Vector z(n_sites());
      for (int i = 0; i < n_sites(); ++i) z[i] = rng.normal();
      latent = chol.matrix_l() * z;
    }
    DecayCache decay = decay_cache(p);
    Vector eta = linear_predictor(p, latent);
    Eigen::VectorXi y(n_records());
    for (int i = 0; i < n_records(); ++i) {
      double prev = inverse_logit(eta[i]) * std::exp(decay.log_factor[i]);
      y[i] = rng.binomial(examined[i], prev);
    }
    return y;
  }
};

namespace detail {

struct SiteKey {
  double x, y, t;
  bool operator<(const SiteKey& o) const {
    return std::tie(x, y, t) < std::tie(o.x, o.y, o.t);
  }
};

}  // namespace detail

// Builds the latent model for a dataset. DAST uses the dataset covariates
// (or an intercept) and a purely spatial latent field over distinct
// locations; comparators use [1, c(x,t)] and their own latent structure.
inline LatentModel make_latent_model(const Dataset& ds, ModelKind kind,
                                     const ModelOptions& options = {}) {
  const int n = static_cast<int>(ds.records.size());
  if (n == 0) throw std::invalid_argument("empty dataset");

  LatentModel m;
  m.kind = kind;
  m.options = options;
  m.examined.resize(n);
  m.positive.resize(n);
  for (int i = 0; i < n; ++i) {
    m.examined[i] = ds.records[i].examined;
    m.positive[i] = ds.records[i].positive;
  }

  // design matrix
  bool comparator = kind != ModelKind::dast;
  int p_cov = ds.covariates.empty() ? 0 : static_cast<int>(ds.covariates[0].size());
  int p = 0;
  if (comparator) {
    p = (p_cov > 0 ? p_cov : 1) + (options.include_cumulative_mda ? 1 : 0);
  } else {
    p = p_cov > 0 ? p_cov : 1;
  }
  m.design = Matrix::Zero(n, p);
  for (int i = 0; i < n; ++i) {
    int k = 0;
    if (p_cov > 0) {
      for (int c = 0; c < p_cov; ++c) m.design(i, k++) = ds.covariates[i][c];
    } else {
      m.design(i, k++) = 1.0;
    }
    if (comparator && options.include_cumulative_mda) {
      const auto& r = ds.records[i];
      m.design(i, k++) = cumulative_rounds(ds, r.iu_id, r.t);
    }
  }
  m.layout = ParamLayout::make(kind, p);

  // latent sites
  if (kind != ModelKind::glm) {
    m.site_of.resize(n);
    if (kind == ModelKind::glmm) {
      for (int i = 0; i < n; ++i) {
        m.site_of[i] = i;
        m.sites.push_back({ds.records[i].loc, ds.records[i].t});
      }
    } else {
      std::map<detail::SiteKey, int> seen;
      bool use_time = kind == ModelKind::spacetime_st;
      for (int i = 0; i < n; ++i) {
        const auto& r = ds.records[i];
        detail::SiteKey key{r.loc.x, r.loc.y, use_time ? r.t : 0.0};
        auto it = seen.find(key);
        if (it == seen.end()) {
          int idx = static_cast<int>(m.sites.size());
          seen.emplace(key, idx);
          m.sites.push_back({r.loc, r.t});
          m.site_of[i] = idx;
        } else {
          m.site_of[i] = it->second;
        }
      }
    }
  }

  // decay groups
  if (kind == ModelKind::dast) {
    m.decay_group_of.resize(n);
    std::map<std::pair<const MdaHistory*, double>, int> groups;
    for (int i = 0; i < n; ++i) {
      const auto& r = ds.records[i];
      const MdaHistory* h = ds.history_for(r.iu_id);
      if (!h)
        throw std::runtime_error("record " + std::to_string(i) +
                                 ": no MDA history for IU " + r.iu_id);
      auto key = std::make_pair(h, r.t);
      auto it = groups.find(key);
      if (it == groups.end()) {
        int g = static_cast<int>(m.group_history.size());
        groups.emplace(key, g);
        m.group_history.push_back(h);
        m.group_time.push_back(r.t);
        m.decay_group_of[i] = g;
      } else {
        m.decay_group_of[i] = it->second;
      }
    }
  }

  // full-column-rank sanity on the design
  Eigen::JacobiSVD<Matrix> svd(m.design);
  double smin = svd.singularValues().tail(1)(0);
  double smax = svd.singularValues()(0);
  if (!(smin > 1e-10 * smax))
    throw std::runtime_error("design matrix is rank deficient");

  return m;
}

}  // namespace dast
