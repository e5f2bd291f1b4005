#pragma once

// The MDA impact function f(v) and the multiplicative map from
// counterfactual to observed prevalence:
//
//   P(x,t) = P*(x) * prod_{j : u_j < t} [1 - f(t - u_j)]
//
// with f(v) = alpha * exp(-v/gamma) (exponential mode) or f(v) = alpha
// (constant mode). Rounds at exactly u_j = t are excluded: a survey in the
// round year is taken immediately before the rollout.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "dast/data.hpp"

namespace dast {

struct ImpactParams {
  double alpha = 0.5;  // immediate proportional reduction, in [0,1]
  double gamma = 1.0;  // decay scale in years, > 0

  void check() const {
    if (!(alpha >= 0.0 && alpha <= 1.0))
      throw std::invalid_argument("alpha must lie in [0,1]");
    if (!(gamma > 0.0)) throw std::invalid_argument("gamma must be positive");
  }
};

enum class ImpactMode { exponential_decay, constant };

// Proportionate reduction v years after a round; v > 0 by contract
// (surveys observe the post-peak decay).
inline double impact(double v, const ImpactParams& p,
                     ImpactMode mode = ImpactMode::exponential_decay) {
  if (!(v > 0.0)) throw std::invalid_argument("impact: elapsed time must be > 0");
  p.check();
  if (mode == ImpactMode::constant) return p.alpha;
  return p.alpha * std::exp(-v / p.gamma);
}

inline double inverse_logit(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// log prod (1 - f) and its derivatives with respect to alpha and gamma,
// accumulated over the rounds strictly before t.
struct DecayTerms {
  double log_factor = 0.0;
  double d_alpha = 0.0;   // d log_factor / d alpha
  double d_gamma = 0.0;   // d log_factor / d gamma
  int rounds = 0;
};

inline DecayTerms decay_terms(const MdaHistory& history, double t,
                              const ImpactParams& p,
                              ImpactMode mode = ImpactMode::exponential_decay) {
  DecayTerms out;
  if (mode == ImpactMode::constant) {
    out.rounds = cumulative_rounds(history, t);
    if (out.rounds > 0) {
      out.log_factor = out.rounds * std::log1p(-p.alpha);
      out.d_alpha = -out.rounds / (1.0 - p.alpha);
    }
    return out;
  }
  for (double u : history.round_times) {
    if (!(u < t)) break;  // round_times sorted; strict inequality
    double v = t - u;
    double e = std::exp(-v / p.gamma);
    double f = p.alpha * e;
    out.log_factor += std::log1p(-f);
    out.d_alpha += -e / (1.0 - f);
    out.d_gamma += -f * (v / (p.gamma * p.gamma)) / (1.0 - f);
    ++out.rounds;
  }
  return out;
}

// P(x,t) given the counterfactual prevalence. Constant mode multiplies the
// per-round factors directly so that the (1-alpha)^c identity is exact;
// exponential mode accumulates in log space for stability over long
// histories. alpha = 1 with at least one past round gives exactly 0.
inline double adjusted_prevalence(double p_star, const MdaHistory& history,
                                  double t, const ImpactParams& p,
                                  ImpactMode mode = ImpactMode::exponential_decay) {
  if (!(p_star > 0.0 && p_star < 1.0))
    throw std::invalid_argument("counterfactual prevalence must lie in (0,1)");
  p.check();
  if (mode == ImpactMode::constant) {
    double value = p_star;
    for (double u : history.round_times) {
      if (!(u < t)) break;
      value *= (1.0 - p.alpha);
    }
    return value;
  }
  return p_star * std::exp(decay_terms(history, t, p, mode).log_factor);
}

inline double counterfactual_logit(const std::vector<double>& d,
                                   const std::vector<double>& beta, double s) {
  if (d.size() != beta.size())
    throw std::invalid_argument("covariate/coefficient dimension mismatch");
  double eta = s;
  for (std::size_t i = 0; i < d.size(); ++i) eta += d[i] * beta[i];
  return eta;
}

}  // namespace dast
