#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "dast/likelihood.hpp"
#include "dast/model.hpp"
#include "helpers.hpp"

using namespace dast;
using test_helpers::TinySpec;
using test_helpers::tiny_dataset;

namespace {

LatentModel one_site_model(int y, int m, std::vector<double> rounds = {},
                           double t = 0.0) {
  TinySpec spec;
  spec.locations = {{0, 0}};
  spec.times = {t};
  spec.y = {y};
  spec.m = {m};
  spec.mda_rounds = std::move(rounds);
  static std::vector<Dataset> keep;  // models reference their dataset's MDA
  keep.push_back(tiny_dataset(spec));
  return make_latent_model(keep.back(), ModelKind::dast);
}

}  // namespace

TEST_CASE("conditional log-likelihood on known binomials") {
  // single Bernoulli with P = 1/2
  LatentModel m1 = one_site_model(0, 1);
  Params p;
  p.beta = {0.0};
  Vector zero = Vector::Zero(1);
  CHECK_THAT(cond_loglik(m1, p, zero),
             Catch::Matchers::WithinAbs(std::log(0.5), 1e-12));

  // y=5, m=10 at P=1/2: log C(10,5) + 10 log 1/2
  LatentModel m2 = one_site_model(5, 10);
  double expected = std::log(252.0) + 10.0 * std::log(0.5);
  CHECK_THAT(cond_loglik(m2, p, zero),
             Catch::Matchers::WithinAbs(expected, 1e-10));
  CHECK_THAT(expected, Catch::Matchers::WithinAbs(-1.402, 5e-4));

  // saturation: y = m with P -> 1 approaches zero from below
  LatentModel m3 = one_site_model(10, 10);
  Vector big = Vector::Constant(1, 30.0);
  double ll = cond_loglik(m3, p, big);
  CHECK(ll < 0.0);
  CHECK(ll > -1e-6);
}

TEST_CASE("penalty values and switches") {
  PenaltySpec spec{0.35, 0.35, true};
  CHECK_THAT(penalty(0.5, spec),
             Catch::Matchers::WithinAbs(-0.7 * std::log(0.5), 1e-12));
  CHECK_THAT(penalty(0.5, spec), Catch::Matchers::WithinAbs(0.485203, 1e-5));
  PenaltySpec off;
  for (double a : {0.01, 0.3, 0.99}) CHECK(penalty(a, off) == 0.0);
  CHECK(std::isinf(penalty(0.0, spec)));
  CHECK(std::isinf(penalty(1.0, spec)));
}

TEST_CASE("lambda = 0.35 targets a Beta with 2.5/97.5 centiles near 0.05/0.95") {
  // CDF of Beta(1.35, 1.35) at 0.05 should be close to 0.025
  auto beta_cdf = [](double x) {
    auto log_pdf = [](double u) { return 0.35 * (std::log(u) + std::log1p(-u)); };
    double num = test_helpers::log_integral_1d(log_pdf, 1e-12, x, 2000);
    double den = test_helpers::log_integral_1d(log_pdf, 1e-12, 1.0 - 1e-12, 2000);
    return std::exp(num - den);
  };
  CHECK_THAT(beta_cdf(0.05), Catch::Matchers::WithinAbs(0.025, 0.004));
  CHECK_THAT(beta_cdf(0.95), Catch::Matchers::WithinAbs(0.975, 0.004));
}

TEST_CASE("Laplace mode: prior-dominated and symmetric cases") {
  // tiny variance pins the mode at zero
  LatentModel m = one_site_model(7, 10);
  Params p;
  p.beta = {0.0};
  p.sigma2 = 1e-10;
  LaplaceResult lap = laplace_mode(m, p);
  CHECK(lap.converged);
  CHECK(std::abs(lap.mode[0]) < 1e-6);

  // symmetric likelihood peak: y = m/2 with zero offset
  Params q;
  q.beta = {0.0};
  q.sigma2 = 2.0;
  LatentModel sym = one_site_model(5, 10);
  LaplaceResult lap2 = laplace_mode(sym, q);
  CHECK(lap2.converged);
  CHECK(std::abs(lap2.mode[0]) < 1e-9);
}

TEST_CASE("Laplace mode matches a dense grid search on a two-site problem") {
  TinySpec spec;
  spec.locations = {{0, 0}, {0.15, 0}};
  spec.times = {0.0, 0.0};
  spec.y = {3, 14};
  spec.m = {20, 20};
  Dataset ds = tiny_dataset(spec);
  LatentModel model = make_latent_model(ds, ModelKind::dast);
  Params p;
  p.beta = {-0.3};
  p.sigma2 = 1.2;
  p.phi = 0.2;

  LaplaceResult lap = laplace_mode(model, p);
  REQUIRE(lap.converged);

  Matrix sigma = build_cov(model.sites, CovSpec{MaternSpec{p.sigma2, p.phi, 0.5}}, 0.0);
  CholFactor chol(sigma);
  auto joint = [&](double s1, double s2) {
    Vector v(2);
    v << s1, s2;
    return chol.gaussian_logpdf(v) + cond_loglik(model, p, v);
  };
  double best1 = 0, best2 = 0, best = -1e300;
  for (double s1 = -3; s1 <= 3; s1 += 2e-3)
    for (double s2 = -3; s2 <= 3; s2 += 2e-3) {
      double v = joint(s1, s2);
      if (v > best) {
        best = v;
        best1 = s1;
        best2 = s2;
      }
    }
  CHECK_THAT(lap.mode[0], Catch::Matchers::WithinAbs(best1, 1e-2));
  CHECK_THAT(lap.mode[1], Catch::Matchers::WithinAbs(best2, 1e-2));
  CHECK(joint(lap.mode[0], lap.mode[1]) >= best - 1e-4);

  // curvature must factor
  CHECK_NOTHROW(CholFactor(lap.curvature));
}

TEST_CASE("MALA with near-flat likelihood reproduces the prior") {
  // one record with negligible information: y=0, m=1, strongly negative
  // linear predictor makes the binomial term almost constant in S
  TinySpec spec;
  spec.locations = {{0, 0}, {5.0, 0}};
  spec.times = {0.0, 0.0};
  spec.y = {0, 0};
  spec.m = {1, 1};
  Dataset ds = tiny_dataset(spec);
  LatentModel model = make_latent_model(ds, ModelKind::dast);
  Params p;
  p.beta = {-15.0};
  p.sigma2 = 1.7;
  p.phi = 2.0;

  MalaConfig cfg;
  cfg.n_samples = 4000;
  cfg.burnin = 1500;
  cfg.thin = 4;
  Rng rng = Rng::substream(42, "test-mala");
  ConditionalSamples s = mala_sample(model, p, cfg, rng);

  double tol = 3.0 / std::sqrt(static_cast<double>(cfg.n_samples));
  Vector mean = s.draws.rowwise().mean();
  CHECK(std::abs(mean[0]) < tol * std::sqrt(p.sigma2) * 2.0);
  CHECK(std::abs(mean[1]) < tol * std::sqrt(p.sigma2) * 2.0);
  Matrix centered = s.draws.colwise() - mean;
  Matrix cov = centered * centered.transpose() / (s.draws.cols() - 1.0);
  Matrix target = build_cov(model.sites, CovSpec{MaternSpec{p.sigma2, p.phi, 0.5}}, 0.0);
  CHECK(std::abs(cov(0, 0) - target(0, 0)) < 3.0 * tol * p.sigma2);
  CHECK(std::abs(cov(0, 1) - target(0, 1)) < 3.0 * tol * p.sigma2);
  CHECK(s.acceptance_rate > 0.15);
}

TEST_CASE("MALA acceptance settles near the 45 percent target") {
  TinySpec spec;
  Rng gen(7);
  for (int i = 0; i < 60; ++i) {
    spec.locations.push_back({gen.uniform(), gen.uniform()});
    spec.times.push_back(0.0);
    spec.m.push_back(50);
    spec.y.push_back(static_cast<int>(gen.below(51)));
  }
  Dataset ds = tiny_dataset(spec);
  LatentModel model = make_latent_model(ds, ModelKind::dast);
  Params p;
  p.beta = {0.0};
  p.sigma2 = 1.0;
  p.phi = 0.2;
  MalaConfig cfg;
  cfg.n_samples = 2000;
  cfg.burnin = 1200;
  cfg.thin = 2;
  Rng rng = Rng::substream(11, "test-mala");
  ConditionalSamples s = mala_sample(model, p, cfg, rng);
  CHECK(s.acceptance_rate > 0.35);
  CHECK(s.acceptance_rate < 0.55);
  CHECK(s.warning.empty());
}

TEST_CASE("MALA sampling is bit-reproducible for a fixed seed") {
  LatentModel model = one_site_model(6, 20);
  Params p;
  p.beta = {0.0};
  p.sigma2 = 1.0;
  MalaConfig cfg;
  cfg.n_samples = 50;
  cfg.burnin = 100;
  cfg.thin = 2;
  Rng r1 = Rng::substream(5, "rep");
  Rng r2 = Rng::substream(5, "rep");
  ConditionalSamples a = mala_sample(model, p, cfg, r1);
  ConditionalSamples b = mala_sample(model, p, cfg, r2);
  CHECK(a.draws == b.draws);
  CHECK(a.acceptance_rate == b.acceptance_rate);
}

TEST_CASE("one-site posterior quantiles match quadrature") {
  LatentModel model = one_site_model(13, 40);
  Params p;
  p.beta = {-0.4};
  p.sigma2 = 1.1;

  MalaConfig cfg;
  cfg.n_samples = 8000;
  cfg.burnin = 2000;
  cfg.thin = 3;
  Rng rng = Rng::substream(3, "quantile");
  ConditionalSamples s = mala_sample(model, p, cfg, rng);

  // quadrature posterior CDF
  auto log_post = [&](double v) {
    Vector sv(1);
    sv[0] = v;
    constexpr double log2pi = 1.8378770664093454835606594728112;
    return -0.5 * (log2pi + std::log(p.sigma2) + v * v / p.sigma2) +
           cond_loglik(model, p, sv);
  };
  const int n_grid = 8000;
  double lo = -8, hi = 8;
  std::vector<double> cdf(n_grid + 1), grid(n_grid + 1);
  double vmax = -1e300;
  for (int i = 0; i <= n_grid; ++i) {
    grid[i] = lo + (hi - lo) * i / n_grid;
    cdf[i] = log_post(grid[i]);
    vmax = std::max(vmax, cdf[i]);
  }
  double acc = 0;
  for (int i = 0; i <= n_grid; ++i) {
    acc += std::exp(cdf[i] - vmax);
    cdf[i] = acc;
  }
  for (auto& v : cdf) v /= acc;
  auto quad_quantile = [&](double q) {
    auto it = std::lower_bound(cdf.begin(), cdf.end(), q);
    return grid[it - cdf.begin()];
  };

  std::vector<double> draws(s.draws.data(), s.draws.data() + s.draws.cols());
  std::sort(draws.begin(), draws.end());
  for (double q : {0.1, 0.25, 0.5, 0.75, 0.9}) {
    double sample_q = draws[static_cast<std::size_t>(q * (draws.size() - 1))];
    CHECK_THAT(sample_q, Catch::Matchers::WithinAbs(quad_quantile(q), 0.02));
  }
}

TEST_CASE("MC log-likelihood is exactly zero at the reference") {
  TinySpec spec;
  spec.locations = {{0, 0}, {0.3, 0.1}};
  spec.times = {0.0, 1.0};
  spec.y = {4, 9};
  spec.m = {20, 30};
  spec.mda_rounds = {0.0};
  Dataset ds = tiny_dataset(spec);
  LatentModel model = make_latent_model(ds, ModelKind::dast);
  Params p;
  p.beta = {-0.2};
  p.sigma2 = 0.8;
  p.phi = 0.25;
  p.alpha = 0.6;
  p.gamma = 2.0;

  MalaConfig cfg;
  cfg.n_samples = 500;
  cfg.burnin = 300;
  cfg.thin = 2;
  Rng rng = Rng::substream(8, "ref");
  ConditionalSamples s = mala_sample(model, p, cfg, rng);
  PenaltySpec off;
  CHECK(mc_loglik(s, model, p, p, off) == 0.0);
}

TEST_CASE("MC log-likelihood value is invariant to permuting samples") {
  LatentModel model = one_site_model(9, 25, {0.0}, 2.0);
  Params ref;
  ref.beta = {0.1};
  ref.sigma2 = 0.9;
  ref.alpha = 0.4;
  ref.gamma = 1.5;
  MalaConfig cfg;
  cfg.n_samples = 301;
  cfg.burnin = 200;
  cfg.thin = 1;
  Rng rng = Rng::substream(12, "perm");
  ConditionalSamples s = mala_sample(model, ref, cfg, rng);

  Params q = ref;
  q.beta = {0.6};
  q.alpha = 0.7;
  PenaltySpec off;
  double v1 = mc_loglik(s, model, q, ref, off);

  // reverse the sample order
  ConditionalSamples rev = s;
  for (int l = 0; l < s.draws.cols(); ++l)
    rev.draws.col(l) = s.draws.col(s.draws.cols() - 1 - l);
  double v2 = mc_loglik(rev, model, q, ref, off);
  CHECK(v1 == v2);
}

TEST_CASE("disabled penalty leaves the objective bit-identical") {
  LatentModel model = one_site_model(9, 25, {0.0}, 2.0);
  Params ref;
  ref.beta = {0.0};
  ref.sigma2 = 1.0;
  MalaConfig cfg;
  cfg.n_samples = 200;
  cfg.burnin = 150;
  cfg.thin = 1;
  Rng rng = Rng::substream(1, "pen");
  ConditionalSamples s = mala_sample(model, ref, cfg, rng);
  Params q = ref;
  q.alpha = 0.33;
  PenaltySpec off;
  PenaltySpec disabled{0.35, 0.35, false};
  CHECK(mc_loglik(s, model, q, ref, off) ==
        mc_loglik(s, model, q, ref, disabled));
}

TEST_CASE("MCML differences track quadrature on a one-site grid") {
  LatentModel model = one_site_model(11, 30, {0.0}, 1.0);
  Params ref;
  ref.beta = {-0.5};
  ref.sigma2 = 1.0;
  ref.alpha = 0.5;
  ref.gamma = 1.0;

  MalaConfig cfg;
  cfg.n_samples = 10000;
  cfg.burnin = 2000;
  cfg.thin = 4;
  Rng rng = Rng::substream(77, "grid");
  ConditionalSamples s = mala_sample(model, ref, cfg, rng);
  McObjective obj(model, s.draws, ref, PenaltySpec{});

  double quad_ref = test_helpers::quadrature_marginal_loglik(model, ref);
  std::vector<Params> grid;
  for (double db : {-0.6, -0.2, 0.2, 0.5, 0.9}) {
    Params q = ref;
    q.beta = {ref.beta[0] + db};
    q.alpha = std::clamp(ref.alpha + 0.3 * db, 0.05, 0.95);
    q.sigma2 = ref.sigma2 * std::exp(0.4 * db);
    grid.push_back(q);
  }
  for (const auto& q : grid) {
    double mc = obj.evaluate(model.layout.pack(q), nullptr);
    double quad = test_helpers::quadrature_marginal_loglik(model, q) - quad_ref;
    INFO("beta " << q.beta[0] << " alpha " << q.alpha);
    CHECK_THAT(mc, Catch::Matchers::WithinAbs(quad, 0.05));
  }
}

TEST_CASE("analytic MCML gradient matches central differences") {
  Rng meta(2024);
  for (int trial = 0; trial < 5; ++trial) {
    TinySpec spec;
    int n = 4 + static_cast<int>(meta.below(4));
    for (int i = 0; i < n; ++i) {
      spec.locations.push_back({meta.uniform(), meta.uniform()});
      spec.times.push_back(static_cast<double>(meta.below(3)));
      spec.m.push_back(20 + static_cast<int>(meta.below(30)));
      spec.y.push_back(static_cast<int>(meta.below(spec.m.back() + 1)));
    }
    spec.mda_rounds = {0.0, 1.0};
    Dataset ds = tiny_dataset(spec);
    LatentModel model = make_latent_model(ds, ModelKind::dast);

    Params ref;
    ref.beta = {meta.normal(0, 0.5)};
    ref.sigma2 = std::exp(meta.normal(0, 0.3));
    ref.phi = std::exp(meta.normal(-1.2, 0.3));
    ref.alpha = meta.uniform(0.2, 0.8);
    ref.gamma = std::exp(meta.normal(0.3, 0.3));

    MalaConfig cfg;
    cfg.n_samples = 400;
    cfg.burnin = 300;
    cfg.thin = 1;
    Rng rng = Rng::substream(900 + trial, "gradcheck");
    ConditionalSamples s = mala_sample(model, ref, cfg, rng);
    PenaltySpec pen = trial % 2 == 0 ? PenaltySpec{} : PenaltySpec::beta_soft();
    McObjective obj(model, s.draws, ref, pen);

    Vector psi = model.layout.pack(ref);
    for (int k = 0; k < psi.size(); ++k) psi[k] += meta.normal(0, 0.15);

    Vector analytic(psi.size());
    obj.evaluate(psi, &analytic);
    Vector fd(psi.size());
    for (int j = 0; j < psi.size(); ++j) {
      double h = 1e-5 * std::max(1.0, std::abs(psi[j]));
      Vector hi = psi, lo = psi;
      hi[j] += h;
      lo[j] -= h;
      fd[j] = (obj.evaluate(hi, nullptr) - obj.evaluate(lo, nullptr)) / (2 * h);
    }
    double rel = (analytic - fd).lpNorm<Eigen::Infinity>() /
                 std::max(1.0, analytic.lpNorm<Eigen::Infinity>());
    INFO("trial " << trial << " analytic " << analytic.transpose() << " fd "
                  << fd.transpose());
    CHECK(rel < 1e-4);
  }
}

TEST_CASE("MC variance shrinks like 1/m on a three-site problem") {
  TinySpec spec;
  spec.locations = {{0, 0}, {0.4, 0.2}, {0.8, 0.9}};
  spec.times = {0.0, 1.0, 2.0};
  spec.y = {5, 12, 9};
  spec.m = {25, 25, 25};
  spec.mda_rounds = {0.0};
  Dataset ds = tiny_dataset(spec);
  LatentModel model = make_latent_model(ds, ModelKind::dast);
  Params ref;
  ref.beta = {-0.2};
  ref.sigma2 = 1.0;
  ref.phi = 0.3;
  Params q = ref;
  q.beta = {0.3};
  q.sigma2 = 1.5;

  std::vector<int> ms = {200, 800, 3200};
  std::vector<double> log_var;
  for (int m : ms) {
    std::vector<double> vals;
    for (int rep = 0; rep < 24; ++rep) {
      MalaConfig cfg;
      cfg.n_samples = m;
      cfg.burnin = 250;
      cfg.thin = 1;
      Rng rng = Rng::substream(4000 + rep, "mvar", m);
      ConditionalSamples s = mala_sample(model, ref, cfg, rng);
      vals.push_back(mc_loglik(s, model, q, ref, PenaltySpec{}));
    }
    double mean = std::accumulate(vals.begin(), vals.end(), 0.0) / vals.size();
    double var = 0;
    for (double v : vals) var += (v - mean) * (v - mean);
    var /= vals.size() - 1;
    log_var.push_back(std::log(var));
  }
  // slope of log var against log m
  double lx = 0, ly = 0, lxy = 0, lxx = 0;
  for (std::size_t i = 0; i < ms.size(); ++i) {
    double x = std::log(static_cast<double>(ms[i]));
    lx += x;
    ly += log_var[i];
    lxy += x * log_var[i];
    lxx += x * x;
  }
  double n = static_cast<double>(ms.size());
  double slope = (lxy - lx * ly / n) / (lxx - lx * lx / n);
  INFO("slope " << slope);
  CHECK(slope < -0.6);
  CHECK(slope > -1.4);
}

TEST_CASE("ESS diagnostic flags degenerate weights") {
  TinySpec spec;
  Rng gen(31);
  for (int i = 0; i < 30; ++i) {
    spec.locations.push_back({gen.uniform(0, 10), gen.uniform(0, 10)});
    spec.times.push_back(0.0);
    spec.m.push_back(30);
    spec.y.push_back(5 + static_cast<int>(gen.below(20)));
  }
  Dataset ds = tiny_dataset(spec);
  LatentModel model = make_latent_model(ds, ModelKind::dast);
  Params ref;
  ref.beta = {0.0};
  ref.sigma2 = 0.5;
  ref.phi = 0.5;
  MalaConfig cfg;
  cfg.n_samples = 1000;
  cfg.burnin = 300;
  cfg.thin = 1;
  Rng rng = Rng::substream(6, "ess");
  ConditionalSamples s = mala_sample(model, ref, cfg, rng);
  McObjective obj(model, s.draws, ref, PenaltySpec{});
  obj.evaluate(model.layout.pack(ref), nullptr);
  CHECK_THAT(obj.last_ess(), Catch::Matchers::WithinAbs(1000.0, 1e-9));
  CHECK_FALSE(obj.ess_degenerate());

  Params far = ref;
  far.sigma2 = 32.0;  // prior ratio degenerates across 30 latent dimensions
  far.beta = {3.0};
  obj.evaluate(model.layout.pack(far), nullptr);
  CHECK(obj.ess_degenerate());
}

TEST_CASE("Laplace marginal log-likelihood approximates quadrature") {
  LatentModel model = one_site_model(12, 30);
  Params p;
  p.beta = {-0.1};
  p.sigma2 = 0.6;
  double la = laplace_marginal_loglik(model, p);
  double quad = test_helpers::quadrature_marginal_loglik(model, p);
  CHECK_THAT(la, Catch::Matchers::WithinAbs(quad, 0.02));
}
