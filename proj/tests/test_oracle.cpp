#include <doctest.h>

#include <cmath>
#include <random>

#include "stm/distributions.hpp"
#include "stm/oracle.hpp"
#include "support.hpp"

using namespace stm;

namespace {

Eigen::VectorXd vec(const Vec3& v) { return Eigen::VectorXd(v); }

double normal_log_density(const Eigen::VectorXd& x, const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov) {
  std::vector<VarId> labels(static_cast<std::size_t>(x.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<VarId>(i);
  return GaussianCanonical::from_moments(labels, GaussianMoment(mean, cov)).log_density(x);
}

/// Second implementation of the log joint built only from the distribution primitives.
double reference_log_joint(const OracleState& s, std::span<const Measurement> zs, const OraclePrior& prior) {
  double total = normal_log_density(vec(s.h), vec(prior.height_mean), prior.height_cov);
  total += InverseGammaFactor::from_shape_scale(prior.nu_shape, prior.nu_scale).log_density(s.nu);
  for (std::size_t i = 0; i < zs.size(); ++i) {
    const Vec3& m = s.m[i];
    total += normal_log_density(vec(m), vec(zs[i].mean), zs[i].cov);
    total += normal_log_density(Eigen::VectorXd(m.head<2>()), Eigen::VectorXd(zs[i].mean.head<2>()),
                                prior.position_variance * Eigen::Matrix2d::Identity());
    const double plane = (1.0 - m(0) - m(1)) * s.h(0) + m(0) * s.h(1) + m(1) * s.h(2);
    total += normal_log_density(Eigen::VectorXd::Constant(1, m(2)), Eigen::VectorXd::Constant(1, plane),
                                Eigen::MatrixXd::Constant(1, 1, s.nu));
  }
  return total;
}

std::vector<Measurement> random_measurements(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 0.45);
  std::vector<Measurement> out;
  for (std::size_t i = 0; i < n; ++i) {
    Measurement m;
    m.mean = Vec3(u(rng), u(rng), u(rng) - 0.25);
    m.cov = stm::testing::random_spd(3, rng, 0.01);
    out.push_back(m);
  }
  return out;
}

/// A prior on nu so tight that the deviation is effectively fixed at `nu`.
void clamp_deviation(OraclePrior& prior, double nu) {
  prior.nu_shape = 1e5;
  prior.nu_scale = nu * (prior.nu_shape - 1.0);
}

}  // namespace

TEST_CASE("log joint against a second implementation") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 0.3);
  const auto zs = random_measurements(6, rng);
  OraclePrior prior;
  prior.height_cov = stm::testing::random_spd(3, rng, 1.0);
  prior.height_mean = Vec3(0.1, -0.2, 0.3);
  prior.nu_shape = 2.5;
  prior.nu_scale = 0.02;
  for (int k = 0; k < 100; ++k) {
    OracleState s;
    s.h = Vec3(n(rng), n(rng), n(rng));
    s.nu = std::exp(n(rng)) * 0.01;
    for (const auto& z : zs) s.m.push_back(z.mean + 0.1 * Vec3(n(rng), n(rng), n(rng)));
    const double a = exact_log_joint(s, zs, prior);
    const double b = reference_log_joint(s, zs, prior);
    CHECK(std::abs(a - b) < 1e-10 * std::max(1.0, std::abs(b)));
  }

  OracleState bad;
  bad.nu = 0.0;
  bad.m.resize(zs.size());
  CHECK(std::isinf(exact_log_joint(bad, zs, prior)));
  bad.nu = 1.0;
  bad.m.pop_back();
  CHECK_THROWS_AS(exact_log_joint(bad, zs, prior), LabelMismatch);
}

TEST_CASE("log joint analytic properties") {
  std::mt19937_64 rng(2);
  const auto zs = random_measurements(5, rng);
  OraclePrior prior;
  OracleState s;
  s.h = Vec3(0.1, 0.2, -0.1);
  s.nu = 0.01;
  for (const auto& z : zs) {
    Vec3 m = z.mean;
    m(2) = (1.0 - m(0) - m(1)) * s.h(0) + m(0) * s.h(1) + m(1) * s.h(2);
    s.m.push_back(m);
  }

  SUBCASE("doubling nu on an exact fit") {
    // Zero residuals: only the normalization of the plane term and the prior move.
    OracleState t = s;
    t.nu = 2.0 * s.nu;
    const double prior_delta = InverseGammaFactor::from_shape_scale(prior.nu_shape, prior.nu_scale).log_density(t.nu) -
                               InverseGammaFactor::from_shape_scale(prior.nu_shape, prior.nu_scale).log_density(s.nu);
    const double expected = -0.5 * static_cast<double>(zs.size()) * std::log(2.0) + prior_delta;
    CHECK(exact_log_joint(t, zs, prior) - exact_log_joint(s, zs, prior) == doctest::Approx(expected).epsilon(1e-9));
  }
  SUBCASE("the fitted gammas maximize the plane term") {
    // With the measurement terms frozen, moving any gamma_i off the plane lowers the plane term.
    OraclePrior loose = prior;
    std::vector<Measurement> wide(zs.begin(), zs.end());
    for (auto& z : wide) {
      z.cov = Mat3::Identity() * 1e12;
    }
    const double base = exact_log_joint(s, wide, loose);
    for (double d : {-0.01, 0.01, 0.1}) {
      OracleState t = s;
      t.m[2](2) += d;
      CHECK(exact_log_joint(t, wide, loose) < base);
    }
  }
}

TEST_CASE("chain validation") {
  ChainConfig c;
  c.burn_in = 1.0;
  CHECK_THROWS_AS(c.validate(1), ConfigError);
  c = {};
  c.thinning = 0;
  CHECK_THROWS_AS(c.validate(1), ConfigError);
  c = {};
  c.proposal_std = {1.0, 1.0};
  CHECK_THROWS_AS(c.validate(1), ConfigError);
  c.proposal_std = {1, 1, 1, 1, 1, 1, -1};
  CHECK_THROWS_AS(c.validate(1), ConfigError);
  CHECK_THROWS_AS(run_mh({}, OraclePrior{}, ChainConfig{}), ConfigError);
}

namespace {

// One measurement whose height is uninformative: the (h) posterior is the prior.
std::vector<Measurement> vague_measurement() {
  Measurement m;
  m.mean = Vec3(0.3, 0.3, 0.0);
  m.cov = Vec3(1e-4, 1e-4, 1e8).asDiagonal();
  return {m};
}

}  // namespace

TEST_CASE("chain on a Gaussian target") {
  OraclePrior prior;
  PriorConfig correlated;
  prior.height_cov = correlated.covariance();
  clamp_deviation(prior, 1.0);
  ChainConfig config;
  config.n_samples = 200000;
  config.thinning = 5;
  config.seed = 3;
  const auto zs = vague_measurement();
  const ChainResult r = run_mh(zs, prior, config);
  CHECK(r.acceptance_rate > 0.05);
  CHECK(r.acceptance_rate < 0.9);

  const auto marginals = compare_marginals(r.samples, HeightFactor::from_moments(Vec3::Zero(), prior.height_cov),
                                           InverseGammaFactor::from_shape_scale(prior.nu_shape, prior.nu_scale));
  for (std::size_t v = 0; v < 3; ++v) {
    CAPTURE(v);
    CHECK(std::abs(marginals[v].mh_mean) < 3.0 * marginals[v].mh_mean_se);
  }

  Mat3 cov = Mat3::Zero();
  Vec3 mean = Vec3::Zero();
  for (const auto& s : r.samples) mean += Vec3(s[0], s[1], s[2]);
  mean /= static_cast<double>(r.samples.size());
  for (const auto& s : r.samples) {
    const Vec3 d = Vec3(s[0], s[1], s[2]) - mean;
    cov += d * d.transpose();
  }
  cov /= static_cast<double>(r.samples.size() - 1);
  CHECK((cov - prior.height_cov).norm() / prior.height_cov.norm() < 0.1);
}

TEST_CASE("chain on a linear-Gaussian surfel") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n(0.0, 0.1);
  const double nu = 0.02, var_gamma = 0.01;
  std::vector<Measurement> zs;
  for (int i = 0; i < 10; ++i) {
    double a = u(rng), b = u(rng);
    if (a + b > 1.0) {
      a = 1.0 - a;
      b = 1.0 - b;
    }
    Measurement m;
    m.mean = Vec3(a, b, 0.2 + 0.3 * a - 0.1 * b + n(rng));
    m.cov = Vec3(1e-10, 1e-10, var_gamma).asDiagonal();
    zs.push_back(m);
  }
  OraclePrior prior;
  clamp_deviation(prior, nu);

  Mat3 precision = prior.height_cov.inverse();
  Vec3 information = Vec3::Zero();
  for (const auto& z : zs) {
    const Vec3 phi(1.0 - z.mean(0) - z.mean(1), z.mean(0), z.mean(1));
    precision += phi * phi.transpose() / (nu + var_gamma);
    information += phi * z.mean(2) / (nu + var_gamma);
  }
  const Mat3 cov = precision.inverse();
  const Vec3 mean = cov * information;

  ChainConfig config;
  config.n_samples = 200000;
  config.seed = 5;
  const ChainResult r = run_mh(zs, prior, config);
  const auto marginals = compare_marginals(r.samples, HeightFactor::from_moments(mean, cov),
                                           InverseGammaFactor::from_shape_scale(prior.nu_shape, prior.nu_scale));
  for (std::size_t v = 0; v < 3; ++v) {
    CAPTURE(v);
    CHECK(std::abs(marginals[v].belief_mean - marginals[v].mh_mean) < 3.0 * marginals[v].mh_mean_se);
    CHECK(marginals[v].std_ratio == doctest::Approx(1.0).epsilon(0.1));
  }
}

TEST_CASE("chain determinism") {
  std::mt19937_64 rng(6);
  const auto zs = random_measurements(4, rng);
  ChainConfig config;
  config.n_samples = 5000;
  config.seed = 7;
  OraclePrior prior;
  prior.nu_shape = 2.0;
  prior.nu_scale = 0.01;
  const ChainResult a = run_mh(zs, prior, config);
  const ChainResult b = run_mh(zs, prior, config);
  REQUIRE(a.samples.size() == b.samples.size());
  CHECK(a.samples == b.samples);
  config.seed = 8;
  CHECK(run_mh(zs, prior, config).samples != a.samples);
}

TEST_CASE("marginal comparison bookkeeping") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<ChainSample> samples;
  for (int i = 0; i < 20000; ++i) {
    samples.push_back({0.5 + 0.1 * n(rng), -0.2 + 0.2 * n(rng), 0.3 * n(rng), 0.05 * std::exp(0.1 * n(rng))});
  }
  Vec3 mean = Vec3::Zero();
  Vec3 sq = Vec3::Zero();
  double nu_mean = 0.0, nu_sq = 0.0;
  for (const auto& s : samples) {
    const Vec3 h(s[0], s[1], s[2]);
    mean += h;
    sq += h.cwiseAbs2();
    nu_mean += s[3];
    nu_sq += s[3] * s[3];
  }
  const double count = static_cast<double>(samples.size());
  mean /= count;
  const Vec3 var = sq / count - mean.cwiseAbs2();
  nu_mean /= count;
  const double nu_var = nu_sq / count - nu_mean * nu_mean;
  const double shape = nu_mean * nu_mean / nu_var + 2.0;
  const InverseGammaFactor nu_belief = InverseGammaFactor::from_shape_scale(shape, nu_mean * (shape - 1.0));

  const auto exact = compare_marginals(samples, HeightFactor::from_moments(mean, var.asDiagonal()), nu_belief);
  REQUIRE(exact.size() == 4);
  CHECK(exact[0].variable == "h0");
  CHECK(exact[3].variable == "nu");
  for (const auto& m : exact) {
    CHECK(std::abs(m.mean_discrepancy) < 1e-9);
    CHECK(m.std_ratio == doctest::Approx(1.0).epsilon(1e-3));
    CHECK(m.effective_samples > 100.0);
  }

  Vec3 shifted = mean;
  shifted(1) += std::sqrt(var(1));
  const auto moved = compare_marginals(samples, HeightFactor::from_moments(shifted, var.asDiagonal()), nu_belief);
  CHECK(moved[1].mean_discrepancy == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("lidar emulation end to end") {
  ChainConfig config;
  config.n_samples = 200000;
  const OracleReport r = run_oracle(OracleCase::Lidar, config);
  REQUIRE(r.marginals.size() == 4);
  for (const auto& m : r.marginals) {
    CAPTURE(m.variable);
    CHECK(std::abs(m.mean_discrepancy) < 0.5);
  }
  CHECK(r.vmp_passes > 0);
}
