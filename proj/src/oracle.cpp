#include "stm/oracle.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

namespace stm {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

double plane(const Vec3& m, const Vec3& h) { return (1.0 - m(0) - m(1)) * h(0) + m(0) * h(1) + m(1) * h(2); }

// Precomputed per-measurement pieces of the log joint.
struct MeasurementTerm {
  Vec3 z;
  Mat3 precision;
  double log_norm = 0.0;  // -0.5 (3 log 2pi + log det cov)
};

struct Model {
  std::vector<MeasurementTerm> terms;
  Mat3 height_precision;
  Vec3 height_mean;
  double height_log_norm = 0.0;
  double nu_shape = 0.0;
  double nu_scale = 0.0;
  double nu_log_norm = 0.0;
  double position_variance = 0.0;

  Model(std::span<const Measurement> measurements, const OraclePrior& prior) {
    for (const auto& m : measurements) {
      Eigen::LLT<Mat3> llt(m.cov);
      if (llt.info() != Eigen::Success) throw NotPSD("measurement covariance is not positive definite");
      MeasurementTerm t;
      t.z = m.mean;
      t.precision = llt.solve(Mat3::Identity());
      double logdet = 0.0;
      for (int k = 0; k < 3; ++k) logdet += 2.0 * std::log(llt.matrixL()(k, k));
      t.log_norm = -0.5 * (3.0 * kLog2Pi + logdet);
      terms.push_back(t);
    }
    Eigen::LLT<Mat3> llt(prior.height_cov);
    if (llt.info() != Eigen::Success) throw NotPSD("height prior covariance is not positive definite");
    height_precision = llt.solve(Mat3::Identity());
    height_mean = prior.height_mean;
    double logdet = 0.0;
    for (int k = 0; k < 3; ++k) logdet += 2.0 * std::log(llt.matrixL()(k, k));
    height_log_norm = -0.5 * (3.0 * kLog2Pi + logdet);
    if (!(prior.nu_shape > 0.0 && prior.nu_scale > 0.0)) throw NotADistribution("deviation prior must be proper");
    nu_shape = prior.nu_shape;
    nu_scale = prior.nu_scale;
    nu_log_norm = nu_shape * std::log(nu_scale) - std::lgamma(nu_shape);
    position_variance = prior.position_variance;
  }

  double measurement_term(std::size_t i, const Vec3& m) const {
    const auto& t = terms[i];
    const Vec3 d = m - t.z;
    return t.log_norm - 0.5 * d.dot(t.precision * d);
  }
  double position_term(std::size_t i, const Vec3& m) const {
    const double da = m(0) - terms[i].z(0);
    const double db = m(1) - terms[i].z(1);
    return -kLog2Pi - std::log(position_variance) - 0.5 * (da * da + db * db) / position_variance;
  }
  double height_term(const Vec3& h) const {
    const Vec3 d = h - height_mean;
    return height_log_norm - 0.5 * d.dot(height_precision * d);
  }
  double nu_term(double nu) const { return nu_log_norm - (nu_shape + 1.0) * std::log(nu) - nu_scale / nu; }
  static double likelihood(double ssr, std::size_t n, double nu) {
    return -0.5 * static_cast<double>(n) * (kLog2Pi + std::log(nu)) - 0.5 * ssr / nu;
  }
};

}  // namespace

OraclePrior OraclePrior::from(const PriorConfig& prior, const SurfelModelConfig& model) {
  OraclePrior p;
  p.height_cov = prior.covariance();
  p.nu_shape = prior.a_p;
  p.nu_scale = prior.b_p;
  p.position_variance = model.position_prior_variance;
  return p;
}

double exact_log_joint(const OracleState& state, std::span<const Measurement> measurements,
                       const OraclePrior& prior) {
  if (!(state.nu > 0.0)) return -std::numeric_limits<double>::infinity();
  if (state.m.size() != measurements.size()) throw LabelMismatch("one latent point per measurement");
  const Model model(measurements, prior);
  double total = model.height_term(state.h) + model.nu_term(state.nu);
  double ssr = 0.0;
  for (std::size_t i = 0; i < measurements.size(); ++i) {
    const Vec3& m = state.m[i];
    total += model.measurement_term(i, m) + model.position_term(i, m);
    const double r = m(2) - plane(m, state.h);
    ssr += r * r;
  }
  return total + Model::likelihood(ssr, measurements.size(), state.nu);
}

void ChainConfig::validate(std::size_t n_measurements) const {
  if (n_samples == 0) throw ConfigError("chain needs at least one sample");
  if (!(burn_in > 0.0 && burn_in < 1.0)) throw ConfigError("burn-in fraction must lie in (0, 1)");
  if (thinning == 0) throw ConfigError("thinning must be at least 1");
  if (adaptation_interval == 0) throw ConfigError("adaptation interval must be at least 1");
  if (!proposal_std.empty()) {
    if (proposal_std.size() != 4 + 3 * n_measurements) throw ConfigError("one proposal std per chain component");
    for (double s : proposal_std) {
      if (!(s > 0.0)) throw ConfigError("proposal stds must be positive");
    }
  }
}

ChainResult run_mh(std::span<const Measurement> measurements, const OraclePrior& prior, const ChainConfig& config) {
  if (measurements.empty()) throw ConfigError("the chain needs at least one measurement");
  config.validate(measurements.size());
  const Model model(measurements, prior);
  const std::size_t n = measurements.size();
  const std::size_t dims = 4 + 3 * n;

  // Start at the regularized least-squares fit through the measured points.
  OracleState s;
  {
    Mat3 a = model.height_precision;
    Vec3 b = model.height_precision * model.height_mean;
    for (const auto& m : measurements) {
      const Vec3 row(1.0 - m.mean(0) - m.mean(1), m.mean(0), m.mean(1));
      a += row * row.transpose();
      b += row * m.mean(2);
    }
    s.h = a.ldlt().solve(b);
  }
  for (const auto& m : measurements) s.m.push_back(m.mean);
  std::vector<double> resid(n);
  double ssr = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    resid[i] = s.m[i](2) - plane(s.m[i], s.h);
    ssr += resid[i] * resid[i];
  }
  s.nu = std::max(ssr / static_cast<double>(n), 1e-8);
  double log_nu = std::log(s.nu);

  std::vector<double> step = config.proposal_std;
  if (step.empty()) {
    step = {0.05, 0.05, 0.05, 0.3};
    for (const auto& m : measurements) {
      for (int k = 0; k < 3; ++k) step.push_back(std::sqrt(m.cov(k, k)));
    }
  }

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> uniform;
  auto accept = [&](double delta) { return delta >= 0.0 || std::log(uniform(rng)) < delta; };

  std::vector<std::size_t> tried(dims, 0), taken(dims, 0);
  const std::size_t burn = static_cast<std::size_t>(config.burn_in * static_cast<double>(config.n_samples));
  std::size_t retained_tried = 0, retained_taken = 0;
  ChainResult result;
  std::vector<double> trial(n);

  for (std::size_t it = 0; it < config.n_samples; ++it) {
    std::size_t moved = 0;
    // Heights: every residual changes.
    for (int k = 0; k < 3; ++k) {
      Vec3 h = s.h;
      h(k) += step[static_cast<std::size_t>(k)] * normal(rng);
      double ssr_new = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        trial[i] = s.m[i](2) - plane(s.m[i], h);
        ssr_new += trial[i] * trial[i];
      }
      const double delta = model.height_term(h) - model.height_term(s.h) - 0.5 * (ssr_new - ssr) / s.nu;
      ++tried[static_cast<std::size_t>(k)];
      if (accept(delta)) {
        s.h = h;
        resid.swap(trial);
        ssr = ssr_new;
        ++taken[static_cast<std::size_t>(k)];
        ++moved;
      }
    }
    // Deviation, sampled in log space (the +log nu term is the Jacobian).
    {
      const double u = log_nu + step[3] * normal(rng);
      const double nu = std::exp(u);
      const double delta = Model::likelihood(ssr, n, nu) + model.nu_term(nu) + u -
                           (Model::likelihood(ssr, n, s.nu) + model.nu_term(s.nu) + log_nu);
      ++tried[3];
      if (accept(delta)) {
        log_nu = u;
        s.nu = nu;
        ++taken[3];
        ++moved;
      }
    }
    // Latent surface points: purely local terms.
    for (std::size_t i = 0; i < n; ++i) {
      for (int k = 0; k < 3; ++k) {
        const std::size_t c = 4 + 3 * i + static_cast<std::size_t>(k);
        Vec3 m = s.m[i];
        m(k) += step[c] * normal(rng);
        const double r = m(2) - plane(m, s.h);
        double delta = model.measurement_term(i, m) - model.measurement_term(i, s.m[i]) -
                       0.5 * (r * r - resid[i] * resid[i]) / s.nu;
        if (k < 2) delta += model.position_term(i, m) - model.position_term(i, s.m[i]);
        ++tried[c];
        if (accept(delta)) {
          s.m[i] = m;
          ssr += r * r - resid[i] * resid[i];
          resid[i] = r;
          ++taken[c];
          ++moved;
        }
      }
    }
    // Running sums drift; refresh occasionally.
    if (it % 1000 == 999) {
      ssr = 0.0;
      for (double r : resid) ssr += r * r;
    }

    if (it < burn) {
      if ((it + 1) % config.adaptation_interval == 0) {
        for (std::size_t c = 0; c < dims; ++c) {
          const double rate = static_cast<double>(taken[c]) / static_cast<double>(tried[c]);
          if (rate < 0.23) step[c] *= 0.75;
          if (rate > 0.44) step[c] *= 1.33;
          tried[c] = taken[c] = 0;
        }
      }
      continue;
    }
    retained_tried += dims;
    retained_taken += moved;
    if ((it - burn) % config.thinning == 0) result.samples.push_back({s.h(0), s.h(1), s.h(2), s.nu});
  }

  result.acceptance_rate =
      retained_tried == 0 ? 0.0 : static_cast<double>(retained_taken) / static_cast<double>(retained_tried);
  result.proposal_std = step;
  if (result.acceptance_rate < 0.05 || result.acceptance_rate > 0.9) {
    throw AdaptationFailed("acceptance rate " + std::to_string(result.acceptance_rate) + " outside [0.05, 0.9]");
  }
  return result;
}

namespace {

struct BatchStats {
  double mean = 0.0;
  double std = 0.0;
  double mean_se = 0.0;
  double std_se = 0.0;
  double ess = 0.0;
};

BatchStats batch_stats(const std::vector<double>& x) {
  BatchStats out;
  const std::size_t n = x.size();
  if (n < 2) throw ConfigError("need at least two samples");
  double sum = 0.0;
  for (double v : x) sum += v;
  out.mean = sum / static_cast<double>(n);
  double ss = 0.0;
  for (double v : x) ss += (v - out.mean) * (v - out.mean);
  const double var = ss / static_cast<double>(n - 1);
  out.std = std::sqrt(var);

  const std::size_t batches = std::min<std::size_t>(50, n / 2);
  const std::size_t size = n / batches;
  std::vector<double> means, stds;
  for (std::size_t b = 0; b < batches; ++b) {
    double m = 0.0;
    for (std::size_t i = b * size; i < (b + 1) * size; ++i) m += x[i];
    m /= static_cast<double>(size);
    double q = 0.0;
    for (std::size_t i = b * size; i < (b + 1) * size; ++i) q += (x[i] - m) * (x[i] - m);
    means.push_back(m);
    stds.push_back(std::sqrt(q / static_cast<double>(std::max<std::size_t>(size - 1, 1))));
  }
  auto spread = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double e : v) m += e;
    m /= static_cast<double>(v.size());
    double q = 0.0;
    for (double e : v) q += (e - m) * (e - m);
    return q / static_cast<double>(v.size() - 1);
  };
  const double var_means = spread(means);
  out.mean_se = std::sqrt(var_means / static_cast<double>(batches));
  out.std_se = std::sqrt(spread(stds) / static_cast<double>(batches));
  out.ess = var_means > 0.0 ? std::min(static_cast<double>(n), var / (var_means * static_cast<double>(size)) *
                                                                     static_cast<double>(n))
                            : static_cast<double>(n);
  return out;
}

}  // namespace

std::vector<MarginalComparison> compare_marginals(std::span<const ChainSample> samples, const HeightFactor& belief_h,
                                                  const InverseGammaFactor& belief_nu) {
  const auto moments = belief_h.moments();
  if (!moments) throw NotADistribution("height belief is not normalizable");
  if (!(belief_nu.shape() > 2.0 && belief_nu.scale() > 0.0)) {
    throw NotADistribution("deviation belief needs shape > 2 for a finite variance");
  }
  const std::array<const char*, 4> names = {"h0", "h_alpha", "h_beta", "nu"};
  std::vector<MarginalComparison> out;
  for (std::size_t v = 0; v < 4; ++v) {
    std::vector<double> x;
    x.reserve(samples.size());
    for (const auto& s : samples) x.push_back(s[v]);
    const BatchStats st = batch_stats(x);
    MarginalComparison c;
    c.variable = names[v];
    c.mh_mean = st.mean;
    c.mh_std = st.std;
    c.mh_mean_se = st.mean_se;
    c.mh_std_se = st.std_se;
    c.effective_samples = st.ess;
    if (v < 3) {
      c.belief_mean = moments->first(static_cast<Eigen::Index>(v));
      c.belief_std = std::sqrt(moments->second(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(v)));
    } else {
      c.belief_mean = belief_nu.mean();
      c.belief_std = std::sqrt(belief_nu.variance());
    }
    c.mean_discrepancy = (c.belief_mean - c.mh_mean) / c.mh_std;
    c.std_ratio = c.belief_std / c.mh_std;
    out.push_back(c);
  }
  return out;
}

EmulationParams EmulationParams::stereo(std::uint64_t seed) {
  EmulationParams p;
  p.count = 100;
  p.sigma_major = 0.05;
  p.sigma_minor = 0.005;
  p.seed = seed;
  return p;
}

EmulationParams EmulationParams::lidar(std::uint64_t seed) {
  EmulationParams p;
  p.count = 10;
  p.sigma_major = 0.005;
  p.sigma_minor = 0.005;
  p.seed = seed;
  return p;
}

EmulationCase make_emulation_case(const std::string& name, const EmulationParams& params) {
  EmulationCase c;
  c.name = name;
  c.true_heights = params.true_heights;
  c.true_deviation = params.true_deviation;
  std::mt19937_64 rng(params.seed);
  std::uniform_real_distribution<double> ua(0.0, 1.0), angle(0.0, std::numbers::pi);
  std::normal_distribution<double> normal;
  for (std::size_t i = 0; i < params.count; ++i) {
    const double alpha = ua(rng);
    const double gamma = mean_plane_eval(alpha, 0.0, params.true_heights) + std::sqrt(params.true_deviation) * normal(rng);
    const double t = angle(rng);
    Eigen::Matrix2d r;
    r << std::cos(t), -std::sin(t), std::sin(t), std::cos(t);
    const Eigen::Matrix2d plane_cov =
        r * Eigen::Vector2d(params.sigma_major * params.sigma_major, params.sigma_minor * params.sigma_minor)
                .asDiagonal() *
        r.transpose();
    Measurement m;
    m.cov.setZero();
    m.cov(0, 0) = plane_cov(0, 0);
    m.cov(0, 2) = m.cov(2, 0) = plane_cov(0, 1);
    m.cov(2, 2) = plane_cov(1, 1);
    m.cov(1, 1) = params.beta_sigma * params.beta_sigma;
    const Eigen::Vector2d e = r * Eigen::Vector2d(params.sigma_major * normal(rng), params.sigma_minor * normal(rng));
    m.mean = Vec3(alpha + e(0), params.beta_sigma * normal(rng), gamma + e(1));
    m.id = static_cast<std::int64_t>(i);
    c.measurements.push_back(m);
  }
  return c;
}

OracleReport run_oracle(const EmulationCase& c, const PriorConfig& prior, const ChainConfig& chain,
                        const SurfelModelConfig& model) {
  const auto start = std::chrono::steady_clock::now();
  prior.validate();
  SurfelState state;
  state.prior_h = HeightFactor::from_moments(Vec3::Zero(), prior.covariance());
  state.prior_nu = InverseGammaFactor::from_shape_scale(prior.a_p, prior.b_p);
  double fallback = model.variance_floor;
  if (!c.measurements.empty()) {
    double mean = 0.0;
    for (const auto& m : c.measurements) mean += m.mean(2);
    mean /= static_cast<double>(c.measurements.size());
    double ss = 0.0;
    for (const auto& m : c.measurements) ss += (m.mean(2) - mean) * (m.mean(2) - mean);
    fallback = std::max(fallback, ss / static_cast<double>(c.measurements.size()));
  }
  add_measurements(state, c.measurements, 1, fallback, model);

  OracleReport report;
  report.name = c.name;
  report.vmp_passes = run_vmp(state, model, 1e-12, 10000);
  ChainResult chain_result = run_mh(c.measurements, OraclePrior::from(prior, model), chain);
  report.marginals = compare_marginals(chain_result.samples, state.belief_h, state.belief_nu);
  report.acceptance_rate = chain_result.acceptance_rate;
  report.retained = chain_result.samples.size();
  report.samples = std::move(chain_result.samples);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

OracleReport run_oracle(OracleCase which, const ChainConfig& chain) {
  const EmulationCase c = which == OracleCase::Stereo ? make_emulation_case("stereo", EmulationParams::stereo())
                                                      : make_emulation_case("lidar", EmulationParams::lidar());
  return run_oracle(c, PriorConfig{}, chain);
}

}  // namespace stm
