#pragma once

// Random-walk Metropolis-Hastings over the exact single-surfel posterior, used
// to check the variational approximation. Nothing here calls into the VMP code
// except the comparison driver at the bottom.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "stm/mapgraph.hpp"
#include "stm/surfel.hpp"

namespace stm {

struct OraclePrior {
  Vec3 height_mean = Vec3::Zero();
  Mat3 height_cov = Mat3::Identity();
  /// Inverse-gamma shape and scale on the deviation.
  double nu_shape = 1e-3;
  double nu_scale = 1e-3;
  /// Independent Gaussian on each (alpha_i, beta_i), centred on the measurement.
  double position_variance = 1e4;

  static OraclePrior from(const PriorConfig& prior, const SurfelModelConfig& model = {});
};

/// One point of the joint: heights, deviation and the latent surface points m_i = (alpha, beta, gamma).
struct OracleState {
  Vec3 h = Vec3::Zero();
  double nu = 1.0;
  std::vector<Vec3> m;
};

/// log p(z, m, h, nu), normalized; -inf when nu <= 0.
double exact_log_joint(const OracleState& state, std::span<const Measurement> measurements,
                       const OraclePrior& prior);

struct ChainConfig {
  std::size_t n_samples = 500000;
  double burn_in = 0.2;
  std::size_t thinning = 10;
  /// Initial proposal stds in state order (h0, h_alpha, h_beta, log nu, m_1..m_N);
  /// empty picks them from the measurement covariances.
  std::vector<double> proposal_std;
  std::size_t adaptation_interval = 200;
  std::uint64_t seed = 1;

  /// Throws ConfigError.
  void validate(std::size_t n_measurements) const;
};

using ChainSample = std::array<double, 4>;  // h0, h_alpha, h_beta, nu

struct ChainResult {
  std::vector<ChainSample> samples;
  /// Acceptance over the retained (post burn-in) iterations, all components.
  double acceptance_rate = 0.0;
  std::vector<double> proposal_std;
};

/// Component-wise random walk in (h, log nu, m). Proposal stds adapt during
/// burn-in and are frozen afterwards. Throws AdaptationFailed when the final
/// acceptance rate leaves [0.05, 0.9].
ChainResult run_mh(std::span<const Measurement> measurements, const OraclePrior& prior, const ChainConfig& config);

struct MarginalComparison {
  std::string variable;
  double mh_mean = 0.0;
  double mh_std = 0.0;
  double mh_mean_se = 0.0;  // batch-means Monte Carlo error
  double mh_std_se = 0.0;
  double effective_samples = 0.0;
  double belief_mean = 0.0;
  double belief_std = 0.0;
  /// (belief_mean - mh_mean) / mh_std
  double mean_discrepancy = 0.0;
  /// belief_std / mh_std
  double std_ratio = 0.0;
};

/// Per-variable comparison for h0, h_alpha, h_beta and nu.
std::vector<MarginalComparison> compare_marginals(std::span<const ChainSample> samples, const HeightFactor& belief_h,
                                                  const InverseGammaFactor& belief_nu);

enum class OracleCase : std::uint8_t { Stereo, Lidar };

/// A one-dimensional slice through a single surfel: beta is pinned at zero and
/// the noise lives in the alpha-gamma plane.
struct EmulationCase {
  std::string name;
  std::vector<Measurement> measurements;  // element coordinates
  Vec3 true_heights = Vec3::Zero();
  double true_deviation = 0.0;
};

struct EmulationParams {
  std::size_t count = 100;
  /// Principal noise stds in the alpha-gamma plane, rotated randomly per measurement.
  double sigma_major = 0.05;
  double sigma_minor = 0.005;
  double beta_sigma = 1e-6;
  Vec3 true_heights = Vec3(0.2, 0.6, 0.0);
  double true_deviation = 1e-3;
  std::uint64_t seed = 3;

  /// 100 points, long range axis and short bearing axis.
  static EmulationParams stereo(std::uint64_t seed = 3);
  /// 10 points, small isotropic noise.
  static EmulationParams lidar(std::uint64_t seed = 5);
};

/// Samples gamma_i = f(alpha_i, 0; h) + N(0, nu) and perturbs (alpha_i, gamma_i) by the rotated noise.
EmulationCase make_emulation_case(const std::string& name, const EmulationParams& params);

struct OracleReport {
  std::string name;
  std::vector<MarginalComparison> marginals;
  std::vector<ChainSample> samples;
  double acceptance_rate = 0.0;
  std::size_t retained = 0;
  int vmp_passes = 0;
  double seconds = 0.0;
};

/// Run VMP to convergence on the case and compare it with an MH chain.
OracleReport run_oracle(const EmulationCase& c, const PriorConfig& prior, const ChainConfig& chain,
                        const SurfelModelConfig& model = {});
OracleReport run_oracle(OracleCase which, const ChainConfig& chain = {});

}  // namespace stm
