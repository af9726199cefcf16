#pragma once

// Single-surfel variational message passing: each measurement forms a
// likelihood cluster that exchanges messages with the surfel's height and
// planar-deviation beliefs.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "stm/distributions.hpp"

namespace stm {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec5 = Eigen::Matrix<double, 5, 1>;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Row5 = Eigen::Matrix<double, 1, 5>;

/// Canonical Gaussian over the three vertex heights (h0, h_alpha, h_beta).
struct HeightFactor {
  Vec3 xi = Vec3::Zero();
  Mat3 omega = Mat3::Zero();

  static HeightFactor from_moments(const Vec3& mean, const Mat3& cov);
  static HeightFactor from_canonical(const GaussianCanonical& g);
  GaussianCanonical to_canonical(std::vector<VarId> labels) const;

  bool is_vacuous() const { return xi.isZero(0.0) && omega.isZero(0.0); }
  bool is_normalizable() const;
  /// Moments; nullopt when omega is not positive definite.
  std::optional<std::pair<Vec3, Mat3>> moments() const;

  HeightFactor& operator+=(const HeightFactor& o) {
    xi += o.xi;
    omega += o.omega;
    return *this;
  }
  HeightFactor& operator-=(const HeightFactor& o) {
    xi -= o.xi;
    omega -= o.omega;
    return *this;
  }
  friend HeightFactor operator+(HeightFactor a, const HeightFactor& b) { return a += b; }
  friend HeightFactor operator-(HeightFactor a, const HeightFactor& b) { return a -= b; }
};

/// A point belief; mean = (alpha, beta, gamma).
struct Measurement {
  Vec3 mean = Vec3::Zero();
  Mat3 cov = Mat3::Identity();
  std::int64_t id = 0;
};

struct LikelihoodCluster {
  Measurement measurement;  // in unit-element coordinates
  Mat3 meas_information = Mat3::Identity();
  HeightFactor out_h;
  InverseGammaFactor out_nu;
  std::int64_t batch = 0;
};

/// Joint belief over (h0, h_alpha, h_beta, alpha, beta, gamma) inside a cluster.
struct ClusterJoint {
  Vec6 mean = Vec6::Zero();
  Mat6 cov = Mat6::Zero();
};

struct SurfelModelConfig {
  double position_prior_variance = 1e4;
  double init_height_variance = 1e6;
  /// When set, the deviation is frozen at this value and never updated.
  std::optional<double> fixed_deviation;
  double variance_floor = 1e-9;
};

struct SurfelState {
  HeightFactor prior_h;
  InverseGammaFactor prior_nu;
  HeightFactor neighbor_in;
  HeightFactor belief_h;
  InverseGammaFactor belief_nu;
  std::vector<LikelihoodCluster> clusters;
  std::int64_t folded_measurements = 0;

  /// belief = prior * neighbor_in * prod(out messages), rebuilt from scratch.
  void refresh_belief();
  std::int64_t measurement_count() const {
    return folded_measurements + static_cast<std::int64_t>(clusters.size());
  }
};

/// f(alpha, beta; h) = (1 - alpha - beta) h0 + alpha h_alpha + beta h_beta.
double mean_plane_eval(double alpha, double beta, const Vec3& h);
/// Gradient of f at (h0, h_alpha, h_beta, alpha, beta).
Row5 jacobian_f(const Vec5& mu_c);

LikelihoodCluster init_likelihood_cluster(const Measurement& m, const SurfelModelConfig& cfg = {});

/// Append clusters for `measurements` and split the deviation evidence so the
/// surfel's expected deviation equals their gamma (population) variance.
/// `fallback_variance` is used when fewer than two measurements arrive.
void add_measurements(SurfelState& state, std::span<const Measurement> measurements, std::int64_t batch,
                      double fallback_variance, const SurfelModelConfig& cfg = {});

/// belief / out message for cluster i.
std::pair<HeightFactor, InverseGammaFactor> compute_incoming_message(const SurfelState& state, std::size_t i);

/// Mean-plane factor update of cluster i; refreshes belief_h and returns the
/// cluster's joint belief for the deviation step.
ClusterJoint update_mean_plane_factor(SurfelState& state, std::size_t i, const SurfelModelConfig& cfg = {});
void update_planar_deviation_factor(SurfelState& state, std::size_t i, const ClusterJoint& joint);

struct VmpPassResult {
  std::int64_t updates = 0;
  /// Largest belief divergence caused by a single cluster's new messages.
  double max_divergence = 0.0;
};

/// One VMP pass over every cluster in order.
VmpPassResult vmp_pass(SurfelState& state, const SurfelModelConfig& cfg = {});

/// Repeat vmp_pass until the largest per-cluster divergence drops below
/// `tolerance`; returns the number of passes (max_passes when it never does).
int run_vmp(SurfelState& state, const SurfelModelConfig& cfg, double tolerance, int max_passes);

/// KL(q || p) between 3-height Gaussians; nullopt unless both are positive definite.
std::optional<double> kl_height(const HeightFactor& q, const HeightFactor& p);
/// Divergence between two surfel beliefs: KL over heights plus KL over deviation.
/// Falls back to a relative natural-parameter difference for improper beliefs.
double belief_divergence(const HeightFactor& q_h, const InverseGammaFactor& q_nu, const HeightFactor& p_h,
                         const InverseGammaFactor& p_nu);

/// Relative max-abs difference of natural parameters.
double parameter_difference(const HeightFactor& a, const HeightFactor& b);

/// Solve omega x = xi; minimum-norm solution when omega is singular.
Vec3 height_mean_or_pseudo(const HeightFactor& f);

}  // namespace stm
