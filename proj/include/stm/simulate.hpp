#pragma once

// Synthetic terrain, measurement synthesis, the cost-of-inference scenarios and
// the accuracy metrics used to compare against the elevation baseline.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stm/baseline.hpp"
#include "stm/mapgraph.hpp"

namespace stm {

/// Derive an independent stream seed from (seed, salt).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

enum class SurfaceKind : std::uint8_t { Perlin, Profile, Flat };

struct SurfaceParams {
  SurfaceKind kind = SurfaceKind::Perlin;
  std::uint64_t seed = 1;
  double amplitude = 1.0;
  double frequency = 4.0;  // lattice cells across the unit submap for the first octave
  int octaves = 3;
  double persistence = 0.5;
  double lacunarity = 2.0;
  double offset = 0.0;  // constant added everywhere (the height of a flat surface)
};

/// Deterministic heightfield gamma(alpha, beta).
class SyntheticSurface {
 public:
  explicit SyntheticSurface(SurfaceParams params);

  const SurfaceParams& params() const { return params_; }
  double operator()(double alpha, double beta) const;
  /// Upper bound of |gamma - offset| over the plane.
  double bound() const;

 private:
  double noise2(double x, double y) const;
  double noise1(double x) const;

  SurfaceParams params_;
  std::vector<int> perm_;
};

SyntheticSurface perlin_surface(std::uint64_t seed, SurfaceParams params = {});

enum class SensorProfile : std::uint8_t { Custom, Stereo, Lidar };

struct NoiseSpec {
  Vec3 sigmas = Vec3::Constant(0.01);
  bool random_rotation = true;
  /// Rotate in the alpha-gamma plane only and keep beta almost deterministic.
  bool planar = false;
  double planar_beta_sigma = 1e-6;
  SensorProfile profile = SensorProfile::Custom;

  /// Long axis `range_sigma`, transverse axes range_sigma / ratio (ratio in [10, 50]).
  static NoiseSpec stereo(double range_sigma, double ratio = 20.0);
  static NoiseSpec lidar(double sigma);
};

/// Draw the covariance R' D R for one measurement.
Mat3 draw_noise_covariance(const NoiseSpec& noise, std::mt19937_64& rng);

using Polygon = std::vector<Eigen::Vector2d>;

double polygon_area(const Polygon& region);
bool polygon_contains(const Polygon& region, const Eigen::Vector2d& p);
Polygon whole_submap();

/// Uniform samples over `region`, `density` per grid element of area `element_area`,
/// each with its exact generating covariance. Throws EmptyRegion.
std::vector<Measurement> sample_measurements(const SyntheticSurface& surface, const Polygon& region, double density,
                                             double element_area, const NoiseSpec& noise, std::uint64_t seed);
/// Exactly `count` samples over `region`.
std::vector<Measurement> sample_measurements_count(const SyntheticSurface& surface, const Polygon& region,
                                                   std::size_t count, const NoiseSpec& noise, std::uint64_t seed);
/// `count` samples on the line beta = beta0, alpha uniform in [0, 1 - beta0].
std::vector<Measurement> sample_profile(const SyntheticSurface& surface, double beta0, std::size_t count,
                                        const NoiseSpec& noise, std::uint64_t seed);

struct StepReport {
  int step = 0;
  std::size_t n_new = 0;
  std::int64_t messages = 0;
  double normalized = 0.0;
  double total_kl = 0.0;
  /// Share of total_kl carried by surfels with a vertex in this step's sampling region.
  double region_kl_fraction = 1.0;
  int sweeps = 0;
  bool converged = true;
  std::vector<double> surfel_kl;
};

struct ScenarioReport {
  std::string name;
  std::vector<StepReport> steps;
  std::int64_t total_messages = 0;
  std::size_t total_new = 0;
  double total_kl = 0.0;
  bool converged = true;
};

struct ScenarioParams {
  int steps = 16;
  double density = 10.0;
  NoiseSpec noise = NoiseSpec::stereo(0.003, 10.0);
  std::uint64_t seed = 7;
};

/// The push-broom band for step t of `steps`: alpha in [t, t+1] / steps inside the submap.
Polygon pushbroom_band(int t, int steps);

ScenarioReport scenario_pushbroom(STMMap& map, const SyntheticSurface& surface, const ScenarioParams& params);
ScenarioReport scenario_reobserve(STMMap& map, const SyntheticSurface& surface, const ScenarioParams& params);

/// Prediction interface shared by both map types for the accuracy metrics.
struct HeightEstimate {
  double mean = 0.0;
  /// Variance of the predictive density used for the likelihood.
  double variance = 0.0;
  bool observed = false;
};

class HeightModel {
 public:
  virtual ~HeightModel() = default;
  virtual std::optional<HeightEstimate> predict(double alpha, double beta) const = 0;
};

/// Mean-plane value with the plug-in deviation as predictive variance.
class StmHeightModel final : public HeightModel {
 public:
  explicit StmHeightModel(const STMMap& map) : map_(map) {}
  std::optional<HeightEstimate> predict(double alpha, double beta) const override;

 private:
  const STMMap& map_;
};

/// Cell mean with the filter's posterior variance, or a fixed override.
class ElevationHeightModel final : public HeightModel {
 public:
  explicit ElevationHeightModel(const ElevationMap& map, std::optional<double> variance_override = std::nullopt)
      : map_(map), variance_override_(variance_override) {}
  std::optional<HeightEstimate> predict(double alpha, double beta) const override;

 private:
  const ElevationMap& map_;
  std::optional<double> variance_override_;
};

std::vector<Eigen::Vector2d> evaluation_points(const Polygon& region, std::size_t n, std::uint64_t seed);
std::vector<Eigen::Vector2d> profile_points(double beta0, std::size_t n);

struct MseResult {
  double mse = 0.0;
  std::size_t used = 0;
};

/// Mean squared error at the points where the model is observed (or everywhere with include_unobserved).
MseResult evaluate_mse(const HeightModel& model, const SyntheticSurface& surface,
                       std::span<const Eigen::Vector2d> points, bool include_unobserved = false);

struct LikelihoodComparison {
  double stm = 0.0;
  double elevation = 0.0;
  /// stm - elevation: positive favours the surfel map.
  double ratio = 0.0;
  std::size_t used = 0;
};

/// Summed log densities of the true heights, over points observed by both models.
LikelihoodComparison evaluate_loglik_ratio(const HeightModel& stm, const HeightModel& elevation,
                                           const SyntheticSurface& surface, std::span<const Eigen::Vector2d> points);

struct AccuracyRow {
  std::uint64_t seed = 0;
  int depth = 0;
  double mse_stm = 0.0;
  double mse_elevation = 0.0;
  double loglik_stm = 0.0;
  double loglik_elevation = 0.0;
  double loglik_ratio = 0.0;
  std::size_t n_eval = 0;
  bool converged = true;
};

struct AccuracyParams {
  std::vector<int> depths;
  std::size_t n_measurements = 200;
  std::size_t n_eval = 2000;
  NoiseSpec noise;
  SurfaceParams surface;
  PriorConfig prior;
  ConvergenceConfig convergence;
  double profile_beta = 0.0;
  std::uint64_t seed = 11;
};

/// Profile experiment on the one-row strip (beta fixed at profile_beta).
std::vector<AccuracyRow> run_accuracy_2d(const AccuracyParams& params);
/// Full-grid experiment for one surface seed.
std::vector<AccuracyRow> run_accuracy_3d(const AccuracyParams& params);

struct PriorReachParams {
  int depth = 5;
  /// Height of the flat truth; the region alpha <= observed_alpha (half the submap area) is sampled.
  double height = 1.0;
  double observed_alpha = 1.0 - 0.70710678118654752;
  double density = 10.0;
  NoiseSpec noise = NoiseSpec::lidar(0.003);
  PriorConfig prior;
  ConvergenceConfig convergence;
  std::uint64_t seed = 5;
};

struct PriorReach {
  double rho = 0.0;
  /// Mean fused vertex height inside the observed region.
  double boundary_value = 0.0;
  /// (distance past the region edge, mean vertex height) per lattice column outside it.
  std::vector<std::pair<double, double>> profile;
  /// Distance at which the profile first falls to 10% of boundary_value (linear
  /// interpolation); the largest distance plus one column when it never does.
  double reach = 0.0;
  bool converged = true;
};

/// How far the correlated height prior carries observed heights into unobserved surfels.
PriorReach prior_reach(const PriorReachParams& params);

}  // namespace stm
