#pragma once

// The full surfel map: a cluster graph over every grid element, Gaussian loopy
// belief propagation across shared vertices, windowed incremental updates and
// map queries.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "stm/distributions.hpp"
#include "stm/geometry.hpp"
#include "stm/surfel.hpp"

namespace stm {

struct PriorConfig {
  double rho = 0.5;
  double sigma2 = 1e2;
  double a_p = 1e-3;
  double b_p = 1e-3;

  /// sigma2 * [[1, rho, rho], [rho, 1, rho], [rho, rho, 1]]
  Mat3 covariance() const;
  /// Throws ConfigError for out-of-range values.
  void validate() const;
};

struct ConvergenceConfig {
  double kl_threshold = 1e-5;
  int max_sweeps = 200;
};

enum class WindowMode : std::uint8_t { Batches, Measurements };

struct WindowConfig {
  WindowMode mode = WindowMode::Batches;
  /// Batches: clusters from the newest `size` batches survive.
  /// Measurements: at most `size` clusters per surfel survive.
  int size = 1;
};

using SmallVec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, 2, 1>;
using SmallMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, 2, 2>;

struct SepsetMessage {
  SmallVec xi;
  SmallMat omega;
  bool sent = false;
};

struct Sepset {
  SurfelId s = 0;
  SurfelId c = 0;
  /// Shared vertex heights carried after running-intersection reduction (0, 1 or 2).
  std::vector<VertexId> vars;
  /// Positions of vars inside each surfel's height triple.
  std::array<int, 2> local_s{};
  std::array<int, 2> local_c{};
  SepsetMessage to_c;
  SepsetMessage to_s;

  int size() const { return static_cast<int>(vars.size()); }
};

struct MapMetrics {
  std::int64_t message_count = 0;
  std::int64_t sweep_count = 0;
  std::int64_t batches = 0;
};

struct ConvergenceReport {
  bool converged = true;
  int sweeps = 0;
  std::int64_t messages = 0;
  std::size_t measurements_used = 0;
  std::size_t measurements_skipped = 0;
  std::vector<std::uint8_t> surfel_converged;
};

struct SurfelSummary {
  bool observed = false;
  Vec3 mean = Vec3::Zero();
  Vec3 std = Vec3::Zero();
  std::optional<double> expected_deviation;
  std::int64_t measurement_count = 0;
};

struct VertexSummary {
  bool observed = false;
  double mean = 0.0;
  double std = 0.0;
};

struct MapQueryResult {
  std::vector<SurfelSummary> surfels;
  std::vector<VertexSummary> vertices;
};

/// For each vertex, the sepsets containing it form a spanning tree of its incident surfels.
std::vector<std::vector<VertexId>> enforce_rip(const TriGrid& grid);

class STMMap {
 public:
  STMMap(TriGrid grid, PriorConfig prior, WindowConfig window = {}, ConvergenceConfig convergence = {},
         SurfelModelConfig model = {});

  const TriGrid& grid() const { return grid_; }
  const PriorConfig& prior() const { return prior_; }
  const WindowConfig& window() const { return window_; }
  const ConvergenceConfig& convergence() const { return convergence_; }
  const SurfelModelConfig& model() const { return model_; }
  ConvergenceConfig& convergence() { return convergence_; }
  const MapMetrics& metrics() const { return metrics_; }

  const std::vector<SurfelState>& surfels() const { return surfels_; }
  const SurfelState& surfel(SurfelId s) const { return surfels_.at(static_cast<std::size_t>(s)); }
  const std::vector<Sepset>& sepsets() const { return sepsets_; }

  /// Add a batch (submap coordinates) and iterate to convergence; no windowing.
  ConvergenceReport run_inference(std::span<const Measurement> batch);
  /// Fold clusters that fall out of the window into the priors, then run_inference.
  ConvergenceReport incremental_update(std::span<const Measurement> batch);
  /// Fold everything outside the window for a batch about to arrive.
  void apply_window();

  /// The message s -> c (or c -> s when `towards_c` is false) from current beliefs.
  SepsetMessage neighbor_out_message(std::size_t sepset, bool towards_c) const;

  /// Height moments at a submap point: mean-plane value, its variance and the plug-in deviation.
  struct Prediction {
    double mean = 0.0;
    double variance = 0.0;
    double deviation = 0.0;
    bool observed = false;
  };
  std::optional<Prediction> predict(double alpha, double beta) const;

  /// Canonical Gaussian over all vertex heights: sum of surfel priors and cluster messages.
  GaussianCanonical dense_height_joint() const;

 private:
  struct Visit {
    bool converged = true;
  };
  Visit visit(SurfelId s, std::vector<std::uint8_t>& active);
  HeightFactor embed_incoming(SurfelId s) const;
  static double message_divergence(const SurfelState& target, const std::array<int, 2>& local, int n,
                                   const SepsetMessage& fresh, const SepsetMessage& old);

  TriGrid grid_;
  PriorConfig prior_;
  WindowConfig window_;
  ConvergenceConfig convergence_;
  SurfelModelConfig model_;
  MapMetrics metrics_;
  std::vector<SurfelState> surfels_;
  std::vector<Sepset> sepsets_;
  std::vector<std::vector<std::size_t>> sepsets_of_;
  std::vector<std::uint8_t> converged_;
};

STMMap build_map(const TriGrid& grid, const PriorConfig& prior, const WindowConfig& window = {},
                 const ConvergenceConfig& convergence = {});

MapQueryResult query_map(const STMMap& map);

/// Exclusive KL between the two surfels' marginals on a sepset's variables.
double sepset_marginal_kl(const STMMap& map, std::size_t sepset);

/// Marginal of a height factor on the given local positions (Schur complement).
SepsetMessage marginalize_heights(const HeightFactor& f, const std::array<int, 2>& local, int n);

}  // namespace stm
