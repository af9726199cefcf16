#pragma once

// Elevation-map baseline: one scalar Kalman-filtered height per grid element.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "stm/geometry.hpp"
#include "stm/surfel.hpp"

namespace stm {

/// Stored in information form so fusion is order independent.
struct ElevationCell {
  double precision = 0.0;
  double information = 0.0;
  std::int64_t count = 0;

  bool observed() const { return count > 0; }
  double mean() const;
  double variance() const;
};

/// Fuse one height observation; throws InvalidVariance for var_gamma <= 0.
ElevationCell elev_update(ElevationCell cell, double z_gamma, double var_gamma);
/// log N(gamma_true; mean, posterior variance); throws Unobserved for empty cells.
double elev_likelihood(const ElevationCell& cell, double gamma_true);

class ElevationMap {
 public:
  explicit ElevationMap(TriGrid grid);

  const TriGrid& grid() const { return grid_; }
  const std::vector<ElevationCell>& cells() const { return cells_; }

  /// Measurements in submap coordinates; returns the number skipped (outside the grid).
  std::size_t update(std::span<const Measurement> batch);

  struct Prediction {
    double mean = 0.0;
    double variance = 0.0;
  };
  std::optional<Prediction> predict(double alpha, double beta) const;

 private:
  TriGrid grid_;
  std::vector<ElevationCell> cells_;
};

}  // namespace stm
