#include "stm/baseline.hpp"

#include <cmath>
#include <numbers>

namespace stm {

double ElevationCell::mean() const {
  if (!observed()) throw Unobserved("elevation cell has no observations");
  return information / precision;
}

double ElevationCell::variance() const {
  if (!observed()) throw Unobserved("elevation cell has no observations");
  return 1.0 / precision;
}

ElevationCell elev_update(ElevationCell cell, double z_gamma, double var_gamma) {
  if (!(var_gamma > 0.0) || !std::isfinite(var_gamma)) throw InvalidVariance("height variance must be positive");
  cell.precision += 1.0 / var_gamma;
  cell.information += z_gamma / var_gamma;
  ++cell.count;
  return cell;
}

double elev_likelihood(const ElevationCell& cell, double gamma_true) {
  const double var = cell.variance();
  const double d = gamma_true - cell.mean();
  return -0.5 * std::log(2.0 * std::numbers::pi * var) - 0.5 * d * d / var;
}

ElevationMap::ElevationMap(TriGrid grid) : grid_(std::move(grid)), cells_(grid_.surfel_count()) {}

std::size_t ElevationMap::update(std::span<const Measurement> batch) {
  std::size_t skipped = 0;
  for (const auto& m : batch) {
    const auto s = grid_.try_locate(m.mean(0), m.mean(1));
    if (!s) {
      ++skipped;
      continue;
    }
    auto& cell = cells_[static_cast<std::size_t>(*s)];
    cell = elev_update(cell, m.mean(2), m.cov(2, 2));
  }
  return skipped;
}

std::optional<ElevationMap::Prediction> ElevationMap::predict(double alpha, double beta) const {
  const auto s = grid_.try_locate(alpha, beta);
  if (!s) return std::nullopt;
  const auto& cell = cells_[static_cast<std::size_t>(*s)];
  if (!cell.observed()) return std::nullopt;
  return Prediction{cell.mean(), cell.variance()};
}

}  // namespace stm
