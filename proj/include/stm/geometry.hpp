#pragma once

// Landmark-relative reference frames and the recursive triangular grid.

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "stm/distributions.hpp"

namespace stm {

/// Submap frame spanned by three landmarks: m = [a b n] (alpha, beta, gamma)' + l0.
struct RelativeIRF {
  Eigen::Vector3d l0;
  Eigen::Vector3d axis_a;
  Eigen::Vector3d axis_b;
  Eigen::Vector3d axis_n;

  Eigen::Matrix3d basis() const;
};

struct RelativePoint {
  double alpha = 0;
  double beta = 0;
  double gamma = 0;

  bool inside_submap() const { return alpha >= 0 && beta >= 0 && alpha <= 1 && beta <= 1 && alpha + beta <= 1; }
  Eigen::Vector3d vec() const { return {alpha, beta, gamma}; }
};

/// Throws DegenerateLandmarks for collinear or duplicate landmarks.
RelativeIRF make_relative_irf(const Eigen::Vector3d& l0, const Eigen::Vector3d& l_alpha, const Eigen::Vector3d& l_beta);
RelativePoint global_to_relative(const RelativeIRF& irf, const Eigen::Vector3d& m);
Eigen::Vector3d relative_to_global(const RelativeIRF& irf, const RelativePoint& p);
/// Exact linear push of a global-frame Gaussian point into the relative frame.
GaussianMoment global_to_relative(const RelativeIRF& irf, const GaussianMoment& m);

/// Body-frame point -> relative-frame point through uncertain pose and landmarks.
///
/// pose: (x, y, z, yaw, pitch, roll) with p_global = Rz(yaw) Ry(pitch) Rx(roll) p_body + t.
/// landmarks: (l0, l_alpha, l_beta) stacked, 9 coordinates.
/// Two chained unscented transforms; cross-correlations with pose and landmarks
/// are dropped, leaving an independent Gaussian over (alpha, beta, gamma).
GaussianMoment transform_measurement_to_relative(const GaussianMoment& pose, const GaussianMoment& landmarks,
                                                 const GaussianMoment& z_body, const UnscentedParams& params = {});

Eigen::Matrix3d rotation_from_euler(double yaw, double pitch, double roll);

using SurfelId = std::int32_t;
using VertexId = std::int32_t;

enum class Orientation : std::uint8_t { Up, Down };

struct SurfelInfo {
  std::int32_t row = 0;
  std::int32_t col = 0;
  Orientation orientation = Orientation::Up;
  /// (v0, v_alpha, v_beta): the element's corners that map to (0,0), (1,0), (0,1).
  std::array<VertexId, 3> vertices{};
};

/// An interior edge shared by surfels s < c.
struct Adjacency {
  SurfelId s = 0;
  SurfelId c = 0;
  std::array<VertexId, 2> shared{};
};

/// Affine map from submap (alpha, beta, gamma) into an element's unit frame.
struct ElementFrame {
  Eigen::Matrix3d linear = Eigen::Matrix3d::Identity();
  Eigen::Vector3d offset = Eigen::Vector3d::Zero();

  Eigen::Vector3d to_local(const Eigen::Vector3d& x) const { return linear * x + offset; }
  Eigen::Vector3d to_submap(const Eigen::Vector3d& x) const { return linear.inverse() * (x - offset); }
};

inline constexpr int kMaxGridDepth = 12;

/// Regular triangular grid obtained by recursive subdivision of the unit submap.
///
/// Row r (beta band [r, r+1] / 2^d) holds 2 (2^d - r) - 1 elements alternating
/// up/down, numbered row-major. Lattice vertex (i, j) with i + j <= 2^d sits at
/// (alpha, beta) = (i, j) / 2^d and is numbered row-major in j.
class TriGrid {
 public:
  /// Full grid; throws DepthTooLarge above kMaxGridDepth.
  static TriGrid subdivide(int depth);
  /// First row only: an acyclic strip of 2^(d+1) - 1 elements with the same ids.
  static TriGrid strip(int depth);

  int depth() const { return depth_; }
  int divisions() const { return divisions_; }
  int rows() const { return rows_; }
  std::size_t surfel_count() const { return surfels_.size(); }
  std::size_t vertex_count() const { return vertex_count_; }

  const SurfelInfo& surfel(SurfelId id) const { return surfels_.at(static_cast<std::size_t>(id)); }
  const std::vector<SurfelInfo>& surfels() const { return surfels_; }
  const std::vector<Adjacency>& adjacency() const { return adjacency_; }
  /// Indices into adjacency() of the edges touching surfel s.
  const std::vector<std::size_t>& edges_of(SurfelId s) const { return edges_of_.at(static_cast<std::size_t>(s)); }

  VertexId vertex_id(int i, int j) const;
  std::array<int, 2> lattice(VertexId v) const;
  Eigen::Vector2d vertex_position(VertexId v) const;
  std::array<Eigen::Vector2d, 3> corners(SurfelId s) const;
  double element_area() const;

  /// Element containing (alpha, beta); edge ties go to the up element and lattice
  /// points to the lowest incident id. Throws OutsideSubmap.
  SurfelId locate(double alpha, double beta) const;
  std::optional<SurfelId> try_locate(double alpha, double beta) const;

  ElementFrame frame(SurfelId s) const;

 private:
  TriGrid(int depth, int rows);
  SurfelId surfel_index(int row, int col, Orientation o) const;

  int depth_ = 0;
  int divisions_ = 1;
  int rows_ = 1;
  std::size_t vertex_count_ = 0;
  std::vector<SurfelInfo> surfels_;
  std::vector<Adjacency> adjacency_;
  std::vector<std::vector<std::size_t>> edges_of_;
};

inline TriGrid subdivide(int depth) { return TriGrid::subdivide(depth); }
inline SurfelId locate(const TriGrid& grid, double alpha, double beta) { return grid.locate(alpha, beta); }

/// Push a submap-frame Gaussian into the unit frame of element `s` (exact affine map).
GaussianMoment normalize_to_element(const TriGrid& grid, SurfelId s, const GaussianMoment& g);
GaussianMoment denormalize_from_element(const TriGrid& grid, SurfelId s, const GaussianMoment& g);

}  // namespace stm
