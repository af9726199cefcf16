#include "stm/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <tuple>

namespace stm {

Eigen::Matrix3d RelativeIRF::basis() const {
  Eigen::Matrix3d m;
  m.col(0) = axis_a;
  m.col(1) = axis_b;
  m.col(2) = axis_n;
  return m;
}

RelativeIRF make_relative_irf(const Eigen::Vector3d& l0, const Eigen::Vector3d& l_alpha, const Eigen::Vector3d& l_beta) {
  RelativeIRF irf;
  irf.l0 = l0;
  irf.axis_a = l_alpha - l0;
  irf.axis_b = l_beta - l0;
  const Eigen::Vector3d cross = irf.axis_a.cross(irf.axis_b);
  const double scale = irf.axis_a.norm() * irf.axis_b.norm();
  if (!(scale > 0.0) || !(cross.norm() > 1e-9 * scale)) {
    throw DegenerateLandmarks("landmarks are collinear or coincide");
  }
  irf.axis_n = cross / cross.norm();
  return irf;
}

RelativePoint global_to_relative(const RelativeIRF& irf, const Eigen::Vector3d& m) {
  const Eigen::Vector3d r = irf.basis().partialPivLu().solve(m - irf.l0);
  return {r.x(), r.y(), r.z()};
}

Eigen::Vector3d relative_to_global(const RelativeIRF& irf, const RelativePoint& p) {
  return irf.basis() * p.vec() + irf.l0;
}

GaussianMoment global_to_relative(const RelativeIRF& irf, const GaussianMoment& m) {
  const Eigen::Matrix3d inv = irf.basis().inverse();
  return GaussianMoment(inv * (m.mean - irf.l0), inv * m.cov * inv.transpose());
}

Eigen::Matrix3d rotation_from_euler(double yaw, double pitch, double roll) {
  return (Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()) * Eigen::AngleAxisd(pitch, Eigen::Vector3d::UnitY()) *
          Eigen::AngleAxisd(roll, Eigen::Vector3d::UnitX()))
      .toRotationMatrix();
}

namespace {

GaussianMoment stack(const GaussianMoment& a, const GaussianMoment& b) {
  const Eigen::Index na = a.size(), nb = b.size();
  Eigen::VectorXd mean(na + nb);
  mean << a.mean, b.mean;
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(na + nb, na + nb);
  cov.topLeftCorner(na, na) = a.cov;
  cov.bottomRightCorner(nb, nb) = b.cov;
  return GaussianMoment(std::move(mean), std::move(cov));
}

}  // namespace

GaussianMoment transform_measurement_to_relative(const GaussianMoment& pose, const GaussianMoment& landmarks,
                                                 const GaussianMoment& z_body, const UnscentedParams& params) {
  if (pose.size() != 6 || landmarks.size() != 9 || z_body.size() != 3) {
    throw LabelMismatch("expected a 6-DOF pose, 9 landmark coordinates and a 3-D point");
  }
  // Body -> global over (pose, point).
  const GaussianMoment global = unscented_transform(
      stack(pose, z_body),
      [](const Eigen::VectorXd& x) -> Eigen::VectorXd {
        const Eigen::Matrix3d r = rotation_from_euler(x(3), x(4), x(5));
        return r * x.segment<3>(6) + x.head<3>();
      },
      params);
  // Global -> relative over (landmarks, point).
  return unscented_transform(
      stack(landmarks, global),
      [](const Eigen::VectorXd& x) -> Eigen::VectorXd {
        const Eigen::Vector3d l0 = x.segment<3>(0);
        const Eigen::Vector3d a = x.segment<3>(3) - l0;
        const Eigen::Vector3d b = x.segment<3>(6) - l0;
        const Eigen::Vector3d c = a.cross(b);
        Eigen::Matrix3d basis;
        basis << a, b, c / c.norm();
        return basis.partialPivLu().solve(x.segment<3>(9) - l0);
      },
      params);
}

// ---------------------------------------------------------------------------
// TriGrid

TriGrid::TriGrid(int depth, int rows) : depth_(depth), divisions_(1 << depth), rows_(rows) {}

VertexId TriGrid::vertex_id(int i, int j) const {
  const int n = divisions_;
  return static_cast<VertexId>(j * (n + 1) - j * (j - 1) / 2 + i);
}

std::array<int, 2> TriGrid::lattice(VertexId v) const {
  const int n = divisions_;
  int j = 0;
  while (j < n && vertex_id(0, j + 1) <= v) ++j;
  return {v - vertex_id(0, j), j};
}

Eigen::Vector2d TriGrid::vertex_position(VertexId v) const {
  const auto ij = lattice(v);
  return Eigen::Vector2d(ij[0], ij[1]) / static_cast<double>(divisions_);
}

SurfelId TriGrid::surfel_index(int row, int col, Orientation o) const {
  const int n = divisions_;
  const int offset = 2 * n * row - row * row;
  return static_cast<SurfelId>(offset + 2 * col + (o == Orientation::Down ? 1 : 0));
}

TriGrid TriGrid::subdivide(int depth) {
  if (depth < 0) throw DepthTooLarge("negative depth");
  if (depth > kMaxGridDepth) {
    std::ostringstream os;
    os << "depth " << depth << " exceeds cap " << kMaxGridDepth;
    throw DepthTooLarge(os.str());
  }
  TriGrid g(depth, 1 << depth);
  const int n = g.divisions_;
  g.vertex_count_ = static_cast<std::size_t>((n + 1) * (n + 2) / 2);
  for (int r = 0; r < g.rows_; ++r) {
    for (int k = 0; k < 2 * (n - r) - 1; ++k) {
      SurfelInfo s;
      s.row = r;
      s.col = k / 2;
      const int c = s.col;
      if (k % 2 == 0) {
        s.orientation = Orientation::Up;
        s.vertices = {g.vertex_id(c, r), g.vertex_id(c + 1, r), g.vertex_id(c, r + 1)};
      } else {
        s.orientation = Orientation::Down;
        s.vertices = {g.vertex_id(c + 1, r + 1), g.vertex_id(c, r + 1), g.vertex_id(c + 1, r)};
      }
      g.surfels_.push_back(s);
    }
  }
  std::map<std::pair<VertexId, VertexId>, std::vector<SurfelId>> edges;
  for (std::size_t id = 0; id < g.surfels_.size(); ++id) {
    const auto& v = g.surfels_[id].vertices;
    for (int e = 0; e < 3; ++e) {
      VertexId a = v[static_cast<std::size_t>(e)], b = v[static_cast<std::size_t>((e + 1) % 3)];
      if (a > b) std::swap(a, b);
      edges[{a, b}].push_back(static_cast<SurfelId>(id));
    }
  }
  for (const auto& [key, owners] : edges) {
    if (owners.size() == 2) {
      Adjacency adj;
      adj.s = std::min(owners[0], owners[1]);
      adj.c = std::max(owners[0], owners[1]);
      adj.shared = {key.first, key.second};
      g.adjacency_.push_back(adj);
    }
  }
  std::sort(g.adjacency_.begin(), g.adjacency_.end(),
            [](const Adjacency& x, const Adjacency& y) { return std::tie(x.s, x.c) < std::tie(y.s, y.c); });
  g.edges_of_.assign(g.surfels_.size(), {});
  for (std::size_t e = 0; e < g.adjacency_.size(); ++e) {
    g.edges_of_[static_cast<std::size_t>(g.adjacency_[e].s)].push_back(e);
    g.edges_of_[static_cast<std::size_t>(g.adjacency_[e].c)].push_back(e);
  }
  return g;
}

TriGrid TriGrid::strip(int depth) {
  TriGrid full = subdivide(depth);
  TriGrid g(depth, 1);
  const int n = g.divisions_;
  const auto count = static_cast<std::size_t>(2 * n - 1);
  g.surfels_.assign(full.surfels_.begin(), full.surfels_.begin() + static_cast<std::ptrdiff_t>(count));
  g.vertex_count_ = static_cast<std::size_t>(2 * n + 1);
  for (const auto& adj : full.adjacency_) {
    if (static_cast<std::size_t>(adj.c) < count) g.adjacency_.push_back(adj);
  }
  g.edges_of_.assign(count, {});
  for (std::size_t e = 0; e < g.adjacency_.size(); ++e) {
    g.edges_of_[static_cast<std::size_t>(g.adjacency_[e].s)].push_back(e);
    g.edges_of_[static_cast<std::size_t>(g.adjacency_[e].c)].push_back(e);
  }
  return g;
}

std::array<Eigen::Vector2d, 3> TriGrid::corners(SurfelId s) const {
  const auto& v = surfel(s).vertices;
  return {vertex_position(v[0]), vertex_position(v[1]), vertex_position(v[2])};
}

double TriGrid::element_area() const {
  return 0.5 / (static_cast<double>(divisions_) * static_cast<double>(divisions_));
}

std::optional<SurfelId> TriGrid::try_locate(double alpha, double beta) const {
  if (!(alpha >= 0.0 && beta >= 0.0 && alpha + beta <= 1.0)) return std::nullopt;
  const int n = divisions_;
  const double a = alpha * n;
  const double b = beta * n;
  int i = static_cast<int>(std::floor(a));
  int j = static_cast<int>(std::floor(b));
  const double fa = a - i;
  const double fb = b - j;
  if (fa == 0.0 && fb == 0.0) {
    // Lattice point: lowest id among incident elements.
    SurfelId id;
    if (j > 0) {
      id = i >= 1 ? surfel_index(j - 1, i - 1, Orientation::Down) : surfel_index(j - 1, 0, Orientation::Up);
    } else {
      id = i >= 1 ? surfel_index(0, i - 1, Orientation::Up) : surfel_index(0, 0, Orientation::Up);
    }
    if (id >= static_cast<SurfelId>(surfels_.size())) return std::nullopt;
    return id;
  }
  if (j >= n) j = n - 1;
  if (j >= rows_) return std::nullopt;
  const double fbr = b - j;
  // Clamp rounding spill past the hypotenuse.
  const int max_col = n - j - 1;
  if (i > max_col) i = max_col;
  const double far = a - i;
  if (far + fbr <= 1.0) return surfel_index(j, i, Orientation::Up);
  if (i >= max_col) return surfel_index(j, max_col, Orientation::Up);
  return surfel_index(j, i, Orientation::Down);
}

SurfelId TriGrid::locate(double alpha, double beta) const {
  auto id = try_locate(alpha, beta);
  if (!id) {
    std::ostringstream os;
    os << "(" << alpha << ", " << beta << ") is outside the grid";
    throw OutsideSubmap(os.str());
  }
  return *id;
}

ElementFrame TriGrid::frame(SurfelId s) const {
  const auto& info = surfel(s);
  const double n = divisions_;
  ElementFrame f;
  if (info.orientation == Orientation::Up) {
    f.linear.diagonal() << n, n, 1.0;
    f.offset << -info.col, -info.row, 0.0;
  } else {
    f.linear.diagonal() << -n, -n, 1.0;
    f.offset << info.col + 1, info.row + 1, 0.0;
  }
  return f;
}

GaussianMoment normalize_to_element(const TriGrid& grid, SurfelId s, const GaussianMoment& g) {
  const ElementFrame f = grid.frame(s);
  return GaussianMoment(f.to_local(g.mean), f.linear * g.cov * f.linear.transpose());
}

GaussianMoment denormalize_from_element(const TriGrid& grid, SurfelId s, const GaussianMoment& g) {
  const ElementFrame f = grid.frame(s);
  const Eigen::Matrix3d inv = f.linear.inverse();
  return GaussianMoment(f.to_submap(g.mean), inv * g.cov * inv.transpose());
}

}  // namespace stm
