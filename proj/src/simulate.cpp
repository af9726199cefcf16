#include "stm/simulate.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

namespace stm {

namespace {

double fade(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }
double lerp(double a, double b, double t) { return a + t * (b - a); }

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  // splitmix64 finalizer; keeps derived streams decorrelated.
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

SyntheticSurface::SyntheticSurface(SurfaceParams params) : params_(params), perm_(512) {
  if (params_.octaves < 1) throw ConfigError("surface needs at least one octave");
  std::mt19937_64 rng(params_.seed);
  std::array<int, 256> p{};
  for (int i = 0; i < 256; ++i) p[static_cast<std::size_t>(i)] = i;
  for (int i = 255; i > 0; --i) {
    const auto j = static_cast<int>(rng() % static_cast<std::uint64_t>(i + 1));
    std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(j)]);
  }
  for (std::size_t i = 0; i < 512; ++i) perm_[i] = p[i & 255];
}

double SyntheticSurface::noise2(double x, double y) const {
  const double fx = std::floor(x), fy = std::floor(y);
  const int xi = static_cast<int>(fx) & 255, yi = static_cast<int>(fy) & 255;
  const double dx = x - fx, dy = y - fy;
  auto grad = [&](int hx, int hy, double gx, double gy) {
    const int h = perm_[static_cast<std::size_t>(perm_[static_cast<std::size_t>(hx)] + hy)] & 7;
    const double angle = h * std::numbers::pi / 4.0;
    return std::cos(angle) * gx + std::sin(angle) * gy;
  };
  const double n00 = grad(xi, yi, dx, dy);
  const double n10 = grad(xi + 1, yi, dx - 1.0, dy);
  const double n01 = grad(xi, yi + 1, dx, dy - 1.0);
  const double n11 = grad(xi + 1, yi + 1, dx - 1.0, dy - 1.0);
  const double u = fade(dx), v = fade(dy);
  // Unit gradients bound the raw value by sqrt(1/2).
  return std::numbers::sqrt2 * lerp(lerp(n00, n10, u), lerp(n01, n11, u), v);
}

double SyntheticSurface::noise1(double x) const {
  const double fx = std::floor(x);
  const int xi = static_cast<int>(fx) & 255;
  const double dx = x - fx;
  auto slope = [&](int i) { return perm_[static_cast<std::size_t>(i)] / 127.5 - 1.0; };
  // Raw value bounded by 1/2.
  return 2.0 * lerp(slope(xi) * dx, slope(xi + 1) * (dx - 1.0), fade(dx));
}

double SyntheticSurface::operator()(double alpha, double beta) const {
  if (params_.kind == SurfaceKind::Flat || params_.amplitude == 0.0) return params_.offset;
  double total = 0.0, amp = params_.amplitude, freq = params_.frequency;
  for (int k = 0; k < params_.octaves; ++k) {
    const double shift = 17.31 * k;
    total += amp * (params_.kind == SurfaceKind::Perlin ? noise2(alpha * freq + shift, beta * freq + shift)
                                                        : noise1(alpha * freq + shift));
    amp *= params_.persistence;
    freq *= params_.lacunarity;
  }
  return params_.offset + total;
}

double SyntheticSurface::bound() const {
  if (params_.kind == SurfaceKind::Flat) return 0.0;
  double total = 0.0, amp = std::abs(params_.amplitude);
  for (int k = 0; k < params_.octaves; ++k) {
    total += amp;
    amp *= std::abs(params_.persistence);
  }
  return total;
}

SyntheticSurface perlin_surface(std::uint64_t seed, SurfaceParams params) {
  params.seed = seed;
  return SyntheticSurface(params);
}

NoiseSpec NoiseSpec::stereo(double range_sigma, double ratio) {
  if (!(range_sigma > 0.0)) throw ConfigError("stereo range sigma must be positive");
  if (!(ratio >= 10.0 && ratio <= 50.0)) throw ConfigError("stereo range/transverse ratio must lie in [10, 50]");
  NoiseSpec n;
  n.sigmas = Vec3(range_sigma, range_sigma / ratio, range_sigma / ratio);
  n.profile = SensorProfile::Stereo;
  return n;
}

NoiseSpec NoiseSpec::lidar(double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("lidar sigma must be positive");
  NoiseSpec n;
  n.sigmas = Vec3::Constant(sigma);
  n.profile = SensorProfile::Lidar;
  return n;
}

namespace {

Mat3 draw_rotation(const NoiseSpec& noise, std::mt19937_64& rng) {
  if (!noise.random_rotation) return Mat3::Identity();
  std::normal_distribution<double> normal(0.0, 1.0);
  if (noise.planar) {
    std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
    const double t = angle(rng);
    Mat3 r = Mat3::Identity();
    r(0, 0) = std::cos(t);
    r(0, 2) = -std::sin(t);
    r(2, 0) = std::sin(t);
    r(2, 2) = std::cos(t);
    return r;
  }
  Eigen::Quaterniond q(normal(rng), normal(rng), normal(rng), normal(rng));
  q.normalize();
  return q.toRotationMatrix();
}

Vec3 planar_sigmas(const NoiseSpec& noise) {
  // Planar mode: first sigma along the in-plane long axis, second dropped to beta.
  return noise.planar ? Vec3(noise.sigmas(0), noise.planar_beta_sigma, noise.sigmas(1)) : noise.sigmas;
}

}  // namespace

Mat3 draw_noise_covariance(const NoiseSpec& noise, std::mt19937_64& rng) {
  const Mat3 r = draw_rotation(noise, rng);
  const Vec3 s = planar_sigmas(noise);
  return r.transpose() * s.cwiseAbs2().asDiagonal() * r;
}

double polygon_area(const Polygon& region) {
  double a = 0.0;
  for (std::size_t i = 0; i < region.size(); ++i) {
    const auto& p = region[i];
    const auto& q = region[(i + 1) % region.size()];
    a += p.x() * q.y() - q.x() * p.y();
  }
  return 0.5 * std::abs(a);
}

bool polygon_contains(const Polygon& region, const Eigen::Vector2d& p) {
  bool inside = false;
  for (std::size_t i = 0, j = region.size() - 1; i < region.size(); j = i++) {
    const auto& a = region[i];
    const auto& b = region[j];
    if ((a.y() > p.y()) != (b.y() > p.y()) && p.x() < (b.x() - a.x()) * (p.y() - a.y()) / (b.y() - a.y()) + a.x()) {
      inside = !inside;
    }
  }
  return inside;
}

Polygon whole_submap() { return {{0.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}}; }

namespace {

Eigen::Vector2d sample_point(const Polygon& region, std::mt19937_64& rng) {
  Eigen::Vector2d lo = region.front(), hi = region.front();
  for (const auto& p : region) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  std::uniform_real_distribution<double> ua(lo.x(), hi.x()), ub(lo.y(), hi.y());
  for (int attempt = 0; attempt < 1000000; ++attempt) {
    const Eigen::Vector2d p(ua(rng), ub(rng));
    if (polygon_contains(region, p) && p.x() >= 0.0 && p.y() >= 0.0 && p.x() + p.y() <= 1.0) return p;
  }
  throw EmptyRegion("rejection sampling found no point inside the region");
}

Measurement noisy_measurement(const SyntheticSurface& surface, double alpha, double beta, const NoiseSpec& noise,
                              std::mt19937_64& rng, std::int64_t id) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const Mat3 r = draw_rotation(noise, rng);
  const Vec3 s = planar_sigmas(noise);
  const Vec3 eps(normal(rng), normal(rng), normal(rng));
  Measurement m;
  m.mean = Vec3(alpha, beta, surface(alpha, beta)) + r.transpose() * s.cwiseProduct(eps);
  m.cov = r.transpose() * s.cwiseAbs2().asDiagonal() * r;
  m.id = id;
  return m;
}

}  // namespace

std::vector<Measurement> sample_measurements_count(const SyntheticSurface& surface, const Polygon& region,
                                                   std::size_t count, const NoiseSpec& noise, std::uint64_t seed) {
  if (region.size() < 3 || !(polygon_area(region) > 0.0)) throw EmptyRegion("sampling region has no area");
  std::mt19937_64 rng(seed);
  std::vector<Measurement> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const Eigen::Vector2d p = sample_point(region, rng);
    out.push_back(noisy_measurement(surface, p.x(), p.y(), noise, rng, static_cast<std::int64_t>(i)));
  }
  return out;
}

std::vector<Measurement> sample_measurements(const SyntheticSurface& surface, const Polygon& region, double density,
                                             double element_area, const NoiseSpec& noise, std::uint64_t seed) {
  const double area = region.size() >= 3 ? polygon_area(region) : 0.0;
  const auto count = static_cast<std::size_t>(std::llround(density * area / element_area));
  if (count == 0) throw EmptyRegion("sampling region yields no measurements");
  return sample_measurements_count(surface, region, count, noise, seed);
}

std::vector<Measurement> sample_profile(const SyntheticSurface& surface, double beta0, std::size_t count,
                                        const NoiseSpec& noise, std::uint64_t seed) {
  if (count == 0 || !(beta0 >= 0.0 && beta0 < 1.0)) throw EmptyRegion("profile needs samples and 0 <= beta0 < 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ua(0.0, 1.0 - beta0);
  std::vector<Measurement> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double a = ua(rng);
    Measurement m = noisy_measurement(surface, a, beta0, noise, rng, static_cast<std::int64_t>(i));
    // Keep the sample on the strip even if beta noise pushed it across the boundary.
    m.mean(1) = std::clamp(m.mean(1), 0.0, 1.0);
    m.mean(0) = std::clamp(m.mean(0), 0.0, 1.0 - m.mean(1));
    out.push_back(m);
  }
  return out;
}

Polygon pushbroom_band(int t, int steps) {
  const double a0 = static_cast<double>(t) / steps;
  const double a1 = static_cast<double>(t + 1) / steps;
  return {{a0, 0.0}, {a1, 0.0}, {a1, 1.0 - a1}, {a0, 1.0 - a0}};
}

namespace {

struct Snapshot {
  std::vector<HeightFactor> h;
  std::vector<InverseGammaFactor> nu;
};

Snapshot snapshot(const STMMap& map) {
  Snapshot s;
  for (const auto& st : map.surfels()) {
    s.h.push_back(st.belief_h);
    s.nu.push_back(st.belief_nu);
  }
  return s;
}

double segment_distance(const Eigen::Vector2d& p, const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
  const Eigen::Vector2d ab = b - a;
  const double t = std::clamp((p - a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
  return (a + t * ab - p).norm();
}

// Inside or on the boundary.
bool touches(const Polygon& region, const Eigen::Vector2d& p) {
  if (polygon_contains(region, p)) return true;
  for (std::size_t i = 0, j = region.size() - 1; i < region.size(); j = i++) {
    if (segment_distance(p, region[j], region[i]) < 1e-12) return true;
  }
  return false;
}

StepReport run_step(STMMap& map, std::span<const Measurement> batch, int step, const Polygon& region) {
  const Snapshot before = snapshot(map);
  const ConvergenceReport r = map.incremental_update(batch);
  StepReport out;
  out.step = step;
  out.n_new = batch.size();
  out.messages = r.messages;
  out.normalized = batch.empty() ? 0.0 : static_cast<double>(r.messages) / static_cast<double>(batch.size());
  out.sweeps = r.sweeps;
  out.converged = r.converged;
  double inside = 0.0;
  const TriGrid& grid = map.grid();
  for (std::size_t s = 0; s < map.surfels().size(); ++s) {
    const auto& st = map.surfels()[s];
    const double kl = belief_divergence(st.belief_h, st.belief_nu, before.h[s], before.nu[s]);
    out.surfel_kl.push_back(kl);
    out.total_kl += kl;
    const auto c = grid.corners(static_cast<SurfelId>(s));
    if (std::any_of(c.begin(), c.end(), [&](const Eigen::Vector2d& v) { return touches(region, v); })) inside += kl;
  }
  out.region_kl_fraction = out.total_kl > 0.0 ? inside / out.total_kl : 1.0;
  return out;
}

void accumulate(ScenarioReport& report) {
  for (const auto& s : report.steps) {
    report.total_messages += s.messages;
    report.total_new += s.n_new;
    report.total_kl += s.total_kl;
    report.converged = report.converged && s.converged;
  }
}

}  // namespace

ScenarioReport scenario_pushbroom(STMMap& map, const SyntheticSurface& surface, const ScenarioParams& params) {
  if (params.steps < 2) throw ConfigError("push-broom needs at least two steps");
  ScenarioReport report;
  report.name = "pushbroom";
  for (int t = 0; t < params.steps; ++t) {
    const Polygon band = pushbroom_band(t, params.steps);
    const auto batch = sample_measurements(surface, band, params.density, map.grid().element_area(), params.noise,
                                           mix_seed(params.seed, static_cast<std::uint64_t>(t)));
    report.steps.push_back(run_step(map, batch, t + 1, band));
  }
  accumulate(report);
  return report;
}

ScenarioReport scenario_reobserve(STMMap& map, const SyntheticSurface& surface, const ScenarioParams& params) {
  if (params.steps < 3) throw ConfigError("re-observation needs at least three steps");
  ScenarioReport report;
  report.name = "reobserve";
  const Polygon region = whole_submap();
  const auto batch =
      sample_measurements(surface, region, params.density, map.grid().element_area(), params.noise, params.seed);
  for (int t = 0; t < params.steps; ++t) report.steps.push_back(run_step(map, batch, t + 1, region));
  accumulate(report);
  return report;
}

std::optional<HeightEstimate> StmHeightModel::predict(double alpha, double beta) const {
  const auto p = map_.predict(alpha, beta);
  if (!p) return std::nullopt;
  return HeightEstimate{p->mean, p->deviation, p->observed};
}

std::optional<HeightEstimate> ElevationHeightModel::predict(double alpha, double beta) const {
  const auto p = map_.predict(alpha, beta);
  if (!p) return std::nullopt;
  return HeightEstimate{p->mean, variance_override_.value_or(p->variance), true};
}

std::vector<Eigen::Vector2d> evaluation_points(const Polygon& region, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Eigen::Vector2d> pts;
  pts.reserve(n);
  for (std::size_t i = 0; i < n; ++i) pts.push_back(sample_point(region, rng));
  return pts;
}

std::vector<Eigen::Vector2d> profile_points(double beta0, std::size_t n) {
  std::vector<Eigen::Vector2d> pts;
  pts.reserve(n);
  const double span = 1.0 - beta0;
  for (std::size_t i = 0; i < n; ++i) pts.emplace_back(span * (static_cast<double>(i) + 0.5) / static_cast<double>(n), beta0);
  return pts;
}

MseResult evaluate_mse(const HeightModel& model, const SyntheticSurface& surface,
                       std::span<const Eigen::Vector2d> points, bool include_unobserved) {
  MseResult r;
  double sum = 0.0;
  for (const auto& p : points) {
    const auto e = model.predict(p.x(), p.y());
    if (!e || (!e->observed && !include_unobserved)) continue;
    const double d = surface(p.x(), p.y()) - e->mean;
    sum += d * d;
    ++r.used;
  }
  r.mse = r.used ? sum / static_cast<double>(r.used) : 0.0;
  return r;
}

namespace {

double log_normal(double x, double mean, double var) {
  const double d = x - mean;
  return -0.5 * std::log(2.0 * std::numbers::pi * var) - 0.5 * d * d / var;
}

}  // namespace

LikelihoodComparison evaluate_loglik_ratio(const HeightModel& stm, const HeightModel& elevation,
                                           const SyntheticSurface& surface, std::span<const Eigen::Vector2d> points) {
  LikelihoodComparison r;
  for (const auto& p : points) {
    const auto a = stm.predict(p.x(), p.y());
    const auto b = elevation.predict(p.x(), p.y());
    if (!a || !b || !a->observed || !b->observed) continue;
    if (!(a->variance > 0.0) || !(b->variance > 0.0)) continue;
    const double truth = surface(p.x(), p.y());
    r.stm += log_normal(truth, a->mean, a->variance);
    r.elevation += log_normal(truth, b->mean, b->variance);
    ++r.used;
  }
  r.ratio = r.stm - r.elevation;
  return r;
}

namespace {

AccuracyRow evaluate_depth(const TriGrid& grid, std::span<const Measurement> batch, const AccuracyParams& params,
                           const SyntheticSurface& surface, std::span<const Eigen::Vector2d> points) {
  STMMap map(grid, params.prior, WindowConfig{}, params.convergence);
  const auto report = map.run_inference(batch);
  ElevationMap elev(grid);
  elev.update(batch);
  const StmHeightModel sm(map);
  const ElevationHeightModel em(elev);

  // Both models scored on the same support.
  std::vector<Eigen::Vector2d> common;
  for (const auto& p : points) {
    const auto a = sm.predict(p.x(), p.y());
    const auto b = em.predict(p.x(), p.y());
    if (a && b && a->observed && b->observed) common.push_back(p);
  }
  AccuracyRow row;
  row.depth = grid.depth();
  row.converged = report.converged;
  row.n_eval = common.size();
  row.mse_stm = evaluate_mse(sm, surface, common).mse;
  row.mse_elevation = evaluate_mse(em, surface, common).mse;
  const auto ll = evaluate_loglik_ratio(sm, em, surface, common);
  row.loglik_stm = ll.stm;
  row.loglik_elevation = ll.elevation;
  row.loglik_ratio = ll.ratio;
  return row;
}

}  // namespace

std::vector<AccuracyRow> run_accuracy_2d(const AccuracyParams& params) {
  SurfaceParams sp = params.surface;
  sp.kind = SurfaceKind::Profile;
  const SyntheticSurface surface(sp);
  NoiseSpec noise = params.noise;
  noise.planar = true;
  const auto batch = sample_profile(surface, params.profile_beta, params.n_measurements, noise, params.seed);
  const auto points = profile_points(params.profile_beta, params.n_eval);
  std::vector<AccuracyRow> rows;
  for (int d : params.depths) {
    AccuracyRow row = evaluate_depth(TriGrid::strip(d), batch, params, surface, points);
    row.seed = sp.seed;
    rows.push_back(row);
  }
  return rows;
}

std::vector<AccuracyRow> run_accuracy_3d(const AccuracyParams& params) {
  SurfaceParams sp = params.surface;
  sp.kind = SurfaceKind::Perlin;
  const SyntheticSurface surface(sp);
  const auto batch =
      sample_measurements_count(surface, whole_submap(), params.n_measurements, params.noise, params.seed);
  const auto points = evaluation_points(whole_submap(), params.n_eval, mix_seed(params.seed, 99));
  std::vector<AccuracyRow> rows;
  for (int d : params.depths) {
    AccuracyRow row = evaluate_depth(TriGrid::subdivide(d), batch, params, surface, points);
    row.seed = sp.seed;
    rows.push_back(row);
  }
  return rows;
}

PriorReach prior_reach(const PriorReachParams& params) {
  const TriGrid grid = TriGrid::subdivide(params.depth);
  SurfaceParams sp;
  sp.kind = SurfaceKind::Flat;
  sp.offset = params.height;
  const SyntheticSurface surface(sp);
  const double t = params.observed_alpha;
  const Polygon region{{0.0, 0.0}, {t, 0.0}, {t, 1.0 - t}, {0.0, 1.0}};
  const auto batch = sample_measurements(surface, region, params.density, grid.element_area(), params.noise, params.seed);

  STMMap map(grid, params.prior, WindowConfig{}, params.convergence);
  const ConvergenceReport report = map.run_inference(batch);
  const MapQueryResult q = query_map(map);

  PriorReach out;
  out.rho = params.prior.rho;
  out.converged = report.converged;
  const int n = grid.divisions();
  std::vector<double> sum(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<int> count(sum.size(), 0);
  double inside = 0.0;
  int inside_count = 0;
  for (std::size_t v = 0; v < grid.vertex_count(); ++v) {
    const int i = grid.lattice(static_cast<VertexId>(v))[0];
    const double alpha = static_cast<double>(i) / n;
    if (alpha <= t) {
      inside += q.vertices[v].mean;
      ++inside_count;
    } else {
      sum[static_cast<std::size_t>(i)] += q.vertices[v].mean;
      ++count[static_cast<std::size_t>(i)];
    }
  }
  out.boundary_value = inside / std::max(inside_count, 1);
  for (int i = 0; i <= n; ++i) {
    if (count[static_cast<std::size_t>(i)] == 0) continue;
    out.profile.emplace_back(static_cast<double>(i) / n - t, sum[static_cast<std::size_t>(i)] / count[static_cast<std::size_t>(i)]);
  }

  const double level = 0.1 * out.boundary_value;
  out.reach = out.profile.empty() ? 0.0 : out.profile.back().first + 1.0 / n;
  double prev_d = 0.0, prev_v = out.boundary_value;
  for (const auto& [d, v] : out.profile) {
    if (v <= level) {
      out.reach = prev_d + (prev_v - level) / (prev_v - v) * (d - prev_d);
      break;
    }
    prev_d = d;
    prev_v = v;
  }
  return out;
}

}  // namespace stm
