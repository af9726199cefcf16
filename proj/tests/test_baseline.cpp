#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "stm/baseline.hpp"
#include "stm/mapgraph.hpp"
#include "stm/simulate.hpp"

using namespace stm;

TEST_CASE("scalar fusion") {
  const ElevationCell first = elev_update({}, 1.5, 0.25);
  CHECK(first.mean() == doctest::Approx(1.5));
  CHECK(first.variance() == doctest::Approx(0.25));
  CHECK(first.count == 1);

  const ElevationCell two = elev_update(elev_update({}, 1.0, 1.0), 2.0, 1.0);
  CHECK(two.mean() == doctest::Approx(1.5));
  CHECK(two.variance() == doctest::Approx(0.5));

  ElevationCell same;
  double previous = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 40; ++i) {
    same = elev_update(same, 0.7, 0.09);
    CHECK(same.variance() <= previous);
    previous = same.variance();
  }
  CHECK(same.mean() == doctest::Approx(0.7));
  CHECK(same.variance() == doctest::Approx(0.09 / 40));

  CHECK_THROWS_AS(elev_update({}, 1.0, 0.0), InvalidVariance);
  CHECK_THROWS_AS(elev_update({}, 1.0, -1.0), InvalidVariance);
  CHECK_THROWS_AS(elev_update({}, 1.0, std::nan("")), InvalidVariance);
}

TEST_CASE("cell likelihood") {
  CHECK_THROWS_AS(elev_likelihood({}, 0.0), Unobserved);
  const ElevationCell c = elev_update(elev_update({}, 0.3, 0.2), 0.5, 0.3);
  const double var = c.variance();
  CHECK(elev_likelihood(c, c.mean()) == doctest::Approx(std::log(1.0 / std::sqrt(2.0 * std::numbers::pi * var))));
  for (double d : {0.01, 0.1, 1.0}) CHECK(elev_likelihood(c, c.mean() + d) == doctest::Approx(elev_likelihood(c, c.mean() - d)));
  for (int i = 0; i < 10; ++i) {
    const double x = -1.0 + 0.25 * i;
    const double density = std::exp(-0.5 * (x - c.mean()) * (x - c.mean()) / var) / std::sqrt(2.0 * std::numbers::pi * var);
    CHECK(std::exp(elev_likelihood(c, x)) == doctest::Approx(density).epsilon(1e-12));
  }
}

TEST_CASE("fusion is order independent") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> v(0.01, 2.0);
  std::vector<std::pair<double, double>> obs;
  for (int i = 0; i < 50; ++i) obs.emplace_back(z(rng), v(rng));
  auto fuse = [&] {
    ElevationCell c;
    for (const auto& [zz, vv] : obs) c = elev_update(c, zz, vv);
    return c;
  };
  const ElevationCell reference = fuse();
  for (int k = 0; k < 5; ++k) {
    std::shuffle(obs.begin(), obs.end(), rng);
    const ElevationCell c = fuse();
    CHECK(c.mean() == doctest::Approx(reference.mean()).epsilon(1e-12));
    CHECK(c.variance() == doctest::Approx(reference.variance()).epsilon(1e-12));
  }
}

TEST_CASE("elevation map") {
  const TriGrid grid = subdivide(3);
  ElevationMap map(grid);
  CHECK_FALSE(map.predict(0.2, 0.2).has_value());  // every cell empty

  SurfaceParams flat;
  flat.kind = SurfaceKind::Flat;
  flat.offset = 0.4;
  const SyntheticSurface surface(flat);
  auto batch = sample_measurements(surface, whole_submap(), 10.0, grid.element_area(), NoiseSpec::lidar(0.01), 2);
  Measurement outside;
  outside.mean = Vec3(0.9, 0.9, 0.0);
  outside.cov = Mat3::Identity();
  batch.push_back(outside);
  std::size_t inside = 0;
  for (const auto& m : batch) inside += grid.try_locate(m.mean(0), m.mean(1)).has_value();
  CHECK(map.update(batch) == batch.size() - inside);

  std::int64_t total = 0;
  for (const auto& c : map.cells()) {
    total += c.count;
    CHECK(c.observed());
  }
  CHECK(total == static_cast<std::int64_t>(inside));

  STMMap stm_map = build_map(grid, {});
  stm_map.run_inference(batch);
  for (std::size_t s = 0; s < grid.surfel_count(); ++s) {
    const auto k = grid.corners(static_cast<SurfelId>(s));
    const Eigen::Vector2d c = (k[0] + k[1] + k[2]) / 3.0;
    const auto e = map.predict(c.x(), c.y());
    const auto p = stm_map.predict(c.x(), c.y());
    REQUIRE(e);
    REQUIRE(p);
    CHECK(std::abs(e->mean - p->mean) < 2.0 * std::sqrt(e->variance + p->variance));
  }
}
