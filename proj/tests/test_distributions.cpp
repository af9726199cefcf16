#include <doctest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <random>

#include "stm/distributions.hpp"
#include "support.hpp"

using namespace stm;
using stm::testing::max_abs;
using stm::testing::random_spd;
using stm::testing::random_vector;

namespace {

GaussianCanonical scalar_moments(VarId label, double mean, double var) {
  return GaussianCanonical::from_moments({label}, GaussianMoment(Eigen::VectorXd::Constant(1, mean),
                                                                  Eigen::MatrixXd::Constant(1, 1, var)));
}

GaussianCanonical random_canonical(std::vector<VarId> labels, std::mt19937_64& rng) {
  const int n = static_cast<int>(labels.size());
  return GaussianCanonical(std::move(labels), random_vector(n, rng), random_spd(n, rng));
}

}  // namespace

TEST_CASE("canonical construction symmetrizes and round-trips moments") {
  std::mt19937_64 rng(1);
  Eigen::MatrixXd omega = random_spd(4, rng);
  omega(0, 1) += 1e-3;
  const GaussianCanonical g({0, 1, 2, 3}, random_vector(4, rng), omega);
  CHECK(max_abs(g.omega() - g.omega().transpose()) == 0.0);

  const GaussianMoment m(random_vector(4, rng), random_spd(4, rng));
  const GaussianMoment back = GaussianCanonical::from_moments({0, 1, 2, 3}, m).to_moments();
  CHECK(max_abs(back.mean - m.mean) < 1e-9);
  CHECK(max_abs(back.cov - m.cov) < 1e-9);
}

TEST_CASE("vacuous factor") {
  const auto v = GaussianCanonical::vacuous({3, 4});
  CHECK(v.is_vacuous());
  CHECK_FALSE(v.is_normalizable());
  CHECK_THROWS_AS(v.to_moments(), NotADistribution);
}

TEST_CASE("moment covariance must be PSD") {
  Eigen::MatrixXd bad = Eigen::MatrixXd::Identity(2, 2);
  bad(1, 1) = -1.0;
  CHECK_THROWS_AS(GaussianMoment(Eigen::VectorXd::Zero(2), bad), NotPSD);
}

TEST_CASE("gauss_product") {
  std::mt19937_64 rng(2);
  const auto g = random_canonical({0, 1, 2}, rng);

  SUBCASE("vacuous identity") {
    const auto p = gauss_product(GaussianCanonical::vacuous({0, 1, 2}), g);
    CHECK(max_abs(p.xi() - g.xi()) == 0.0);
    CHECK(max_abs(p.omega() - g.omega()) == 0.0);
  }
  SUBCASE("1-D precision addition") {
    const auto p = gauss_product(scalar_moments(0, 0.0, 1.0), scalar_moments(0, 2.0, 1.0));
    CHECK(p.xi()(0) == doctest::Approx(2.0));
    CHECK(p.omega()(0, 0) == doctest::Approx(2.0));
    const auto m = p.to_moments();
    CHECK(m.mean(0) == doctest::Approx(1.0));
    CHECK(m.cov(0, 0) == doctest::Approx(0.5));
  }
  SUBCASE("density product on a grid") {
    const auto h = random_canonical({0, 1, 2}, rng);
    const auto p = gauss_product(g, h);
    std::optional<double> offset;
    for (int i = 0; i < 5; ++i) {
      for (int j = 0; j < 5; ++j) {
        for (int k = 0; k < 5; ++k) {
          const Eigen::Vector3d x(i - 2.0, (j - 2.0) * 0.7, (k - 2.0) * 1.3);
          const double d = g.log_potential(x) + h.log_potential(x) - p.log_potential(x);
          if (!offset) offset = d;
          CHECK(std::abs(d - *offset) < 1e-9);
        }
      }
    }
  }
  SUBCASE("union of labels") {
    const auto a = random_canonical({0, 1}, rng);
    const auto b = random_canonical({1, 5}, rng);
    const auto p = gauss_product(a, b);
    CHECK(p.labels() == std::vector<VarId>{0, 1, 5});
    CHECK(p.omega()(1, 1) == doctest::Approx(a.omega()(1, 1) + b.omega()(0, 0)));
    CHECK(p.omega()(0, 2) == 0.0);
  }
}

TEST_CASE("gauss_divide") {
  std::mt19937_64 rng(3);
  const auto g1 = random_canonical({0, 1, 2}, rng);
  const auto g2 = random_canonical({0, 1, 2}, rng);
  CHECK(gauss_divide(g1, g1).is_vacuous());
  const auto back = gauss_divide(gauss_product(g1, g2), g2);
  CHECK(max_abs(back.xi() - g1.xi()) < 1e-12);
  CHECK(max_abs(back.omega() - g1.omega()) < 1e-12);

  const auto q = gauss_divide(scalar_moments(0, 1.0, 0.5), scalar_moments(0, 2.0, 1.0));
  CHECK(q.xi()(0) == doctest::Approx(0.0));
  CHECK(q.omega()(0, 0) == doctest::Approx(1.0));

  // Improper quotients are legal values.
  const auto improper = gauss_divide(scalar_moments(0, 0.0, 1.0), scalar_moments(0, 0.0, 0.5));
  CHECK_FALSE(improper.is_normalizable());

  CHECK_THROWS_AS(gauss_divide(random_canonical({0}, rng), random_canonical({7}, rng)), LabelMismatch);
}

TEST_CASE("gauss_marginalize") {
  std::mt19937_64 rng(4);
  const GaussianMoment m(random_vector(3, rng), random_spd(3, rng));
  const auto g = GaussianCanonical::from_moments({10, 11, 12}, m);

  SUBCASE("keep everything") {
    const std::vector<VarId> all{10, 11, 12};
    const auto k = gauss_marginalize(g, all);
    CHECK(max_abs(k.omega() - g.omega()) < 1e-12);
  }
  SUBCASE("moment oracle") {
    const std::vector<VarId> keep{12, 10};
    const auto k = gauss_marginalize(g, keep).to_moments();
    CHECK(k.mean(0) == doctest::Approx(m.mean(2)).epsilon(1e-10));
    CHECK(k.mean(1) == doctest::Approx(m.mean(0)).epsilon(1e-10));
    CHECK(k.cov(0, 0) == doctest::Approx(m.cov(2, 2)).epsilon(1e-10));
    CHECK(k.cov(0, 1) == doctest::Approx(m.cov(2, 0)).epsilon(1e-10));
    CHECK(k.cov(1, 1) == doctest::Approx(m.cov(0, 0)).epsilon(1e-10));
  }
  SUBCASE("block-diagonal joint") {
    Eigen::MatrixXd omega = Eigen::MatrixXd::Zero(3, 3);
    omega.topLeftCorner(2, 2) = random_spd(2, rng);
    omega(2, 2) = 3.0;
    const GaussianCanonical b({0, 1, 2}, random_vector(3, rng), omega);
    const std::vector<VarId> keep{0, 1};
    const auto k = gauss_marginalize(b, keep);
    CHECK(max_abs(k.omega() - omega.topLeftCorner(2, 2)) < 1e-12);
    CHECK(max_abs(k.xi() - b.xi().head(2)) < 1e-12);
  }
  SUBCASE("commutes with products over disjoint variables") {
    const auto a = random_canonical({0, 1}, rng);
    const auto c = random_canonical({2, 3}, rng);
    const std::vector<VarId> keep{0, 2};
    const std::vector<VarId> keep_a{0}, keep_c{2};
    const auto lhs = gauss_marginalize(gauss_product(a, c), keep);
    const auto rhs = gauss_product(gauss_marginalize(a, keep_a), gauss_marginalize(c, keep_c));
    CHECK(max_abs(lhs.omega() - rhs.omega()) < 1e-12);
    CHECK(max_abs(lhs.xi() - rhs.xi()) < 1e-12);
  }
  SUBCASE("singular discarded block is regularized") {
    // Zero information on the dropped variable: the trace-scaled jitter rescues it.
    Eigen::Matrix2d omega = Eigen::Matrix2d::Zero();
    omega(0, 0) = 1.0;
    const std::vector<VarId> keep{0};
    CHECK_NOTHROW(gauss_marginalize(GaussianCanonical({0, 1}, Eigen::Vector2d(1, 0), omega), keep));
    const Eigen::Matrix2d nan = Eigen::Matrix2d::Constant(std::numeric_limits<double>::quiet_NaN());
    CHECK_THROWS(gauss_marginalize(GaussianCanonical({0, 1}, Eigen::Vector2d(0, 1), nan), keep));
  }
}

TEST_CASE("kl_gaussian") {
  std::mt19937_64 rng(5);
  const auto g = random_canonical({0, 1, 2}, rng);
  CHECK(kl_gaussian(g, g) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(kl_gaussian(scalar_moments(0, 0.0, 1.0), scalar_moments(0, 1.0, 1.0)) == doctest::Approx(0.5));
  CHECK_THROWS_AS(kl_gaussian(GaussianCanonical::vacuous({0}), scalar_moments(0, 0, 1)), NotADistribution);

  for (int trial = 0; trial < 50; ++trial) {
    CHECK(kl_gaussian(random_canonical({0, 1}, rng), random_canonical({0, 1}, rng)) >= 0.0);
  }

  SUBCASE("quadrature oracle in 2-D") {
    const GaussianMoment q(Eigen::Vector2d(0.3, -0.2), random_spd(2, rng, 0.5));
    const GaussianMoment p(Eigen::Vector2d(-0.1, 0.4), random_spd(2, rng, 0.8));
    const auto qc = GaussianCanonical::from_moments({0, 1}, q);
    const auto pc = GaussianCanonical::from_moments({0, 1}, p);
    const double h = 0.02;
    double sum = 0.0;
    for (double x = -8.0; x <= 8.0; x += h) {
      for (double y = -8.0; y <= 8.0; y += h) {
        const Eigen::Vector2d v(x, y);
        const double lq = qc.log_density(v);
        sum += std::exp(lq) * (lq - pc.log_density(v)) * h * h;
      }
    }
    CHECK(kl_gaussian(qc, pc) == doctest::Approx(sum).epsilon(1e-3));
  }
}

TEST_CASE("inverse-gamma factors") {
  const auto flat = InverseGammaFactor{};
  const auto f = InverseGammaFactor::from_shape_scale(2.0, 3.0);
  const auto p = ig_product(f, flat);
  CHECK(p.exponent() == f.exponent());
  CHECK(p.scale() == f.scale());
  CHECK(f.exponent() == doctest::Approx(3.0));

  SUBCASE("two measurement messages") {
    const auto m = ig_product(InverseGammaFactor::from_exponent(0.5, 1.0), InverseGammaFactor::from_exponent(0.5, 2.0));
    CHECK(m.exponent() == doctest::Approx(1.0));
    CHECK(m.scale() == doctest::Approx(3.0));
  }
  SUBCASE("division undoes product") {
    const auto g = InverseGammaFactor::from_exponent(0.5, 0.7);
    const auto q = ig_divide(ig_product(f, g), g);
    CHECK(q.exponent() == doctest::Approx(f.exponent()));
    CHECK(q.scale() == doctest::Approx(f.scale()));
  }
  SUBCASE("pointwise density product") {
    const auto a = InverseGammaFactor::from_shape_scale(1.5, 2.0);
    const auto b = InverseGammaFactor::from_shape_scale(3.0, 0.5);
    const auto ab = ig_product(a, b);
    std::optional<double> offset;
    for (int i = 0; i < 25; ++i) {
      const double nu = 0.1 + i * (10.0 - 0.1) / 24.0;
      const double d = a.log_density(nu) + b.log_density(nu) - ab.log_density(nu);
      if (!offset) offset = d;
      CHECK(d == doctest::Approx(*offset).epsilon(1e-10));
    }
  }
  SUBCASE("normalizability") {
    CHECK(f.is_normalizable());
    CHECK_FALSE(InverseGammaFactor::from_exponent(0.5, 1.0).is_normalizable());
    CHECK_THROWS_AS(InverseGammaFactor::from_exponent(0.5, 1.0).log_density(1.0), NotADistribution);
  }
}

TEST_CASE("ig_expected_deviation") {
  CHECK(ig_expected_deviation(InverseGammaFactor::from_shape_scale(2.0, 6.0)) == doctest::Approx(3.0));
  CHECK(ig_expected_deviation(InverseGammaFactor::from_shape_scale(1.0, 1.0)) == doctest::Approx(1.0));
  CHECK_THROWS_AS(ig_expected_deviation(InverseGammaFactor::from_exponent(0.5, 1.0)), NotADistribution);

  // 1/nu ~ Gamma(shape 3, rate 2).
  std::mt19937_64 rng(6);
  std::gamma_distribution<double> precision(3.0, 1.0 / 2.0);
  double sum = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) sum += precision(rng);
  const double mc = 1.0 / (sum / n);
  CHECK(ig_expected_deviation(InverseGammaFactor::from_shape_scale(3.0, 2.0)) == doctest::Approx(mc).epsilon(0.01));
}

TEST_CASE("unscented transform") {
  std::mt19937_64 rng(7);

  SUBCASE("exact on random affine maps") {
    for (int trial = 0; trial < 20; ++trial) {
      const GaussianMoment g(random_vector(4, rng), random_spd(4, rng));
      const Eigen::MatrixXd a = stm::testing::random_matrix(3, 4, rng);
      const Eigen::VectorXd c = random_vector(3, rng);
      const auto out = unscented_transform(g, [&](const Eigen::VectorXd& x) -> Eigen::VectorXd { return a * x + c; });
      CHECK(max_abs(out.mean - (a * g.mean + c)) < 1e-9);
      CHECK(max_abs(out.cov - a * g.cov * a.transpose()) < 1e-9);
    }
  }
  SUBCASE("identity") {
    const GaussianMoment g(random_vector(3, rng), random_spd(3, rng));
    const auto out = unscented_transform(g, [](const Eigen::VectorXd& x) -> Eigen::VectorXd { return x; });
    CHECK(max_abs(out.mean - g.mean) < 1e-9);
    CHECK(max_abs(out.cov - g.cov) < 1e-9);
  }
  SUBCASE("square of a standard normal") {
    const GaussianMoment g(Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1));
    const auto out = unscented_transform(g, [](const Eigen::VectorXd& x) -> Eigen::VectorXd { return x.array().square(); });
    CHECK(out.mean(0) == doctest::Approx(1.0).epsilon(0.1));
    CHECK(out.cov(0, 0) == doctest::Approx(2.0).epsilon(0.1));
  }
  SUBCASE("non-PSD input") {
    GaussianMoment g;
    g.mean = Eigen::VectorXd::Zero(2);
    g.cov = Eigen::MatrixXd::Identity(2, 2);
    g.cov(1, 1) = -1.0;
    CHECK_THROWS_AS(unscented_transform(g, [](const Eigen::VectorXd& x) -> Eigen::VectorXd { return x; }), NotPSD);
  }
}

TEST_CASE("linear algebra fallbacks") {
  Eigen::MatrixXd singular = Eigen::MatrixXd::Zero(2, 2);
  singular(0, 0) = 2.0;
  const Eigen::VectorXd x = linalg::pseudo_solve(singular, Eigen::Vector2d(4.0, 0.0));
  CHECK(x(0) == doctest::Approx(2.0));
  CHECK(x(1) == doctest::Approx(0.0));

  Eigen::MatrixXd indefinite = Eigen::MatrixXd::Identity(2, 2);
  indefinite(1, 1) = -0.5;
  const Eigen::MatrixXd clamped = linalg::clamp_psd(indefinite);
  CHECK(clamped(1, 1) == doctest::Approx(0.0));
  CHECK(clamped(0, 0) == doctest::Approx(1.0));
}
