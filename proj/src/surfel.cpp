#include "stm/surfel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace stm {

HeightFactor HeightFactor::from_moments(const Vec3& mean, const Mat3& cov) {
  HeightFactor f;
  Eigen::LLT<Mat3> llt(cov);
  if (llt.info() != Eigen::Success) throw NotADistribution("height covariance is not positive definite");
  f.omega = llt.solve(Mat3::Identity());
  f.omega = 0.5 * (f.omega + f.omega.transpose()).eval();
  f.xi = f.omega * mean;
  return f;
}

HeightFactor HeightFactor::from_canonical(const GaussianCanonical& g) {
  if (g.size() != 3) throw LabelMismatch("height factor needs exactly three variables");
  HeightFactor f;
  f.xi = g.xi();
  f.omega = g.omega();
  return f;
}

GaussianCanonical HeightFactor::to_canonical(std::vector<VarId> labels) const {
  return GaussianCanonical(std::move(labels), xi, omega);
}

bool HeightFactor::is_normalizable() const {
  Eigen::LLT<Mat3> llt(omega);
  return llt.info() == Eigen::Success;
}

std::optional<std::pair<Vec3, Mat3>> HeightFactor::moments() const {
  Eigen::LLT<Mat3> llt(omega);
  if (llt.info() != Eigen::Success) return std::nullopt;
  Mat3 cov = llt.solve(Mat3::Identity());
  cov = 0.5 * (cov + cov.transpose()).eval();
  return std::make_pair(Vec3(llt.solve(xi)), cov);
}

void SurfelState::refresh_belief() {
  belief_h = prior_h + neighbor_in;
  belief_nu = prior_nu;
  for (const auto& c : clusters) {
    belief_h += c.out_h;
    belief_nu = ig_product(belief_nu, c.out_nu);
  }
}

double mean_plane_eval(double alpha, double beta, const Vec3& h) {
  return (1.0 - alpha - beta) * h(0) + alpha * h(1) + beta * h(2);
}

Row5 jacobian_f(const Vec5& mu_c) {
  const double a = mu_c(3), b = mu_c(4);
  Row5 f;
  f << 1.0 - a - b, a, b, mu_c(1) - mu_c(0), mu_c(2) - mu_c(0);
  return f;
}

LikelihoodCluster init_likelihood_cluster(const Measurement& m, const SurfelModelConfig& cfg) {
  LikelihoodCluster c;
  c.measurement = m;
  Eigen::LLT<Mat3> llt(m.cov);
  if (llt.info() != Eigen::Success) throw NotPSD("measurement covariance is not positive definite");
  c.meas_information = llt.solve(Mat3::Identity());
  c.meas_information = 0.5 * (c.meas_information + c.meas_information.transpose()).eval();
  const double w = 1.0 / cfg.init_height_variance;
  c.out_h.omega = w * Mat3::Identity();
  c.out_h.xi = Vec3::Constant(w * m.mean(2));
  c.out_nu = InverseGammaFactor::from_exponent(0.5, 0.0);
  return c;
}

void add_measurements(SurfelState& state, std::span<const Measurement> measurements, std::int64_t batch,
                      double fallback_variance, const SurfelModelConfig& cfg) {
  if (measurements.empty()) return;
  const std::size_t first = state.clusters.size();
  double variance = fallback_variance;
  if (measurements.size() >= 2) {
    double mean = 0.0;
    for (const auto& m : measurements) mean += m.mean(2);
    mean /= static_cast<double>(measurements.size());
    double ss = 0.0;
    for (const auto& m : measurements) ss += (m.mean(2) - mean) * (m.mean(2) - mean);
    variance = ss / static_cast<double>(measurements.size());
  }
  variance = std::max(variance, cfg.variance_floor);

  for (const auto& m : measurements) {
    LikelihoodCluster c = init_likelihood_cluster(m, cfg);
    c.batch = batch;
    state.clusters.push_back(std::move(c));
  }
  // Belief before the new clusters, then split the scale evenly across them.
  InverseGammaFactor current = state.prior_nu;
  for (std::size_t i = 0; i < first; ++i) current = ig_product(current, state.clusters[i].out_nu);
  const double n = static_cast<double>(measurements.size());
  double scale = 0.0;
  if (state.measurement_count() > static_cast<std::int64_t>(measurements.size()) && current.is_normalizable()) {
    // Surfel already has evidence: keep its expected deviation.
    scale = 0.5 * ig_expected_deviation(current);
  } else {
    const double target_shape = current.shape() + 0.5 * n;
    scale = std::max(0.0, (variance * target_shape - current.scale()) / n);
  }
  for (std::size_t i = first; i < state.clusters.size(); ++i) {
    state.clusters[i].out_nu = InverseGammaFactor::from_exponent(0.5, scale);
  }
  state.refresh_belief();
}

std::pair<HeightFactor, InverseGammaFactor> compute_incoming_message(const SurfelState& state, std::size_t i) {
  const auto& c = state.clusters.at(i);
  return {state.belief_h - c.out_h, ig_divide(state.belief_nu, c.out_nu)};
}

Vec3 height_mean_or_pseudo(const HeightFactor& f) {
  Eigen::LLT<Mat3> llt(f.omega);
  if (llt.info() == Eigen::Success) return llt.solve(f.xi);
  return Eigen::CompleteOrthogonalDecomposition<Mat3>(f.omega).solve(f.xi);
}

namespace {

double expected_deviation(const SurfelState& state, const SurfelModelConfig& cfg) {
  if (cfg.fixed_deviation) return *cfg.fixed_deviation;
  return std::max(ig_expected_deviation(state.belief_nu), cfg.variance_floor);
}

}  // namespace

ClusterJoint update_mean_plane_factor(SurfelState& state, std::size_t i, const SurfelModelConfig& cfg) {
  auto& c = state.clusters.at(i);
  const double nu_bar = expected_deviation(state, cfg);
  const HeightFactor in = state.belief_h - c.out_h;
  const Vec3& z = c.measurement.mean;

  // Context: incoming height message and broad priors on (alpha, beta) centred on the measurement.
  Vec5 mu_c;
  mu_c << height_mean_or_pseudo(in), z(0), z(1);
  const Row5 f = jacobian_f(mu_c);
  const double offset = mean_plane_eval(z(0), z(1), mu_c.head<3>()) - f.dot(mu_c);
  const double pos_w = 1.0 / cfg.position_prior_variance;
  const double w = 1.0 / nu_bar;

  Mat6 omega = Mat6::Zero();
  Vec6 xi = Vec6::Zero();
  omega.topLeftCorner<3, 3>() = in.omega;
  omega(3, 3) = pos_w;
  omega(4, 4) = pos_w;
  xi.head<3>() = in.xi;
  xi(3) = pos_w * z(0);
  xi(4) = pos_w * z(1);
  // gamma = F x + offset + noise(nu_bar)
  omega.topLeftCorner<5, 5>() += w * f.transpose() * f;
  omega.block<5, 1>(0, 5) = -w * f.transpose();
  omega.block<1, 5>(5, 0) = -w * f;
  omega(5, 5) += w;
  xi.head<5>() -= (w * offset) * f.transpose();
  xi(5) += w * offset;
  // Measurement of (alpha, beta, gamma).
  omega.bottomRightCorner<3, 3>() += c.meas_information;
  xi.tail<3>() += c.meas_information * z;

  const Mat3 omega_mm = omega.bottomRightCorner<3, 3>();
  const Eigen::Matrix<double, 3, 3> omega_hm = omega.topRightCorner<3, 3>();
  Eigen::LLT<Mat3> mm(omega_mm);
  if (mm.info() != Eigen::Success) throw SingularMarginalization("measurement block of the cluster joint");
  const Mat3 gain = mm.solve(omega_hm.transpose());
  HeightFactor out;
  out.omega = omega.topLeftCorner<3, 3>() - in.omega - omega_hm * gain;
  out.omega = 0.5 * (out.omega + out.omega.transpose()).eval();
  out.xi = xi.head<3>() - in.xi - gain.transpose() * xi.tail<3>();

  c.out_h = out;
  state.belief_h = in + out;

  ClusterJoint joint;
  Eigen::LLT<Mat6> llt(omega);
  if (llt.info() == Eigen::Success) {
    joint.cov = llt.solve(Mat6::Identity());
    joint.mean = llt.solve(xi);
  } else {
    Eigen::CompleteOrthogonalDecomposition<Mat6> cod(omega);
    joint.cov = cod.pseudoInverse();
    joint.mean = cod.solve(xi);
  }
  joint.cov = 0.5 * (joint.cov + joint.cov.transpose()).eval();
  return joint;
}

void update_planar_deviation_factor(SurfelState& state, std::size_t i, const ClusterJoint& joint) {
  auto& c = state.clusters.at(i);
  const Vec5 mu = joint.mean.head<5>();
  const Row5 f = jacobian_f(mu);
  Vec6 f_aug;
  f_aug << -f.transpose(), 1.0;
  const double residual = joint.mean(5) - mean_plane_eval(mu(3), mu(4), mu.head<3>());
  const double spread = std::max(0.0, f_aug.dot(joint.cov * f_aug));
  const auto updated = InverseGammaFactor::from_exponent(0.5, 0.5 * spread + 0.5 * residual * residual);
  state.belief_nu = ig_product(ig_divide(state.belief_nu, c.out_nu), updated);
  c.out_nu = updated;
}

VmpPassResult vmp_pass(SurfelState& state, const SurfelModelConfig& cfg) {
  VmpPassResult r;
  for (std::size_t i = 0; i < state.clusters.size(); ++i) {
    const HeightFactor before_h = state.belief_h;
    const InverseGammaFactor before_nu = state.belief_nu;
    const ClusterJoint joint = update_mean_plane_factor(state, i, cfg);
    if (!cfg.fixed_deviation) update_planar_deviation_factor(state, i, joint);
    r.max_divergence =
        std::max(r.max_divergence, belief_divergence(state.belief_h, state.belief_nu, before_h, before_nu));
  }
  r.updates = static_cast<std::int64_t>(state.clusters.size());
  return r;
}

int run_vmp(SurfelState& state, const SurfelModelConfig& cfg, double tolerance, int max_passes) {
  for (int pass = 1; pass <= max_passes; ++pass) {
    if (vmp_pass(state, cfg).max_divergence < tolerance) return pass;
  }
  return max_passes;
}

std::optional<double> kl_height(const HeightFactor& q, const HeightFactor& p) {
  Eigen::LLT<Mat3> lq(q.omega), lp(p.omega);
  if (lq.info() != Eigen::Success || lp.info() != Eigen::Success) return std::nullopt;
  const Vec3 mq = lq.solve(q.xi);
  const Vec3 mp = lp.solve(p.xi);
  const Mat3 cov_q = lq.solve(Mat3::Identity());
  const Vec3 d = mp - mq;
  double logdet_q = 0.0, logdet_p = 0.0;
  for (int k = 0; k < 3; ++k) {
    logdet_q += 2.0 * std::log(lq.matrixL()(k, k));
    logdet_p += 2.0 * std::log(lp.matrixL()(k, k));
  }
  const double kl = 0.5 * ((p.omega * cov_q).trace() + d.dot(p.omega * d) - 3.0 + logdet_q - logdet_p);
  return std::max(0.0, kl);
}

double parameter_difference(const HeightFactor& a, const HeightFactor& b) {
  const double scale = 1.0 + std::max(b.xi.cwiseAbs().maxCoeff(), b.omega.cwiseAbs().maxCoeff());
  const double diff = std::max((a.xi - b.xi).cwiseAbs().maxCoeff(), (a.omega - b.omega).cwiseAbs().maxCoeff());
  return diff / scale;
}

double belief_divergence(const HeightFactor& q_h, const InverseGammaFactor& q_nu, const HeightFactor& p_h,
                         const InverseGammaFactor& p_nu) {
  double total = 0.0;
  if (auto kl = kl_height(q_h, p_h)) {
    total += *kl;
  } else {
    total += parameter_difference(q_h, p_h);
  }
  if (q_nu.is_normalizable() && p_nu.is_normalizable()) {
    total += kl_inverse_gamma(q_nu, p_nu);
  } else {
    total += std::abs(q_nu.exponent() - p_nu.exponent()) + std::abs(q_nu.scale() - p_nu.scale());
  }
  return total;
}

}  // namespace stm
