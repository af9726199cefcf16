#pragma once

// Exponential-family algebra used as the currency of every message in the
// map: Gaussians in canonical (information) and moment form, inverse-gamma
// factors, KL divergences and the unscented transform.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "stm/errors.hpp"

namespace stm {

using VarId = std::int64_t;

/// Gaussian in moment form.
struct GaussianMoment {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;

  GaussianMoment() = default;
  /// Symmetrizes `cov`; throws NotPSD if it has an eigenvalue below -1e-10 * trace.
  GaussianMoment(Eigen::VectorXd mean, Eigen::MatrixXd cov);

  Eigen::Index size() const { return mean.size(); }
};

/// Gaussian factor in canonical form, N_c(x; xi, omega), over labelled variables.
///
/// Factors need not be normalizable: messages obtained by division routinely
/// have singular or indefinite information matrices. Only terminal queries
/// (moments, KL, densities) require a positive definite omega.
class GaussianCanonical {
 public:
  GaussianCanonical() = default;
  GaussianCanonical(std::vector<VarId> labels, Eigen::VectorXd xi, Eigen::MatrixXd omega);

  static GaussianCanonical vacuous(std::vector<VarId> labels);
  static GaussianCanonical from_moments(std::vector<VarId> labels, const GaussianMoment& g);

  const std::vector<VarId>& labels() const { return labels_; }
  const Eigen::VectorXd& xi() const { return xi_; }
  const Eigen::MatrixXd& omega() const { return omega_; }
  Eigen::Index size() const { return xi_.size(); }

  bool is_vacuous() const;
  bool is_normalizable() const;

  /// Throws NotADistribution unless omega is positive definite.
  GaussianMoment to_moments() const;
  Eigen::VectorXd mean() const { return to_moments().mean; }

  /// Normalized log density; throws NotADistribution for improper factors.
  double log_density(const Eigen::VectorXd& x) const;
  /// log of exp(-0.5 x'Ωx + ξ'x), defined for any factor.
  double log_potential(const Eigen::VectorXd& x) const;

  /// In-place replacement of the parameters, keeping the labels (symmetrizes omega).
  void set_parameters(const Eigen::Ref<const Eigen::VectorXd>& xi,
                      const Eigen::Ref<const Eigen::MatrixXd>& omega);

  /// Position of `label` in labels(), or -1.
  Eigen::Index index_of(VarId label) const;

 private:
  std::vector<VarId> labels_;
  Eigen::VectorXd xi_;
  Eigen::MatrixXd omega_;
};

/// Product: natural parameters add over the union of labels.
GaussianCanonical gauss_product(const GaussianCanonical& a, const GaussianCanonical& b);
/// Division: natural parameters subtract; b's labels must be a subset of a's.
GaussianCanonical gauss_divide(const GaussianCanonical& a, const GaussianCanonical& b);
/// Schur-complement marginalization onto `keep` (in the order given).
GaussianCanonical gauss_marginalize(const GaussianCanonical& g, std::span<const VarId> keep);
/// Re-express `g` over `labels` (a superset), padding with zeros.
GaussianCanonical gauss_extend(const GaussianCanonical& g, std::span<const VarId> labels);

/// KL(q || p) for normalizable Gaussians over the same label set.
double kl_gaussian(const GaussianCanonical& q, const GaussianCanonical& p);
double kl_gaussian(const GaussianMoment& q, const GaussianMoment& p);

/// Inverse-gamma family factor stored as an exponent pair.
///
/// The factor is proportional to nu^(-exponent) * exp(-scale / nu). A normalized
/// inverse-gamma with shape a and scale b has exponent a + 1, so a likelihood
/// message Γ⁻¹(ν; a_out - 1, b_out) with a_out = 1/2 is the pair (1/2, b_out) and
/// products are plain additions.
class InverseGammaFactor {
 public:
  InverseGammaFactor() = default;  // flat factor
  static InverseGammaFactor from_exponent(double exponent, double scale);
  static InverseGammaFactor from_shape_scale(double shape, double scale);

  double exponent() const { return exponent_; }
  double scale() const { return scale_; }
  double shape() const { return exponent_ - 1.0; }
  bool is_normalizable() const { return shape() > 0.0 && scale_ > 0.0; }

  /// Normalized log density (throws NotADistribution when not normalizable).
  double log_density(double nu) const;
  /// -exponent*log(nu) - scale/nu.
  double log_potential(double nu) const;
  double mean() const;
  double variance() const;

 private:
  double exponent_ = 0.0;
  double scale_ = 0.0;
};

InverseGammaFactor ig_product(const InverseGammaFactor& a, const InverseGammaFactor& b);
InverseGammaFactor ig_divide(const InverseGammaFactor& a, const InverseGammaFactor& b);
/// <nu^-1>^-1 = b / a under a normalizable belief.
double ig_expected_deviation(const InverseGammaFactor& belief);
/// KL(q || p) for normalizable inverse-gamma factors.
double kl_inverse_gamma(const InverseGammaFactor& q, const InverseGammaFactor& p);

struct UnscentedParams {
  double spread = 1e-3;        // alpha
  double prior_knowledge = 2;  // beta
  double secondary = 0;        // kappa
};

using VectorFunction = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

/// Scaled sigma-point unscented transform of g through f.
GaussianMoment unscented_transform(const GaussianMoment& g, const VectorFunction& f,
                                   const UnscentedParams& params = {});

namespace linalg {

/// Symmetric square root L with L L' = m. PSD input allowed; throws NotPSD otherwise.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m);

/// Solve m x = rhs for symmetric m. Falls back to a jittered retry (1e-12 * trace / n)
/// when factorization fails; throws SingularMarginalization if that fails too.
Eigen::MatrixXd symmetric_solve(const Eigen::MatrixXd& m, const Eigen::MatrixXd& rhs);

/// Minimum-norm solution of m x = rhs, for possibly singular symmetric m.
Eigen::VectorXd pseudo_solve(const Eigen::MatrixXd& m, const Eigen::VectorXd& rhs);

/// Project a symmetric matrix onto the PSD cone (eigenvalue clamp).
Eigen::MatrixXd clamp_psd(const Eigen::MatrixXd& m);

}  // namespace linalg

}  // namespace stm
