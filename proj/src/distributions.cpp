#include "stm/distributions.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include <boost/math/special_functions/digamma.hpp>

namespace stm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

Eigen::MatrixXd symmetrized(const Eigen::MatrixXd& m) { return 0.5 * (m + m.transpose()); }

void check_unique(const std::vector<VarId>& labels) {
  std::vector<VarId> sorted = labels;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw LabelMismatch("duplicate variable label");
  }
}

// Map each label of `sub` to its index in `super`; throws if missing.
std::vector<Eigen::Index> index_map(const std::vector<VarId>& sub, const std::vector<VarId>& super) {
  std::vector<Eigen::Index> idx(sub.size());
  for (std::size_t i = 0; i < sub.size(); ++i) {
    auto it = std::find(super.begin(), super.end(), sub[i]);
    if (it == super.end()) {
      std::ostringstream os;
      os << "label " << sub[i] << " not present";
      throw LabelMismatch(os.str());
    }
    idx[i] = std::distance(super.begin(), it);
  }
  return idx;
}

bool same_labels(const GaussianCanonical& a, const GaussianCanonical& b) { return a.labels() == b.labels(); }

}  // namespace

// ---------------------------------------------------------------------------
// GaussianMoment

GaussianMoment::GaussianMoment(Eigen::VectorXd m, Eigen::MatrixXd c) : mean(std::move(m)), cov(std::move(c)) {
  if (cov.rows() != mean.size() || cov.cols() != mean.size()) {
    throw LabelMismatch("moment dimensions disagree");
  }
  cov = symmetrized(cov);
  if (mean.size() > 0) {
    const double tr = std::max(cov.trace(), 0.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -1e-10 * std::max(tr, 1e-300)) {
      throw NotPSD("covariance has a negative eigenvalue");
    }
  }
}

// ---------------------------------------------------------------------------
// GaussianCanonical

GaussianCanonical::GaussianCanonical(std::vector<VarId> labels, Eigen::VectorXd xi, Eigen::MatrixXd omega)
    : labels_(std::move(labels)), xi_(std::move(xi)), omega_(std::move(omega)) {
  const auto n = static_cast<Eigen::Index>(labels_.size());
  if (xi_.size() != n || omega_.rows() != n || omega_.cols() != n) {
    throw LabelMismatch("canonical parameters do not match label count");
  }
  check_unique(labels_);
  omega_ = symmetrized(omega_);
}

GaussianCanonical GaussianCanonical::vacuous(std::vector<VarId> labels) {
  const auto n = static_cast<Eigen::Index>(labels.size());
  return GaussianCanonical(std::move(labels), Eigen::VectorXd::Zero(n), Eigen::MatrixXd::Zero(n, n));
}

GaussianCanonical GaussianCanonical::from_moments(std::vector<VarId> labels, const GaussianMoment& g) {
  Eigen::LLT<Eigen::MatrixXd> llt(g.cov);
  if (llt.info() != Eigen::Success) throw NotADistribution("covariance is not positive definite");
  const Eigen::Index n = g.size();
  Eigen::MatrixXd omega = llt.solve(Eigen::MatrixXd::Identity(n, n));
  Eigen::VectorXd xi = omega * g.mean;
  return GaussianCanonical(std::move(labels), std::move(xi), std::move(omega));
}

bool GaussianCanonical::is_vacuous() const { return xi_.isZero(0.0) && omega_.isZero(0.0); }

bool GaussianCanonical::is_normalizable() const {
  if (size() == 0) return false;
  Eigen::LLT<Eigen::MatrixXd> llt(omega_);
  return llt.info() == Eigen::Success;
}

GaussianMoment GaussianCanonical::to_moments() const {
  Eigen::LLT<Eigen::MatrixXd> llt(omega_);
  if (size() == 0 || llt.info() != Eigen::Success) {
    throw NotADistribution("information matrix is not positive definite");
  }
  GaussianMoment g;
  g.cov = symmetrized(llt.solve(Eigen::MatrixXd::Identity(size(), size())));
  g.mean = llt.solve(xi_);
  return g;
}

double GaussianCanonical::log_potential(const Eigen::VectorXd& x) const {
  return -0.5 * x.dot(omega_ * x) + xi_.dot(x);
}

double GaussianCanonical::log_density(const Eigen::VectorXd& x) const {
  Eigen::LLT<Eigen::MatrixXd> llt(omega_);
  if (size() == 0 || llt.info() != Eigen::Success) {
    throw NotADistribution("information matrix is not positive definite");
  }
  const Eigen::VectorXd mu = llt.solve(xi_);
  const Eigen::VectorXd d = x - mu;
  const double logdet_omega = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  return -0.5 * (static_cast<double>(size()) * kLog2Pi - logdet_omega + d.dot(omega_ * d));
}

void GaussianCanonical::set_parameters(const Eigen::Ref<const Eigen::VectorXd>& xi,
                                       const Eigen::Ref<const Eigen::MatrixXd>& omega) {
  if (xi.size() != size() || omega.rows() != size() || omega.cols() != size()) {
    throw LabelMismatch("set_parameters dimension mismatch");
  }
  xi_ = xi;
  omega_ = 0.5 * (omega + omega.transpose());
}

Eigen::Index GaussianCanonical::index_of(VarId label) const {
  auto it = std::find(labels_.begin(), labels_.end(), label);
  return it == labels_.end() ? -1 : std::distance(labels_.begin(), it);
}

GaussianCanonical gauss_extend(const GaussianCanonical& g, std::span<const VarId> labels) {
  std::vector<VarId> target(labels.begin(), labels.end());
  const auto idx = index_map(g.labels(), target);
  const auto n = static_cast<Eigen::Index>(target.size());
  Eigen::VectorXd xi = Eigen::VectorXd::Zero(n);
  Eigen::MatrixXd omega = Eigen::MatrixXd::Zero(n, n);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    xi(idx[i]) = g.xi()(static_cast<Eigen::Index>(i));
    for (std::size_t j = 0; j < idx.size(); ++j) {
      omega(idx[i], idx[j]) = g.omega()(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
  }
  return GaussianCanonical(std::move(target), std::move(xi), std::move(omega));
}

GaussianCanonical gauss_product(const GaussianCanonical& a, const GaussianCanonical& b) {
  if (same_labels(a, b)) {
    return GaussianCanonical(a.labels(), a.xi() + b.xi(), a.omega() + b.omega());
  }
  std::vector<VarId> labels = a.labels();
  for (VarId l : b.labels()) {
    if (std::find(labels.begin(), labels.end(), l) == labels.end()) labels.push_back(l);
  }
  GaussianCanonical ea = gauss_extend(a, labels);
  GaussianCanonical eb = gauss_extend(b, labels);
  return GaussianCanonical(std::move(labels), ea.xi() + eb.xi(), ea.omega() + eb.omega());
}

GaussianCanonical gauss_divide(const GaussianCanonical& a, const GaussianCanonical& b) {
  if (same_labels(a, b)) {
    return GaussianCanonical(a.labels(), a.xi() - b.xi(), a.omega() - b.omega());
  }
  GaussianCanonical eb = gauss_extend(b, a.labels());
  return GaussianCanonical(a.labels(), a.xi() - eb.xi(), a.omega() - eb.omega());
}

GaussianCanonical gauss_marginalize(const GaussianCanonical& g, std::span<const VarId> keep) {
  std::vector<VarId> keep_labels(keep.begin(), keep.end());
  const auto kidx = index_map(keep_labels, g.labels());
  std::vector<Eigen::Index> didx;
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    if (std::find(kidx.begin(), kidx.end(), i) == kidx.end()) {
      // A discarded variable with no information at all integrates out trivially.
      if (g.xi()(i) == 0.0 && g.omega().row(i).isZero(0.0)) continue;
      didx.push_back(i);
    }
  }
  const auto nk = static_cast<Eigen::Index>(kidx.size());
  const auto nd = static_cast<Eigen::Index>(didx.size());
  Eigen::VectorXd xk(nk), xd(nd);
  Eigen::MatrixXd okk(nk, nk), okd(nk, nd), odd(nd, nd);
  for (Eigen::Index i = 0; i < nk; ++i) {
    xk(i) = g.xi()(kidx[i]);
    for (Eigen::Index j = 0; j < nk; ++j) okk(i, j) = g.omega()(kidx[i], kidx[j]);
    for (Eigen::Index j = 0; j < nd; ++j) okd(i, j) = g.omega()(kidx[i], didx[j]);
  }
  for (Eigen::Index i = 0; i < nd; ++i) {
    xd(i) = g.xi()(didx[i]);
    for (Eigen::Index j = 0; j < nd; ++j) odd(i, j) = g.omega()(didx[i], didx[j]);
  }
  if (nd == 0) return GaussianCanonical(std::move(keep_labels), std::move(xk), std::move(okk));

  Eigen::MatrixXd rhs(nd, nk + 1);
  rhs.leftCols(nk) = okd.transpose();
  rhs.col(nk) = xd;
  const Eigen::MatrixXd sol = linalg::symmetric_solve(odd, rhs);
  Eigen::MatrixXd omega = okk - okd * sol.leftCols(nk);
  Eigen::VectorXd xi = xk - okd * sol.col(nk);
  return GaussianCanonical(std::move(keep_labels), std::move(xi), std::move(omega));
}

double kl_gaussian(const GaussianMoment& q, const GaussianMoment& p) {
  if (q.size() != p.size()) throw LabelMismatch("KL dimension mismatch");
  Eigen::LLT<Eigen::MatrixXd> lq(q.cov), lp(p.cov);
  if (lq.info() != Eigen::Success || lp.info() != Eigen::Success) {
    throw NotADistribution("KL requires positive definite covariances");
  }
  const auto k = static_cast<double>(q.size());
  const Eigen::VectorXd d = p.mean - q.mean;
  const double tr = lp.solve(q.cov).trace();
  const double maha = d.dot(lp.solve(d));
  const double logdet_p = 2.0 * lp.matrixLLT().diagonal().array().log().sum();
  const double logdet_q = 2.0 * lq.matrixLLT().diagonal().array().log().sum();
  return std::max(0.0, 0.5 * (tr + maha - k + logdet_p - logdet_q));
}

double kl_gaussian(const GaussianCanonical& q, const GaussianCanonical& p) {
  const GaussianCanonical pa = same_labels(q, p) ? p : gauss_extend(p, q.labels());
  if (pa.labels().size() != q.labels().size()) throw LabelMismatch("KL label sets differ");
  Eigen::LLT<Eigen::MatrixXd> lq(q.omega()), lp(pa.omega());
  if (q.size() == 0 || lq.info() != Eigen::Success || lp.info() != Eigen::Success) {
    throw NotADistribution("KL requires positive definite information matrices");
  }
  const auto k = static_cast<double>(q.size());
  const Eigen::VectorXd mq = lq.solve(q.xi());
  const Eigen::VectorXd mp = lp.solve(pa.xi());
  const Eigen::VectorXd d = mp - mq;
  // tr(Ωp Σq)
  const double tr = (pa.omega() * lq.solve(Eigen::MatrixXd::Identity(q.size(), q.size()))).trace();
  const double maha = d.dot(pa.omega() * d);
  const double logdet_op = 2.0 * lp.matrixLLT().diagonal().array().log().sum();
  const double logdet_oq = 2.0 * lq.matrixLLT().diagonal().array().log().sum();
  return std::max(0.0, 0.5 * (tr + maha - k + logdet_oq - logdet_op));
}

// ---------------------------------------------------------------------------
// Inverse gamma

InverseGammaFactor InverseGammaFactor::from_exponent(double exponent, double scale) {
  InverseGammaFactor f;
  f.exponent_ = exponent;
  f.scale_ = scale;
  return f;
}

InverseGammaFactor InverseGammaFactor::from_shape_scale(double shape, double scale) {
  return from_exponent(shape + 1.0, scale);
}

double InverseGammaFactor::log_potential(double nu) const { return -exponent_ * std::log(nu) - scale_ / nu; }

double InverseGammaFactor::log_density(double nu) const {
  if (!is_normalizable()) throw NotADistribution("inverse-gamma factor is not normalizable");
  const double a = shape();
  return a * std::log(scale_) - std::lgamma(a) + log_potential(nu);
}

double InverseGammaFactor::mean() const {
  if (!is_normalizable() || shape() <= 1.0) throw NotADistribution("inverse-gamma mean requires shape > 1");
  return scale_ / (shape() - 1.0);
}

double InverseGammaFactor::variance() const {
  if (!is_normalizable() || shape() <= 2.0) throw NotADistribution("inverse-gamma variance requires shape > 2");
  const double a = shape();
  return scale_ * scale_ / ((a - 1.0) * (a - 1.0) * (a - 2.0));
}

InverseGammaFactor ig_product(const InverseGammaFactor& a, const InverseGammaFactor& b) {
  return InverseGammaFactor::from_exponent(a.exponent() + b.exponent(), a.scale() + b.scale());
}

InverseGammaFactor ig_divide(const InverseGammaFactor& a, const InverseGammaFactor& b) {
  return InverseGammaFactor::from_exponent(a.exponent() - b.exponent(), a.scale() - b.scale());
}

double ig_expected_deviation(const InverseGammaFactor& belief) {
  if (!belief.is_normalizable()) throw NotADistribution("planar deviation belief is not normalizable");
  return belief.scale() / belief.shape();
}

double kl_inverse_gamma(const InverseGammaFactor& q, const InverseGammaFactor& p) {
  if (!q.is_normalizable() || !p.is_normalizable()) {
    throw NotADistribution("KL requires normalizable inverse-gamma factors");
  }
  // Same as KL between the gamma distributions of 1/nu (rate parameterization).
  const double a1 = q.shape(), b1 = q.scale(), a2 = p.shape(), b2 = p.scale();
  const double kl = (a1 - a2) * boost::math::digamma(a1) - std::lgamma(a1) + std::lgamma(a2) +
                    a2 * (std::log(b1) - std::log(b2)) + a1 * (b2 - b1) / b1;
  return std::max(0.0, kl);
}

// ---------------------------------------------------------------------------
// Unscented transform

GaussianMoment unscented_transform(const GaussianMoment& g, const VectorFunction& f, const UnscentedParams& params) {
  const Eigen::Index n = g.size();
  const double nd = static_cast<double>(n);
  const double lambda = params.spread * params.spread * (nd + params.secondary) - nd;
  const double c = nd + lambda;
  if (!(c > 0.0)) throw NotPSD("unscented scaling yields a non-positive spread");
  const Eigen::MatrixXd offsets = linalg::psd_sqrt(g.cov) * std::sqrt(c);

  const double wm0 = lambda / c;
  const double wc0 = wm0 + (1.0 - params.spread * params.spread + params.prior_knowledge);
  const double wi = 1.0 / (2.0 * c);

  const Eigen::VectorXd y0 = f(g.mean);
  const Eigen::Index m = y0.size();
  std::vector<Eigen::VectorXd> ys;
  ys.reserve(static_cast<std::size_t>(2 * n));
  for (Eigen::Index i = 0; i < n; ++i) {
    ys.push_back(f(g.mean + offsets.col(i)));
    ys.push_back(f(g.mean - offsets.col(i)));
  }
  // Mean relative to the central point: the weights sum to one, and this avoids
  // the cancellation between the large negative central weight and the rest.
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(m);
  for (const auto& y : ys) mean += wi * (y - y0);
  mean += y0;

  Eigen::MatrixXd cov = wc0 * (y0 - mean) * (y0 - mean).transpose();
  for (const auto& y : ys) cov += wi * (y - mean) * (y - mean).transpose();
  return GaussianMoment(mean, linalg::clamp_psd(symmetrized(cov)));
}

// ---------------------------------------------------------------------------
// linalg helpers

namespace linalg {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetrized(m));
  const double tol = 1e-10 * std::max(m.trace(), 1e-300);
  if (es.eigenvalues().minCoeff() < -tol) throw NotPSD("matrix square root of an indefinite matrix");
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal();
}

Eigen::MatrixXd clamp_psd(const Eigen::MatrixXd& m) {
  if (m.size() == 0) return m;
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() == Eigen::Success) return m;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0);
  return symmetrized(es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose());
}

namespace {

bool try_solve(const Eigen::MatrixXd& m, const Eigen::MatrixXd& rhs, Eigen::MatrixXd& out) {
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() == Eigen::Success) {
    out = llt.solve(rhs);
    return out.allFinite();
  }
  // Indefinite but invertible blocks are legal for improper factors.
  Eigen::LDLT<Eigen::MatrixXd> ldlt(m);
  if (ldlt.info() != Eigen::Success) return false;
  const Eigen::VectorXd d = ldlt.vectorD().cwiseAbs();
  if (d.size() == 0 || d.minCoeff() <= 1e-13 * d.maxCoeff()) return false;
  out = ldlt.solve(rhs);
  return out.allFinite();
}

}  // namespace

Eigen::MatrixXd symmetric_solve(const Eigen::MatrixXd& m, const Eigen::MatrixXd& rhs) {
  Eigen::MatrixXd out;
  if (try_solve(m, rhs, out)) return out;
  const double n = static_cast<double>(m.rows());
  double jitter = 1e-12 * std::abs(m.trace()) / n;
  if (jitter == 0.0) jitter = 1e-12;
  Eigen::MatrixXd reg = m;
  reg.diagonal().array() += jitter;
  if (try_solve(reg, rhs, out)) return out;
  throw SingularMarginalization("block is singular after regularization");
}

Eigen::VectorXd pseudo_solve(const Eigen::MatrixXd& m, const Eigen::VectorXd& rhs) {
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(m);
  cod.setThreshold(1e-12);
  return cod.solve(rhs);
}

}  // namespace linalg

}  // namespace stm
