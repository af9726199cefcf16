#include "stm/mapgraph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

namespace stm {

Mat3 PriorConfig::covariance() const {
  Mat3 m = Mat3::Constant(rho);
  m.diagonal().setOnes();
  return sigma2 * m;
}

void PriorConfig::validate() const {
  std::ostringstream os;
  if (!(rho >= 0.0 && rho < 1.0)) os << "rho must lie in [0, 1); ";
  if (!(sigma2 > 0.0)) os << "sigma2 must be positive; ";
  if (!(a_p > 0.0) || !(b_p > 0.0)) os << "deviation prior shape and scale must be positive; ";
  if (!os.str().empty()) throw ConfigError(os.str());
}

std::vector<std::vector<VertexId>> enforce_rip(const TriGrid& grid) {
  const auto& adj = grid.adjacency();
  std::map<VertexId, std::vector<std::size_t>> edges_by_vertex;
  for (std::size_t e = 0; e < adj.size(); ++e) {
    for (VertexId v : adj[e].shared) edges_by_vertex[v].push_back(e);
  }
  std::vector<std::vector<bool>> keep(adj.size(), std::vector<bool>(2, false));
  for (const auto& [v, edges] : edges_by_vertex) {
    // Kruskal with unit weights: edges taken in ascending (s, c) order.
    std::map<SurfelId, SurfelId> parent;
    auto find = [&](SurfelId x) {
      parent.try_emplace(x, x);
      while (parent[x] != x) {
        parent[x] = parent[parent[x]];
        x = parent[x];
      }
      return x;
    };
    for (std::size_t e : edges) {
      const SurfelId rs = find(adj[e].s), rc = find(adj[e].c);
      if (rs == rc) continue;
      parent[rs] = rc;
      keep[e][adj[e].shared[0] == v ? 0 : 1] = true;
    }
  }
  std::vector<std::vector<VertexId>> vars(adj.size());
  for (std::size_t e = 0; e < adj.size(); ++e) {
    for (int k = 0; k < 2; ++k) {
      if (keep[e][static_cast<std::size_t>(k)]) vars[e].push_back(adj[e].shared[static_cast<std::size_t>(k)]);
    }
  }
  return vars;
}

namespace {

int local_index(const SurfelInfo& info, VertexId v) {
  for (int k = 0; k < 3; ++k) {
    if (info.vertices[static_cast<std::size_t>(k)] == v) return k;
  }
  throw LabelMismatch("vertex is not part of the surfel");
}

void embed(HeightFactor& f, const SepsetMessage& m, const std::array<int, 2>& local, int n, double sign) {
  if (!m.sent) return;
  for (int i = 0; i < n; ++i) {
    const int li = local[static_cast<std::size_t>(i)];
    f.xi(li) += sign * m.xi(i);
    for (int j = 0; j < n; ++j) f.omega(li, local[static_cast<std::size_t>(j)]) += sign * m.omega(i, j);
  }
}

}  // namespace

SepsetMessage marginalize_heights(const HeightFactor& f, const std::array<int, 2>& local, int n) {
  SepsetMessage out;
  out.sent = true;
  out.xi = SmallVec::Zero(n);
  out.omega = SmallMat::Zero(n, n);
  if (n == 0) return out;
  std::array<int, 3> order{};
  int nd = 0;
  for (int k = 0; k < n; ++k) order[static_cast<std::size_t>(k)] = local[static_cast<std::size_t>(k)];
  for (int k = 0; k < 3; ++k) {
    if (std::find(local.begin(), local.begin() + n, k) == local.begin() + n) {
      order[static_cast<std::size_t>(n + nd)] = k;
      ++nd;
    }
  }
  using Dyn3 = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, 3, 3>;
  using DynV3 = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, 3, 1>;
  Dyn3 kk(n, n), kd(n, nd), dd(nd, nd);
  DynV3 xk(n), xd(nd);
  for (int i = 0; i < n; ++i) {
    xk(i) = f.xi(order[static_cast<std::size_t>(i)]);
    for (int j = 0; j < n; ++j) kk(i, j) = f.omega(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    for (int j = 0; j < nd; ++j) kd(i, j) = f.omega(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(n + j)]);
  }
  for (int i = 0; i < nd; ++i) {
    xd(i) = f.xi(order[static_cast<std::size_t>(n + i)]);
    for (int j = 0; j < nd; ++j) {
      dd(i, j) = f.omega(order[static_cast<std::size_t>(n + i)], order[static_cast<std::size_t>(n + j)]);
    }
  }
  if (nd == 0) {
    out.xi = xk;
    out.omega = kk;
    return out;
  }
  Eigen::LLT<Dyn3> llt(dd);
  Dyn3 gain;
  DynV3 shift;
  if (llt.info() == Eigen::Success) {
    gain = llt.solve(kd.transpose());
    shift = llt.solve(xd);
  } else {
    Eigen::MatrixXd rhs(nd, n + 1);
    rhs << Eigen::MatrixXd(kd.transpose()), Eigen::VectorXd(xd);
    const Eigen::MatrixXd sol = linalg::symmetric_solve(Eigen::MatrixXd(dd), rhs);
    gain = sol.leftCols(n);
    shift = sol.col(n);
  }
  const Dyn3 m = kk - kd * gain;
  out.omega = 0.5 * (m + m.transpose());
  out.xi = xk - kd * shift;
  return out;
}

STMMap::STMMap(TriGrid grid, PriorConfig prior, WindowConfig window, ConvergenceConfig convergence,
               SurfelModelConfig model)
    : grid_(std::move(grid)),
      prior_(prior),
      window_(window),
      convergence_(convergence),
      model_(model) {
  prior_.validate();
  if (window_.size < 0) throw ConfigError("window size must be nonnegative");
  SurfelState base;
  base.prior_h = HeightFactor::from_moments(Vec3::Zero(), prior_.covariance());
  base.prior_nu = InverseGammaFactor::from_shape_scale(prior_.a_p, prior_.b_p);
  base.refresh_belief();
  surfels_.assign(grid_.surfel_count(), base);
  converged_.assign(grid_.surfel_count(), 1);

  const auto vars = enforce_rip(grid_);
  const auto& adj = grid_.adjacency();
  sepsets_of_.assign(grid_.surfel_count(), {});
  for (std::size_t e = 0; e < adj.size(); ++e) {
    Sepset sep;
    sep.s = adj[e].s;
    sep.c = adj[e].c;
    sep.vars = vars[e];
    for (std::size_t k = 0; k < sep.vars.size(); ++k) {
      sep.local_s[k] = local_index(grid_.surfel(sep.s), sep.vars[k]);
      sep.local_c[k] = local_index(grid_.surfel(sep.c), sep.vars[k]);
    }
    sepsets_.push_back(std::move(sep));
    sepsets_of_[static_cast<std::size_t>(adj[e].s)].push_back(e);
    sepsets_of_[static_cast<std::size_t>(adj[e].c)].push_back(e);
  }
}

STMMap build_map(const TriGrid& grid, const PriorConfig& prior, const WindowConfig& window,
                 const ConvergenceConfig& convergence) {
  return STMMap(grid, prior, window, convergence);
}

HeightFactor STMMap::embed_incoming(SurfelId s) const {
  HeightFactor f;
  for (std::size_t e : sepsets_of_[static_cast<std::size_t>(s)]) {
    const Sepset& sep = sepsets_[e];
    if (sep.s == s) {
      embed(f, sep.to_s, sep.local_s, sep.size(), 1.0);
    } else {
      embed(f, sep.to_c, sep.local_c, sep.size(), 1.0);
    }
  }
  return f;
}

SepsetMessage STMMap::neighbor_out_message(std::size_t e, bool towards_c) const {
  const Sepset& sep = sepsets_.at(e);
  const SurfelId from = towards_c ? sep.s : sep.c;
  const auto& local = towards_c ? sep.local_s : sep.local_c;
  const SepsetMessage& reverse = towards_c ? sep.to_s : sep.to_c;
  HeightFactor cavity = surfels_[static_cast<std::size_t>(from)].belief_h;
  embed(cavity, reverse, local, sep.size(), -1.0);
  return marginalize_heights(cavity, local, sep.size());
}

double STMMap::message_divergence(const SurfelState& target, const std::array<int, 2>& local, int n,
                                  const SepsetMessage& fresh, const SepsetMessage& old) {
  if (!old.sent) return std::numeric_limits<double>::infinity();
  HeightFactor shifted = target.belief_h;
  embed(shifted, fresh, local, n, 1.0);
  embed(shifted, old, local, n, -1.0);
  if (auto kl = kl_height(shifted, target.belief_h)) return *kl;
  return parameter_difference(shifted, target.belief_h);
}

STMMap::Visit STMMap::visit(SurfelId s, std::vector<std::uint8_t>& active) {
  auto& st = surfels_[static_cast<std::size_t>(s)];
  st.neighbor_in = embed_incoming(s);
  st.refresh_belief();
  const VmpPassResult pass = vmp_pass(st, model_);
  metrics_.message_count += pass.updates;

  const double threshold = convergence_.kl_threshold;
  Visit result;
  result.converged = pass.max_divergence < threshold;

  for (std::size_t e : sepsets_of_[static_cast<std::size_t>(s)]) {
    Sepset& sep = sepsets_[e];
    if (sep.vars.empty()) continue;
    const bool towards_c = sep.s == s;
    SepsetMessage fresh = neighbor_out_message(e, towards_c);
    ++metrics_.message_count;
    const SurfelId target = towards_c ? sep.c : sep.s;
    SepsetMessage& stored = towards_c ? sep.to_c : sep.to_s;
    const double div = message_divergence(surfels_[static_cast<std::size_t>(target)],
                                          towards_c ? sep.local_c : sep.local_s, sep.size(), fresh, stored);
    // Hold back small changes: the stored message is the last one delivered, so
    // drift accumulates against it and is sent once it matters.
    if (div < threshold) continue;
    stored = std::move(fresh);
    active[static_cast<std::size_t>(target)] = 1;
  }
  return result;
}

ConvergenceReport STMMap::run_inference(std::span<const Measurement> batch) {
  ConvergenceReport report;
  const std::int64_t batch_index = ++metrics_.batches;
  const std::int64_t messages_before = metrics_.message_count;

  // Associate with elements and normalize.
  std::map<SurfelId, std::vector<Measurement>> groups;
  std::vector<double> gammas;
  for (const auto& m : batch) {
    const auto s = grid_.try_locate(m.mean(0), m.mean(1));
    if (!s) {
      ++report.measurements_skipped;
      continue;
    }
    const GaussianMoment local = normalize_to_element(grid_, *s, GaussianMoment(m.mean, m.cov));
    Measurement n;
    n.mean = local.mean;
    n.cov = local.cov;
    n.id = m.id;
    groups[*s].push_back(n);
    gammas.push_back(m.mean(2));
    ++report.measurements_used;
  }
  double fallback = model_.variance_floor;
  if (gammas.size() >= 2) {
    const double mean = std::accumulate(gammas.begin(), gammas.end(), 0.0) / static_cast<double>(gammas.size());
    double ss = 0.0;
    for (double g : gammas) ss += (g - mean) * (g - mean);
    fallback = std::max(fallback, ss / static_cast<double>(gammas.size()));
  }

  std::vector<std::uint8_t> active(surfels_.size(), 0);
  for (auto& [s, group] : groups) {
    add_measurements(surfels_[static_cast<std::size_t>(s)], group, batch_index, fallback, model_);
    active[static_cast<std::size_t>(s)] = 1;
  }

  int sweeps = 0;
  auto any_active = [&] { return std::any_of(active.begin(), active.end(), [](std::uint8_t a) { return a != 0; }); };
  while (any_active() && sweeps < convergence_.max_sweeps) {
    ++sweeps;
    for (std::size_t s = 0; s < surfels_.size(); ++s) {
      if (!active[s]) continue;
      active[s] = 0;
      if (!visit(static_cast<SurfelId>(s), active).converged) active[s] = 1;
    }
  }
  metrics_.sweep_count += sweeps;
  report.sweeps = sweeps;
  report.messages = metrics_.message_count - messages_before;
  report.converged = !any_active();
  report.surfel_converged.resize(active.size());
  for (std::size_t s = 0; s < active.size(); ++s) report.surfel_converged[s] = active[s] ? 0 : 1;
  converged_ = report.surfel_converged;
  return report;
}

void STMMap::apply_window() {
  const std::int64_t upcoming = metrics_.batches + 1;
  for (auto& st : surfels_) {
    std::vector<LikelihoodCluster> kept;
    std::size_t drop_before = 0;
    if (window_.mode == WindowMode::Measurements) {
      const auto w = static_cast<std::size_t>(window_.size);
      drop_before = st.clusters.size() > w ? st.clusters.size() - w : 0;
    }
    for (std::size_t i = 0; i < st.clusters.size(); ++i) {
      auto& c = st.clusters[i];
      const bool fold = window_.mode == WindowMode::Batches ? c.batch < upcoming - window_.size + 1 : i < drop_before;
      if (fold) {
        st.prior_h += c.out_h;
        st.prior_nu = ig_product(st.prior_nu, c.out_nu);
        ++st.folded_measurements;
      } else {
        kept.push_back(std::move(c));
      }
    }
    st.clusters = std::move(kept);
  }
}

ConvergenceReport STMMap::incremental_update(std::span<const Measurement> batch) {
  apply_window();
  return run_inference(batch);
}

std::optional<STMMap::Prediction> STMMap::predict(double alpha, double beta) const {
  const auto s = grid_.try_locate(alpha, beta);
  if (!s) return std::nullopt;
  const auto& st = surfels_[static_cast<std::size_t>(*s)];
  const auto mom = st.belief_h.moments();
  if (!mom) return std::nullopt;
  const Vec3 local = grid_.frame(*s).to_local(Vec3(alpha, beta, 0.0));
  const Vec3 g(1.0 - local(0) - local(1), local(0), local(1));
  Prediction p;
  p.mean = g.dot(mom->first);
  p.variance = g.dot(mom->second * g);
  p.deviation = st.belief_nu.is_normalizable() ? ig_expected_deviation(st.belief_nu) : 0.0;
  p.observed = st.measurement_count() > 0;
  return p;
}

GaussianCanonical STMMap::dense_height_joint() const {
  const auto n = static_cast<Eigen::Index>(grid_.vertex_count());
  Eigen::VectorXd xi = Eigen::VectorXd::Zero(n);
  Eigen::MatrixXd omega = Eigen::MatrixXd::Zero(n, n);
  for (std::size_t s = 0; s < surfels_.size(); ++s) {
    const auto& st = surfels_[s];
    HeightFactor f = st.prior_h;
    for (const auto& c : st.clusters) f += c.out_h;
    const auto& v = grid_.surfel(static_cast<SurfelId>(s)).vertices;
    for (int i = 0; i < 3; ++i) {
      xi(v[static_cast<std::size_t>(i)]) += f.xi(i);
      for (int j = 0; j < 3; ++j) omega(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]) += f.omega(i, j);
    }
  }
  std::vector<VarId> labels(static_cast<std::size_t>(n));
  std::iota(labels.begin(), labels.end(), VarId{0});
  return GaussianCanonical(std::move(labels), std::move(xi), std::move(omega));
}

MapQueryResult query_map(const STMMap& map) {
  const TriGrid& grid = map.grid();
  MapQueryResult r;
  r.surfels.resize(grid.surfel_count());
  std::vector<double> precision(grid.vertex_count(), 0.0), weighted(grid.vertex_count(), 0.0);
  for (std::size_t s = 0; s < grid.surfel_count(); ++s) {
    const auto& st = map.surfels()[s];
    auto& out = r.surfels[s];
    out.measurement_count = st.measurement_count();
    if (st.belief_nu.is_normalizable()) out.expected_deviation = ig_expected_deviation(st.belief_nu);
    const auto mom = st.belief_h.moments();
    if (!mom) continue;
    out.observed = true;
    out.mean = mom->first;
    out.std = mom->second.diagonal().cwiseMax(0.0).cwiseSqrt();
    const auto& v = grid.surfel(static_cast<SurfelId>(s)).vertices;
    for (int k = 0; k < 3; ++k) {
      const double var = mom->second(k, k);
      if (!(var > 0.0)) continue;
      const auto id = static_cast<std::size_t>(v[static_cast<std::size_t>(k)]);
      precision[id] += 1.0 / var;
      weighted[id] += out.mean(k) / var;
    }
  }
  r.vertices.resize(grid.vertex_count());
  for (std::size_t v = 0; v < grid.vertex_count(); ++v) {
    if (precision[v] > 0.0) {
      r.vertices[v].observed = true;
      r.vertices[v].mean = weighted[v] / precision[v];
      r.vertices[v].std = std::sqrt(1.0 / precision[v]);
    }
  }
  return r;
}

double sepset_marginal_kl(const STMMap& map, std::size_t e) {
  const Sepset& sep = map.sepsets().at(e);
  if (sep.vars.empty()) return 0.0;
  const auto ms = marginalize_heights(map.surfel(sep.s).belief_h, sep.local_s, sep.size());
  const auto mc = marginalize_heights(map.surfel(sep.c).belief_h, sep.local_c, sep.size());
  std::vector<VarId> labels(sep.vars.begin(), sep.vars.end());
  const GaussianCanonical gs(labels, Eigen::VectorXd(ms.xi), Eigen::MatrixXd(ms.omega));
  const GaussianCanonical gc(labels, Eigen::VectorXd(mc.xi), Eigen::MatrixXd(mc.omega));
  return kl_gaussian(gs, gc);
}

}  // namespace stm
