#pragma once

/**
 * \file minimizer.hpp
 * \brief Full nonlinear discrete energy (elastic + Yang-Mills + gauged bending),
 * its exact gradient, shape minimization and equilibrium residuals.
 *
 * Every energy term is a weighted sum of node densities that depend only on
 * stencil values at that node. The gradient is the transpose of the stencil
 * operators applied to the node derivatives, which are taken by forward
 * automatic differentiation of the density.
 */

#include <discgauge/elastic.hpp>

#include <Eigen/SparseCholesky>
#include <unsupported/Eigen/AutoDiff>

#include <deque>
#include <optional>
#include <functional>

namespace discgauge {

struct EnergyBreakdown
{
  double elastic{0.0};
  double yang_mills{0.0};
  double bending{0.0};
  double gaussian_bending{0.0};
  double total{0.0};
};

namespace detail {

/// Node jet layout: R, R_u, R_v, R_uu, R_uv, R_vv, then W_u, W_v, d_u W_u, d_v W_u, d_u W_v, d_v W_v.
inline constexpr int jet_size   = 36;
inline constexpr int jet_r_size = 18;

template <class S>
using Jet = std::array<S, jet_size>;

template <class S>
struct V3
{
  S x, y, z;
};

inline double value_of(double x) { return x; }
template <class D>
double value_of(const Eigen::AutoDiffScalar<D>& x) { return x.value(); }

template <class S>
V3<S> vec_at(const Jet<S>& j, int slot) {
  return {j[std::size_t(3 * slot)], j[std::size_t(3 * slot + 1)], j[std::size_t(3 * slot + 2)]};
}
template <class S>
V3<S> operator+(const V3<S>& a, const V3<S>& b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
template <class S>
S vdot(const V3<S>& a, const V3<S>& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
template <class S>
V3<S> vcross(const V3<S>& a, const V3<S>& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

/// Per-node reference data: inverse metric and sqrt(g0).
struct RefNode
{
  double iuu, iuv, ivv, guu, guv, gvv, sqrt_g;
};

/// (1/8) sqrt(g0) [lambda (trE)^2 + 2 mu E^a_b E^b_a] with E_ab = T_a.T_b - g0_ab and T_a = r_a + W_a x R.
template <class S>
S elastic_density(const V3<S>& R, const V3<S>& ru, const V3<S>& rv, const V3<S>& wu, const V3<S>& wv,
                  const RefNode& r, const MaterialParams& p) {
  const V3<S> tu = ru + vcross(wu, R), tv = rv + vcross(wv, R);
  const S euu = vdot(tu, tu) - r.guu, euv = vdot(tu, tv) - r.guv, evv = vdot(tv, tv) - r.gvv;
  // M = g0^{-1} E
  const S m00 = r.iuu * euu + r.iuv * euv, m01 = r.iuu * euv + r.iuv * evv;
  const S m10 = r.iuv * euu + r.ivv * euv, m11 = r.iuv * euv + r.ivv * evv;
  const S tr  = m00 + m11;
  const S tr2 = m00 * m00 + 2.0 * m01 * m10 + m11 * m11;
  return 0.125 * r.sqrt_g * (p.lambda * tr * tr + 2.0 * p.mu * tr2);
}

inline RefNode ref_node(const Mat2& g) {
  const double det = g.determinant();
  if (!(det > 0.0) || !(g(0, 0) > 0.0))
    throw DegenerateMetricError("reference metric is degenerate", -1);
  return {g(1, 1) / det, -g(0, 1) / det, g(0, 0) / det, g(0, 0), g(0, 1), g(1, 1), std::sqrt(det)};
}

/**
 * One corner of a grid cell. Its tangents are the one-sided differences along the two
 * cell edges that meet at node k, so every cell carries the four right triangles of
 * its two diagonal splits.
 */
struct Corner
{
  Eigen::Index k, ku, kv;
  double du, dv; ///< su / hu and sv / hv
  RefNode ref;
};

inline Vec3 row3(const VectorField& f, Eigen::Index k) { return f.row(k).transpose(); }

/// Corners of all cells of g with reference metrics taken from (e0, w0) by the same differences.
inline std::vector<Corner> cell_corners(const Embedding& e0, const GaugeField& w0) {
  const Grid& g = e0.grid;
  auto step     = [](int i, int s, int n, bool periodic) {
    const int t = i + s;
    if (t >= 0 && t < n)
      return t;
    return periodic ? (t + n) % n : -1;
  };
  std::vector<Corner> out;
  for (int i = 0; i < g.nu(); ++i)
    for (int j = 0; j < g.nv(); ++j)
      for (int su : {1, -1})
        for (int sv : {1, -1}) {
          const int iu = step(i, su, g.nu(), g.periodic_u()), jv = step(j, sv, g.nv(), g.periodic_v());
          if (iu < 0 || jv < 0 || (g.nu() < 3 && g.periodic_u()) || (g.nv() < 3 && g.periodic_v()))
            continue;
          Corner c{g.index(i, j), g.index(iu, j), g.index(i, jv), su / g.hu(), sv / g.hv(), {}};
          const VectorField& P = e0.positions;
          const Vec3 R         = row3(P, c.k);
          const Vec3 tu = c.du * (row3(P, c.ku) - R) + row3(w0[0], c.k).cross(R);
          const Vec3 tv = c.dv * (row3(P, c.kv) - R) + row3(w0[1], c.k).cross(R);
          Mat2 m;
          m << tu.dot(tu), tu.dot(tv), tu.dot(tv), tv.dot(tv);
          try {
            c.ref = ref_node(m);
          } catch (const DegenerateMetricError&) {
            throw DegenerateMetricError("reference metric is degenerate at a cell corner", c.k);
          }
          out.push_back(c);
        }
  return out;
}

/// Gauged Helfrich densities (kappa/2) sqrt(G) (trK)^2 and (kappa_G/2) sqrt(G) det(G^{-1} K).
template <class S>
std::pair<S, S> bending_density(const Jet<S>& j, const MaterialParams& p) {
  using std::sqrt;
  const V3<S> R = vec_at(j, 0), ru = vec_at(j, 1), rv = vec_at(j, 2);
  const V3<S> wu = vec_at(j, 6), wv = vec_at(j, 7);
  const V3<S> tu = ru + vcross(wu, R), tv = rv + vcross(wv, R);
  // nabla_a T_b = d_a d_b R + d_a W_b x R + W_b x d_a R + W_a x T_b
  const V3<S> nuu = vec_at(j, 3) + vcross(vec_at(j, 8), R) + vcross(wu, ru) + vcross(wu, tu);
  const V3<S> nuv = vec_at(j, 4) + vcross(vec_at(j, 10), R) + vcross(wv, ru) + vcross(wu, tv);
  const V3<S> nvu = vec_at(j, 4) + vcross(vec_at(j, 9), R) + vcross(wu, rv) + vcross(wv, tu);
  const V3<S> nvv = vec_at(j, 5) + vcross(vec_at(j, 11), R) + vcross(wv, rv) + vcross(wv, tv);
  const V3<S> n   = vcross(tu, tv);
  const S area    = sqrt(vdot(n, n));
  if (!(value_of(area) > 0.0))
    throw DegenerateMetricError("bending: gauged tangents are parallel", -1);
  const S kuu = vdot(n, nuu) / area, kuv = 0.5 * (vdot(n, nuv) + vdot(n, nvu)) / area, kvv = vdot(n, nvv) / area;
  const S guu = vdot(tu, tu), guv = vdot(tu, tv), gvv = vdot(tv, tv);
  const S det = area * area;
  const S trk = (gvv * kuu - 2.0 * guv * kuv + guu * kvv) / det;
  return {0.5 * p.kappa * area * trk * trk, 0.5 * p.kappa_g * (kuu * kvv - kuv * kuv) / area};
}

/// (s/2) |F_12|^2 / sqrt(g0).
template <class S>
S yang_mills_density(const Jet<S>& j, const RefNode& r, const MaterialParams& p) {
  const V3<S> wu = vec_at(j, 6), wv = vec_at(j, 7);
  const V3<S> f  = vec_at(j, 10) + V3<S>{-j[27], -j[28], -j[29]} + vcross(wu, wv);
  return 0.5 * p.s * vdot(f, f) / r.sqrt_g;
}

/// Stencil values of (R, W) at every node, one column block per jet slot.
struct JetFields
{
  std::array<VectorField, 12> slot;

  Jet<double> at(Eigen::Index k) const {
    Jet<double> j{};
    for (int s = 0; s < 12; ++s)
      for (int c = 0; c < 3; ++c)
        j[std::size_t(3 * s + c)] = slot[std::size_t(s)](k, c);
    return j;
  }
};

inline JetFields jets(const Embedding& e, const GaugeField& w) {
  const auto st        = stencils_for(e.grid);
  const VectorField& R = e.positions;
  return {{R, st->du * R, st->dv * R, st->duu * R, st->duv * R, st->dvv * R, w[0], w[1], st->du * w[0], st->dv * w[0],
           st->du * w[1], st->dv * w[1]}};
}

inline std::vector<RefNode> ref_nodes(const MetricField& m) {
  std::vector<RefNode> out(std::size_t(m.grid.size()));
  for (Eigen::Index k = 0; k < m.grid.size(); ++k)
    out[std::size_t(k)] = {m.iuu[k], m.iuv[k], m.ivv[k], m.guu[k], m.guv[k], m.gvv[k], m.sqrt_g[k]};
  return out;
}

/// Maps per-node derivatives with respect to the jet slots back to nodal gradients.
inline VectorField pull_back(const Stencils& st, const std::array<VectorField, 12>& d, int first, int last) {
  std::array<const SparseMatrix*, 12> op{nullptr, &st.du, &st.dv, &st.duu, &st.duv, &st.dvv,
                                         nullptr, nullptr, &st.du, &st.dv, &st.du, &st.dv};
  VectorField out = VectorField::Zero(d[0].rows(), 3);
  for (int s = first; s < last; ++s) {
    const auto& ds = d[std::size_t(s)];
    if (op[std::size_t(s)])
      out += op[std::size_t(s)]->transpose() * ds;
    else
      out += ds;
  }
  return out;
}

} // namespace detail

/// Which energy pieces contribute to a gradient.
enum class EnergyPart
{
  all,
  bending
};

/**
 * \brief Discrete total energy with W and the reference held as given.
 *
 * elastic: (1/8) int sqrt(g0) [lambda (trE)^2 + 2 mu trE^2], summed over cell corners
 * with one-sided edge tangents and g0 taken from (e0, w0) the same way;
 * yang_mills: (s/4) int sqrt(g0) F^ab . F_ab skipping the cores of w.singular;
 * bending, gaussian_bending: the Helfrich terms with d_a replaced by nabla_a, on the
 * gauged metric T_a . T_b, at nodes.
 */
class EnergyModel
{
public:
  EnergyModel(const Embedding& e0, const GaugeField& w0, const MaterialParams& p, const YangMillsOptions& ym = {})
      : grid_{e0.grid},
        ref_{reference_metric_with_defects(e0, w0)},
        nodes_{detail::ref_nodes(ref_)},
        corners_{detail::cell_corners(e0, w0)},
        params_{p},
        ym_{ym} {
    require_same_grid(e0.grid, w0.grid, "EnergyModel");
    p.validate();
    for (Eigen::Index k = 0; k < grid_.size(); ++k)
      if (!(ref_.sqrt_g[k] > 0.0))
        throw DegenerateMetricError("reference metric is degenerate", k);
  }

  const Grid& grid() const { return grid_; }
  const MetricField& reference_metric() const { return ref_; }
  const MaterialParams& params() const { return params_; }
  const std::vector<detail::Corner>& corners() const { return corners_; }
  /// Quadrature weight of one cell corner.
  double corner_weight() const { return 0.25 * grid_.hu() * grid_.hv(); }

  EnergyBreakdown energy(const Embedding& e, const GaugeField& w) const {
    check(e, w);
    EnergyBreakdown out;
    const VectorField& P = e.positions;
    for (const auto& c : corners_) {
      using V = detail::V3<double>;
      auto v  = [](const VectorField& f, Eigen::Index k) { return V{f(k, 0), f(k, 1), f(k, 2)}; };
      const V R = v(P, c.k), pu = v(P, c.ku), pv = v(P, c.kv);
      const V ru{c.du * (pu.x - R.x), c.du * (pu.y - R.y), c.du * (pu.z - R.z)};
      const V rv{c.dv * (pv.x - R.x), c.dv * (pv.y - R.y), c.dv * (pv.z - R.z)};
      out.elastic += detail::elastic_density(R, ru, rv, v(w[0], c.k), v(w[1], c.k), c.ref, params_);
    }
    out.elastic *= corner_weight();
    out.yang_mills = yang_mills_energy(field_strength(w), ref_, params_.s, w.singular, ym_).energy;
    const auto J   = detail::jets(e, w);
    for (Eigen::Index k = 0; k < grid_.size(); ++k) {
      auto [b, gb] = detail::bending_density(J.at(k), params_);
      out.bending += grid_.weight(k) * b;
      out.gaussian_bending += grid_.weight(k) * gb;
    }
    out.total = out.elastic + out.yang_mills + out.bending + out.gaussian_bending;
    return out;
  }

  /// dE/dR per node.
  VectorField gradient(const Embedding& e, const GaugeField& w, EnergyPart part = EnergyPart::all) const {
    const auto d    = slot_derivatives<detail::jet_r_size>(e, w, part);
    VectorField out = detail::pull_back(*stencils_for(grid_), d, 0, 6);
    if (part == EnergyPart::all)
      elastic_gradient(e, w, &out, nullptr);
    return out;
  }

  /// dE/dW_a per node, a = u, v.
  std::array<VectorField, 2> gauge_gradient(const Embedding& e, const GaugeField& w,
                                            EnergyPart part = EnergyPart::all) const {
    const auto st = stencils_for(grid_);
    const auto d  = slot_derivatives<detail::jet_size>(e, w, part);
    std::array<VectorField, 2> out;
    out[0] = d[6] + st->du.transpose() * d[8] + st->dv.transpose() * d[9];
    out[1] = d[7] + st->du.transpose() * d[10] + st->dv.transpose() * d[11];
    if (part == EnergyPart::all)
      elastic_gradient(e, w, nullptr, &out);
    return out;
  }

private:
  void check(const Embedding& e, const GaugeField& w) const {
    require_same_grid(e.grid, grid_, "EnergyModel");
    require_same_grid(w.grid, grid_, "EnergyModel");
  }

  /// Adds the elastic part of dE/dR and dE/dW to whichever outputs are given.
  void elastic_gradient(const Embedding& e, const GaugeField& w, VectorField* gr, std::array<VectorField, 2>* gw) const {
    using AD = Eigen::AutoDiffScalar<Eigen::Matrix<double, 15, 1>>;
    using V  = detail::V3<AD>;
    const VectorField& P = e.positions;
    const double cw      = corner_weight();
    for (const auto& c : corners_) {
      auto seed = [](const Vec3& x, int first) {
        return V{AD(x[0], 15, first), AD(x[1], 15, first + 1), AD(x[2], 15, first + 2)};
      };
      const Vec3 R = detail::row3(P, c.k);
      const Vec3 ru = c.du * (detail::row3(P, c.ku) - R), rv = c.dv * (detail::row3(P, c.kv) - R);
      const AD rho = detail::elastic_density(seed(R, 0), seed(ru, 3), seed(rv, 6), seed(detail::row3(w[0], c.k), 9),
                                             seed(detail::row3(w[1], c.k), 12), c.ref, params_);
      const auto& d = rho.derivatives();
      const Vec3 dR = cw * d.segment<3>(0), du = cw * d.segment<3>(3), dv = cw * d.segment<3>(6);
      if (gr) {
        gr->row(c.k) += (dR - c.du * du - c.dv * dv).transpose();
        gr->row(c.ku) += (c.du * du).transpose();
        gr->row(c.kv) += (c.dv * dv).transpose();
      }
      if (gw) {
        (*gw)[0].row(c.k) += cw * d.segment<3>(9).transpose();
        (*gw)[1].row(c.k) += cw * d.segment<3>(12).transpose();
      }
    }
  }

  /// Node derivatives of the bending (and Yang-Mills) densities with respect to the jet slots.
  template <int N>
  std::array<VectorField, 12> slot_derivatives(const Embedding& e, const GaugeField& w, EnergyPart part) const {
    check(e, w);
    using AD = Eigen::AutoDiffScalar<Eigen::Matrix<double, N, 1>>;
    const auto J = detail::jets(e, w);
    std::vector<char> mask(std::size_t(grid_.size()), 0);
    if (!w.singular.empty() && ym_.core_radius != 0.0)
      mask = core_mask(ref_, w.singular, ym_.core_radius);
    const bool ym = part == EnergyPart::all && N > detail::jet_r_size;
    std::array<VectorField, 12> d;
    for (auto& s : d)
      s = VectorField::Zero(grid_.size(), 3);
    for (Eigen::Index k = 0; k < grid_.size(); ++k) {
      const auto x = J.at(k);
      detail::Jet<AD> a;
      for (int i = 0; i < detail::jet_size; ++i)
        a[std::size_t(i)] = i < N ? AD(x[std::size_t(i)], N, i) : AD(x[std::size_t(i)]);
      auto [b, gb] = detail::bending_density(a, params_);
      AD rho       = b + gb;
      if (ym && !mask[std::size_t(k)])
        rho += detail::yang_mills_density(a, nodes_[std::size_t(k)], params_);
      const double wk = grid_.weight(k);
      const auto& dr  = rho.derivatives();
      for (int i = 0; i < N; ++i)
        d[std::size_t(i / 3)](k, i % 3) = wk * dr[i];
    }
    return d;
  }

  Grid grid_;
  MetricField ref_;
  std::vector<detail::RefNode> nodes_;
  std::vector<detail::Corner> corners_;
  MaterialParams params_;
  YangMillsOptions ym_;
};

inline EnergyBreakdown total_energy(const Embedding& e, const GaugeField& w, const Embedding& e0, const GaugeField& w0,
                                    const MaterialParams& p) {
  return EnergyModel(e0, w0, p).energy(e, w);
}

inline VectorField energy_gradient(const Embedding& e, const GaugeField& w, const Embedding& e0, const GaugeField& w0,
                                   const MaterialParams& p) {
  return EnergyModel(e0, w0, p).gradient(e, w);
}

/// Euler-Lagrange residuals of the discrete energy, written in stress form.
struct EquilibriumResidual
{
  Grid grid;
  /// (1/sqrt g) d_b (sqrt g sigma^b) + W_b x sigma^b + J.
  VectorField force;
  /// (1/sqrt g) d_a (sqrt g F^ab) + W_a x F^ab + (1/s) (sigma^b x R + I^b), b = u, v.
  std::array<VectorField, 2> gauge;
};

/**
 * \brief Stress-form residuals of the discrete energy.
 *
 * sigma^b = (1/2) T_a rho^ab is formed on every cell corner and its divergence is the
 * difference of sqrt(g) sigma^b across the corner's edges. J = -(1/sqrt g) dE_bend/dR
 * and I^b = -(1/sqrt g) dE_bend/dW_b come from the discrete bending energy. Nodal
 * sqrt(g) is that of the reference metric times the node weight.
 */
inline EquilibriumResidual equilibrium_residual(const EnergyModel& model, const Embedding& e, const GaugeField& w) {
  const Grid& g        = model.grid();
  const MetricField& m = model.reference_metric();
  const auto& p        = model.params();
  const auto st        = stencils_for(g);
  const VectorField& P = e.positions;
  const ScalarField ws = g.weights().cwiseProduct(m.sqrt_g);
  auto scaled          = [](const VectorField& f, const ScalarField& c) {
    return VectorField(f.array().colwise() * c.array());
  };

  // weighted divergence of sqrt(g) sigma^b and the sigma^b x R sums, corner by corner
  VectorField div = VectorField::Zero(g.size(), 3);
  std::array<VectorField, 2> sxr{VectorField::Zero(g.size(), 3), VectorField::Zero(g.size(), 3)};
  for (const auto& c : model.corners()) {
    const Vec3 R = detail::row3(P, c.k);
    const std::array<Vec3, 2> W{detail::row3(w[0], c.k), detail::row3(w[1], c.k)};
    const std::array<Vec3, 2> T{c.du * (detail::row3(P, c.ku) - R) + W[0].cross(R),
                                c.dv * (detail::row3(P, c.kv) - R) + W[1].cross(R)};
    Mat2 g0, E;
    g0 << c.ref.guu, c.ref.guv, c.ref.guv, c.ref.gvv;
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b)
        E(a, b) = T[std::size_t(a)].dot(T[std::size_t(b)]) - g0(a, b);
    const Mat2 gi  = g0.inverse();
    const Mat2 rho = p.lambda * (gi * E).trace() * gi + 2.0 * p.mu * gi * E * gi;
    std::array<Vec3, 2> S;
    for (int b = 0; b < 2; ++b)
      S[std::size_t(b)] = model.corner_weight() * c.ref.sqrt_g * 0.5 * (T[0] * rho(0, b) + T[1] * rho(1, b));
    div.row(c.k) += (c.du * S[0] + c.dv * S[1] + W[0].cross(S[0]) + W[1].cross(S[1])).transpose();
    div.row(c.ku) -= (c.du * S[0]).transpose();
    div.row(c.kv) -= (c.dv * S[1]).transpose();
    for (int b = 0; b < 2; ++b)
      sxr[std::size_t(b)].row(c.k) += S[std::size_t(b)].cross(R).transpose();
  }
  // the corner sums above are (w sqrt g) times the continuum expressions
  const ScalarField inv_ws   = ws.cwiseInverse();
  const ScalarField inv_sqrt = m.sqrt_g.cwiseInverse();

  EquilibriumResidual out{g, {}, {}};
  const VectorField J = -scaled(model.gradient(e, w, EnergyPart::bending), inv_ws);
  out.force           = scaled(div, inv_ws) + J;

  const auto I          = model.gauge_gradient(e, w, EnergyPart::bending);
  const VectorField f12 = field_strength(w).f12;
  const VectorField fsg = scaled(f12, inv_sqrt);             // sqrt(g) F^uv
  const VectorField fup = scaled(f12, inv_sqrt.cwiseAbs2()); // F^uv
  // F^vu = -F^uv
  out.gauge[0] = -scaled(st->dv * fsg, inv_sqrt) - cross(w[1], fup) + scaled(sxr[0] - I[0], inv_ws) / p.s;
  out.gauge[1] = scaled(st->du * fsg, inv_sqrt) + cross(w[0], fup) + scaled(sxr[1] - I[1], inv_ws) / p.s;
  return out;
}

inline EquilibriumResidual equilibrium_residual(const Embedding& e, const GaugeField& w, const Embedding& e0,
                                                const GaugeField& w0, const MaterialParams& p) {
  return equilibrium_residual(EnergyModel(e0, w0, p), e, w);
}

/// Largest nodal max-norm over nodes at least `margin` steps from every open edge.
namespace detail {
inline bool interior_node(const Grid& g, Eigen::Index k, int margin) {
  auto [i, j] = g.ij(k);
  const bool iu = g.periodic_u() || (i >= margin && i < g.nu() - margin);
  const bool iv = g.periodic_v() || (j >= margin && j < g.nv() - margin);
  return iu && iv;
}
} // namespace detail

/// Largest component of f over nodes at least `margin` rows from an open edge.
inline double interior_max(const Grid& g, const VectorField& f, int margin = 3) {
  double out = 0.0;
  for (Eigen::Index k = 0; k < g.size(); ++k)
    if (detail::interior_node(g, k, margin))
      out = std::max(out, f.row(k).cwiseAbs().maxCoeff());
  return out;
}

/**
 * RMS of the per-component values of f over the same interior nodes, weighted by
 * w sqrt(g0). This is the norm minimize_shape's tolerance uses.
 */
inline double interior_rms(const EnergyModel& model, const VectorField& f, int margin = 3) {
  const Grid& g = model.grid();
  double num = 0.0, den = 0.0;
  for (Eigen::Index k = 0; k < g.size(); ++k)
    if (detail::interior_node(g, k, margin)) {
      const double m = g.weight(k) * model.reference_metric().sqrt_g[k];
      num += m * f.row(k).squaredNorm();
      den += 3.0 * m;
    }
  return den > 0.0 ? std::sqrt(num / den) : 0.0;
}

enum class ShapeBoundary
{
  free,
  pinned
};

inline std::string to_string(ShapeBoundary b) { return b == ShapeBoundary::free ? "free" : "pinned"; }

inline ShapeBoundary shape_boundary_from_string(const std::string& s) {
  if (s == "free")
    return ShapeBoundary::free;
  if (s == "pinned")
    return ShapeBoundary::pinned;
  throw Error("unknown shape boundary '" + s + "'");
}

struct MinimizeOptions
{
  /**
   * Target for the mass-weighted RMS of the force density |dE/dR| / (w sqrt g0) over the
   * unknowns, after removing the reaction of the orientation constraint.
   */
  double tol{1e-6};
  int max_iter{5000};
  int memory{12};
  double armijo{1e-4};
  int max_backtracks{50};
  ShapeBoundary boundary{ShapeBoundary::free};
  /// Descend in (R, W) jointly instead of holding W fixed.
  bool relax_gauge{false};
  /**
   * With free edges, hold the mean slopes of the height (int dz/du, int dz/dv) at their
   * initial values. This fixes the tilt of the surface against the gauge axis, which a
   * fixed W does not leave invariant.
   */
  bool lock_orientation{true};
  /// Accepted steps between rebuilds of the model Hessian used as preconditioner.
  int precondition_every{20};
  int checkpoint_every{0};
  std::function<void(int, const Embedding&, const GaugeField&)> on_checkpoint{};
  std::function<void(int, double, double)> on_iteration{};
};

struct MinimizeReport
{
  Embedding state;
  GaugeField gauge;
  EnergyBreakdown energy{};
  std::vector<double> energy_history{};
  double gradient_norm{0.0};
  int iterations{0};
  bool converged{false};
};

namespace detail {

/**
 * Unknown layout of the descent. Component c of R is base_c + S_c x_c, where S_c selects
 * the free rows; tied rows share the unknown of their master. W rows follow when relaxed.
 * With a free boundary and lock_orientation the mean slope of the height is held fixed.
 */
class DescentLayout
{
public:
  DescentLayout(const Grid& g, const MinimizeOptions& opt, const VectorField& r0, const GaugeField& w0)
      : n_{g.size()},
        base_{r0},
        wbase_{w0.w} {
    std::vector<Eigen::Index> master(static_cast<std::size_t>(n_));
    for (Eigen::Index k = 0; k < n_; ++k)
      master[std::size_t(k)] = (opt.boundary == ShapeBoundary::free || !g.on_open_boundary(k)) ? k : -1;
    for (int c = 0; c < 3; ++c)
      select_[std::size_t(c)] = selector(master);
    if (opt.lock_orientation && opt.boundary == ShapeBoundary::free) {
      // mean slopes of the height: int dz/du and int dz/dv against the nodal weights
      const auto st           = stencils_for(g);
      const ScalarField w     = g.weights();
      const SparseMatrix& Sz  = select_[2];
      const Eigen::Index zoff = block(0) + block(1);
      tilt_                   = Eigen::MatrixXd::Zero(size_without_gauge(), 2);
      tilt_.block(zoff, 0, Sz.cols(), 1) = Sz.transpose() * (st->du.transpose() * w);
      tilt_.block(zoff, 1, Sz.cols(), 1) = Sz.transpose() * (st->dv.transpose() * w);
    }
    if (opt.relax_gauge) {
      std::vector<Eigen::Index> wm(static_cast<std::size_t>(n_));
      for (Eigen::Index k = 0; k < n_; ++k)
        wm[std::size_t(k)] = k;
      for (const auto& sn : w0.singular)
        wm[std::size_t(sn.node)] = -1;
      wselect_ = selector(wm);
    } else {
      wselect_ = SparseMatrix(n_, 0);
    }
    for (int c = 0; c < 3; ++c)
      base_.col(c) = base_.col(c).cwiseProduct(unused_rows(select_[std::size_t(c)]));
    const ScalarField wkeep = unused_rows(wselect_);
    for (auto& wa : wbase_)
      wa = wa.array().colwise() * wkeep.array();
  }

  Eigen::Index block(int c) const { return select_[std::size_t(c)].cols(); }
  Eigen::Index gauge_block() const { return wselect_.cols(); }
  Eigen::Index size() const { return size_without_gauge() + 6 * gauge_block(); }
  /// Columns c of the linear constraints c^T x = const held during the descent (possibly none).
  Eigen::MatrixXd constraints() const {
    Eigen::MatrixXd C = Eigen::MatrixXd::Zero(size(), tilt_.cols());
    C.topRows(tilt_.rows()) = tilt_;
    return C;
  }
  const SparseMatrix& selection(int c) const { return select_[std::size_t(c)]; }
  const SparseMatrix& gauge_selection() const { return wselect_; }

  /// Reduced vector from per-row values: least-squares free values, or S^T f for gradients.
  Eigen::VectorXd reduce(const VectorField& r, const std::array<VectorField, 2>* w, bool transpose) const {
    Eigen::VectorXd x(size());
    Eigen::Index p = 0;
    auto put = [&](const SparseMatrix& S, const ScalarField& f) {
      ScalarField y = S.transpose() * f;
      if (!transpose) {
        const ScalarField cnt = S.transpose() * ScalarField::Ones(S.rows());
        y                     = y.cwiseQuotient(cnt);
      }
      x.segment(p, y.size()) = y;
      p += y.size();
    };
    for (int c = 0; c < 3; ++c)
      put(select_[std::size_t(c)], r.col(c));
    if (w && gauge_block() > 0)
      for (int a = 0; a < 2; ++a)
        for (int c = 0; c < 3; ++c)
          put(wselect_, (*w)[std::size_t(a)].col(c));
    return x;
  }

  void expand(const Eigen::VectorXd& x, VectorField& r, GaugeField& w) const {
    Eigen::Index p = 0;
    for (int c = 0; c < 3; ++c) {
      r.col(c) = base_.col(c) + select_[std::size_t(c)] * x.segment(p, block(c));
      p += block(c);
    }
    if (gauge_block() > 0)
      for (int a = 0; a < 2; ++a)
        for (int c = 0; c < 3; ++c) {
          w[a].col(c) = wbase_[std::size_t(a)].col(c) + wselect_ * x.segment(p, gauge_block());
          p += gauge_block();
        }
  }

private:
  /// master[k] = k for a free row, another row index for a tied row, -1 for a fixed row.
  SparseMatrix selector(const std::vector<Eigen::Index>& master) const {
    std::vector<Eigen::Index> col(std::size_t(n_), -1);
    Eigen::Index m = 0;
    for (Eigen::Index k = 0; k < n_; ++k)
      if (master[std::size_t(k)] == k)
        col[std::size_t(k)] = m++;
    std::vector<Triplet> t;
    for (Eigen::Index k = 0; k < n_; ++k) {
      const Eigen::Index mk = master[std::size_t(k)];
      if (mk >= 0 && col[std::size_t(mk)] >= 0)
        t.emplace_back(k, col[std::size_t(mk)], 1.0);
    }
    SparseMatrix S(n_, m);
    S.setFromTriplets(t.begin(), t.end());
    return S;
  }

  /// 1 on rows S does not drive, 0 elsewhere.
  static ScalarField unused_rows(const SparseMatrix& S) {
    const ScalarField used = S * ScalarField::Ones(S.cols());
    return (used.array() == 0.0).cast<double>().matrix();
  }

  Eigen::Index size_without_gauge() const { return block(0) + block(1) + block(2); }

  Eigen::Index n_;
  std::array<SparseMatrix, 3> select_;
  Eigen::MatrixXd tilt_;
  SparseMatrix wselect_;
  VectorField base_;
  std::array<VectorField, 2> wbase_;
};

/**
 * SPD model Hessian used as the L-BFGS initial matrix: the Gauss-Newton part of the
 * corner stretching energy at the current shape, the small-slope bending form on each
 * component, and a small mass shift. The W block, when relaxed, is s times the Laplacian.
 */
class DescentPreconditioner
{
public:
  DescentPreconditioner(const EnergyModel& model, const DescentLayout& lay, const VectorField& R, const GaugeField& w) {
    const Grid& g          = model.grid();
    const Eigen::Index n   = g.size();
    const auto st          = stencils_for(g);
    const auto& p          = model.params();
    const ScalarField mass = g.weights().cwiseProduct(model.reference_metric().sqrt_g);
    const SparseMatrix M   = SparseMatrix(mass.asDiagonal());
    const SparseMatrix lap = st->duu + st->dvv;
    // small-slope bending: (kappa/2 + kappa_g/4) (lap f)^2 - (kappa_g/4) |Hess f|^2
    const SparseMatrix hess = SparseMatrix(st->duu.transpose() * M * st->duu) +
                              SparseMatrix(st->dvv.transpose() * M * st->dvv) +
                              2.0 * SparseMatrix(st->duv.transpose() * M * st->duv);
    const SparseMatrix B = std::max(p.kappa + 0.5 * p.kappa_g, 0.0) * SparseMatrix(lap.transpose() * M * lap) +
                           std::max(-0.5 * p.kappa_g, 0.0) * hess;
    const double c_in      = p.lambda + 2.0 * p.mu;
    const double shift     = 1e-6 * c_in / mass.sum();

    std::vector<Triplet> t;
    for (int c = 0; c < 3; ++c)
      for (int o = 0; o < B.outerSize(); ++o)
        for (SparseMatrix::InnerIterator it(B, o); it; ++it)
          t.emplace_back(c * n + it.row(), c * n + it.col(), it.value());
    for (int c = 0; c < 3; ++c)
      for (Eigen::Index k = 0; k < n; ++k)
        t.emplace_back(c * n + k, c * n + k, shift * mass[k]);
    stretching(model, R, w, t);
    SparseMatrix H(3 * n, 3 * n);
    H.setFromTriplets(t.begin(), t.end());

    std::vector<Triplet> st3;
    Eigen::Index col = 0;
    for (int c = 0; c < 3; ++c) {
      const SparseMatrix& S = lay.selection(c);
      for (int o = 0; o < S.outerSize(); ++o)
        for (SparseMatrix::InnerIterator it(S, o); it; ++it)
          st3.emplace_back(c * n + it.row(), col + it.col(), 1.0);
      col += S.cols();
    }
    SparseMatrix S3(3 * n, col);
    S3.setFromTriplets(st3.begin(), st3.end());
    nr_ = col;
    shape_.compute(SparseMatrix(S3.transpose() * H * S3));
    if (shape_.info() != Eigen::Success)
      throw SolverError("minimizer: preconditioner factorization failed", 0.0);
    nw_ = lay.gauge_block();
    if (nw_ > 0) {
      const SparseMatrix L = SparseMatrix(st->du.transpose() * M * st->du) + SparseMatrix(st->dv.transpose() * M * st->dv);
      const SparseMatrix& S = lay.gauge_selection();
      gauge_.compute(SparseMatrix(S.transpose() * (p.s * L + (shift * p.s / c_in) * M) * S));
      if (gauge_.info() != Eigen::Success)
        throw SolverError("minimizer: gauge preconditioner factorization failed", 0.0);
    }
    const Eigen::MatrixXd C = lay.constraints();
    if (C.cols() > 0) {
      Z_.resize(C.rows(), C.cols());
      for (Eigen::Index j = 0; j < C.cols(); ++j)
        Z_.col(j) = unconstrained(C.col(j));
      K_.compute(C.transpose() * Z_);
    }
  }

  /// Applies the inverse restricted to the constraint subspace of the layout.
  Eigen::VectorXd solve(const Eigen::VectorXd& q) const {
    Eigen::VectorXd r = unconstrained(q);
    if (Z_.cols() > 0)
      r -= Z_ * K_.solve(Z_.transpose() * q);
    return r;
  }

private:
  Eigen::VectorXd unconstrained(const Eigen::VectorXd& q) const {
    Eigen::VectorXd r(q.size());
    r.segment(0, nr_) = shape_.solve(q.segment(0, nr_));
    for (Eigen::Index b = 0, p = nr_; b < 6 && nw_ > 0; ++b, p += nw_)
      r.segment(p, nw_) = gauge_.solve(q.segment(p, nw_));
    return r;
  }

  /// Adds cw J^T C J per corner, J = dE_ab / d(R_k, R_ku, R_kv), C the Hessian of the density in E.
  static void stretching(const EnergyModel& model, const VectorField& R, const GaugeField& w, std::vector<Triplet>& t) {
    const auto& p        = model.params();
    const Eigen::Index n = model.grid().size();
    for (const auto& c : model.corners()) {
      const Vec3 r  = row3(R, c.k);
      const Vec3 wu = row3(w[0], c.k), wv = row3(w[1], c.k);
      const Vec3 tu = c.du * (row3(R, c.ku) - r) + wu.cross(r);
      const Vec3 tv = c.dv * (row3(R, c.kv) - r) + wv.cross(r);
      auto skew     = [](const Vec3& a) {
        Mat3 m;
        m << 0, -a.z(), a.y(), a.z(), 0, -a.x(), -a.y(), a.x(), 0;
        return m;
      };
      // dT_u / d(R_k, R_ku, R_kv) and likewise for T_v
      Eigen::Matrix<double, 3, 9> Au = Eigen::Matrix<double, 3, 9>::Zero(), Av = Au;
      Au.block<3, 3>(0, 0) = -c.du * Mat3::Identity() + skew(wu);
      Au.block<3, 3>(0, 3) = c.du * Mat3::Identity();
      Av.block<3, 3>(0, 0) = -c.dv * Mat3::Identity() + skew(wv);
      Av.block<3, 3>(0, 6) = c.dv * Mat3::Identity();
      Eigen::Matrix<double, 3, 9> J;
      J.row(0) = 2.0 * tu.transpose() * Au;
      J.row(1) = tu.transpose() * Av + tv.transpose() * Au;
      J.row(2) = 2.0 * tv.transpose() * Av;
      const Mat3 C = density_hessian(c.ref, p);
      const Eigen::Matrix<double, 9, 9> h = model.corner_weight() * J.transpose() * C * J;
      const std::array<Eigen::Index, 3> nodes{c.k, c.ku, c.kv};
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b)
          for (int ca = 0; ca < 3; ++ca)
            for (int cb = 0; cb < 3; ++cb)
              t.emplace_back(ca * n + nodes[std::size_t(a)], cb * n + nodes[std::size_t(b)], h(3 * a + ca, 3 * b + cb));
    }
  }

  /// Hessian of the elastic density in (E_uu, E_uv, E_vv); the density is quadratic in E.
  static Mat3 density_hessian(const RefNode& r, const MaterialParams& p) {
    auto q = [&](const Vec3& e) {
      const double m00 = r.iuu * e[0] + r.iuv * e[1], m01 = r.iuu * e[1] + r.iuv * e[2];
      const double m10 = r.iuv * e[0] + r.ivv * e[1], m11 = r.iuv * e[1] + r.ivv * e[2];
      const double tr = m00 + m11, tr2 = m00 * m00 + 2.0 * m01 * m10 + m11 * m11;
      return 0.125 * r.sqrt_g * (p.lambda * tr * tr + 2.0 * p.mu * tr2);
    };
    Mat3 C;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        C(i, j) = q(Vec3::Unit(i) + Vec3::Unit(j)) - q(Vec3::Unit(i)) - q(Vec3::Unit(j));
    return C;
  }

  Eigen::Index nr_{0}, nw_{0};
  Eigen::SimplicialLDLT<SparseMatrix> shape_, gauge_;
  Eigen::MatrixXd Z_;
  Eigen::LDLT<Eigen::MatrixXd> K_;
};

} // namespace detail

/**
 * \brief Preconditioned L-BFGS descent of the total energy from `initial`.
 *
 * W is held at `w` unless relax_gauge is set. Pinned boundaries keep the open-edge
 * nodes at their initial positions. Singular gauge nodes are never moved.
 */
inline MinimizeReport minimize_shape(const Embedding& initial, const GaugeField& w, const EnergyModel& model,
                                     const MinimizeOptions& opt = {}) {
  require_same_grid(initial.grid, model.grid(), "minimize_shape");
  require_same_grid(w.grid, model.grid(), "minimize_shape");
  if (!(opt.tol > 0.0) || opt.max_iter < 0 || opt.memory < 1)
    throw Error("minimize_shape: tol must be positive, max_iter non-negative and memory at least 1");
  const Grid& g = model.grid();
  const detail::DescentLayout lay(g, opt, initial.positions, w);
  std::optional<detail::DescentPreconditioner> pre;
  // nodal masses w sqrt(g0) on the unknowns; tied rows are summed into their master
  const ScalarField mass = g.weights().cwiseProduct(model.reference_metric().sqrt_g);
  VectorField mass3(g.size(), 3);
  mass3.colwise()                     = mass;
  const std::array<VectorField, 2> mw = {mass3, mass3};
  const Eigen::VectorXd mass_red      = lay.reduce(mass3, opt.relax_gauge ? &mw : nullptr, true);
  const double mass_total             = mass_red.sum();
  // the convergence norm excludes the reaction of the held constraints (least squares in the mass norm)
  const Eigen::MatrixXd C = lay.constraints();
  const Eigen::MatrixXd MC = mass_red.cwiseInverse().asDiagonal() * C;
  const Eigen::LDLT<Eigen::MatrixXd> CMC(C.transpose() * MC);

  MinimizeReport rep{initial, w};
  VectorField R = initial.positions;
  GaugeField W  = w;
  auto evaluate = [&](const Eigen::VectorXd& x, Eigen::VectorXd* grad, double* gnorm) {
    lay.expand(x, R, W);
    const Embedding e(g, R);
    const double E = model.energy(e, W).total;
    if (grad) {
      const VectorField gr = model.gradient(e, W);
      std::array<VectorField, 2> gw;
      if (opt.relax_gauge)
        gw = model.gauge_gradient(e, W);
      *grad = lay.reduce(gr, opt.relax_gauge ? &gw : nullptr, true);
      Eigen::VectorXd free = *grad;
      if (C.cols())
        free -= C * CMC.solve(MC.transpose() * free);
      *gnorm = std::sqrt(free.cwiseAbs2().cwiseQuotient(mass_red).sum() / mass_total);
    }
    return E;
  };

  Eigen::VectorXd x = lay.reduce(R, opt.relax_gauge ? &W.w : nullptr, false);
  Eigen::VectorXd gx;
  double gnorm = 0.0;
  double E     = evaluate(x, &gx, &gnorm);
  rep.energy_history.push_back(E);
  std::deque<std::pair<Eigen::VectorXd, Eigen::VectorXd>> pairs;
  double gamma = 1.0;
  int it = 0, since_refresh = 0;
  auto refresh = [&] {
    pre.emplace(model, lay, R, W);
    pairs.clear();
    gamma         = 1.0;
    since_refresh = 0;
  };
  for (; it < opt.max_iter && !(gnorm < opt.tol); ++it) {
    if (!pre || since_refresh >= opt.precondition_every)
      refresh();
    // two-loop recursion with the preconditioner as initial inverse Hessian
    Eigen::VectorXd q = gx;
    std::vector<double> alpha(pairs.size());
    for (std::size_t i = pairs.size(); i-- > 0;) {
      const auto& [s, y] = pairs[i];
      alpha[i]           = s.dot(q) / y.dot(s);
      q -= alpha[i] * y;
    }
    Eigen::VectorXd d = gamma * pre->solve(q);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const auto& [s, y] = pairs[i];
      d += s * (alpha[i] - y.dot(d) / y.dot(s));
    }
    d = -d;
    double slope = gx.dot(d);
    if (!(slope < 0.0)) {
      pairs.clear();
      gamma = 1.0;
      d     = -pre->solve(gx);
      slope = gx.dot(d);
    }
    double step = 1.0, Et = 0.0;
    Eigen::VectorXd xt;
    bool accepted = false;
    for (int b = 0; b <= opt.max_backtracks; ++b, step *= 0.5) {
      xt = x + step * d;
      try {
        Et = evaluate(xt, nullptr, nullptr);
      } catch (const DegenerateMetricError&) {
        continue;
      }
      if (std::isfinite(Et) && Et < E && Et <= E + opt.armijo * step * slope) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      if (pairs.empty() && since_refresh == 0)
        break;
      evaluate(x, nullptr, nullptr);
      refresh();
      continue;
    }
    ++since_refresh;
    Eigen::VectorXd gt;
    double gn = 0.0;
    evaluate(xt, &gt, &gn);
    Eigen::VectorXd s = xt - x, y = gt - gx;
    const double sy = s.dot(y);
    if (sy > 1e-14 * std::sqrt(s.squaredNorm() * y.squaredNorm())) {
      gamma = sy / y.dot(pre->solve(y));
      pairs.emplace_back(std::move(s), std::move(y));
      if (int(pairs.size()) > opt.memory)
        pairs.pop_front();
    }
    x     = std::move(xt);
    gx    = std::move(gt);
    E     = Et;
    gnorm = gn;
    rep.energy_history.push_back(E);
    if (opt.on_iteration)
      opt.on_iteration(it + 1, E, gnorm);
    if (opt.checkpoint_every > 0 && opt.on_checkpoint && (it + 1) % opt.checkpoint_every == 0)
      opt.on_checkpoint(it + 1, Embedding(g, R), W);
  }
  lay.expand(x, R, W);
  rep.state         = Embedding(g, R);
  rep.gauge         = W;
  rep.energy        = model.energy(rep.state, W);
  rep.gradient_norm = gnorm;
  rep.iterations    = it;
  rep.converged     = gnorm < opt.tol;
  return rep;
}

inline MinimizeReport minimize_shape(const Embedding& initial, const GaugeField& w, const Embedding& e0,
                                     const GaugeField& w0, const MaterialParams& p, const MinimizeOptions& opt = {}) {
  return minimize_shape(initial, w, EnergyModel(e0, w0, p), opt);
}

} // namespace discgauge
