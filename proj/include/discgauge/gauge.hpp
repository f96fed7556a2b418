#pragma once

/**
 * \file gauge.hpp
 * \brief so(3) gauge potentials on grids: covariant derivatives, field strength,
 * Yang-Mills energy, vortex potentials and the defect-deformed reference metric.
 *
 * The Lie algebra acts on R^3 through the cross product: [W, R] = W x R.
 */

#include <discgauge/geometry.hpp>

#include <Eigen/Geometry>

#include <array>
#include <vector>

namespace discgauge {

inline Vec3 algebra_action(const Vec3& w, const Vec3& r) { return w.cross(r); }

/// Rowwise cross product of two node fields.
inline VectorField cross(const VectorField& a, const VectorField& b) {
  if (a.rows() != b.rows())
    throw ShapeMismatchError("cross: field sizes differ");
  VectorField c(a.rows(), 3);
  c.col(0) = a.col(1).cwiseProduct(b.col(2)) - a.col(2).cwiseProduct(b.col(1));
  c.col(1) = a.col(2).cwiseProduct(b.col(0)) - a.col(0).cwiseProduct(b.col(2));
  c.col(2) = a.col(0).cwiseProduct(b.col(1)) - a.col(1).cwiseProduct(b.col(0));
  return c;
}

/// Rowwise dot product.
inline ScalarField dot(const VectorField& a, const VectorField& b) { return a.cwiseProduct(b).rowwise().sum(); }

struct SingularNode
{
  Eigen::Index node;
  double nu;
};

/// An R^3-valued one-form W_a, a = u, v, with its registry of singular nodes.
struct GaugeField
{
  enum class Role
  {
    dynamical,
    reference
  };

  Grid grid;
  std::array<VectorField, 2> w;
  Role role{Role::dynamical};
  std::vector<SingularNode> singular{};

  static GaugeField zero(const Grid& g, Role role = Role::dynamical) {
    return {g, {VectorField::Zero(g.size(), 3), VectorField::Zero(g.size(), 3)}, role, {}};
  }
  /// Abelian field (0, 0, W_a) from two scalar components.
  static GaugeField abelian(const Grid& g, const ScalarField& w1, const ScalarField& w2) {
    GaugeField out = zero(g);
    out.w[0].col(2) = w1;
    out.w[1].col(2) = w2;
    return out;
  }

  const VectorField& operator[](int a) const { return w[std::size_t(a)]; }
  VectorField& operator[](int a) { return w[std::size_t(a)]; }

  bool is_abelian(double tol = 0.0) const {
    for (const auto& c : w)
      if (c.leftCols(2).cwiseAbs().maxCoeff() > tol)
        return false;
    return true;
  }

  GaugeField scaled(double t) const {
    GaugeField out = *this;
    out.w[0] *= t;
    out.w[1] *= t;
    for (auto& s : out.singular)
      s.nu *= t;
    return out;
  }
};

/// Gauged tangents T_a = d_a R + W_a x R.
inline std::array<VectorField, 2> gauge_covariant_derivative(const GaugeField& w, const Embedding& e) {
  require_same_grid(w.grid, e.grid, "gauge_covariant_derivative");
  const auto st = stencils_for(e.grid);
  return {VectorField(st->du * e.positions + cross(w[0], e.positions)),
          VectorField(st->dv * e.positions + cross(w[1], e.positions))};
}

/// F_12 = d_1 W_2 - d_2 W_1 + W_1 x W_2; F_21 = -F_12 and F_aa = 0.
struct FieldStrength
{
  Grid grid;
  VectorField f12;

  VectorField component(int a, int b) const {
    if (a == b)
      return VectorField::Zero(f12.rows(), 3);
    return a == 0 ? f12 : VectorField(-f12);
  }
};

inline FieldStrength field_strength(const GaugeField& w) {
  const auto st = stencils_for(w.grid);
  return {w.grid, VectorField(st->du * w[1] - st->dv * w[0] + cross(w[0], w[1]))};
}

struct YangMillsOptions
{
  /// Radius of the disk skipped around singular nodes; negative selects 2 h.
  double core_radius{-1.0};
};

struct YangMillsResult
{
  double energy{0.0};
  /// A singular node sits inside the quadrature domain without a cutoff.
  bool unbounded_warning{false};
  std::size_t skipped_nodes{0};
};

/// Nodes within the metric distance r_c of any singular node, r_c = 2 h by default.
inline std::vector<char> core_mask(const MetricField& m, const std::vector<SingularNode>& singular, double core_radius) {
  const Grid& g = m.grid;
  std::vector<char> mask(std::size_t(g.size()), 0);
  for (const auto& s : singular) {
    auto [si, sj]    = g.ij(s.node);
    const Mat2 gs    = m.g(s.node);
    const double h   = std::max(g.hu() * std::sqrt(gs(0, 0)), g.hv() * std::sqrt(gs(1, 1)));
    const double rc  = core_radius < 0.0 ? 2.0 * h : core_radius;
    mask[std::size_t(s.node)] = 1;
    for (Eigen::Index k = 0; k < g.size(); ++k) {
      auto [i, j] = g.ij(k);
      Vec2 d{g.u(i) - g.u(si), g.v(j) - g.v(sj)};
      if (g.periodic_u())
        d[0] = std::remainder(d[0], g.u_range().hi - g.u_range().lo);
      if (g.periodic_v())
        d[1] = std::remainder(d[1], g.v_range().hi - g.v_range().lo);
      if (std::sqrt(d.dot(gs * d)) <= rc * (1.0 + 1e-12))
        mask[std::size_t(k)] = 1;
    }
  }
  return mask;
}

/**
 * \brief (s/4) int sqrt(g) F^ab . F_ab du dv = (s/2) int |F_12|^2 / sqrt(g) du dv.
 *
 * `singular` lists the nodes whose neighbourhoods are skipped.
 */
inline YangMillsResult yang_mills_energy(const FieldStrength& f, const MetricField& m, double s,
                                         const std::vector<SingularNode>& singular = {},
                                         const YangMillsOptions& opt = {}) {
  require_same_grid(f.grid, m.grid, "yang_mills_energy");
  YangMillsResult out;
  std::vector<char> mask(std::size_t(m.grid.size()), 0);
  if (!singular.empty()) {
    if (opt.core_radius == 0.0)
      out.unbounded_warning = true;
    else
      mask = core_mask(m, singular, opt.core_radius);
  }
  for (Eigen::Index k = 0; k < m.grid.size(); ++k) {
    if (mask[std::size_t(k)]) {
      ++out.skipped_nodes;
      continue;
    }
    out.energy += m.grid.weight(k) * f.f12.row(k).squaredNorm() / m.sqrt_g[k];
  }
  out.energy *= 0.5 * s;
  if (!std::isfinite(out.energy))
    out.unbounded_warning = true;
  return out;
}

/// A disclination at a parametric point with Frank index nu.
struct DisclinationSpec
{
  Vec2 center{0.0, 0.0};
  double nu{1.0 / 6.0};
};

/**
 * \brief W_b = -nu eps_bc d_c log r about the center on a Cartesian grid (u = x, v = y).
 *
 * The node nearest the center is registered as singular; if it coincides with the
 * center its potential is set to zero.
 */
inline GaugeField flat_vortex_potential(const DisclinationSpec& d, const Grid& g) {
  GaugeField out = GaugeField::zero(g);
  for (int i = 0; i < g.nu(); ++i)
    for (int j = 0; j < g.nv(); ++j) {
      const double x = g.u(i) - d.center[0], y = g.v(j) - d.center[1];
      const double r2 = x * x + y * y;
      if (r2 == 0.0)
        continue;
      const auto k    = g.index(i, j);
      out.w[0](k, 2)  = -d.nu * y / r2;
      out.w[1](k, 2)  = d.nu * x / r2;
    }
  out.singular.push_back({g.nearest(d.center[0], d.center[1]), d.nu});
  return out;
}

/**
 * \brief W_a = -nu g_ab eps^bc d_c G, with G the covariant Green function of the source.
 *
 * A node source is registered as singular and carries W = 0.
 */
inline GaugeField covariant_vortex_potential(double nu, const SourceSite& site, const MetricField& m,
                                             const GreenOptions& green = {}) {
  const ScalarField G = covariant_green_function(m, site, green);
  const auto st       = stencils_for(m.grid);
  const ScalarField gu = st->du * G, gv = st->dv * G;
  // contravariant W^1 = -nu d_2 G / sqrt g, W^2 = nu d_1 G / sqrt g
  const ScalarField up1 = -nu * gv.cwiseQuotient(m.sqrt_g);
  const ScalarField up2 = nu * gu.cwiseQuotient(m.sqrt_g);
  ScalarField w1 = m.guu.cwiseProduct(up1) + m.guv.cwiseProduct(up2);
  ScalarField w2 = m.guv.cwiseProduct(up1) + m.gvv.cwiseProduct(up2);
  GaugeField out = GaugeField::abelian(m.grid, w1, w2);
  if (site.kind == SourceSite::Kind::node) {
    out.w[0].row(site.node).setZero();
    out.w[1].row(site.node).setZero();
    out.singular.push_back({site.node, nu});
  }
  return out;
}

/// eps^ab D_a W_b = (d_u W_2 - d_v W_1) / sqrt g for an abelian field.
inline ScalarField disclination_density(const GaugeField& w, const MetricField& m, double tol = 1e-12) {
  require_same_grid(w.grid, m.grid, "disclination_density");
  if (!w.is_abelian(tol))
    throw Error("disclination_density: gauge field has in-plane components (non-abelian)");
  const auto st = stencils_for(m.grid);
  return (st->du * w[1].col(2) - st->dv * w[0].col(2)).cwiseQuotient(m.sqrt_g);
}

/// Integral of a density over the nodes selected by a predicate, with weights w sqrt g.
inline double integrate(const MetricField& m, const ScalarField& f,
                        const std::function<bool(Eigen::Index)>& inside = {}) {
  double s = 0.0;
  for (Eigen::Index k = 0; k < m.grid.size(); ++k)
    if (!inside || inside(k))
      s += m.grid.weight(k) * m.sqrt_g[k] * f[k];
  return s;
}

namespace detail {
  // composite Simpson for an even number of intervals, trapezoid otherwise
  inline double line_rule(const std::vector<double>& f, double h) {
    const std::size_t n = f.size() - 1;
    if (n % 2 != 0 || n < 2) {
      double s = 0.5 * (f.front() + f.back());
      for (std::size_t k = 1; k < n; ++k)
        s += f[k];
      return s * h;
    }
    double s = f.front() + f.back();
    for (std::size_t k = 1; k < n; ++k)
      s += (k % 2 ? 4.0 : 2.0) * f[k];
    return s * h / 3.0;
  }
} // namespace detail

/**
 * \brief Counter-clockwise line integral of W_a du^a (one component) around the grid
 * rectangle with corner nodes (i0, j0) and (i1, j1).
 */
inline double circulation_rectangle(const GaugeField& w, int i0, int i1, int j0, int j1, int component = 2) {
  const Grid& g = w.grid;
  if (!(0 <= i0 && i0 < i1 && i1 < g.nu() && 0 <= j0 && j0 < j1 && j1 < g.nv()))
    throw ShapeMismatchError("circulation_rectangle: loop is not inside the grid");
  auto w1 = [&](int i, int j) { return w[0](g.index(i, j), component); };
  auto w2 = [&](int i, int j) { return w[1](g.index(i, j), component); };
  std::vector<double> bottom, top, left, right;
  for (int i = i0; i <= i1; ++i) {
    bottom.push_back(w1(i, j0));
    top.push_back(w1(i, j1));
  }
  for (int j = j0; j <= j1; ++j) {
    right.push_back(w2(i1, j));
    left.push_back(w2(i0, j));
  }
  return detail::line_rule(bottom, g.hu()) + detail::line_rule(right, g.hv()) - detail::line_rule(top, g.hu()) -
         detail::line_rule(left, g.hv());
}

/// Line integral of W_v dv around the v-periodic circle u = u_i (one component).
inline double circulation_ring(const GaugeField& w, int i, int component = 2) {
  const Grid& g = w.grid;
  if (!g.periodic_v())
    throw ShapeMismatchError("circulation_ring: v is not periodic");
  double s = 0.0;
  for (int j = 0; j < g.nv(); ++j)
    s += w[1](g.index(i, j), component);
  return s * g.hv();
}

/// Rotation field O(u, v) = exp(theta(u, v) . L) from a rotation-vector function.
inline std::vector<Mat3> rotation_field(const Grid& g, const std::function<Vec3(double, double)>& theta) {
  std::vector<Mat3> out(std::size_t(g.size()));
  for (int i = 0; i < g.nu(); ++i)
    for (int j = 0; j < g.nv(); ++j) {
      const Vec3 t = theta(g.u(i), g.v(j));
      const double a = t.norm();
      out[std::size_t(g.index(i, j))] =
          a > 0.0 ? Mat3(Eigen::AngleAxisd(a, t / a).toRotationMatrix()) : Mat3::Identity();
    }
  return out;
}

/// R -> O R nodewise.
inline Embedding rotate_embedding(const Embedding& e, const std::vector<Mat3>& O) {
  VectorField p(e.positions.rows(), 3);
  for (Eigen::Index k = 0; k < p.rows(); ++k)
    p.row(k) = (O[std::size_t(k)] * e.at(k)).transpose();
  return {e.grid, std::move(p)};
}

/// W_a -> O W_a - axial((d_a O) O^T), so that T_a -> O T_a.
inline GaugeField gauge_transform(const GaugeField& w, const std::vector<Mat3>& O) {
  const Grid& g = w.grid;
  if (O.size() != std::size_t(g.size()))
    throw ShapeMismatchError("gauge_transform: rotation field size differs from the grid");
  const auto st = stencils_for(g);
  // entries of O as node fields, column-major index r + 3 c
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, 9, Eigen::RowMajor>;
  RowMat flat(g.size(), 9);
  for (Eigen::Index k = 0; k < g.size(); ++k)
    flat.row(k) = Eigen::Map<const Eigen::Matrix<double, 1, 9>>(O[std::size_t(k)].data());
  GaugeField out = w;
  for (int a = 0; a < 2; ++a) {
    const RowMat dflat = st->d(a) * flat;
    for (Eigen::Index k = 0; k < g.size(); ++k) {
      const Mat3& Ok = O[std::size_t(k)];
      const Mat3 dO  = Eigen::Map<const Mat3>(dflat.row(k).data());
      const Mat3 A   = dO * Ok.transpose();
      const Vec3 ax  = 0.5 * Vec3(A(2, 1) - A(1, 2), A(0, 2) - A(2, 0), A(1, 0) - A(0, 1));
      out.w[a].row(k) = (Ok * w[a].row(k).transpose() - ax).transpose();
    }
  }
  return out;
}

/**
 * \brief Reference metric of a defected state in closed form:
 *
 *   g_ab = d_aR.d_bR + d_aR.(W_b x R) + d_bR.(W_a x R) + (W_a.W_b) R^2 - (W_a.R)(W_b.R).
 */
inline MetricField reference_metric_with_defects(const Embedding& e0, const GaugeField& w0) {
  require_same_grid(e0.grid, w0.grid, "reference_metric_with_defects");
  const auto st          = stencils_for(e0.grid);
  const VectorField& R   = e0.positions;
  const VectorField ru   = st->du * R, rv = st->dv * R;
  const ScalarField r2   = dot(R, R);
  const ScalarField w1r  = dot(w0[0], R), w2r = dot(w0[1], R);
  const ScalarField a1   = dot(ru, cross(w0[0], R)), a2 = dot(rv, cross(w0[1], R));
  const ScalarField c12  = dot(ru, cross(w0[1], R)), c21 = dot(rv, cross(w0[0], R));
  ScalarField guu = dot(ru, ru) + 2.0 * a1 + dot(w0[0], w0[0]).cwiseProduct(r2) - w1r.cwiseProduct(w1r);
  ScalarField guv = dot(ru, rv) + c12 + c21 + dot(w0[0], w0[1]).cwiseProduct(r2) - w1r.cwiseProduct(w2r);
  ScalarField gvv = dot(rv, rv) + 2.0 * a2 + dot(w0[1], w0[1]).cwiseProduct(r2) - w2r.cwiseProduct(w2r);
  return MetricField::from_components(e0.grid, std::move(guu), std::move(guv), std::move(gvv));
}

/// T_a . T_b from gauged tangents, used as an independent route to the same metric.
inline MetricField gauged_metric(const Embedding& e, const GaugeField& w) {
  const auto T = gauge_covariant_derivative(w, e);
  return MetricField::from_components(e.grid, dot(T[0], T[0]), dot(T[0], T[1]), dot(T[1], T[1]));
}

} // namespace discgauge
