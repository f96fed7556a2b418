#pragma once

/**
 * \file geometry.hpp
 * \brief Induced metrics, Levi-Civita connections, extrinsic curvature, the
 * conservative covariant Laplacian and covariant Green functions on grids.
 */

#include <discgauge/grid.hpp>

#include <Eigen/SparseLU>

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <tuple>

namespace discgauge {

/// Shared, lazily built stencils for a grid. Thread safe.
inline std::shared_ptr<const Stencils> stencils_for(const Grid& g) {
  using Key = std::tuple<int, int, int, double, double, double, double>;
  static std::mutex mutex;
  static std::map<Key, std::shared_ptr<const Stencils>> cache;
  const Key key{g.nu(),
                g.nv(),
                int(g.topology()),
                g.u_range().lo,
                g.u_range().hi,
                g.v_range().lo,
                g.v_range().hi};
  std::lock_guard lock(mutex);
  auto it = cache.find(key);
  if (it != cache.end())
    return it->second;
  if (cache.size() > 32)
    cache.clear();
  auto s = std::make_shared<const Stencils>(g);
  cache.emplace(key, s);
  return s;
}

/// A sampled map from the parametric grid into R^3.
struct Embedding
{
  Grid grid;
  VectorField positions;

  Embedding(Grid g, VectorField p)
      : grid{std::move(g)},
        positions{std::move(p)} {
    if (positions.rows() != grid.size())
      throw ShapeMismatchError("embedding has " + std::to_string(positions.rows()) + " positions for " +
                               std::to_string(grid.size()) + " nodes");
  }

  static Embedding sample(const Grid& g, const std::function<Vec3(double, double)>& fn) {
    return Embedding(g, sample3(g, fn));
  }

  Vec3 at(Eigen::Index k) const { return positions.row(k).transpose(); }
  /// Parametric derivative d R / d u^a.
  VectorField tangent(int a) const { return stencils_for(grid)->d(a) * positions; }
};

/// Throws unless dR/du x dR/dv is nonzero at every interior node.
inline void check_immersion(const Embedding& e, double tol = 1e-14) {
  const VectorField ru = e.tangent(0), rv = e.tangent(1);
  for (int i = 0; i < e.grid.nu(); ++i)
    for (int j = 0; j < e.grid.nv(); ++j) {
      if (e.grid.on_open_boundary(i, j))
        continue;
      const auto k = e.grid.index(i, j);
      const Vec3 n = ru.row(k).transpose().cross(rv.row(k).transpose());
      if (!(n.norm() > tol))
        throw DegenerateMetricError("embedding is not an immersion", k);
    }
}

/// g_ab, its inverse and sqrt(det g) per node.
struct MetricField
{
  Grid grid;
  ScalarField guu, guv, gvv;
  ScalarField iuu, iuv, ivv;
  ScalarField sqrt_g;

  /// Builds from covariant components; throws if not positive definite anywhere.
  static MetricField from_components(const Grid& grid, ScalarField guu, ScalarField guv, ScalarField gvv) {
    const auto n = grid.size();
    if (guu.size() != n || guv.size() != n || gvv.size() != n)
      throw ShapeMismatchError("metric components have the wrong size");
    MetricField m{grid, std::move(guu), std::move(guv), std::move(gvv), {}, {}, {}, {}};
    m.iuu.resize(n);
    m.iuv.resize(n);
    m.ivv.resize(n);
    m.sqrt_g.resize(n);
    for (Eigen::Index k = 0; k < n; ++k) {
      const double det = m.guu[k] * m.gvv[k] - m.guv[k] * m.guv[k];
      if (!(det > 0.0) || !(m.guu[k] > 0.0))
        throw DegenerateMetricError("metric is not positive definite", k);
      m.iuu[k]    = m.gvv[k] / det;
      m.ivv[k]    = m.guu[k] / det;
      m.iuv[k]    = -m.guv[k] / det;
      m.sqrt_g[k] = std::sqrt(det);
    }
    return m;
  }

  static MetricField flat(const Grid& grid) {
    const auto n = grid.size();
    return from_components(grid, ScalarField::Ones(n), ScalarField::Zero(n), ScalarField::Ones(n));
  }

  /// Metric given pointwise by a function of (u, v).
  static MetricField analytic(const Grid& grid, const std::function<Mat2(double, double)>& fn) {
    ScalarField a(grid.size()), b(grid.size()), c(grid.size());
    for (int i = 0; i < grid.nu(); ++i)
      for (int j = 0; j < grid.nv(); ++j) {
        const Mat2 g = fn(grid.u(i), grid.v(j));
        const auto k = grid.index(i, j);
        a[k]         = g(0, 0);
        b[k]         = 0.5 * (g(0, 1) + g(1, 0));
        c[k]         = g(1, 1);
      }
    return from_components(grid, std::move(a), std::move(b), std::move(c));
  }

  Mat2 g(Eigen::Index k) const { return (Mat2() << guu[k], guv[k], guv[k], gvv[k]).finished(); }
  Mat2 ginv(Eigen::Index k) const { return (Mat2() << iuu[k], iuv[k], iuv[k], ivv[k]).finished(); }
  /// Covariant Levi-Civita tensor eps_ab = sqrt(g) [[0, 1], [-1, 0]].
  Mat2 eps(Eigen::Index k) const { return (Mat2() << 0.0, sqrt_g[k], -sqrt_g[k], 0.0).finished(); }

  const ScalarField& cov(int a, int b) const { return a != b ? guv : (a == 0 ? guu : gvv); }
  const ScalarField& inv(int a, int b) const { return a != b ? iuv : (a == 0 ? iuu : ivv); }

  /// Total area: the quadrature of sqrt(g) du dv.
  double area() const { return grid.weights().dot(sqrt_g); }
};

/// g_ab = dR/du^a . dR/du^b with second-order stencils.
inline MetricField induced_metric(const Embedding& e) {
  const VectorField ru = e.tangent(0), rv = e.tangent(1);
  return MetricField::from_components(e.grid,
                                      ru.cwiseProduct(ru).rowwise().sum(),
                                      ru.cwiseProduct(rv).rowwise().sum(),
                                      rv.cwiseProduct(rv).rowwise().sum());
}

/// Christoffel symbols Gamma^b_ac; gamma[b][s] with s = 0 (uu), 1 (uv), 2 (vv).
struct Connection
{
  Grid grid;
  std::array<std::array<ScalarField, 3>, 2> gamma;

  static int slot(int a, int c) { return a + c; }
  const ScalarField& operator()(int b, int a, int c) const { return gamma[b][slot(a, c)]; }
  double operator()(int b, int a, int c, Eigen::Index k) const { return gamma[b][slot(a, c)][k]; }
};

inline Connection christoffel(const MetricField& m) {
  const auto st = stencils_for(m.grid);
  // dg[d][a][c] = d_d g_ac
  std::array<std::array<std::array<ScalarField, 2>, 2>, 2> dg;
  for (int d = 0; d < 2; ++d)
    for (int a = 0; a < 2; ++a)
      for (int c = 0; c < 2; ++c)
        dg[d][a][c] = st->d(d) * m.cov(a, c);
  Connection con{m.grid, {}};
  for (int b = 0; b < 2; ++b)
    for (int a = 0; a < 2; ++a)
      for (int c = a; c < 2; ++c) {
        ScalarField s = ScalarField::Zero(m.grid.size());
        for (int d = 0; d < 2; ++d)
          s += 0.5 * m.inv(b, d).cwiseProduct(dg[a][d][c] + dg[c][d][a] - dg[d][a][c]);
        con.gamma[b][Connection::slot(a, c)] = std::move(s);
      }
  return con;
}

/// max over nodes of |D_a g_bc|, a discretization diagnostic.
inline double metric_compatibility_defect(const MetricField& m, const Connection& c, bool skip_boundary = false) {
  const auto st = stencils_for(m.grid);
  double worst  = 0.0;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      for (int cc = b; cc < 2; ++cc) {
        ScalarField r = st->d(a) * m.cov(b, cc);
        for (int d = 0; d < 2; ++d)
          r -= c(d, a, b).cwiseProduct(m.cov(d, cc)) + c(d, a, cc).cwiseProduct(m.cov(b, d));
        for (Eigen::Index k = 0; k < r.size(); ++k)
          if (!skip_boundary || !m.grid.on_open_boundary(k))
            worst = std::max(worst, std::abs(r[k]));
      }
  return worst;
}

/// Unit normal, second fundamental form and its invariants.
struct CurvatureData
{
  VectorField normal;
  ScalarField kuu, kuv, kvv;
  ScalarField mean_curvature;     ///< g^ab K_ab
  ScalarField gaussian_curvature; ///< det(g^ab K_bc)

  Mat2 K(Eigen::Index k) const { return (Mat2() << kuu[k], kuv[k], kuv[k], kvv[k]).finished(); }
};

/// Unit normals (dR/du x dR/dv) / |...|; throws where the cross product vanishes.
inline VectorField unit_normals(const Embedding& e) {
  const VectorField ru = e.tangent(0), rv = e.tangent(1);
  VectorField n(e.grid.size(), 3);
  for (Eigen::Index k = 0; k < n.rows(); ++k) {
    const Vec3 c = ru.row(k).transpose().cross(rv.row(k).transpose());
    const double len = c.norm();
    if (!(len > 0.0))
      throw DegenerateMetricError("surface normal is undefined", k);
    n.row(k) = c.transpose() / len;
  }
  return n;
}

/// K_ab = N . D_a D_b R with D_a D_b R = d_a d_b R - Gamma^c_ab d_c R.
inline CurvatureData curvature_data(const Embedding& e, const MetricField& m, const Connection& c) {
  require_same_grid(e.grid, m.grid, "curvature_data");
  require_same_grid(e.grid, c.grid, "curvature_data");
  const auto st = stencils_for(e.grid);
  CurvatureData out;
  out.normal = unit_normals(e);
  const VectorField ru = st->du * e.positions, rv = st->dv * e.positions;
  auto component = [&](int a, int b) {
    VectorField h = st->dd(a, b) * e.positions;
    for (int d = 0; d < 3; ++d)
      h.col(d) -= c(0, a, b).cwiseProduct(ru.col(d)) + c(1, a, b).cwiseProduct(rv.col(d));
    return ScalarField(h.cwiseProduct(out.normal).rowwise().sum());
  };
  out.kuu = component(0, 0);
  out.kuv = component(0, 1);
  out.kvv = component(1, 1);
  out.mean_curvature =
      m.iuu.cwiseProduct(out.kuu) + 2.0 * m.iuv.cwiseProduct(out.kuv) + m.ivv.cwiseProduct(out.kvv);
  const ScalarField detk = out.kuu.cwiseProduct(out.kvv) - out.kuv.cwiseProduct(out.kuv);
  out.gaussian_curvature = detk.cwiseQuotient(m.sqrt_g.cwiseProduct(m.sqrt_g));
  return out;
}

/// How rows on open edges are discretized by the covariant Laplacian.
enum class EdgeRows
{
  one_sided,   ///< non-conservative form with one-sided derivatives (accurate for smooth f)
  mirror_ghost ///< even reflection f_{-1} = f_1 across the edge (used for biharmonic assembly)
};

/**
 * \brief Sparse matrix of (1/sqrt g) d_a (sqrt g g^ab d_b f).
 *
 * Interior rows are conservative: face-averaged coefficients for the diagonal
 * fluxes and centered differences of the cross fluxes. Apex faces carry no flux.
 * With quadrature weights w, the matrix diag(w sqrt g) L is symmetric on grids
 * without open edges.
 */
inline SparseMatrix covariant_laplacian_matrix(const MetricField& m, EdgeRows edges = EdgeRows::one_sided) {
  const Grid& g = m.grid;
  const int nu = g.nu(), nv = g.nv();
  const double hu = g.hu(), hv = g.hv();
  const ScalarField auu = m.sqrt_g.cwiseProduct(m.iuu);
  const ScalarField auv = m.sqrt_g.cwiseProduct(m.iuv);
  const ScalarField avv = m.sqrt_g.cwiseProduct(m.ivv);

  std::vector<Triplet> t;
  t.reserve(std::size_t(g.size()) * 13);

  auto wrap_u = [&](int i) -> int {
    if (g.periodic_u())
      return (i + nu) % nu;
    return (i < 0 || i >= nu) ? -1 : i;
  };
  auto wrap_v = [&](int j) -> int {
    if (g.periodic_v())
      return (j + nv) % nv;
    return (j < 0 || j >= nv) ? -1 : j;
  };

  // One-sided non-conservative rows: (1/sqrt g)[A^ab d_a d_b f + (d_a A^ab) d_b f].
  std::optional<SparseMatrix> edge_op;
  if (edges == EdgeRows::one_sided && !g.closed()) {
    const auto st = stencils_for(g);
    const ScalarField div_u = st->du * auu + st->dv * auv;
    const ScalarField div_v = st->du * auv + st->dv * avv;
    SparseMatrix op = SparseMatrix(auu.asDiagonal() * st->duu) + SparseMatrix(2.0 * auv.asDiagonal() * st->duv) +
                      SparseMatrix(avv.asDiagonal() * st->dvv) + SparseMatrix(div_u.asDiagonal() * st->du) +
                      SparseMatrix(div_v.asDiagonal() * st->dv);
    edge_op = SparseMatrix(m.sqrt_g.cwiseInverse().asDiagonal() * op);
    edge_op->makeCompressed();
  }

  for (int i = 0; i < nu; ++i)
    for (int j = 0; j < nv; ++j) {
      const auto row = g.index(i, j);
      const double inv_sg = 1.0 / m.sqrt_g[row];
      if (g.on_open_boundary(i, j) && edge_op)
        continue; // filled from edge_op below
      const bool edge_u = (i == 0 && g.u_low() == End::open) || (i == nu - 1 && g.u_high() == End::open);
      const bool edge_v = (j == 0 && g.v_low() == End::open) || (j == nv - 1 && g.v_high() == End::open);

      // u faces
      for (int s : {-1, 1}) {
        int nb = wrap_u(i + s);
        if (nb < 0) {
          if (!edge_u)
            continue; // apex face: no flux
          nb = wrap_u(i - s);
          const auto kn = g.index(nb, j);
          const double a = (auu[row] + auu[kn]) / hu / hu; // mirrored face, doubled half-flux
          t.emplace_back(row, kn, inv_sg * a);
          t.emplace_back(row, row, -inv_sg * a);
          continue;
        }
        const auto kn = g.index(nb, j);
        const double a = 0.5 * (auu[row] + auu[kn]) / hu / hu;
        if (edge_u) {
          // the partner face is mirrored; counted above
          continue;
        }
        t.emplace_back(row, kn, inv_sg * a);
        t.emplace_back(row, row, -inv_sg * a);
      }
      // v faces
      for (int s : {-1, 1}) {
        int nb = wrap_v(j + s);
        if (nb < 0) {
          nb = wrap_v(j - s);
          const auto kn = g.index(i, nb);
          const double a = (avv[row] + avv[kn]) / hv / hv;
          t.emplace_back(row, kn, inv_sg * a);
          t.emplace_back(row, row, -inv_sg * a);
          continue;
        }
        if (edge_v)
          continue;
        const auto kn = g.index(i, nb);
        const double a = 0.5 * (avv[row] + avv[kn]) / hv / hv;
        t.emplace_back(row, kn, inv_sg * a);
        t.emplace_back(row, row, -inv_sg * a);
      }
      if (edge_u || edge_v)
        continue; // mirror reflection cancels the cross fluxes

      // d_u (A^uv d_v f): centered outer difference; apex face value is zero.
      auto add_dv_at = [&](int ii, double coef) {
        const auto k = g.index(ii, j);
        const int jp = wrap_v(j + 1), jm = wrap_v(j - 1);
        const double c = coef * auv[k] / (2.0 * hv);
        t.emplace_back(row, g.index(ii, jp), c);
        t.emplace_back(row, g.index(ii, jm), -c);
      };
      {
        const int ip = wrap_u(i + 1), im = wrap_u(i - 1);
        if (ip >= 0 && im >= 0) {
          add_dv_at(ip, inv_sg / (2.0 * hu));
          add_dv_at(im, -inv_sg / (2.0 * hu));
        } else if (im < 0) {
          add_dv_at(ip, inv_sg / (2.0 * hu));
          add_dv_at(i, inv_sg / (2.0 * hu));
        } else {
          add_dv_at(im, -inv_sg / (2.0 * hu));
          add_dv_at(i, -inv_sg / (2.0 * hu));
        }
      }
      // d_v (A^uv d_u f): v is never an apex direction.
      auto add_du_at = [&](int jj, double coef) {
        const auto k = g.index(i, jj);
        const double c = coef * auv[k];
        const int ip = wrap_u(i + 1), im = wrap_u(i - 1);
        if (ip >= 0 && im >= 0) {
          t.emplace_back(row, g.index(ip, jj), c / (2.0 * hu));
          t.emplace_back(row, g.index(im, jj), -c / (2.0 * hu));
        } else if (im < 0) {
          t.emplace_back(row, g.index(i, jj), -3.0 * c / (2.0 * hu));
          t.emplace_back(row, g.index(i + 1, jj), 4.0 * c / (2.0 * hu));
          t.emplace_back(row, g.index(i + 2, jj), -1.0 * c / (2.0 * hu));
        } else {
          t.emplace_back(row, g.index(i, jj), 3.0 * c / (2.0 * hu));
          t.emplace_back(row, g.index(i - 1, jj), -4.0 * c / (2.0 * hu));
          t.emplace_back(row, g.index(i - 2, jj), 1.0 * c / (2.0 * hu));
        }
      };
      add_du_at(wrap_v(j + 1), inv_sg / (2.0 * hv));
      add_du_at(wrap_v(j - 1), -inv_sg / (2.0 * hv));
    }

  if (edge_op) {
    const SparseMatrix rows = edge_op->transpose(); // column k holds row k of edge_op
    for (Eigen::Index k = 0; k < g.size(); ++k) {
      if (!g.on_open_boundary(k))
        continue;
      for (SparseMatrix::InnerIterator it(rows, k); it; ++it)
        t.emplace_back(k, it.row(), it.value());
    }
  }

  SparseMatrix L(g.size(), g.size());
  L.setFromTriplets(t.begin(), t.end());
  L.makeCompressed();
  return L;
}

inline ScalarField covariant_laplacian(const MetricField& m, const ScalarField& f, EdgeRows edges = EdgeRows::one_sided) {
  if (f.size() != m.grid.size())
    throw ShapeMismatchError("covariant_laplacian: field size does not match the metric grid");
  return covariant_laplacian_matrix(m, edges) * f;
}

/// Where a Green function source sits: a node, or an apex of a polar grid.
struct SourceSite
{
  enum class Kind
  {
    node,
    apex_low,
    apex_high
  };
  Kind kind{Kind::node};
  Eigen::Index node{0};

  static SourceSite at(Eigen::Index k) { return {Kind::node, k}; }
  static SourceSite low_apex() { return {Kind::apex_low, 0}; }
  static SourceSite high_apex() { return {Kind::apex_high, 0}; }
};

/// Unit load 1 / (w sqrt g) at a node, or spread over the first ring for an apex site.
inline ScalarField point_load(const MetricField& m, const SourceSite& site) {
  const Grid& g = m.grid;
  ScalarField load = ScalarField::Zero(g.size());
  if (site.kind == SourceSite::Kind::node) {
    if (site.node < 0 || site.node >= g.size())
      throw ShapeMismatchError("source node is outside the grid");
    load[site.node] = 1.0 / (g.weight(site.node) * m.sqrt_g[site.node]);
    return load;
  }
  const End end = site.kind == SourceSite::Kind::apex_low ? g.u_low() : g.u_high();
  if (end != End::apex)
    throw ShapeMismatchError("grid has no apex at the requested end");
  const int i = site.kind == SourceSite::Kind::apex_low ? 0 : g.nu() - 1;
  for (int j = 0; j < g.nv(); ++j) {
    const auto k = g.index(i, j);
    load[k]      = 1.0 / (g.nv() * g.weight(k) * m.sqrt_g[k]);
  }
  return load;
}

enum class Neutralization
{
  uniform,  ///< background density -2 pi / Area
  antipodal ///< opposite point charge at the other apex (sphere grids only)
};

struct GreenOptions
{
  Neutralization neutralization{Neutralization::uniform};
  /// Dirichlet data on open edges; defaults to the local flat kernel log(distance).
  std::function<double(const Grid&, Eigen::Index)> boundary_value{};
  double residual_tol{1e-8};
};

/**
 * \brief Solves Delta_cov G = 2 pi delta / sqrt g for a source site.
 *
 * On closed grids the total charge is neutralized (GreenOptions) and one node is
 * pinned. On grids with open edges the values there are Dirichlet data. The result
 * is shifted to zero area-weighted mean.
 */
inline ScalarField covariant_green_function(const MetricField& m, const SourceSite& site, const GreenOptions& opt = {}) {
  const Grid& g = m.grid;
  const auto n  = g.size();
  ScalarField rhs = 2.0 * pi * point_load(m, site);

  if (g.closed()) {
    if (opt.neutralization == Neutralization::antipodal) {
      if (site.kind == SourceSite::Kind::node)
        throw ShapeMismatchError("antipodal neutralization needs an apex source");
      const auto other = site.kind == SourceSite::Kind::apex_low ? SourceSite::high_apex() : SourceSite::low_apex();
      rhs -= 2.0 * pi * point_load(m, other);
    } else {
      rhs.array() -= 2.0 * pi / m.area();
    }
  }

  SparseMatrix L = covariant_laplacian_matrix(m, EdgeRows::one_sided);
  ScalarField b  = rhs;

  // Dirichlet rows and pinning via row replacement.
  std::vector<char> fixed(std::size_t(n), 0);
  ScalarField fixed_value = ScalarField::Zero(n);
  if (g.closed()) {
    const Eigen::Index pin = site.kind == SourceSite::Kind::node ? (site.node + n / 2) % n : g.index(g.nu() / 2, 0);
    fixed[std::size_t(pin)] = 1;
  } else {
    Vec2 src_uv;
    if (site.kind == SourceSite::Kind::node) {
      auto [si, sj] = g.ij(site.node);
      src_uv        = {g.u(si), g.v(sj)};
    }
    for (Eigen::Index k = 0; k < n; ++k) {
      if (!g.on_open_boundary(k))
        continue;
      fixed[std::size_t(k)] = 1;
      if (opt.boundary_value) {
        fixed_value[k] = opt.boundary_value(g, k);
      } else if (site.kind == SourceSite::Kind::node) {
        auto [i, j] = g.ij(k);
        Vec2 d{g.u(i) - src_uv[0], g.v(j) - src_uv[1]};
        if (g.periodic_v())
          d[1] = std::remainder(d[1], g.v_range().hi - g.v_range().lo);
        if (g.periodic_u())
          d[0] = std::remainder(d[0], g.u_range().hi - g.u_range().lo);
        fixed_value[k] = 0.5 * std::log(d.dot(m.g(site.node) * d));
      } else {
        // distance from the apex measured along u
        auto [i, j]       = g.ij(k);
        const double apex = site.kind == SourceSite::Kind::apex_low ? g.u_range().lo - 0.5 * g.hu()
                                                                    : g.u_range().hi + 0.5 * g.hu();
        fixed_value[k]    = std::log(std::abs(g.u(i) - apex));
      }
    }
  }

  std::vector<Triplet> t;
  t.reserve(std::size_t(L.nonZeros()));
  for (int col = 0; col < L.outerSize(); ++col)
    for (SparseMatrix::InnerIterator it(L, col); it; ++it)
      if (!fixed[std::size_t(it.row())])
        t.emplace_back(it.row(), it.col(), it.value());
  for (Eigen::Index k = 0; k < n; ++k)
    if (fixed[std::size_t(k)]) {
      t.emplace_back(k, k, 1.0);
      b[k] = fixed_value[k];
    }
  SparseMatrix A(n, n);
  A.setFromTriplets(t.begin(), t.end());
  A.makeCompressed();

  Eigen::SparseLU<SparseMatrix> lu;
  lu.compute(A);
  if (lu.info() != Eigen::Success)
    throw SolverError("Green function factorization failed", std::numeric_limits<double>::infinity());
  ScalarField G = lu.solve(b);
  const double res   = (A * G - b).lpNorm<Eigen::Infinity>();
  const double scale = std::max(1.0, b.lpNorm<Eigen::Infinity>());
  if (!G.allFinite() || !(res <= opt.residual_tol * scale))
    throw SolverError("Green function solve did not converge", res, 1);

  const ScalarField wa = g.weights().cwiseProduct(m.sqrt_g);
  G.array() -= wa.dot(G) / wa.sum();
  return G;
}

} // namespace discgauge
