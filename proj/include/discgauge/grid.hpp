#pragma once

/**
 * \file grid.hpp
 * \brief Structured parametric grids, quadrature weights and finite-difference stencils.
 *
 * Nodes are stored node-major: index = i * nv + j, with i running over u and j over v.
 * Periodic directions place n nodes on [lo, hi) with h = (hi - lo) / n; all other
 * directions place n nodes on [lo, hi] with h = (hi - lo) / (n - 1).
 *
 * An "apex" end is a coordinate singularity (r = 0 of a polar disk, the poles of a sphere)
 * sitting half a spacing beyond the first node. No node is placed on the apex itself;
 * conservative operators treat the apex face as carrying zero flux.
 */

#include <discgauge/core.hpp>

#include <unsupported/Eigen/KroneckerProduct>

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace discgauge {

enum class Topology
{
  open_patch,
  periodic_u,
  periodic_both,
  disk_polar,  ///< u = r with apex at the low end, v = phi periodic
  sphere_polar ///< u = theta with apexes at both ends, v = phi periodic
};

enum class End
{
  open,
  apex,
  periodic
};

inline std::string to_string(Topology t) {
  switch (t) {
    case Topology::open_patch:
      return "open-patch";
    case Topology::periodic_u:
      return "periodic-u";
    case Topology::periodic_both:
      return "periodic-both";
    case Topology::disk_polar:
      return "disk-polar";
    case Topology::sphere_polar:
      return "sphere-polar";
  }
  return "unknown";
}

inline Topology topology_from_string(const std::string& s) {
  for (auto t : {Topology::open_patch, Topology::periodic_u, Topology::periodic_both, Topology::disk_polar,
                 Topology::sphere_polar})
    if (to_string(t) == s)
      return t;
  throw Error("unknown grid topology '" + s + "'");
}

struct Interval
{
  double lo;
  double hi;
};

class Grid
{
public:
  Grid(int nu, int nv, Interval u, Interval v, Topology topology)
      : nu_{nu},
        nv_{nv},
        urange_{u},
        vrange_{v},
        topology_{topology} {
    if (nu < 3 || nv < 3)
      throw ShapeMismatchError("grid needs at least 3 nodes per direction");
    hu_ = periodic_u() ? (u.hi - u.lo) / nu : (u.hi - u.lo) / (nu - 1);
    hv_ = periodic_v() ? (v.hi - v.lo) / nv : (v.hi - v.lo) / (nv - 1);
    if (!(hu_ > 0.0) || !(hv_ > 0.0))
      throw ShapeMismatchError("grid spacings must be positive");
    if (u_low() == End::apex && u.lo - 0.5 * hu_ < -1e-12 * hu_)
      throw ShapeMismatchError("apex grids need u_lo >= h_u / 2");
  }

  /// Polar disk of the given radius: r_i = (i + 1/2) h, the last ring lies on r = radius.
  static Grid polar_disk(int nr, int nphi, double radius) {
    const double h = radius / (nr - 0.5);
    return Grid(nr, nphi, {0.5 * h, radius}, {0.0, 2.0 * pi}, Topology::disk_polar);
  }

  /// (theta, phi) grid over the whole sphere with theta_i = (i + 1/2) pi / ntheta.
  static Grid sphere(int ntheta, int nphi) {
    const double h = pi / ntheta;
    return Grid(ntheta, nphi, {0.5 * h, pi - 0.5 * h}, {0.0, 2.0 * pi}, Topology::sphere_polar);
  }

  int nu() const noexcept { return nu_; }
  int nv() const noexcept { return nv_; }
  Eigen::Index size() const noexcept { return Eigen::Index(nu_) * nv_; }
  double hu() const noexcept { return hu_; }
  double hv() const noexcept { return hv_; }
  Interval u_range() const noexcept { return urange_; }
  Interval v_range() const noexcept { return vrange_; }
  Topology topology() const noexcept { return topology_; }

  double u(int i) const noexcept { return urange_.lo + i * hu_; }
  double v(int j) const noexcept { return vrange_.lo + j * hv_; }

  Eigen::Index index(int i, int j) const noexcept { return Eigen::Index(i) * nv_ + j; }
  std::pair<int, int> ij(Eigen::Index k) const noexcept { return {int(k / nv_), int(k % nv_)}; }

  bool periodic_u() const noexcept { return topology_ == Topology::periodic_u || topology_ == Topology::periodic_both; }
  bool periodic_v() const noexcept {
    return topology_ == Topology::periodic_both || topology_ == Topology::disk_polar ||
           topology_ == Topology::sphere_polar;
  }

  End u_low() const noexcept {
    if (periodic_u())
      return End::periodic;
    return (topology_ == Topology::disk_polar || topology_ == Topology::sphere_polar) ? End::apex : End::open;
  }
  End u_high() const noexcept {
    if (periodic_u())
      return End::periodic;
    return topology_ == Topology::sphere_polar ? End::apex : End::open;
  }
  End v_low() const noexcept { return periodic_v() ? End::periodic : End::open; }
  End v_high() const noexcept { return v_low(); }

  /// True when the node sits on an open (Dirichlet-capable) edge.
  bool on_open_boundary(int i, int j) const noexcept {
    return (i == 0 && u_low() == End::open) || (i == nu_ - 1 && u_high() == End::open) ||
           (j == 0 && v_low() == End::open) || (j == nv_ - 1 && v_high() == End::open);
  }
  bool on_open_boundary(Eigen::Index k) const noexcept {
    auto [i, j] = ij(k);
    return on_open_boundary(i, j);
  }
  /// The topology has no open edge at all.
  bool closed() const noexcept {
    return u_low() != End::open && u_high() != End::open && v_low() != End::open && v_high() != End::open;
  }

  /// Quadrature weight for integrals in du dv (trapezoid on open ends, full cells at apexes).
  double weight(int i, int j) const noexcept {
    auto w1 = [](int k, int n, double h, End lo, End hi) {
      if (k == 0 && lo == End::open)
        return 0.5 * h;
      if (k == n - 1 && hi == End::open)
        return 0.5 * h;
      return h;
    };
    return w1(i, nu_, hu_, u_low(), u_high()) * w1(j, nv_, hv_, v_low(), v_high());
  }
  double weight(Eigen::Index k) const noexcept {
    auto [i, j] = ij(k);
    return weight(i, j);
  }
  ScalarField weights() const {
    ScalarField w(size());
    for (Eigen::Index k = 0; k < size(); ++k)
      w[k] = weight(k);
    return w;
  }

  bool same_as(const Grid& o) const noexcept {
    return nu_ == o.nu_ && nv_ == o.nv_ && topology_ == o.topology_ && urange_.lo == o.urange_.lo &&
           urange_.hi == o.urange_.hi && vrange_.lo == o.vrange_.lo && vrange_.hi == o.vrange_.hi;
  }

  /// Nearest node to a parametric point (periodic directions wrap).
  Eigen::Index nearest(double uu, double vv) const {
    auto pick = [](double x, double lo, double h, int n, bool periodic) {
      int k = int(std::lround((x - lo) / h));
      if (periodic)
        return ((k % n) + n) % n;
      return std::clamp(k, 0, n - 1);
    };
    return index(pick(uu, urange_.lo, hu_, nu_, periodic_u()), pick(vv, vrange_.lo, hv_, nv_, periodic_v()));
  }

private:
  int nu_, nv_;
  Interval urange_, vrange_;
  Topology topology_;
  double hu_{}, hv_{};
};

inline void require_same_grid(const Grid& a, const Grid& b, const char* what) {
  if (!a.same_as(b))
    throw ShapeMismatchError(std::string(what) + ": fields live on different grids");
}

inline ScalarField sample(const Grid& g, const std::function<double(double, double)>& fn) {
  ScalarField out(g.size());
  for (int i = 0; i < g.nu(); ++i)
    for (int j = 0; j < g.nv(); ++j)
      out[g.index(i, j)] = fn(g.u(i), g.v(j));
  return out;
}

inline VectorField sample3(const Grid& g, const std::function<Vec3(double, double)>& fn) {
  VectorField out(g.size(), 3);
  for (int i = 0; i < g.nu(); ++i)
    for (int j = 0; j < g.nv(); ++j)
      out.row(g.index(i, j)) = fn(g.u(i), g.v(j)).transpose();
  return out;
}

namespace detail {

  // 1D first derivative, second order everywhere.
  inline SparseMatrix first_derivative_1d(int n, double h, bool periodic) {
    std::vector<Triplet> t;
    const double c = 1.0 / (2.0 * h);
    for (int k = 0; k < n; ++k) {
      if (periodic) {
        t.emplace_back(k, (k + 1) % n, c);
        t.emplace_back(k, (k - 1 + n) % n, -c);
      } else if (k == 0) {
        t.emplace_back(k, 0, -3.0 * c);
        t.emplace_back(k, 1, 4.0 * c);
        t.emplace_back(k, 2, -1.0 * c);
      } else if (k == n - 1) {
        t.emplace_back(k, n - 1, 3.0 * c);
        t.emplace_back(k, n - 2, -4.0 * c);
        t.emplace_back(k, n - 3, 1.0 * c);
      } else {
        t.emplace_back(k, k + 1, c);
        t.emplace_back(k, k - 1, -c);
      }
    }
    SparseMatrix m(n, n);
    m.setFromTriplets(t.begin(), t.end());
    return m;
  }

  // 1D second derivative; one-sided four-point stencils at non-periodic ends.
  inline SparseMatrix second_derivative_1d(int n, double h, bool periodic) {
    std::vector<Triplet> t;
    const double c = 1.0 / (h * h);
    for (int k = 0; k < n; ++k) {
      if (periodic) {
        t.emplace_back(k, (k + 1) % n, c);
        t.emplace_back(k, k, -2.0 * c);
        t.emplace_back(k, (k - 1 + n) % n, c);
      } else if ((k == 0 || k == n - 1) && n >= 4) {
        const int s  = k == 0 ? 1 : -1;
        const int k0 = k;
        t.emplace_back(k, k0, 2.0 * c);
        t.emplace_back(k, k0 + s, -5.0 * c);
        t.emplace_back(k, k0 + 2 * s, 4.0 * c);
        t.emplace_back(k, k0 + 3 * s, -1.0 * c);
      } else if (k == 0 || k == n - 1) {
        t.emplace_back(k, 0, c);
        t.emplace_back(k, 1, -2.0 * c);
        t.emplace_back(k, 2, c);
      } else {
        t.emplace_back(k, k + 1, c);
        t.emplace_back(k, k, -2.0 * c);
        t.emplace_back(k, k - 1, c);
      }
    }
    SparseMatrix m(n, n);
    m.setFromTriplets(t.begin(), t.end());
    return m;
  }

  inline SparseMatrix identity(int n) {
    SparseMatrix m(n, n);
    m.setIdentity();
    return m;
  }

} // namespace detail

/**
 * \brief Finite-difference derivative operators of a grid as sparse matrices.
 *
 * All stencils are second order: centered in the interior and on periodic
 * directions, one-sided at open and apex ends. The mixed derivative is the
 * product of the two first-derivative operators.
 */
struct Stencils
{
  explicit Stencils(const Grid& g) {
    const SparseMatrix d1u = detail::first_derivative_1d(g.nu(), g.hu(), g.periodic_u());
    const SparseMatrix d1v = detail::first_derivative_1d(g.nv(), g.hv(), g.periodic_v());
    const SparseMatrix d2u = detail::second_derivative_1d(g.nu(), g.hu(), g.periodic_u());
    const SparseMatrix d2v = detail::second_derivative_1d(g.nv(), g.hv(), g.periodic_v());
    const SparseMatrix iu  = detail::identity(g.nu());
    const SparseMatrix iv  = detail::identity(g.nv());
    du                     = Eigen::kroneckerProduct(d1u, iv);
    dv                     = Eigen::kroneckerProduct(iu, d1v);
    duu                    = Eigen::kroneckerProduct(d2u, iv);
    dvv                    = Eigen::kroneckerProduct(iu, d2v);
    duv                    = Eigen::kroneckerProduct(d1u, d1v);
  }

  /// d/du^a for a = 0 (u) or 1 (v).
  const SparseMatrix& d(int a) const { return a == 0 ? du : dv; }
  /// d^2/du^a du^b.
  const SparseMatrix& dd(int a, int b) const {
    if (a != b)
      return duv;
    return a == 0 ? duu : dvv;
  }

  SparseMatrix du, dv, duu, dvv, duv;
};

} // namespace discgauge
