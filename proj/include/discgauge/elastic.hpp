#pragma once

/**
 * \file elastic.hpp
 * \brief Gauged strain, stress density, stress vectors and the quadratic elastic energy.
 */

#include <discgauge/gauge.hpp>

#include <limits>

namespace discgauge {

struct MaterialParams
{
  double lambda{1.0};
  double mu{1.0};
  double kappa{1.0};
  double kappa_g{0.0};
  double s{1.0};
  double nu{1.0 / 6.0};

  /// Throws unless mu > 0, lambda + mu > 0, kappa >= 0 and s > 0.
  void validate() const {
    if (!(mu > 0.0))
      throw Error("material: mu must be positive");
    if (!(lambda + mu > 0.0))
      throw Error("material: lambda + mu must be positive");
    if (!(kappa >= 0.0))
      throw Error("material: kappa must be non-negative");
    if (!(s > 0.0))
      throw Error("material: s must be positive");
    if (!std::isfinite(kappa_g) || !std::isfinite(nu))
      throw Error("material: kappa_g and nu must be finite");
  }
};

/// K0 = 4 mu (lambda + mu) / (lambda + 2 mu).
inline double k0(const MaterialParams& p) {
  const double den = p.lambda + 2.0 * p.mu;
  if (den == 0.0)
    throw Error("k0: lambda + 2 mu vanishes");
  return 4.0 * p.mu * (p.lambda + p.mu) / den;
}

/// Two-dimensional Poisson ratio lambda / (lambda + 2 mu).
inline double poisson_ratio(const MaterialParams& p) { return p.lambda / (p.lambda + 2.0 * p.mu); }

/// Symmetric 2x2 tensor per node, stored by its three components.
struct SymmetricTensorField
{
  Grid grid;
  ScalarField uu, uv, vv;

  static SymmetricTensorField zero(const Grid& g) {
    const auto n = g.size();
    return {g, ScalarField::Zero(n), ScalarField::Zero(n), ScalarField::Zero(n)};
  }
  Mat2 at(Eigen::Index k) const { return (Mat2() << uu[k], uv[k], uv[k], vv[k]).finished(); }
  const ScalarField& operator()(int a, int b) const { return a != b ? uv : (a == 0 ? uu : vv); }
};

/// Covariant strain E_ab.
using StrainField = SymmetricTensorField;
/// Contravariant stress density rho^ab.
using StressField = SymmetricTensorField;

/// sigma^b, b = u, v.
struct StressVectors
{
  Grid grid;
  std::array<VectorField, 2> sigma;
};

/// E_ab = T_a . T_b - (g_ref)_ab with gauged tangents T_a = d_a R + W_a x R.
inline StrainField strain_tensor(const MetricField& g_ref, const Embedding& e, const GaugeField& w) {
  require_same_grid(g_ref.grid, e.grid, "strain_tensor");
  require_same_grid(w.grid, e.grid, "strain_tensor");
  const auto T = gauge_covariant_derivative(w, e);
  return {e.grid, dot(T[0], T[0]) - g_ref.guu, dot(T[0], T[1]) - g_ref.guv, dot(T[1], T[1]) - g_ref.gvv};
}

/**
 * \brief Linearized strain of a flat membrane with in-plane displacement (ux, uy),
 * height f and an abelian gauge field:
 *
 *   E_ab = d_a u_b + d_b u_a + d_a f d_b f + eps_(alpha a) W_b R0^alpha + eps_(alpha b) W_a R0^alpha.
 */
inline StrainField linearized_membrane_strain(const ScalarField& ux, const ScalarField& uy, const ScalarField& f,
                                              const GaugeField& w, const Embedding& e0) {
  const Grid& g = e0.grid;
  require_same_grid(w.grid, g, "linearized_membrane_strain");
  if (ux.size() != g.size() || uy.size() != g.size() || f.size() != g.size())
    throw ShapeMismatchError("linearized_membrane_strain: field sizes differ from the grid");
  const auto st = stencils_for(g);
  const ScalarField fx = st->du * f, fy = st->dv * f;
  const ScalarField& x = e0.positions.col(0);
  const ScalarField& y = e0.positions.col(1);
  const ScalarField& w1 = w[0].col(2);
  const ScalarField& w2 = w[1].col(2);
  // eps_(alpha a) R^alpha: a = x gives -y, a = y gives x
  const ScalarField ex = -y, ey = x;
  StrainField E{g, {}, {}, {}};
  E.uu = 2.0 * (st->du * ux) + fx.cwiseProduct(fx) + 2.0 * ex.cwiseProduct(w1);
  E.uv = st->du * uy + st->dv * ux + fx.cwiseProduct(fy) + ex.cwiseProduct(w2) + ey.cwiseProduct(w1);
  E.vv = 2.0 * (st->dv * uy) + fy.cwiseProduct(fy) + 2.0 * ey.cwiseProduct(w2);
  return E;
}

/// g^ab E_ab.
inline ScalarField strain_trace(const StrainField& E, const MetricField& m) {
  return m.iuu.cwiseProduct(E.uu) + 2.0 * m.iuv.cwiseProduct(E.uv) + m.ivv.cwiseProduct(E.vv);
}

/// rho^ab = lambda g^ab trE + 2 mu E^ab.
inline StressField stress_density(const StrainField& E, const MetricField& m, const MaterialParams& p) {
  require_same_grid(E.grid, m.grid, "stress_density");
  StressField rho = StressField::zero(m.grid);
  for (Eigen::Index k = 0; k < m.grid.size(); ++k) {
    const Mat2 gi = m.ginv(k);
    const Mat2 Ek = E.at(k);
    const Mat2 up = gi * Ek * gi;
    const Mat2 r  = p.lambda * (gi.cwiseProduct(Ek)).sum() * gi + 2.0 * p.mu * up;
    rho.uu[k]     = r(0, 0);
    rho.uv[k]     = 0.5 * (r(0, 1) + r(1, 0));
    rho.vv[k]     = r(1, 1);
  }
  return rho;
}

/// sigma^b = (1/2) T_a rho^ab.
inline StressVectors stress_vectors(const Embedding& e, const GaugeField& w, const StressField& rho) {
  require_same_grid(e.grid, rho.grid, "stress_vectors");
  const auto T = gauge_covariant_derivative(w, e);
  StressVectors out{e.grid, {}};
  for (int b = 0; b < 2; ++b)
    out.sigma[std::size_t(b)] = 0.5 * (T[0].array().colwise() * rho(0, b).array() +
                                       T[1].array().colwise() * rho(1, b).array())
                                          .matrix();
  return out;
}

/// Pointwise (1/8)[lambda (trE)^2 + 2 mu E^a_b E^b_a], the elastic energy per unit area.
inline ScalarField elastic_energy_density(const StrainField& E, const MetricField& m, const MaterialParams& p) {
  ScalarField d(m.grid.size());
  for (Eigen::Index k = 0; k < m.grid.size(); ++k) {
    const Mat2 mixed = m.ginv(k) * E.at(k);
    const double tr  = mixed.trace();
    d[k]             = 0.125 * (p.lambda * tr * tr + 2.0 * p.mu * (mixed * mixed).trace());
  }
  return d;
}

/**
 * \brief (1/8) int sqrt(g) [lambda (trE)^2 + 2 mu E^a_b E^b_a] du dv.
 *
 * Nodes flagged in `skip` (for example vortex cores) are left out of the sum.
 */
inline double elastic_energy(const StrainField& E, const MetricField& m, const MaterialParams& p,
                             const std::vector<char>* skip = nullptr) {
  require_same_grid(E.grid, m.grid, "elastic_energy");
  const ScalarField d = elastic_energy_density(E, m, p);
  double s            = 0.0;
  for (Eigen::Index k = 0; k < m.grid.size(); ++k)
    if (!skip || !(*skip)[std::size_t(k)])
      s += m.grid.weight(k) * m.sqrt_g[k] * d[k];
  return s;
}

} // namespace discgauge
