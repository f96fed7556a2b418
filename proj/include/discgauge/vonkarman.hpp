#pragma once

/**
 * \file vonkarman.hpp
 * \brief Flat-membrane von Karman system with disclination sources.
 *
 *   kappa Delta^2 f        = [chi, f] + p
 *   K0^-1 Delta^2 chi      = (f_xy)^2 - f_xx f_yy + 2 pi nu delta
 *
 * with [chi, f] = chi_yy f_xx + chi_xx f_yy - 2 chi_xy f_xy. The nonlinear solver works
 * on Cartesian open patches (u = x, v = y); the axisymmetric flat branch is also solved
 * on polar disks and by a radial reference.
 */

#include <discgauge/elastic.hpp>

#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>

#include <complex>
#include <functional>
#include <string>
#include <vector>

namespace discgauge {

enum class EdgeCondition
{
  free,
  clamped
};

inline std::string to_string(EdgeCondition c) { return c == EdgeCondition::free ? "free" : "clamped"; }
inline EdgeCondition edge_condition_from_string(const std::string& s) {
  if (s == "free")
    return EdgeCondition::free;
  if (s == "clamped")
    return EdgeCondition::clamped;
  throw Error("unknown boundary condition '" + s + "'");
}

/// Out-of-plane (bending) and in-plane (Airy) edge conditions.
struct VkBoundary
{
  EdgeCondition bending{EdgeCondition::free};
  EdgeCondition in_plane{EdgeCondition::free};
};

struct VkSource
{
  std::vector<DisclinationSpec> defects;
  ScalarField pressure{}; ///< empty means zero
};

struct MembraneState
{
  Grid grid;
  ScalarField f;
  ScalarField chi;
};

/// Nodal 2 pi nu delta loads; off-node centers are shared bilinearly. Integrates to 2 pi sum(nu).
inline ScalarField disclination_load(const Grid& g, const std::vector<DisclinationSpec>& defects) {
  ScalarField s = ScalarField::Zero(g.size());
  for (const auto& d : defects) {
    const double x = (d.center[0] - g.u_range().lo) / g.hu();
    const double y = (d.center[1] - g.v_range().lo) / g.hv();
    const int i0 = int(std::floor(x)), j0 = int(std::floor(y));
    const double tx = x - i0, ty = y - j0;
    for (int di = 0; di < 2; ++di)
      for (int dj = 0; dj < 2; ++dj) {
        const double wgt = (di ? tx : 1 - tx) * (dj ? ty : 1 - ty);
        if (wgt == 0.0)
          continue;
        const int i = i0 + di, j = j0 + dj;
        if (i < 0 || j < 0 || i >= g.nu() || j >= g.nv())
          throw ShapeMismatchError("disclination center lies outside the grid");
        const auto k = g.index(i, j);
        s[k] += 2.0 * pi * d.nu * wgt / g.weight(k);
      }
  }
  return s;
}

namespace detail {

  inline SparseMatrix from_triplets(Eigen::Index rows, Eigen::Index cols, const std::vector<Triplet>& t) {
    SparseMatrix m(rows, cols);
    m.setFromTriplets(t.begin(), t.end());
    m.makeCompressed();
    return m;
  }

  /// Columns (or rows) selected by an index list, as a sparse selector (n x idx.size()).
  inline SparseMatrix selector(Eigen::Index n, const std::vector<Eigen::Index>& idx) {
    std::vector<Triplet> t;
    for (std::size_t c = 0; c < idx.size(); ++c)
      t.emplace_back(idx[c], Eigen::Index(c), 1.0);
    return from_triplets(n, Eigen::Index(idx.size()), t);
  }

} // namespace detail

/**
 * \brief Discrete Monge-Ampere operator d(f) = f_xx f_yy - f_xy^2 on a Cartesian grid.
 *
 * At each interior node d is the signed area of the image of the node's dual cell under
 * the gradient map, divided by the cell area. Cell-centre gradients come from the four
 * surrounding nodes. Summed over a region, d reproduces the turning of the boundary
 * gradient exactly (a discrete Gauss-Bonnet identity). Boundary rows are zero.
 */
class MongeAmpere
{
public:
  explicit MongeAmpere(const Grid& g)
      : grid_{g} {
    const int nu = g.nu(), nv = g.nv();
    const double hu = g.hu(), hv = g.hv();
    const Eigen::Index ncell = Eigen::Index(nu - 1) * (nv - 1);
    auto cell = [nv](int i, int j) { return Eigen::Index(i) * (nv - 1) + j; };
    std::vector<Triplet> tp, tq;
    for (int i = 0; i + 1 < nu; ++i)
      for (int j = 0; j + 1 < nv; ++j) {
        const auto c = cell(i, j);
        tp.emplace_back(c, g.index(i + 1, j), 0.5 / hu);
        tp.emplace_back(c, g.index(i + 1, j + 1), 0.5 / hu);
        tp.emplace_back(c, g.index(i, j), -0.5 / hu);
        tp.emplace_back(c, g.index(i, j + 1), -0.5 / hu);
        tq.emplace_back(c, g.index(i, j + 1), 0.5 / hv);
        tq.emplace_back(c, g.index(i + 1, j + 1), 0.5 / hv);
        tq.emplace_back(c, g.index(i, j), -0.5 / hv);
        tq.emplace_back(c, g.index(i + 1, j), -0.5 / hv);
      }
    const SparseMatrix Cp = detail::from_triplets(ncell, g.size(), tp);
    const SparseMatrix Cq = detail::from_triplets(ncell, g.size(), tq);
    std::vector<Triplet> sa, sb;
    for (int i = 1; i + 1 < nu; ++i)
      for (int j = 1; j + 1 < nv; ++j) {
        const auto k = g.index(i, j);
        sa.emplace_back(k, cell(i, j), 1.0);      // ++
        sa.emplace_back(k, cell(i - 1, j - 1), -1.0); // --
        sb.emplace_back(k, cell(i - 1, j), 1.0);  // -+
        sb.emplace_back(k, cell(i, j - 1), -1.0); // +-
      }
    const SparseMatrix SA = detail::from_triplets(g.size(), ncell, sa);
    const SparseMatrix SB = detail::from_triplets(g.size(), ncell, sb);
    ax_    = SA * Cp;
    ay_    = SA * Cq;
    bx_    = SB * Cp;
    by_    = SB * Cq;
    scale_ = 0.5 / (hu * hv);
  }

  ScalarField operator()(const ScalarField& f) const {
    return scale_ * ((ax_ * f).cwiseProduct(by_ * f) - (ay_ * f).cwiseProduct(bx_ * f));
  }

  /// Jacobian dd/df.
  SparseMatrix jacobian(const ScalarField& f) const {
    const ScalarField Ax = ax_ * f, Ay = ay_ * f, Bx = bx_ * f, By = by_ * f;
    SparseMatrix J = SparseMatrix(By.asDiagonal() * ax_) + SparseMatrix(Ax.asDiagonal() * by_) -
                     SparseMatrix(Bx.asDiagonal() * ay_) - SparseMatrix(Ay.asDiagonal() * bx_);
    J *= scale_;
    return J;
  }

  /// sum_k lambda_k Hess(d_k), which is independent of f.
  SparseMatrix contracted_hessian(const ScalarField& lambda) const {
    const auto L = lambda.asDiagonal();
    SparseMatrix a = SparseMatrix(ax_.transpose() * L * by_);
    SparseMatrix b = SparseMatrix(ay_.transpose() * L * bx_);
    SparseMatrix M = SparseMatrix(a + SparseMatrix(a.transpose())) - SparseMatrix(b + SparseMatrix(b.transpose()));
    M *= scale_;
    return M;
  }

  const Grid& grid() const { return grid_; }

private:
  Grid grid_;
  SparseMatrix ax_, ay_, bx_, by_;
  double scale_{};
};

struct NewtonOptions
{
  double tol{1e-8};   ///< relative residual target
  int max_iter{60};
  double armijo{1e-4};
  int max_backtracks{40};
  /// Called after every accepted step with (iteration, energy, relative residual, shift, step length).
  std::function<void(int, double, double, double, double)> on_iteration{};
};

struct VkEnergy
{
  double bending{0.0};
  double stretching{0.0};
  double work{0.0};
  double total() const { return bending + stretching - work; }
};

struct VkReport
{
  MembraneState state;
  VkEnergy energy;
  int iterations{0};
  double residual{0.0};          ///< relative max nodal residual of the bending equation
  double residual_abs{0.0};      ///< absolute max nodal residual of the bending equation
  double airy_residual_abs{0.0}; ///< max nodal residual of the compatibility equation (off the sources)
  bool converged{false};
  std::vector<double> energy_history;
  std::string label;
};

/**
 * \brief Nonlinear von Karman plate on a Cartesian open patch.
 *
 * The Airy function is eliminated exactly: chi(f) solves
 * K0^-1 B_chi chi = W (s - d(f)) with chi = dchi/dn = 0 on the edge (stress-free
 * edge). The reduced energy
 *
 *   E(f) = kappa/2 f^T B_b f + 1/(2 K0) chi^T B_chi chi - sum w p f
 *
 * is stationary exactly where the bending equation holds. Newton steps use the
 * symmetric coupled system in (df, dchi) with an Armijo line search on E and a
 * Levenberg shift whenever the step is not a descent direction.
 *
 * Free bending edges use kappa/2 int |Hess f|^2, which differs from
 * kappa/2 int (Laplacian f)^2 by a null Lagrangian and so leaves the bulk equation
 * unchanged; its null space is the affine functions, removed by pinning three nodes.
 */
class VonKarmanPlate
{
public:
  VonKarmanPlate(const Grid& g, const MaterialParams& p, const VkBoundary& bc, const VkSource& src)
      : grid_{g},
        params_{p},
        bc_{bc},
        ma_{g} {
    if (g.topology() != Topology::open_patch)
      throw ShapeMismatchError("von Karman plate needs an open Cartesian patch");
    p.validate();
    if (bc.in_plane != EdgeCondition::free)
      throw Error("in-plane clamped edges are only supported by the radial reference");
    k0_ = k0(p);
    const auto n = g.size();
    w_           = g.weights();
    s_           = disclination_load(g, src.defects);
    pressure_    = src.pressure.size() ? src.pressure : ScalarField::Zero(n);
    if (pressure_.size() != n)
      throw ShapeMismatchError("pressure field size differs from the grid");
    if (bc.bending == EdgeCondition::free && pressure_.cwiseAbs().maxCoeff() > 0.0)
      throw Error("pressure loads need clamped bending edges");

    for (Eigen::Index k = 0; k < n; ++k)
      if (!g.on_open_boundary(k))
        chi_nodes_.push_back(k);

    const SparseMatrix Lc = covariant_laplacian_matrix(MetricField::flat(g), EdgeRows::mirror_ghost);
    const SparseMatrix W  = SparseMatrix(w_.asDiagonal());
    {
      const SparseMatrix Pc = detail::selector(n, chi_nodes_);
      const SparseMatrix L  = Lc * Pc;
      bchi_                 = SparseMatrix(L.transpose() * W * L);
      chi_solver_.compute(bchi_);
      if (chi_solver_.info() != Eigen::Success)
        throw SolverError("Airy biharmonic factorization failed", 0.0);
      wchi_ = Pc.transpose() * w_;
      pchi_ = Pc;
    }

    if (bc.bending == EdgeCondition::clamped) {
      f_nodes_ = chi_nodes_;
      const SparseMatrix Pf = detail::selector(n, f_nodes_);
      const SparseMatrix L  = Lc * Pf;
      bb_full_              = SparseMatrix(Pf * SparseMatrix(L.transpose() * W * L) * Pf.transpose());
    } else {
      bb_full_ = hessian_bending_matrix(g);
      const int c = g.nu() / 2, cv = g.nv() / 2;
      const int k = std::max(1, (std::min(g.nu(), g.nv()) - 1) / 4);
      pinned_     = {g.index(c, cv), g.index(c + k, cv), g.index(c, cv + k)};
      for (Eigen::Index q = 0; q < n; ++q)
        if (std::find(pinned_.begin(), pinned_.end(), q) == pinned_.end())
          f_nodes_.push_back(q);
    }
    pf_ = detail::selector(n, f_nodes_);
    bb_ = SparseMatrix(pf_.transpose() * bb_full_ * pf_);
  }

  const Grid& grid() const { return grid_; }
  double k0_value() const { return k0_; }
  const ScalarField& load() const { return s_; }
  const MongeAmpere& monge_ampere() const { return ma_; }

  /// Airy function for a given height field (zero on the edge nodes).
  ScalarField chi_of(const ScalarField& f) const {
    const ScalarField rhs = k0_ * wchi_.cwiseProduct(pchi_.transpose() * (s_ - ma_(f)));
    ScalarField c         = chi_solver_.solve(rhs);
    return pchi_ * c;
  }

  VkEnergy energy(const ScalarField& f, const ScalarField& chi) const {
    VkEnergy e;
    e.bending    = 0.5 * params_.kappa * f.dot(bb_full_ * f);
    const ScalarField c = pchi_.transpose() * chi;
    e.stretching = 0.5 / k0_ * c.dot(bchi_ * c);
    e.work       = w_.dot(pressure_.cwiseProduct(f));
    return e;
  }
  VkEnergy energy(const ScalarField& f) const { return energy(f, chi_of(f)); }

  /// Full-length gradient of the reduced energy (zero on constrained nodes).
  ScalarField gradient(const ScalarField& f, const ScalarField& chi) const {
    ScalarField g = params_.kappa * (bb_full_ * f) - ma_.jacobian(f).transpose() * w_.cwiseProduct(chi) -
                    w_.cwiseProduct(pressure_);
    ScalarField out = ScalarField::Zero(f.size());
    for (auto k : f_nodes_)
      out[k] = g[k];
    return out;
  }

  /// Nodal residual of the bending equation, gradient / w.
  ScalarField bending_residual(const ScalarField& f, const ScalarField& chi) const {
    return gradient(f, chi).cwiseQuotient(w_);
  }

  /// Size of the terms balanced by the bending equation, for relative residuals.
  double residual_scale(const ScalarField& f, const ScalarField& chi) const {
    const ScalarField a = (params_.kappa * (bb_full_ * f)).cwiseQuotient(w_);
    const ScalarField b = (ma_.jacobian(f).transpose() * w_.cwiseProduct(chi)).cwiseQuotient(w_);
    double sc           = 0.0;
    for (auto k : f_nodes_)
      sc = std::max({sc, std::abs(a[k]), std::abs(b[k]), std::abs(pressure_[k])});
    return std::max(sc, 1e-300);
  }

  /// Stability of the flat branch: true if kappa B_b - M(chi_0) has negative directions.
  bool flat_branch_unstable() const {
    const ScalarField chi0 = chi_of(ScalarField::Zero(grid_.size()));
    const SparseMatrix M   = ma_.contracted_hessian(w_.cwiseProduct(chi0));
    SparseMatrix H         = params_.kappa * bb_ - SparseMatrix(pf_.transpose() * M * pf_);
    Eigen::SimplicialLDLT<SparseMatrix> ldlt(H);
    if (ldlt.info() != Eigen::Success)
      return true;
    return (ldlt.vectorD().array() < 0.0).any();
  }

  /// Damped Newton from an initial height field.
  VkReport solve(ScalarField f, const NewtonOptions& opt = {}) const {
    const auto n = grid_.size();
    if (f.size() != n)
      throw ShapeMismatchError("initial height field has the wrong size");
    if (bc_.bending == EdgeCondition::free) {
      // energy is blind to affine shifts: move the pinned nodes to zero without kinking f
      Eigen::Matrix3d A;
      Vec3 b;
      for (int r = 0; r < 3; ++r) {
        auto [i, j] = grid_.ij(pinned_[std::size_t(r)]);
        A.row(r) << 1.0, grid_.u(i), grid_.v(j);
        b[r] = f[pinned_[std::size_t(r)]];
      }
      const Vec3 c = A.partialPivLu().solve(b);
      for (Eigen::Index k = 0; k < n; ++k) {
        auto [i, j] = grid_.ij(k);
        f[k] -= c[0] + c[1] * grid_.u(i) + c[2] * grid_.v(j);
      }
    }
    for (Eigen::Index k = 0; k < n; ++k)
      if (!is_free(k))
        f[k] = 0.0;

    VkReport rep{MembraneState{grid_, {}, {}}};
    ScalarField chi = chi_of(f);
    double E        = energy(f, chi).total();
    rep.energy_history.push_back(E);
    double tau = 0.0;
    const double wmean = w_.mean();
    Eigen::SimplicialLDLT<SparseMatrix> ldlt;
    bool pattern_ready = false;

    // the seed's term sizes floor the scale, so decaying fields still converge in relative terms
    const double scale0 = residual_scale(f, chi);
    for (int it = 0;; ++it) {
      const ScalarField g = gradient(f, chi);
      rep.residual_abs    = g.cwiseQuotient(w_).cwiseAbs().maxCoeff();
      rep.residual        = rep.residual_abs / std::max(scale0, residual_scale(f, chi));
      rep.iterations      = it;
      if (rep.residual <= opt.tol || rep.residual_abs == 0.0) {
        rep.converged = true;
        break;
      }
      if (it >= opt.max_iter)
        break;

      const ScalarField gf = pf_.transpose() * g;
      const SparseMatrix M = ma_.contracted_hessian(w_.cwiseProduct(chi));
      const SparseMatrix H = params_.kappa * bb_ - SparseMatrix(pf_.transpose() * M * pf_);
      const SparseMatrix J = SparseMatrix(pchi_.transpose() * ma_.jacobian(f) * pf_);
      const SparseMatrix WJ = SparseMatrix(wchi_.asDiagonal() * J);
      const ScalarField wf  = pf_.transpose() * w_;

      // inertia control: the reduced Hessian is positive definite exactly when the
      // factorization has as many negative pivots as there are Airy unknowns
      ScalarField df;
      bool descent = false;
      tau          = tau > 0.0 ? tau / 3.0 : 0.0;
      const double base = H.diagonal().cwiseAbs().maxCoeff() / wmean;
      for (int attempt = 0; attempt < 60; ++attempt) {
        const SparseMatrix K = assemble_kkt(H, WJ, wf, tau);
        if (!pattern_ready) {
          ldlt.analyzePattern(K);
          pattern_ready = true;
        }
        ldlt.factorize(K);
        if (ldlt.info() == Eigen::Success &&
            (ldlt.vectorD().array() < 0.0).count() == bchi_.rows()) {
          ScalarField rhs     = ScalarField::Zero(K.rows());
          rhs.head(gf.size()) = -gf;
          const ScalarField x = ldlt.solve(rhs);
          df                  = x.head(gf.size());
          if (df.allFinite() && gf.dot(df) < 0.0) {
            descent = true;
            break;
          }
        }
        tau = tau == 0.0 ? 1e-8 * base : 8.0 * tau;
      }
      if (!descent)
        throw SolverError("von Karman Newton: no descent direction", rep.residual, it);

      // Armijo backtracking on the reduced energy
      const ScalarField step = pf_ * df;
      const double slope     = gf.dot(df);
      double alpha           = 1.0;
      bool accepted          = false;
      ScalarField f_new, chi_new;
      double E_new = E;
      for (int b = 0; b < opt.max_backtracks; ++b) {
        f_new   = f + alpha * step;
        chi_new = chi_of(f_new);
        E_new   = energy(f_new, chi_new).total();
        if (E_new <= E + opt.armijo * alpha * slope) {
          accepted = true;
          break;
        }
        // near a minimum energy differences drown in rounding; judge the full step by the residual
        if (b == 0 && tau == 0.0 && E_new - E <= 1e-12 * std::abs(E)) {
          const double r_new = gradient(f_new, chi_new).cwiseQuotient(w_).cwiseAbs().maxCoeff();
          if (r_new < 0.5 * rep.residual_abs) {
            accepted = true;
            break;
          }
        }
        alpha *= 0.5;
      }
      if (!accepted) {
        // no measurable decrease: the step is below the energy's floating point resolution
        if (std::abs(alpha * slope) <= 1e-14 * std::max(1.0, std::abs(E)))
          break;
        throw SolverError("von Karman Newton: line search failed", rep.residual, it);
      }
      f   = std::move(f_new);
      chi = std::move(chi_new);
      E   = E_new;
      rep.energy_history.push_back(E);
      if (opt.on_iteration)
        opt.on_iteration(it, E, rep.residual, tau, alpha);
      if (tau < 1e-10 * base)
        tau = 0.0;
    }

    if (bc_.bending == EdgeCondition::free)
      remove_affine(f);
    chi             = chi_of(f);
    rep.energy      = energy(f, chi);
    rep.state       = {grid_, f, chi};
    rep.airy_residual_abs = airy_residual(f, chi);
    return rep;
  }

  /// max over interior nodes of |K0^-1 (B_chi chi)/w - (s - d(f))|.
  double airy_residual(const ScalarField& f, const ScalarField& chi) const {
    const ScalarField c  = pchi_.transpose() * chi;
    const ScalarField lhs = (bchi_ * c).cwiseQuotient(wchi_) / k0_;
    const ScalarField rhs = pchi_.transpose() * (s_ - ma_(f));
    return (lhs - rhs).cwiseAbs().maxCoeff();
  }

  bool is_free(Eigen::Index k) const {
    if (bc_.bending == EdgeCondition::clamped)
      return !grid_.on_open_boundary(k);
    return std::find(pinned_.begin(), pinned_.end(), k) == pinned_.end();
  }

private:
  static SparseMatrix hessian_bending_matrix(const Grid& g) {
    const int nu = g.nu(), nv = g.nv();
    const double hu = g.hu(), hv = g.hv();
    std::vector<Triplet> txx, tyy, txy;
    Eigen::Index rx = 0, ry = 0, rc = 0;
    std::vector<double> wx, wy, wc;
    for (int i = 1; i + 1 < nu; ++i)
      for (int j = 0; j < nv; ++j, ++rx) {
        txx.emplace_back(rx, g.index(i - 1, j), 1.0 / (hu * hu));
        txx.emplace_back(rx, g.index(i, j), -2.0 / (hu * hu));
        txx.emplace_back(rx, g.index(i + 1, j), 1.0 / (hu * hu));
        wx.push_back(g.weight(i, j));
      }
    for (int i = 0; i < nu; ++i)
      for (int j = 1; j + 1 < nv; ++j, ++ry) {
        tyy.emplace_back(ry, g.index(i, j - 1), 1.0 / (hv * hv));
        tyy.emplace_back(ry, g.index(i, j), -2.0 / (hv * hv));
        tyy.emplace_back(ry, g.index(i, j + 1), 1.0 / (hv * hv));
        wy.push_back(g.weight(i, j));
      }
    for (int i = 0; i + 1 < nu; ++i)
      for (int j = 0; j + 1 < nv; ++j, ++rc) {
        const double c = 1.0 / (hu * hv);
        txy.emplace_back(rc, g.index(i + 1, j + 1), c);
        txy.emplace_back(rc, g.index(i, j), c);
        txy.emplace_back(rc, g.index(i + 1, j), -c);
        txy.emplace_back(rc, g.index(i, j + 1), -c);
        wc.push_back(hu * hv);
      }
    const SparseMatrix Dxx = detail::from_triplets(rx, g.size(), txx);
    const SparseMatrix Dyy = detail::from_triplets(ry, g.size(), tyy);
    const SparseMatrix Dxy = detail::from_triplets(rc, g.size(), txy);
    const Eigen::Map<const ScalarField> Wx(wx.data(), rx), Wy(wy.data(), ry), Wc(wc.data(), rc);
    SparseMatrix B = SparseMatrix(Dxx.transpose() * Wx.asDiagonal() * Dxx) +
                     SparseMatrix(Dyy.transpose() * Wy.asDiagonal() * Dyy) +
                     SparseMatrix(2.0 * Dxy.transpose() * Wc.asDiagonal() * Dxy);
    B.makeCompressed();
    return B;
  }

  SparseMatrix assemble_kkt(const SparseMatrix& H, const SparseMatrix& WJ, const ScalarField& wf, double tau) const {
    const Eigen::Index nf = H.rows(), nc = bchi_.rows();
    std::vector<Triplet> t;
    t.reserve(std::size_t(H.nonZeros() + 2 * WJ.nonZeros() + bchi_.nonZeros() + nf));
    for (int c = 0; c < H.outerSize(); ++c)
      for (SparseMatrix::InnerIterator it(H, c); it; ++it)
        t.emplace_back(it.row(), it.col(), it.value());
    for (Eigen::Index k = 0; k < nf; ++k)
      t.emplace_back(k, k, tau * wf[k]);
    for (int c = 0; c < WJ.outerSize(); ++c)
      for (SparseMatrix::InnerIterator it(WJ, c); it; ++it) {
        t.emplace_back(nf + it.row(), it.col(), -it.value());
        t.emplace_back(it.col(), nf + it.row(), -it.value());
      }
    for (int c = 0; c < bchi_.outerSize(); ++c)
      for (SparseMatrix::InnerIterator it(bchi_, c); it; ++it)
        t.emplace_back(nf + it.row(), nf + it.col(), -it.value() / k0_);
    return detail::from_triplets(nf + nc, nf + nc, t);
  }

  void remove_affine(ScalarField& f) const {
    Eigen::Matrix3d A = Eigen::Matrix3d::Zero();
    Vec3 b            = Vec3::Zero();
    for (Eigen::Index k = 0; k < f.size(); ++k) {
      auto [i, j] = grid_.ij(k);
      const Vec3 phi(1.0, grid_.u(i), grid_.v(j));
      A += w_[k] * phi * phi.transpose();
      b += w_[k] * f[k] * phi;
    }
    const Vec3 c = A.ldlt().solve(b);
    for (Eigen::Index k = 0; k < f.size(); ++k) {
      auto [i, j] = grid_.ij(k);
      f[k] -= c[0] + c[1] * grid_.u(i) + c[2] * grid_.v(j);
    }
  }

  Grid grid_;
  MaterialParams params_;
  VkBoundary bc_;
  MongeAmpere ma_;
  double k0_{};
  ScalarField w_, s_, pressure_, wchi_;
  std::vector<Eigen::Index> chi_nodes_, f_nodes_, pinned_;
  SparseMatrix bchi_, bb_full_, bb_, pchi_, pf_;
  Eigen::SimplicialLLT<SparseMatrix> chi_solver_;
};

/**
 * \brief Nodal residuals of the von Karman system with standard centered stencils:
 *
 *   res1 = kappa Delta^2 f - [chi, f],
 *   res2 = K0^-1 Delta^2 chi - [(f_xy)^2 - f_xx f_yy + 2 pi nu delta].
 *
 * Biharmonics are compositions of the stencil Laplacian, so the two outermost node
 * rings carry one-sided stencils and are only first-order accurate there.
 */
inline std::pair<ScalarField, ScalarField> von_karman_residual(const MembraneState& st, const VkSource& src,
                                                               const MaterialParams& p) {
  const Grid& g = st.grid;
  if (st.f.size() != g.size() || st.chi.size() != g.size())
    throw ShapeMismatchError("von_karman_residual: field sizes differ from the grid");
  const auto S = stencils_for(g);
  const SparseMatrix L = S->duu + S->dvv;
  const ScalarField fxx = S->duu * st.f, fyy = S->dvv * st.f, fxy = S->duv * st.f;
  const ScalarField cxx = S->duu * st.chi, cyy = S->dvv * st.chi, cxy = S->duv * st.chi;
  const ScalarField bracket = cyy.cwiseProduct(fxx) + cxx.cwiseProduct(fyy) - 2.0 * cxy.cwiseProduct(fxy);
  ScalarField res1 = p.kappa * (L * (L * st.f)) - bracket;
  if (src.pressure.size())
    res1 -= src.pressure;
  const ScalarField res2 = (L * (L * st.chi)) / k0(p) -
                           (fxy.cwiseProduct(fxy) - fxx.cwiseProduct(fyy) + disclination_load(g, src.defects));
  return {res1, res2};
}

/// Axisymmetric flat-branch reference on a disk of radius R.
struct RadialReference
{
  std::vector<double> r;   ///< node radii (cell centres plus r = R)
  std::vector<double> phi; ///< chi'(r) = r sigma_rr
  std::vector<double> chi; ///< Airy function with chi(R) = 0
  double energy{0.0};

  /// Linear interpolation of chi.
  double chi_at(double x) const {
    if (x <= r.front())
      return chi.front();
    if (x >= r.back())
      return chi.back();
    const auto it = std::upper_bound(r.begin(), r.end(), x);
    const auto k  = std::size_t(it - r.begin());
    const double t = (x - r[k - 1]) / (r[k] - r[k - 1]);
    return (1 - t) * chi[k - 1] + t * chi[k];
  }
};

/**
 * \brief Radial reduction of K0^-1 Delta^2 chi = 2 pi nu delta on a disk.
 *
 * phi = chi' solves phi'' + phi'/r - phi/r^2 = nu K0 / r with phi(0) = 0 and, at r = R,
 * phi = 0 (free edge) or phi' = poisson phi / R (clamped edge, u_r = 0). Solved by
 * finite differences on a cell-centred grid; the stress energy is
 * 1/(2 K0) int [(s_rr + s_tt)^2 - 2 (1 + poisson) s_rr s_tt] 2 pi r dr.
 */
inline RadialReference flat_disclination_reference(double nu, double K0, double R, EdgeCondition bc,
                                                   double poisson = 0.0, int n = 4000) {
  if (!(R > 0.0) || !(K0 >= 0.0) || n < 8)
    throw Error("flat_disclination_reference: need R > 0, K0 >= 0 and enough nodes");
  RadialReference out;
  const double h = R / (n - 0.5);
  // unknowns phi_0..phi_{n-1} at r_i = (i + 1/2) h, last node on r = R
  Eigen::VectorXd a(n), b(n), c(n), d(n);
  for (int i = 0; i < n; ++i) {
    const double r = (i + 0.5) * h;
    a[i]           = 1.0 / (h * h) - 1.0 / (2.0 * h * r);
    b[i]           = -2.0 / (h * h) - 1.0 / (r * r);
    c[i]           = 1.0 / (h * h) + 1.0 / (2.0 * h * r);
    d[i]           = nu * K0 / r;
  }
  // phi is odd in r: phi_{-1} = -phi_0
  b[0] -= a[0];
  a[0] = 0.0;
  const int last = n - 1;
  if (bc == EdgeCondition::free) {
    a[last] = 0.0;
    b[last] = 1.0;
    c[last] = 0.0;
    d[last] = 0.0;
  } else {
    // ghost from the centered condition (phi_{n} - phi_{n-2}) / 2h = poisson phi_{n-1} / R
    const double rr = R;
    const double gfac = 2.0 * h * poisson / rr;
    b[last] += c[last] * gfac;
    a[last] += c[last];
    c[last] = 0.0;
  }
  // Thomas algorithm
  for (int i = 1; i < n; ++i) {
    const double m = a[i] / b[i - 1];
    b[i] -= m * c[i - 1];
    d[i] -= m * d[i - 1];
  }
  std::vector<double> phi(std::size_t(n), 0.0);
  phi[std::size_t(last)] = d[last] / b[last];
  for (int i = last - 1; i >= 0; --i)
    phi[std::size_t(i)] = (d[i] - c[i] * phi[std::size_t(i + 1)]) / b[i];

  out.r.resize(std::size_t(n));
  for (int i = 0; i < n; ++i)
    out.r[std::size_t(i)] = (i + 0.5) * h;
  out.phi = phi;
  // chi by trapezoid integration inward from chi(R) = 0
  out.chi.assign(std::size_t(n), 0.0);
  for (int i = n - 2; i >= 0; --i)
    out.chi[std::size_t(i)] = out.chi[std::size_t(i + 1)] - 0.5 * h * (phi[std::size_t(i)] + phi[std::size_t(i + 1)]);

  // energy by the midpoint rule per cell [i h, (i+1) h] clipped to R, stresses from phi
  if (K0 > 0.0) {
    double E = 0.0;
    for (int i = 0; i < n; ++i) {
      const double r  = out.r[std::size_t(i)];
      const double dr = i == last ? 0.5 * h : h;
      const double rm = i == last ? R - 0.25 * h : r;
      double dphi;
      if (i == 0)
        dphi = (phi[1] + phi[0]) / (2.0 * h); // odd extension
      else if (i == last)
        dphi = (3.0 * phi[std::size_t(i)] - 4.0 * phi[std::size_t(i - 1)] + phi[std::size_t(i - 2)]) / (2.0 * h);
      else
        dphi = (phi[std::size_t(i + 1)] - phi[std::size_t(i - 1)]) / (2.0 * h);
      const double srr = phi[std::size_t(i)] / r;
      const double stt = dphi;
      E += ((srr + stt) * (srr + stt) - 2.0 * (1.0 + poisson) * srr * stt) * 2.0 * pi * rm * dr;
    }
    out.energy = E / (2.0 * K0);
  }
  return out;
}

struct PolarFlatResult
{
  Grid grid;
  ScalarField chi;
  double energy{0.0};
  double residual{0.0};
};

/**
 * \brief Flat branch (f = 0) of a single centred disclination on a polar disk grid.
 *
 * chi solves K0^-1 Delta^2 chi = 2 pi nu delta with the covariant Laplacian of the
 * metric diag(1, r^2); the apex delta is shared by the first ring. Stress-free rim:
 * chi = dchi/dr = 0.
 */
inline PolarFlatResult solve_flat_disclination_polar(double nu, const MaterialParams& p, const Grid& disk) {
  if (disk.topology() != Topology::disk_polar)
    throw ShapeMismatchError("solve_flat_disclination_polar needs a disk-polar grid");
  p.validate();
  const double K0 = k0(p);
  const auto m    = MetricField::analytic(disk, [](double r, double) { return Mat2{{1, 0}, {0, r * r}}; });
  const SparseMatrix Lc = covariant_laplacian_matrix(m, EdgeRows::mirror_ghost);
  std::vector<Eigen::Index> unknown;
  for (Eigen::Index k = 0; k < disk.size(); ++k)
    if (!disk.on_open_boundary(k))
      unknown.push_back(k);
  const SparseMatrix P  = detail::selector(disk.size(), unknown);
  const ScalarField wa  = disk.weights().cwiseProduct(m.sqrt_g);
  const SparseMatrix L  = Lc * P;
  const SparseMatrix B  = SparseMatrix(L.transpose() * wa.asDiagonal() * L);
  const ScalarField load = 2.0 * pi * nu * point_load(m, SourceSite::low_apex());
  const ScalarField rhs = K0 * P.transpose() * wa.cwiseProduct(load);
  Eigen::SimplicialLLT<SparseMatrix> llt(B);
  if (llt.info() != Eigen::Success)
    throw SolverError("polar Airy factorization failed", 0.0);
  const ScalarField c = llt.solve(rhs);
  PolarFlatResult out{disk, P * c, 0.0, 0.0};
  out.energy   = 0.5 / K0 * c.dot(B * c);
  out.residual = (B * c - rhs).cwiseAbs().maxCoeff() / std::max(1e-300, rhs.cwiseAbs().maxCoeff());
  return out;
}

/// Azimuthal Fourier powers of f sampled on a circle of radius rho about (x0, y0).
inline std::vector<double> ring_fourier_power(const Grid& g, const ScalarField& f, Vec2 center, double rho,
                                              int samples = 64) {
  std::vector<double> vals(static_cast<std::size_t>(samples));
  for (int k = 0; k < samples; ++k) {
    const double th = 2.0 * pi * k / samples;
    const double x = center[0] + rho * std::cos(th), y = center[1] + rho * std::sin(th);
    const double fx = (x - g.u_range().lo) / g.hu(), fy = (y - g.v_range().lo) / g.hv();
    int i = std::clamp(int(std::floor(fx)), 0, g.nu() - 2);
    int j = std::clamp(int(std::floor(fy)), 0, g.nv() - 2);
    const double tx = fx - i, ty = fy - j;
    vals[std::size_t(k)] = (1 - tx) * (1 - ty) * f[g.index(i, j)] + tx * (1 - ty) * f[g.index(i + 1, j)] +
                           (1 - tx) * ty * f[g.index(i, j + 1)] + tx * ty * f[g.index(i + 1, j + 1)];
  }
  std::vector<double> power(std::size_t(samples / 2 + 1), 0.0);
  for (int m = 0; m <= samples / 2; ++m) {
    std::complex<double> c{0.0, 0.0};
    for (int k = 0; k < samples; ++k)
      c += vals[std::size_t(k)] * std::polar(1.0, -2.0 * pi * m * k / samples);
    const double p = std::norm(c);
    power[std::size_t(m)] = (m == 0 || m == samples / 2) ? p : 2.0 * p;
  }
  return power;
}

enum class ShapeClass
{
  flat,
  cone,
  saddle,
  other
};

inline std::string to_string(ShapeClass c) {
  switch (c) {
    case ShapeClass::flat:
      return "flat";
    case ShapeClass::cone:
      return "cone";
    case ShapeClass::saddle:
      return "saddle";
    case ShapeClass::other:
      return "other";
  }
  return "other";
}

struct ShapeReport
{
  ShapeClass shape{ShapeClass::flat};
  double m0_fraction{0.0};
  double m2_fraction{0.0};
  int dominant_mode{0};
  double amplitude{0.0};
};

/**
 * \brief Cone if the m = 0 power on the ring exceeds 90 %, saddle if m = 2 dominates.
 * Heights with ring amplitude below `flat_tol` are flat.
 */
inline ShapeReport classify_shape(const Grid& g, const ScalarField& f, Vec2 center, double rho,
                                  double flat_tol = 1e-8) {
  const auto power = ring_fourier_power(g, f, center, rho);
  ShapeReport rep;
  double total = 0.0;
  for (double p : power)
    total += p;
  rep.amplitude = std::sqrt(total) / double(2 * (power.size() - 1));
  if (!(rep.amplitude > flat_tol)) {
    rep.shape = ShapeClass::flat;
    return rep;
  }
  rep.m0_fraction   = power[0] / total;
  rep.m2_fraction   = power[2] / total;
  rep.dominant_mode = int(std::max_element(power.begin(), power.end()) - power.begin());
  if (rep.m0_fraction > 0.9)
    rep.shape = ShapeClass::cone;
  else if (rep.dominant_mode == 2)
    rep.shape = ShapeClass::saddle;
  else
    rep.shape = ShapeClass::other;
  return rep;
}

/// Least-squares slope A of |f - f(center)| = A r over nodes with r in [r0, r1].
inline double fit_cone_slope(const Grid& g, const ScalarField& f, Vec2 center, double r0, double r1) {
  const auto kc = g.nearest(center[0], center[1]);
  double sxy = 0.0, sxx = 0.0, sx = 0.0, sy = 0.0;
  int n = 0;
  for (Eigen::Index k = 0; k < g.size(); ++k) {
    auto [i, j] = g.ij(k);
    const double r = std::hypot(g.u(i) - center[0], g.v(j) - center[1]);
    if (r < r0 || r > r1)
      continue;
    const double y = std::abs(f[k] - f[kc]);
    sxy += r * y;
    sxx += r * r;
    sx += r;
    sy += y;
    ++n;
  }
  if (n < 2)
    throw Error("fit_cone_slope: annulus contains fewer than two nodes");
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

/// Converged state or SolverError carrying the last residual.
inline VkReport solve_von_karman(const VkSource& src, const MaterialParams& p, const Grid& g, const VkBoundary& bc = {},
                                 const NewtonOptions& opt = {}, const ScalarField& f0 = {}) {
  VonKarmanPlate plate(g, p, bc, src);
  VkReport rep = plate.solve(f0.size() ? f0 : ScalarField::Zero(g.size()), opt);
  if (!rep.converged)
    throw SolverError("von Karman Newton did not converge", rep.residual, rep.iterations);
  return rep;
}

/// Airy stresses sigma^xx = chi_yy, sigma^xy = -chi_xy, sigma^yy = chi_xx.
inline StressField airy_stress(const Grid& g, const ScalarField& chi) {
  const auto S = stencils_for(g);
  return {g, S->dvv * chi, -(S->duv * chi), S->duu * chi};
}

/// Linear strain E = 2 eps belonging to a plane stress sigma, flat metric.
inline StrainField strain_from_stress(const StressField& sigma, const MaterialParams& p) {
  // sigma = lambda tr(eps) + 2 mu eps, E = 2 eps
  const ScalarField tr  = sigma.uu + sigma.vv;
  const ScalarField iso = (-p.lambda / (2.0 * (p.lambda + p.mu))) * tr;
  return {sigma.grid, (sigma.uu + iso) / p.mu, sigma.uv / p.mu, (sigma.vv + iso) / p.mu};
}

struct BranchResult
{
  double nu{0.0};
  std::string seed;
  VkReport report;
  ShapeReport shape;
};

struct BucklingOptions
{
  NewtonOptions newton{};
  double seed_amplitude{0.1};
  double ring_fraction{0.8}; ///< classification ring radius over the patch half-width
};

struct BucklingReport
{
  double nu_abs{0.0};
  double E_flat_plus{0.0}, E_buckled_plus{0.0};
  double E_flat_minus{0.0}, E_buckled_minus{0.0};
  bool flat_unstable_plus{false}, flat_unstable_minus{false};
  ShapeReport shape_plus, shape_minus;
  std::size_t best_plus{0}, best_minus{0}; ///< indices into branches
  std::vector<BranchResult> branches;

  /// E_buckled(-) - E_buckled(+).
  double margin() const { return E_buckled_minus - E_buckled_plus; }
};

/**
 * \brief Flat, cone-seeded and saddle-seeded solves for a centred defect of charge
 * +|nu| and -|nu| on a free square plate. Every branch is kept; the buckled energy
 * of a sign is the lowest converged non-flat branch (the flat energy if none).
 */
inline BucklingReport buckling_comparison(double nu_abs, const MaterialParams& p, const Grid& g,
                                          const BucklingOptions& opt = {}) {
  if (!(nu_abs > 0.0))
    throw Error("buckling_comparison: |nu| must be positive");
  const Vec2 c(0.5 * (g.u_range().lo + g.u_range().hi), 0.5 * (g.v_range().lo + g.v_range().hi));
  const double half = 0.5 * std::min(g.u_range().hi - g.u_range().lo, g.v_range().hi - g.v_range().lo);
  const double rho  = opt.ring_fraction * half;
  const double eps  = opt.seed_amplitude;
  BucklingReport out;
  out.nu_abs = nu_abs;
  for (int sign : {+1, -1}) {
    VkSource src;
    src.defects.push_back({c, sign * nu_abs});
    VonKarmanPlate plate(g, p, {}, src);
    const bool unstable = plate.flat_branch_unstable();
    const std::size_t first = out.branches.size();
    auto run = [&](const std::string& name, const ScalarField& f0) {
      BranchResult b{sign * nu_abs, name, plate.solve(f0, opt.newton), {}};
      b.shape = classify_shape(g, b.report.state.f, c, rho, 1e-6 * half);
      out.branches.push_back(std::move(b));
    };
    run("flat", ScalarField::Zero(g.size()));
    run("cone", sample(g, [&](double x, double y) { return eps * std::hypot(x - c[0], y - c[1]); }));
    run("saddle", sample(g, [&](double x, double y) {
          return eps * ((x - c[0]) * (x - c[0]) - (y - c[1]) * (y - c[1])) / half;
        }));
    const double E_flat = out.branches[first].report.energy.total();
    std::size_t best    = first;
    for (std::size_t k = first + 1; k < out.branches.size(); ++k) {
      const auto& b = out.branches[k];
      if (!b.report.converged || b.shape.shape == ShapeClass::flat)
        continue;
      const auto& cur = out.branches[best];
      if (best == first || b.report.energy.total() < cur.report.energy.total())
        best = k;
    }
    const double E_b = out.branches[best].report.energy.total();
    if (sign > 0) {
      out.E_flat_plus = E_flat, out.E_buckled_plus = E_b, out.flat_unstable_plus = unstable;
      out.shape_plus = out.branches[best].shape, out.best_plus = best;
    } else {
      out.E_flat_minus = E_flat, out.E_buckled_minus = E_b, out.flat_unstable_minus = unstable;
      out.shape_minus = out.branches[best].shape, out.best_minus = best;
    }
  }
  return out;
}

} // namespace discgauge
