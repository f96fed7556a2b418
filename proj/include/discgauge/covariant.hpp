#pragma once

/**
 * \file covariant.hpp
 * \brief Single disclination on a curved reference surface: the covariant von Karman
 * system in the height R^z and the strain trace trE.
 *
 * The reference Sigma_0 is an embedding whose z axis is the normal at the defect point p.
 * With the covariant Airy function chi (sigma^ab = eps^ac eps^bd D_c D_d chi,
 * trE = Delta_cov chi / (lambda + mu)) the equations solved are
 *
 *   kappa Delta_cov^2 (R^z - R^z_0) - sigma^ab D_a D_b R^z = p
 *   K0^-1 Delta_cov^2 chi = -det_g(DD R^z) + det_g(DD R^z_0) + 2 pi nu delta / sqrt g
 *
 * where det_g(H) = det(g^-1 H) = ((D_a D^a R)^2 - D_a D_b R D^a D^b R) / 2. The second
 * line is half the trE equation written for chi. On a plane every discrete operator
 * reduces exactly to the flat von Karman plate.
 */

#include <discgauge/vonkarman.hpp>

#include <Eigen/SparseLU>

namespace discgauge {

/// Reference surface with cached geometry and a defect at the reference point p.
struct SurfaceProblem
{
  Embedding reference;
  MetricField metric;
  Connection connection;
  CurvatureData curvature;
  DisclinationSpec defect;
  SourceSite site;
  MaterialParams params;
  ScalarField pressure; ///< empty means zero

  SurfaceProblem(Embedding ref, const DisclinationSpec& d, const MaterialParams& p, ScalarField pr = {})
      : reference{std::move(ref)},
        metric{induced_metric(reference)},
        connection{christoffel(metric)},
        curvature{curvature_data(reference, metric, connection)},
        defect{d},
        site{},
        params{p},
        pressure{std::move(pr)} {
    const Grid& g = reference.grid;
    if (g.topology() != Topology::open_patch)
      throw ShapeMismatchError("covariant problems need an open patch");
    p.validate();
    const auto k = g.nearest(d.center[0], d.center[1]);
    auto [i, j]  = g.ij(k);
    if (std::abs(g.u(i) - d.center[0]) > 1e-9 * g.hu() || std::abs(g.v(j) - d.center[1]) > 1e-9 * g.hv())
      throw Error("covariant problem: the defect must sit on a grid node");
    if (g.on_open_boundary(k))
      throw Error("covariant problem: the defect must be an interior node");
    const Vec3 n = curvature.normal.row(k).transpose();
    if ((n - Vec3::UnitZ()).norm() > 1e-6)
      throw Error("covariant problem: the reference normal at the defect must be the z axis");
    site = SourceSite::at(k);
    if (pressure.size() && pressure.size() != g.size())
      throw ShapeMismatchError("pressure field size differs from the grid");
  }

  const Grid& grid() const { return reference.grid; }
  ScalarField rz0() const { return reference.positions.col(2); }
};

/// Monge-gauge reference z = h(x, y) on an open patch.
inline Embedding monge_embedding(const Grid& g, const std::function<double(double, double)>& h) {
  return Embedding::sample(g, [&](double x, double y) { return Vec3(x, y, h(x, y)); });
}

struct CovariantState
{
  Grid grid;
  ScalarField Rz;
  ScalarField trE;
  ScalarField chi;
};

/// (lambda / 2 mu + 1), the trE prefactor of the curved compatibility equation.
inline double covariant_tre_prefactor(const MaterialParams& p) { return p.lambda / (2.0 * p.mu) + 1.0; }
/// (lambda / 4 mu + 1 / 2), its flat counterpart.
inline double flat_tre_prefactor(const MaterialParams& p) { return p.lambda / (4.0 * p.mu) + 0.5; }

/**
 * \brief Linearized strain on a curved reference:
 *
 *   E_ab = d_a R0perp . d_b Uperp + eps_(alpha beta) d_a R0^beta R0^alpha W_b + (a <-> b)
 *          + d_a R^z d_b R^z - d_a R^z_0 d_b R^z_0
 *
 * u_perp holds the transverse displacement in its x and y columns; w must be z-only.
 */
inline StrainField covariant_strain(const SurfaceProblem& prob, const ScalarField& Rz, const VectorField& u_perp,
                                    const GaugeField& w) {
  const Grid& g = prob.grid();
  require_same_grid(w.grid, g, "covariant_strain");
  if (Rz.size() != g.size() || u_perp.rows() != g.size() || u_perp.cols() < 2)
    throw ShapeMismatchError("covariant_strain: field sizes differ from the grid");
  if (!w.is_abelian(1e-12))
    throw Error("covariant_strain: gauge field must be z-only");
  const auto S           = stencils_for(g);
  const VectorField& R0  = prob.reference.positions;
  const ScalarField z0   = R0.col(2);
  std::array<ScalarField, 2> dX, dY, dUx, dUy, dz, dz0, gauge;
  for (int a = 0; a < 2; ++a) {
    dX[a]  = S->d(a) * R0.col(0);
    dY[a]  = S->d(a) * R0.col(1);
    dUx[a] = S->d(a) * u_perp.col(0);
    dUy[a] = S->d(a) * u_perp.col(1);
    dz[a]  = S->d(a) * Rz;
    dz0[a] = S->d(a) * z0;
    // eps_(alpha beta) d_a R0^beta R0^alpha = x d_a Y - y d_a X
    gauge[a] = R0.col(0).cwiseProduct(dY[a]) - R0.col(1).cwiseProduct(dX[a]);
  }
  auto comp = [&](int a, int b) -> ScalarField {
    return dX[a].cwiseProduct(dUx[b]) + dY[a].cwiseProduct(dUy[b]) + dX[b].cwiseProduct(dUx[a]) +
           dY[b].cwiseProduct(dUy[a]) + gauge[a].cwiseProduct(w[b].col(2)) + gauge[b].cwiseProduct(w[a].col(2)) +
           dz[a].cwiseProduct(dz[b]) - dz0[a].cwiseProduct(dz0[b]);
  };
  return {g, comp(0, 0), comp(0, 1), comp(1, 1)};
}

namespace detail {

  /// Covariant Hessian operators D_a D_b = d_a d_b - Gamma^c_ab d_c as sparse matrices.
  struct CovariantHessian
  {
    std::array<SparseMatrix, 3> S; ///< coordinate second derivatives, slot a + b
    std::array<SparseMatrix, 3> T; ///< Gamma^c_ab d_c

    explicit CovariantHessian(const Connection& c) {
      const auto st = stencils_for(c.grid);
      for (int a = 0; a < 2; ++a)
        for (int b = a; b < 2; ++b) {
          const int s = a + b;
          S[s]        = st->dd(a, b);
          T[s]        = SparseMatrix(c(0, a, b).asDiagonal() * st->du) + SparseMatrix(c(1, a, b).asDiagonal() * st->dv);
        }
    }
    SparseMatrix op(int a, int b) const { return S[a + b] - T[a + b]; }
  };

  /// g^ab x_a y_b for covector fields given by components.
  inline ScalarField inner(const MetricField& m, const ScalarField& xu, const ScalarField& xv, const ScalarField& yu,
                           const ScalarField& yv) {
    return m.iuu.cwiseProduct(xu.cwiseProduct(yu)) + m.iuv.cwiseProduct(xu.cwiseProduct(yv) + xv.cwiseProduct(yu)) +
           m.ivv.cwiseProduct(xv.cwiseProduct(yv));
  }

} // namespace detail

/**
 * \brief Pointwise residuals with standard stencils:
 *
 *   res_z   = kappa Delta_cov^2 (R^z - R^z_0) - (1/2) (D_a D_b R^z) rho^ab - p,
 *   res_trE = (lambda / 2 mu + 1) Delta_cov trE - [ Q(R^z) - Q(R^z_0) + 4 pi nu delta / sqrt g ],
 *
 * with rho^ab = 2 eps^ac eps^bd D_c D_d chi and Q(R) = D_a D_b R D^a D^b R - (Delta_cov R)^2.
 * The delta loads are the singular nodes registered on w. Biharmonics compose two
 * one-sided-edge Laplacians, so the two outer node rings are low order.
 */
inline std::pair<ScalarField, ScalarField> covariant_residual(const SurfaceProblem& prob, const CovariantState& st,
                                                              const GaugeField& w) {
  const Grid& g        = prob.grid();
  const MetricField& m = prob.metric;
  require_same_grid(st.grid, g, "covariant_residual");
  require_same_grid(w.grid, g, "covariant_residual");
  const detail::CovariantHessian hess(prob.connection);
  const SparseMatrix L = covariant_laplacian_matrix(m, EdgeRows::one_sided);
  const ScalarField z0 = prob.rz0();
  const ScalarField det = m.guu.cwiseProduct(m.gvv) - m.guv.cwiseProduct(m.guv);

  auto H = [&](const ScalarField& f) {
    return std::array<ScalarField, 3>{hess.op(0, 0) * f, hess.op(0, 1) * f, hess.op(1, 1) * f};
  };
  const auto HR = H(st.Rz), Hc = H(st.chi);
  // sigma^ab = eps^ac eps^bd D_c D_d chi
  const ScalarField s11 = Hc[2].cwiseQuotient(det), s12 = -Hc[1].cwiseQuotient(det), s22 = Hc[0].cwiseQuotient(det);
  ScalarField res_z = prob.params.kappa * (L * (L * (st.Rz - z0))) -
                      (s11.cwiseProduct(HR[0]) + 2.0 * s12.cwiseProduct(HR[1]) + s22.cwiseProduct(HR[2]));
  if (prob.pressure.size())
    res_z -= prob.pressure;

  auto Q = [&](const std::array<ScalarField, 3>& h) {
    // g^ac g^bd H_ab H_cd - (g^ab H_ab)^2 = -2 det(H) / det(g)
    return (-2.0 * (h[0].cwiseProduct(h[2]) - h[1].cwiseProduct(h[1]))).cwiseQuotient(det).eval();
  };
  ScalarField load = ScalarField::Zero(g.size());
  for (const auto& sn : w.singular)
    load += 4.0 * pi * sn.nu * point_load(m, SourceSite::at(sn.node));
  const ScalarField res_tre =
      covariant_tre_prefactor(prob.params) * (L * st.trE) - (Q(HR) - Q(H(z0)) + load);
  return {res_z, res_tre};
}

struct CovariantOptions
{
  double tol{1e-9};
  int max_iter{50};
  double validity_threshold{0.2};
};

struct CovariantReport
{
  CovariantState state;
  int iterations{0};
  double residual{0.0};     ///< relative max nodal residual of the height equation
  double residual_abs{0.0};
  bool converged{false};
  double max_delta_normal{0.0}; ///< max |N - N_p| of the deformed surface over the patch
  bool validity_violated{false};
};

/**
 * \brief Newton solver for the covariant system with clamped-to-reference height
 * (R^z = R^z_0, d_n R^z = d_n R^z_0) and stress-free edges (chi = d_n chi = 0).
 *
 * The Airy function is eliminated exactly after every step. The height residual is
 * the discrete adjoint of the covariant Monge-Ampere operator plus the curvature
 * terms that turn D_a D_b (chi cof^ab) into sigma^ab D_a D_b R:
 *
 *   sigma^ab D_a D_b R = D_a D_b (chi cof^ab) + 2 K <grad chi, grad R> + chi D_a (K D^a R).
 *
 * Both extras vanish on a plane.
 */
class CovariantPlate
{
public:
  explicit CovariantPlate(const SurfaceProblem& prob)
      : prob_{prob},
        ma_{prob.grid()},
        hess_{prob.connection} {
    const Grid& g        = prob.grid();
    const MetricField& m = prob.metric;
    const auto n         = g.size();
    k0_                  = k0(prob.params);
    wg_                  = g.weights().cwiseProduct(m.sqrt_g);
    det_                 = m.guu.cwiseProduct(m.gvv) - m.guv.cwiseProduct(m.guv);
    for (Eigen::Index k = 0; k < n; ++k)
      if (!g.on_open_boundary(k))
        interior_.push_back(k);
    P_ = detail::selector(n, interior_);
    const SparseMatrix Lc = covariant_laplacian_matrix(m, EdgeRows::mirror_ghost);
    lc_                   = Lc;
    const SparseMatrix L  = Lc * P_;
    B_                    = SparseMatrix(L.transpose() * wg_.asDiagonal() * L);
    chi_solver_.compute(B_);
    if (chi_solver_.info() != Eigen::Success)
      throw SolverError("covariant Airy factorization failed", 0.0);
    lap_  = covariant_laplacian_matrix(m, EdgeRows::one_sided);
    s_    = 2.0 * pi * prob.defect.nu * point_load(m, prob.site);
    p_    = prob.pressure.size() ? prob.pressure : ScalarField::Zero(n);
    z0_   = prob.rz0();
    K_    = prob.curvature.gaussian_curvature;
    const auto st = stencils_for(g);
    du_   = st->du;
    dv_   = st->dv;
    Ku_   = du_ * K_;
    Kv_   = dv_ * K_;
    // quadratic pieces of det(H - G) - det(H), H = S R, G = T R
    quad_ = {{-1.0, hess_.S[0], hess_.T[2]}, {-1.0, hess_.S[2], hess_.T[0]}, {2.0, hess_.S[1], hess_.T[1]},
             {1.0, hess_.T[0], hess_.T[2]},  {-1.0, hess_.T[1], hess_.T[1]}};
    d0_   = det_g(z0_);
  }

  /// det(g^-1 DD R), zero on edge rows.
  ScalarField det_g(const ScalarField& R) const {
    ScalarField d = ma_(R);
    for (const auto& q : quad_)
      d += q.alpha * (q.P * R).cwiseProduct(q.Q * R);
    d = d.cwiseQuotient(det_);
    for (Eigen::Index k = 0; k < d.size(); ++k)
      if (prob_.grid().on_open_boundary(k))
        d[k] = 0.0;
    return d;
  }

  SparseMatrix det_g_jacobian(const ScalarField& R) const {
    SparseMatrix J = ma_.jacobian(R);
    for (const auto& q : quad_) {
      const ScalarField PR = q.P * R, QR = q.Q * R;
      J += q.alpha * (SparseMatrix(QR.asDiagonal() * q.P) + SparseMatrix(PR.asDiagonal() * q.Q));
    }
    return SparseMatrix(edge_mask_inv_det() * J);
  }

  SparseMatrix det_g_contracted_hessian(const ScalarField& lambda) const {
    const ScalarField l = (edge_mask_inv_det() * lambda).eval();
    SparseMatrix M      = ma_.contracted_hessian(l);
    for (const auto& q : quad_) {
      SparseMatrix t = SparseMatrix(q.P.transpose() * l.asDiagonal() * q.Q);
      M += q.alpha * SparseMatrix(t + SparseMatrix(t.transpose()));
    }
    return M;
  }

  ScalarField chi_of(const ScalarField& R) const {
    const ScalarField rhs = k0_ * P_.transpose() * wg_.cwiseProduct(s_ - det_g(R) + d0_);
    return P_ * chi_solver_.solve(rhs);
  }

  /// Curvature terms 2 K <grad chi, grad R> + chi (K Delta R + <grad K, grad R>).
  ScalarField curvature_terms(const ScalarField& R, const ScalarField& chi) const {
    const MetricField& m  = prob_.metric;
    const ScalarField Ru  = du_ * R, Rv = dv_ * R, cu = du_ * chi, cv = dv_ * chi;
    return 2.0 * K_.cwiseProduct(detail::inner(m, cu, cv, Ru, Rv)) +
           chi.cwiseProduct(K_.cwiseProduct(lap_ * R) + detail::inner(m, Ku_, Kv_, Ru, Rv));
  }

  /// Full-length weighted height residual (zero on edge nodes).
  ScalarField height_residual(const ScalarField& R, const ScalarField& chi) const {
    const ScalarField dR = P_.transpose() * (R - z0_);
    ScalarField r        = P_ * (prob_.params.kappa * (B_ * dR));
    r -= det_g_jacobian(R).transpose() * wg_.cwiseProduct(chi);
    r -= wg_.cwiseProduct(curvature_terms(R, chi) + p_);
    for (Eigen::Index k = 0; k < r.size(); ++k)
      if (prob_.grid().on_open_boundary(k))
        r[k] = 0.0;
    return r;
  }

  CovariantReport solve(ScalarField R, const CovariantOptions& opt = {}) const {
    const Grid& g = prob_.grid();
    if (R.size() == 0)
      R = z0_;
    if (R.size() != g.size())
      throw ShapeMismatchError("covariant solve: initial height has the wrong size");
    for (Eigen::Index k = 0; k < g.size(); ++k)
      if (g.on_open_boundary(k))
        R[k] = z0_[k];
    ScalarField chi = chi_of(R);
    CovariantReport rep{CovariantState{g, {}, {}, {}}};
    const double scale0 = residual_scale(R, chi);
    Eigen::SparseLU<SparseMatrix> lu;
    bool analyzed = false;
    for (int it = 0;; ++it) {
      const ScalarField F = height_residual(R, chi);
      rep.residual_abs    = F.cwiseQuotient(wg_).cwiseAbs().maxCoeff();
      rep.residual        = rep.residual_abs / std::max(scale0, residual_scale(R, chi));
      rep.iterations      = it;
      if (rep.residual <= opt.tol || rep.residual_abs == 0.0) {
        rep.converged = true;
        break;
      }
      if (it >= opt.max_iter)
        break;
      const SparseMatrix K = newton_matrix(R, chi);
      if (!analyzed) {
        lu.analyzePattern(K);
        analyzed = true;
      }
      lu.factorize(K);
      if (lu.info() != Eigen::Success)
        throw SolverError("covariant Newton: singular Jacobian", rep.residual, it);
      const auto ni   = Eigen::Index(interior_.size());
      ScalarField rhs = ScalarField::Zero(2 * ni);
      rhs.head(ni)    = -(P_.transpose() * F);
      const ScalarField dR = P_ * ScalarField(lu.solve(rhs).head(ni));

      const double phi0 = merit(F);
      double alpha      = 1.0;
      bool accepted     = false;
      for (int b = 0; b < 30; ++b) {
        const ScalarField Rn = R + alpha * dR;
        const ScalarField cn = chi_of(Rn);
        if (merit(height_residual(Rn, cn)) <= (1.0 - 1e-4 * alpha) * phi0) {
          R        = Rn;
          chi      = cn;
          accepted = true;
          break;
        }
        alpha *= 0.5;
      }
      if (!accepted)
        throw SolverError("covariant Newton: line search failed", rep.residual, it);
    }
    rep.state.Rz  = R;
    rep.state.chi = chi;
    rep.state.trE = (lc_ * chi) / (prob_.params.lambda + prob_.params.mu);
    rep.max_delta_normal  = max_delta_normal(R);
    rep.validity_violated = rep.max_delta_normal > opt.validity_threshold;
    return rep;
  }

  /// max |N - e_z| of the surface (x0, y0, R).
  double max_delta_normal(const ScalarField& R) const {
    VectorField pos = prob_.reference.positions;
    pos.col(2)      = R;
    const VectorField N = unit_normals(Embedding(prob_.grid(), pos));
    return (N.rowwise() - Vec3::UnitZ().transpose()).rowwise().norm().maxCoeff();
  }

  double k0_value() const { return k0_; }

private:
  struct Quad
  {
    double alpha;
    SparseMatrix P;
    SparseMatrix Q;
  };

  SparseMatrix edge_mask_inv_det() const {
    ScalarField d = det_.cwiseInverse();
    for (Eigen::Index k = 0; k < d.size(); ++k)
      if (prob_.grid().on_open_boundary(k))
        d[k] = 0.0;
    return SparseMatrix(d.asDiagonal());
  }

  double merit(const ScalarField& F) const { return F.cwiseQuotient(wg_.cwiseSqrt()).norm(); }

  double residual_scale(const ScalarField& R, const ScalarField& chi) const {
    const ScalarField a = (P_ * (prob_.params.kappa * (B_ * (P_.transpose() * (R - z0_))))).cwiseQuotient(wg_);
    const ScalarField b = (det_g_jacobian(R).transpose() * wg_.cwiseProduct(chi)).cwiseQuotient(wg_);
    const ScalarField c = curvature_terms(R, chi);
    double sc           = 0.0;
    for (auto k : interior_)
      sc = std::max({sc, std::abs(a[k]), std::abs(b[k]), std::abs(c[k]), std::abs(p_[k])});
    return std::max(sc, 1e-300);
  }

  SparseMatrix newton_matrix(const ScalarField& R, const ScalarField& chi) const {
    const MetricField& m = prob_.metric;
    const ScalarField Ru = du_ * R, Rv = dv_ * R, cu = du_ * chi, cv = dv_ * chi;
    const auto W         = wg_.asDiagonal();
    // d(curvature terms)/dR and /dchi
    const ScalarField au = m.iuu.cwiseProduct(cu) + m.iuv.cwiseProduct(cv);
    const ScalarField av = m.iuv.cwiseProduct(cu) + m.ivv.cwiseProduct(cv);
    const ScalarField ku = m.iuu.cwiseProduct(Ku_) + m.iuv.cwiseProduct(Kv_);
    const ScalarField kv = m.iuv.cwiseProduct(Ku_) + m.ivv.cwiseProduct(Kv_);
    const SparseMatrix dC_dR = SparseMatrix((2.0 * K_.cwiseProduct(au) + chi.cwiseProduct(ku)).asDiagonal() * du_) +
                               SparseMatrix((2.0 * K_.cwiseProduct(av) + chi.cwiseProduct(kv)).asDiagonal() * dv_) +
                               SparseMatrix(chi.cwiseProduct(K_).asDiagonal() * lap_);
    const ScalarField bu = m.iuu.cwiseProduct(Ru) + m.iuv.cwiseProduct(Rv);
    const ScalarField bv = m.iuv.cwiseProduct(Ru) + m.ivv.cwiseProduct(Rv);
    const ScalarField c0 = K_.cwiseProduct(lap_ * R) + detail::inner(m, Ku_, Kv_, Ru, Rv);
    const SparseMatrix dC_dchi = SparseMatrix((2.0 * K_.cwiseProduct(bu)).asDiagonal() * du_) +
                                 SparseMatrix((2.0 * K_.cwiseProduct(bv)).asDiagonal() * dv_) +
                                 SparseMatrix(c0.asDiagonal());
    const SparseMatrix J = det_g_jacobian(R);
    const SparseMatrix M = det_g_contracted_hessian(wg_.cwiseProduct(chi));
    const SparseMatrix A11 = prob_.params.kappa * B_ - SparseMatrix(P_.transpose() * (M + SparseMatrix(W * dC_dR)) * P_);
    const SparseMatrix A12 = -SparseMatrix(P_.transpose() * (SparseMatrix(J.transpose() * W) + SparseMatrix(W * dC_dchi)) * P_);
    const SparseMatrix A21 = -SparseMatrix(P_.transpose() * W * J * P_);
    const SparseMatrix A22 = -(1.0 / k0_) * B_;
    const auto ni          = Eigen::Index(interior_.size());
    std::vector<Triplet> t;
    auto put = [&](const SparseMatrix& A, Eigen::Index r0, Eigen::Index c0i) {
      for (int c = 0; c < A.outerSize(); ++c)
        for (SparseMatrix::InnerIterator it(A, c); it; ++it)
          t.emplace_back(r0 + it.row(), c0i + it.col(), it.value());
    };
    put(A11, 0, 0);
    put(A12, 0, ni);
    put(A21, ni, 0);
    put(A22, ni, ni);
    return detail::from_triplets(2 * ni, 2 * ni, t);
  }

  SurfaceProblem prob_;
  MongeAmpere ma_;
  detail::CovariantHessian hess_;
  std::vector<Quad> quad_;
  double k0_{};
  ScalarField wg_, det_, s_, p_, z0_, K_, Ku_, Kv_, d0_;
  std::vector<Eigen::Index> interior_;
  SparseMatrix P_, B_, lc_, lap_, du_, dv_;
  Eigen::SimplicialLLT<SparseMatrix> chi_solver_;
};

/// Solve from the reference height; throws SolverError unless converged.
inline CovariantReport solve_single_disclination(const SurfaceProblem& prob, const CovariantOptions& opt = {},
                                                 const ScalarField& seed = {}) {
  CovariantPlate plate(prob);
  CovariantReport rep = plate.solve(seed, opt);
  if (!rep.converged)
    throw SolverError("covariant Newton did not converge", rep.residual, rep.iterations);
  return rep;
}

} // namespace discgauge
