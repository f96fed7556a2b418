#include <discgauge/gauge.hpp>

#include <gtest/gtest.h>

#include <random>

using namespace discgauge;

namespace {

Grid square(int n, double L = 1.0) { return Grid(n, n, {-L, L}, {-L, L}, Topology::open_patch); }

// smooth periodic test data on the unit torus
GaugeField smooth_field(const Grid& g) {
  GaugeField w = GaugeField::zero(g);
  w.w[0]       = sample3(g, [](double u, double v) {
    return Vec3(std::sin(2 * pi * u), 0.5 * std::cos(2 * pi * v), 0.3 * std::sin(2 * pi * (u + v)));
  });
  w.w[1]       = sample3(g, [](double u, double v) {
    return Vec3(0.2 * std::cos(2 * pi * (u - v)), std::sin(2 * pi * v) * std::cos(2 * pi * u), 0.7);
  });
  return w;
}

std::vector<Mat3> smooth_rotation(const Grid& g) {
  return rotation_field(g, [](double u, double v) {
    return Vec3(0.8 * std::sin(2 * pi * u), 0.5 * std::cos(2 * pi * v), 1.1 * std::sin(2 * pi * (u + 2 * v)));
  });
}

} // namespace

TEST(AlgebraAction, CrossProductTable) {
  EXPECT_EQ(algebra_action(Vec3::UnitZ(), Vec3::UnitX()), Vec3::UnitY());
  EXPECT_EQ(algebra_action(Vec3(1, 2, 3), Vec3(2, 4, 6)), Vec3::Zero());
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const Vec3 r = algebra_action(Vec3::Unit(i), Vec3::Unit(j));
      for (int k = 0; k < 3; ++k) {
        const double eps = (i == j || j == k || i == k) ? 0.0 : (((j - i + 3) % 3 == 1) ? 1.0 : -1.0);
        EXPECT_EQ(r[k], eps);
      }
    }
}

TEST(CovariantDerivative, ZeroFieldAndConstantEmbedding) {
  const Grid g = square(9);
  const auto e = Embedding::sample(g, [](double x, double y) { return Vec3(x, y, x * y); });
  const auto T = gauge_covariant_derivative(GaugeField::zero(g), e);
  EXPECT_LT((T[0] - e.tangent(0)).cwiseAbs().maxCoeff(), 1e-15);

  const auto c = Embedding::sample(g, [](double, double) { return Vec3(1, 2, 3); });
  GaugeField w = GaugeField::zero(g);
  w.w[0].col(2).setOnes();
  const auto Tc = gauge_covariant_derivative(w, c);
  EXPECT_LT((Tc[0].rowwise() - Vec3(-2, 1, 0).transpose()).cwiseAbs().maxCoeff(), 1e-13);
  EXPECT_LT(Tc[1].cwiseAbs().maxCoeff(), 1e-13);
}

TEST(FieldStrength, AbelianConstantAndPureGauge) {
  const Grid g = square(17);
  const auto ab = GaugeField::abelian(g, sample(g, [](double x, double y) { return x * y; }),
                                      sample(g, [](double x, double) { return x * x; }));
  const auto F = field_strength(ab);
  EXPECT_LT(F.f12.leftCols(2).cwiseAbs().maxCoeff(), 1e-15);
  const ScalarField expect = sample(g, [](double x, double) { return 2 * x - x; });
  EXPECT_LT((F.f12.col(2) - expect).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((F.component(1, 0) + F.component(0, 1)).cwiseAbs().maxCoeff(), 0.0 + 1e-300);

  GaugeField c = GaugeField::zero(g);
  c.w[0].col(0).setOnes();
  c.w[1].col(1).setOnes();
  const auto Fc = field_strength(c);
  EXPECT_LT((Fc.f12.rowwise() - Vec3::UnitZ().transpose()).cwiseAbs().maxCoeff(), 1e-15);

  auto pure = [](int n) {
    Grid t(n, n, {0, 1}, {0, 1}, Topology::periodic_both);
    return field_strength(gauge_transform(GaugeField::zero(t), smooth_rotation(t))).f12.cwiseAbs().maxCoeff();
  };
  EXPECT_LT(pure(64), 1.0); // |W| is about 15 here
  EXPECT_GT(pure(32) / pure(64), 3.5);
}

TEST(YangMills, ZeroAndGaugeInvariant) {
  const Grid g = square(9);
  EXPECT_EQ(yang_mills_energy(field_strength(GaugeField::zero(g)), MetricField::flat(g), 1.0).energy, 0.0);

  auto defect = [](int n) {
    Grid t(n, n, {0, 1}, {0, 1}, Topology::periodic_both);
    const auto m  = MetricField::flat(t);
    const auto w  = smooth_field(t);
    const double a = yang_mills_energy(field_strength(w), m, 2.0).energy;
    const double b = yang_mills_energy(field_strength(gauge_transform(w, smooth_rotation(t))), m, 2.0).energy;
    return std::abs(a - b) / a;
  };
  const double d1 = defect(32), d2 = defect(64);
  EXPECT_LT(d2, 0.02);
  EXPECT_GT(d1 / d2, 3.0);
}

TEST(YangMills, SmoothedVortexMatchesRadialQuadrature) {
  const double nu = 1.0 / 6.0, rc = 0.3, s = 1.5;
  const Grid g    = square(161, 2.0);
  GaugeField w    = GaugeField::zero(g);
  for (Eigen::Index k = 0; k < g.size(); ++k) {
    auto [i, j]     = g.ij(k);
    const double x  = g.u(i), y = g.v(j), r2 = x * x + y * y;
    const double fr = r2 > 0 ? (1.0 - std::exp(-r2 / (rc * rc))) / r2 : 1.0 / (rc * rc);
    w.w[0](k, 2)    = -nu * y * fr;
    w.w[1](k, 2)    = nu * x * fr;
  }
  const double E = yang_mills_energy(field_strength(w), MetricField::flat(g), s).energy;
  // radial oracle: (s/2) int_0^R F(r)^2 2 pi r dr with F = 2 nu exp(-r^2/rc^2) / rc^2
  const int n = 20000;
  double radial = 0.0;
  for (int k = 0; k < n; ++k) {
    const double r = (k + 0.5) * 2.0 / n;
    const double F = 2.0 * nu * std::exp(-r * r / (rc * rc)) / (rc * rc);
    radial += F * F * 2.0 * pi * r * (2.0 / n);
  }
  radial *= 0.5 * s;
  EXPECT_NEAR(E, radial, 0.01 * radial);
}

TEST(YangMills, CoreCutoffAndWarning) {
  const Grid g = square(41);
  const auto w = flat_vortex_potential({{0, 0}, 0.2}, g);
  const auto m = MetricField::flat(g);
  const auto F = field_strength(w);
  const auto r = yang_mills_energy(F, m, 1.0, w.singular);
  EXPECT_FALSE(r.unbounded_warning);
  EXPECT_EQ(r.skipped_nodes, 13u); // lattice points within radius 2
  YangMillsOptions none;
  none.core_radius = 0.0;
  EXPECT_TRUE(yang_mills_energy(F, m, 1.0, w.singular, none).unbounded_warning);
  EXPECT_LT(r.energy, yang_mills_energy(F, m, 1.0, w.singular, none).energy);
}

TEST(FlatVortex, ValuesAndFlux) {
  const Grid g = square(81);
  const auto w = flat_vortex_potential({{0, 0}, 1.0}, g);
  const auto k = g.nearest(0.5, 0.0);
  EXPECT_NEAR(w[0](k, 2), 0.0, 1e-15);
  EXPECT_NEAR(w[1](k, 2), 2.0, 1e-12); // nu x / r^2 at (1/2, 0)
  ASSERT_EQ(w.singular.size(), 1u);
  EXPECT_EQ(w.singular[0].node, g.index(40, 40));
  EXPECT_EQ(w[0].row(g.index(40, 40)).norm(), 0.0);

  const auto w6 = flat_vortex_potential({{0, 0}, 1.0 / 6.0}, g);
  EXPECT_NEAR(circulation_rectangle(w6, 20, 60, 20, 60), 2 * pi / 6, 1e-6);
  EXPECT_NEAR(circulation_rectangle(w6, 4, 76, 10, 70), 2 * pi / 6, 1e-6);
  EXPECT_NEAR(circulation_rectangle(w6, 50, 70, 10, 70), 0.0, 1e-6); // loop not enclosing

  const auto w0 = flat_vortex_potential({{0, 0}, 0.0}, g);
  EXPECT_EQ(w0[0].cwiseAbs().maxCoeff() + w0[1].cwiseAbs().maxCoeff(), 0.0);
}

TEST(DisclinationDensity, VortexChargeAndSmoothField) {
  const Grid g = square(81);
  const auto m = MetricField::flat(g);
  const double nu = 1.0 / 6.0;
  const auto w    = flat_vortex_potential({{0, 0}, nu}, g);
  const ScalarField rho = disclination_density(w, m);
  for (double R : {0.3, 0.7}) {
    const double q = integrate(m, rho, [&](Eigen::Index k) {
      auto [i, j] = g.ij(k);
      return std::hypot(g.u(i), g.v(j)) < R;
    });
    EXPECT_NEAR(q, 2 * pi * nu, 1e-3);
  }
  EXPECT_EQ(disclination_density(GaugeField::zero(g), m).cwiseAbs().maxCoeff(), 0.0);

  GaugeField bad = GaugeField::zero(g);
  bad.w[0](3, 0) = 1.0;
  EXPECT_THROW(disclination_density(bad, m), Error);

  // smooth field on a curved metric against an independent 5-point curl
  auto err = [](int n) {
    Grid t(n, n, {0.2, 1.2}, {0.0, 1.0}, Topology::open_patch);
    const auto mm = MetricField::analytic(t, [](double r, double) { return Mat2{{1, 0}, {0, r * r}}; });
    const auto ww = GaugeField::abelian(t, sample(t, [](double u, double v) { return std::sin(u) * std::sin(2 * v); }),
                                        sample(t, [](double u, double v) { return std::exp(u) * std::cos(v); }));
    const ScalarField d = disclination_density(ww, mm);
    double e = 0.0;
    for (int i = 1; i + 1 < n; ++i)
      for (int j = 1; j + 1 < n; ++j) {
        const double u = t.u(i), v = t.v(j);
        const double exact = (std::exp(u) * std::cos(v) - 2 * std::sin(u) * std::cos(2 * v)) / u;
        e = std::max(e, std::abs(d[t.index(i, j)] - exact));
      }
    return e;
  };
  EXPECT_GT(err(33) / err(65), 3.5);
}

TEST(CovariantVortex, FlatLimitSphereFluxAndLinearity) {
  const Grid g = square(81);
  const auto m = MetricField::flat(g);
  const auto src = g.index(40, 40);
  const auto wc  = covariant_vortex_potential(0.2, SourceSite::at(src), m);
  const auto wf  = flat_vortex_potential({{0, 0}, 0.2}, g);
  double err = 0.0;
  for (Eigen::Index k = 0; k < g.size(); ++k) {
    auto [i, j]    = g.ij(k);
    const double r = std::hypot(g.u(i), g.v(j));
    if (r > 0.2 && r < 0.8)
      err = std::max(err, (wc[0].row(k) - wf[0].row(k)).norm() + (wc[1].row(k) - wf[1].row(k)).norm());
  }
  EXPECT_LT(err, 0.01);

  const Grid s  = Grid::sphere(64, 64);
  const auto ms = MetricField::analytic(s, [](double t, double) { return Mat2{{1, 0}, {0, std::sin(t) * std::sin(t)}}; });
  const double nu = 0.1;
  const auto ws   = covariant_vortex_potential(nu, SourceSite::low_apex(), ms);
  for (int i : {16, 32, 48}) {
    const double t = s.u(i);
    EXPECT_NEAR(circulation_ring(ws, i), 2 * pi * nu * 0.5 * (1 + std::cos(t)), 0.01 * 2 * pi * nu);
  }
  const auto wneg = covariant_vortex_potential(-nu, SourceSite::low_apex(), ms);
  EXPECT_EQ((wneg[1] + ws[1]).cwiseAbs().maxCoeff(), 0.0);
  const auto w3 = covariant_vortex_potential(3 * nu, SourceSite::low_apex(), ms);
  EXPECT_LT((w3[1] - 3.0 * ws[1]).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ReferenceMetric, ClosedFormIdentities) {
  const Grid g = square(21);
  const auto e0 = Embedding::sample(g, [](double x, double y) { return Vec3(x, y, 0); });
  EXPECT_LT((reference_metric_with_defects(e0, GaugeField::zero(g)).guu - induced_metric(e0).guu).cwiseAbs().maxCoeff(),
            1e-15);

  // planar formula with z-only W0: delta_ab + eps_(alpha a) W_b R^alpha + (a<->b) + W_a W_b R^2
  const auto w0 = GaugeField::abelian(g, sample(g, [](double x, double y) { return 0.1 * x - 0.2 * y * y; }),
                                      sample(g, [](double x, double y) { return 0.3 * x * y + 0.05; }));
  const auto ref = reference_metric_with_defects(e0, w0);
  const Mat2 eps{{0, 1}, {-1, 0}};
  double err = 0.0;
  for (Eigen::Index k = 0; k < g.size(); ++k) {
    const Vec3 R = e0.at(k);
    const double W[2] = {w0[0](k, 2), w0[1](k, 2)};
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b) {
        double v = a == b ? 1.0 : 0.0;
        for (int al = 0; al < 2; ++al)
          v += eps(al, a) * W[b] * R[al] + eps(al, b) * W[a] * R[al];
        v += W[a] * W[b] * R.squaredNorm();
        err = std::max(err, std::abs(ref.g(k)(a, b) - v));
      }
  }
  EXPECT_LT(err, 1e-12);

  // general curved e0 and non-abelian W0 against T_a . T_b
  const auto ec = Embedding::sample(g, [](double x, double y) { return Vec3(x + 0.1 * y * y, y, 0.3 * x * y + 1.0); });
  GaugeField wn = GaugeField::zero(g);
  wn.w[0]       = sample3(g, [](double x, double y) { return Vec3(0.1 * y, -0.05, 0.2 * x); });
  wn.w[1]       = sample3(g, [](double x, double y) { return Vec3(0.02, 0.1 * x * y, -0.1); });
  const auto a  = reference_metric_with_defects(ec, wn);
  const auto b  = gauged_metric(ec, wn);
  EXPECT_LT((a.guu - b.guu).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((a.guv - b.guv).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((a.gvv - b.gvv).cwiseAbs().maxCoeff(), 1e-12);
}
