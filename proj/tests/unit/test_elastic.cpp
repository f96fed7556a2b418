#include <discgauge/elastic.hpp>

#include <gtest/gtest.h>

using namespace discgauge;

namespace {

Grid unit_square(int n) { return Grid(n, n, {0, 1}, {0, 1}, Topology::open_patch); }

Embedding plane(const Grid& g) {
  return Embedding::sample(g, [](double x, double y) { return Vec3(x, y, 0); });
}

} // namespace

TEST(Material, ValidationAndK0) {
  MaterialParams p;
  p.lambda = 1;
  p.mu     = 1;
  EXPECT_NEAR(k0(p), 8.0 / 3.0, 1e-15);
  p.mu = 0;
  EXPECT_THROW(p.validate(), Error);
  EXPECT_EQ(k0(p), 0.0);
  p.mu     = 1;
  p.lambda = 1e6;
  EXPECT_NEAR(k0(p), 4.0, 4e-4);
  p.lambda = -2;
  EXPECT_THROW(k0(p), Error);
  EXPECT_THROW(p.validate(), Error);
  MaterialParams q;
  q.s = 0;
  EXPECT_THROW(q.validate(), Error);
  EXPECT_NO_THROW(MaterialParams{}.validate());
}

TEST(Strain, ReferenceAndDilation) {
  const Grid g = unit_square(9);
  const auto e0 = plane(g);
  const auto g0 = induced_metric(e0);
  const auto w  = GaugeField::zero(g);
  const auto E0 = strain_tensor(g0, e0, w);
  EXPECT_EQ(E0.uu.cwiseAbs().maxCoeff() + E0.uv.cwiseAbs().maxCoeff() + E0.vv.cwiseAbs().maxCoeff(), 0.0);

  const double eps = 0.03;
  const Embedding dil(g, (1 + eps) * e0.positions);
  const auto E = strain_tensor(g0, dil, w);
  const double expect = (1 + eps) * (1 + eps) - 1;
  EXPECT_LT((E.uu.array() - expect).abs().maxCoeff(), 1e-14);
  EXPECT_LT(E.uv.cwiseAbs().maxCoeff(), 1e-14);

  MaterialParams p;
  p.lambda = 0.7;
  p.mu     = 1.3;
  // unit square with E = eps I: (1/8)(4 lambda + 4 mu) eps^2
  EXPECT_NEAR(elastic_energy(E, g0, p), 0.5 * (p.lambda + p.mu) * expect * expect, 1e-14);
}

TEST(Strain, RigidRotationIsStrainFree) {
  const Grid g = unit_square(17);
  const auto e0 = Embedding::sample(g, [](double x, double y) { return Vec3(x, y, 0.2 * x * x - 0.1 * x * y); });
  const auto g0 = induced_metric(e0);
  const Mat3 Q  = Eigen::AngleAxisd(0.7, Vec3(1, 2, -1).normalized()).toRotationMatrix();
  const Embedding rot(g, e0.positions * Q.transpose());
  const auto E = strain_tensor(g0, rot, GaugeField::zero(g));
  EXPECT_LT(elastic_energy(E, g0, MaterialParams{}), 1e-12);
}

TEST(Strain, GlobalRotationWithGaugeField) {
  const Grid g = unit_square(17);
  const auto e0 = plane(g);
  const auto g0 = induced_metric(e0);
  const auto e  = Embedding::sample(g, [](double x, double y) { return Vec3(x + 0.01 * y, y, 0.05 * x * y); });
  GaugeField w  = GaugeField::zero(g);
  w.w[0]        = sample3(g, [](double x, double y) { return Vec3(0.02 * y, 0.01, 0.03 * x); });
  w.w[1]        = sample3(g, [](double x, double) { return Vec3(0.0, -0.02 * x, 0.01); });
  const Mat3 Q  = Eigen::AngleAxisd(1.1, Vec3(0.3, -1, 0.5).normalized()).toRotationMatrix();
  GaugeField wr = w;
  wr.w[0]       = w.w[0] * Q.transpose();
  wr.w[1]       = w.w[1] * Q.transpose();
  const Embedding er(g, e.positions * Q.transpose());
  const auto E  = strain_tensor(g0, e, w);
  const auto Er = strain_tensor(g0, er, wr);
  EXPECT_LT((E.uu - Er.uu).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((E.uv - Er.uv).cwiseAbs().maxCoeff(), 1e-12);
  MaterialParams p;
  EXPECT_NEAR(elastic_energy(E, g0, p), elastic_energy(Er, g0, p), 1e-12);
}

TEST(Strain, LinearizedAgreesToSecondOrder) {
  const Grid g = unit_square(33);
  const auto e0 = plane(g);
  const auto g0 = induced_metric(e0);
  const ScalarField ux = sample(g, [](double x, double y) { return std::sin(x + 2 * y); });
  const ScalarField uy = sample(g, [](double x, double y) { return x * y - 0.3 * y * y; });
  const ScalarField f  = sample(g, [](double x, double y) { return std::cos(2 * x) * y; });
  const ScalarField W1 = sample(g, [](double x, double y) { return 0.5 + x * y; });
  const ScalarField W2 = sample(g, [](double x, double) { return std::sin(3 * x); });
  auto defect = [&](double t) {
    // u and W scale as t^2, f as t, matching the ordering of the expansion
    const double t2 = t * t;
    VectorField pos = e0.positions;
    pos.col(0) += t2 * ux;
    pos.col(1) += t2 * uy;
    pos.col(2) += t * f;
    const auto w = GaugeField::abelian(g, t2 * W1, t2 * W2);
    const auto E = strain_tensor(g0, Embedding(g, pos), w);
    const auto L = linearized_membrane_strain(t2 * ux, t2 * uy, t * f, w, e0);
    return std::max({(E.uu - L.uu).cwiseAbs().maxCoeff(), (E.uv - L.uv).cwiseAbs().maxCoeff(),
                     (E.vv - L.vv).cwiseAbs().maxCoeff()}) /
           t2;
  };
  // the relative defect shrinks by about 4 per halving of t (dropped terms are O(t^4))
  const double r = defect(0.1) / defect(0.05);
  EXPECT_GT(r, 3.5);
  EXPECT_LT(r, 4.5);
}

TEST(Strain, LinearizedSpecialCases) {
  const Grid g = unit_square(17);
  const auto e0 = plane(g);
  const ScalarField z = ScalarField::Zero(g.size());
  const auto E0 = linearized_membrane_strain(z, z, z, GaugeField::zero(g), e0);
  EXPECT_EQ(E0.uu.cwiseAbs().maxCoeff(), 0.0);

  const ScalarField f = sample(g, [](double x, double y) { return x * x + 0.5 * x * y; });
  const auto Ef = linearized_membrane_strain(z, z, f, GaugeField::zero(g), e0);
  for (Eigen::Index k = 0; k < g.size(); ++k) {
    auto [i, j]    = g.ij(k);
    const double fx = 2 * g.u(i) + 0.5 * g.v(j), fy = 0.5 * g.u(i);
    EXPECT_NEAR(Ef.uu[k], fx * fx, 1e-12);
    EXPECT_NEAR(Ef.uv[k], fx * fy, 1e-12);
  }

  const Grid s = Grid(21, 21, {-1, 1}, {-1, 1}, Topology::open_patch);
  const auto es = plane(s);
  const auto w  = flat_vortex_potential({{0, 0}, 0.2}, s);
  const auto Ew = linearized_membrane_strain(ScalarField::Zero(s.size()), ScalarField::Zero(s.size()),
                                             ScalarField::Zero(s.size()), w, es);
  for (Eigen::Index k = 0; k < s.size(); ++k) {
    const double x = es.positions(k, 0), y = es.positions(k, 1);
    const double W1 = w[0](k, 2), W2 = w[1](k, 2);
    EXPECT_NEAR(Ew.uu[k], -2 * y * W1, 1e-14);
    EXPECT_NEAR(Ew.uv[k], -y * W2 + x * W1, 1e-14);
    EXPECT_NEAR(Ew.vv[k], 2 * x * W2, 1e-14);
  }
}

TEST(Stress, DensityIdentities) {
  const Grid g = unit_square(9);
  MaterialParams p;
  p.lambda = 0.4;
  p.mu     = 1.7;
  const auto flat = MetricField::flat(g);
  StrainField E   = StrainField::zero(g);
  EXPECT_EQ(stress_density(E, flat, p).uu.cwiseAbs().maxCoeff(), 0.0);
  E.uu.setConstant(0.01);
  E.vv.setConstant(0.01);
  const auto rho = stress_density(E, flat, p);
  EXPECT_NEAR(rho.uu[4], (2 * p.lambda + 2 * p.mu) * 0.01, 1e-15);
  EXPECT_NEAR(rho.uv[4], 0.0, 1e-15);

  const auto curved = MetricField::analytic(g, [](double u, double v) {
    return Mat2{{1.5 + u, 0.2 * v}, {0.2 * v, 0.8 + u * v}};
  });
  StrainField Ec{g, sample(g, [](double u, double) { return 0.01 * u; }), sample(g, [](double, double v) { return -0.02 * v; }),
                 sample(g, [](double u, double v) { return 0.03 * u * v; })};
  const auto rc = stress_density(Ec, curved, p);
  for (Eigen::Index k = 0; k < g.size(); ++k) {
    const Mat2 gk = curved.g(k);
    const Mat2 low = gk * rc.at(k) * gk;
    const double tr = (curved.ginv(k).cwiseProduct(Ec.at(k))).sum();
    EXPECT_LT((low - (p.lambda * gk * tr + 2 * p.mu * Ec.at(k))).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Stress, VectorsOnFlatPlane) {
  const Grid g = unit_square(9);
  const auto e = plane(g);
  StressField rho = StressField::zero(g);
  const auto z    = stress_vectors(e, GaugeField::zero(g), rho);
  EXPECT_EQ(z.sigma[0].cwiseAbs().maxCoeff(), 0.0);
  rho.uu.setOnes();
  rho.vv.setOnes();
  const auto s = stress_vectors(e, GaugeField::zero(g), rho);
  EXPECT_LT((s.sigma[0].rowwise() - 0.5 * Vec3::UnitX().transpose()).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((s.sigma[1].rowwise() - 0.5 * Vec3::UnitY().transpose()).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(ElasticEnergy, QuadraticScaling) {
  const Grid g = unit_square(9);
  const auto m = MetricField::analytic(g, [](double u, double) { return Mat2{{1 + u, 0.1}, {0.1, 2.0}}; });
  StrainField E{g, sample(g, [](double u, double) { return 0.01 * u; }), sample(g, [](double, double v) { return 0.02 * v; }),
                sample(g, [](double u, double v) { return -0.01 * u * v; })};
  MaterialParams p;
  const double e1 = elastic_energy(E, m, p);
  StrainField E3{g, 3.0 * E.uu, 3.0 * E.uv, 3.0 * E.vv};
  EXPECT_NEAR(elastic_energy(E3, m, p), 9.0 * e1, 1e-15);
  EXPECT_GT(e1, 0.0);
}
