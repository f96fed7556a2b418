#include <discgauge/config.hpp>

#include <gtest/gtest.h>

#include <random>

using namespace discgauge;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("discgauge_io_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Grid patch(int n) { return Grid(n, n + 2, {-1, 1}, {-0.5, 1.5}, Topology::open_patch); }

ScalarField random_field(const Grid& g, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mant(-1.0, 1.0);
  std::uniform_int_distribution<int> expo(-300, 300);
  ScalarField f(g.size());
  for (auto& x : f)
    x = std::ldexp(mant(rng), expo(rng) / 10);
  return f;
}

ExperimentConfig sample_config() {
  ExperimentConfig c;
  c.scenario             = "relax_shape";
  c.grid.n               = 21;
  c.grid.half_width      = 0.7;
  c.material.lambda      = 0.1 + 0.2;
  c.material.kappa       = 1e-3;
  c.material.kappa_g     = -2e-3;
  c.material.s           = 1.0 / 3.0;
  c.defects              = {{Vec2(0.1, -0.2), 1.0 / 6.0}, {Vec2(-0.3, 0.05), -0.05}};
  c.reference_defects    = {{Vec2(0.25, 0.25), 0.01}};
  c.boundary.shape       = ShapeBoundary::pinned;
  c.boundary.in_plane    = EdgeCondition::clamped;
  c.solver.tol           = 3e-7;
  c.solver.max_iter      = 1234;
  c.solver.checkpoint_every = 10;
  c.solver.resume        = "prev/checkpoint_000010.csv";
  c.solver.relax_gauge   = true;
  c.output_dir           = "out dir/with space";
  c.seed                 = 18446744073709551615ull;
  c.perturbation         = 1e-300;
  c.initial_shape        = "random";
  return c;
}

} // namespace

TEST(FormatDouble, ShortestRoundTrip) {
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(format_double(1.0), "1");
  EXPECT_EQ(format_double(1e-300), "1e-300");
  EXPECT_EQ(format_double(0.1 + 0.2), "0.30000000000000004");
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::uint64_t> bits;
  for (int t = 0; t < 20000; ++t) {
    double x;
    const std::uint64_t b = bits(rng);
    std::memcpy(&x, &b, sizeof x);
    if (!std::isfinite(x))
      continue;
    const std::string s = format_double(x);
    EXPECT_LE(s.size(), 24u);
    EXPECT_EQ(parse_double(s), x) << s;
  }
  EXPECT_THROW(parse_double("1.5x"), Error);
  EXPECT_THROW(parse_double(""), Error);
}

TEST(Csv, WriteThenReadReproducesValuesExactly) {
  const Grid g = patch(9);
  std::mt19937_64 rng(11);
  const FieldSet fs = {{"a", random_field(g, rng)}, {"b", random_field(g, rng)}};
  const auto dir    = scratch("csv");
  write_csv(dir / "f.csv", g, fs);
  const CsvTable t = read_csv(dir / "f.csv");
  ASSERT_EQ(t.header, (std::vector<std::string>{"u", "v", "a", "b"}));
  ASSERT_EQ(t.rows(), std::size_t(g.size()));
  for (Eigen::Index k = 0; k < g.size(); ++k) {
    auto [i, j] = g.ij(k);
    EXPECT_EQ(t.column("u")[k], g.u(i));
    EXPECT_EQ(t.column("v")[k], g.v(j));
    EXPECT_EQ(t.column("a")[k], fs[0].values[k]);
    EXPECT_EQ(t.column("b")[k], fs[1].values[k]);
  }
  // fixed formatting: a second write is byte-identical
  write_csv(dir / "g.csv", g, fs);
  EXPECT_EQ(slurp(dir / "f.csv"), slurp(dir / "g.csv"));
}

TEST(Csv, EmptyFieldListIsAnErrorAndWritesNothing) {
  const Grid g   = patch(5);
  const auto dir = scratch("empty");
  EXPECT_THROW(write_csv(dir / "f.csv", g, {}), Error);
  EXPECT_THROW(export_fields(dir / "f.vtk", g, {}, ExportFormat::vtk), Error);
  EXPECT_FALSE(fs::exists(dir));
  EXPECT_THROW(write_csv(dir / "f.csv", g, {{"a", ScalarField::Zero(3)}}), ShapeMismatchError);
  EXPECT_THROW(write_csv(dir / "f.csv", g, {{"a,b", ScalarField::Zero(g.size())}}), Error);
}

TEST(Csv, IoErrorsCarryThePath) {
  const auto dir = scratch("ioerr");
  fs::create_directories(dir);
  std::ofstream(dir / "plain") << "x";
  const fs::path bad = dir / "plain" / "f.csv";
  try {
    write_csv(bad, patch(5), {{"a", ScalarField::Zero(patch(5).size())}});
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find(bad.string()), std::string::npos);
    EXPECT_EQ(e.path(), bad);
  }
  EXPECT_THROW(read_csv(dir / "missing.csv"), IoError);
  std::ofstream(dir / "ragged.csv") << "u,v,a\n0,0,1\n0,1\n";
  EXPECT_THROW(read_csv(dir / "ragged.csv"), IoError);
}

TEST(Vtk, SchemaCheckPassesForWrittenFiles) {
  const Grid g = patch(7);
  std::mt19937_64 rng(5);
  FieldSet fs = {{"s", random_field(g, rng)}};
  VectorField v(g.size(), 3);
  v.setRandom();
  add_components(fs, "vel", v);
  const auto dir = scratch("vtk");
  VectorField pts(g.size(), 3);
  pts.setRandom();
  write_vtk(dir / "a.vtk", g, fs, &pts);
  const auto s = check_vtk(dir / "a.vtk");
  EXPECT_EQ(s.dims[0], g.nv());
  EXPECT_EQ(s.dims[1], g.nu());
  EXPECT_EQ(s.dims[2], 1);
  EXPECT_EQ(s.points, g.size());
  EXPECT_EQ(s.arrays, (std::vector<std::string>{"s", "vel"}));

  // truncation and count mismatches are rejected
  const std::string text = slurp(dir / "a.vtk");
  std::ofstream(dir / "cut.vtk") << text.substr(0, text.size() / 2);
  EXPECT_THROW(check_vtk(dir / "cut.vtk"), IoError);
  std::string wrong = text;
  wrong.replace(wrong.find("POINT_DATA " + std::to_string(g.size())), 11 + std::to_string(g.size()).size(),
                "POINT_DATA 3");
  std::ofstream(dir / "wrong.vtk") << wrong;
  EXPECT_THROW(check_vtk(dir / "wrong.vtk"), IoError);
  std::ofstream(dir / "bad.vtk") << "hello\n";
  EXPECT_THROW(check_vtk(dir / "bad.vtk"), IoError);
}

TEST(Vtk, ConvertFieldCsvUsesPositionColumns) {
  const Grid g   = patch(6);
  const auto dir = scratch("convert");
  VectorField R(g.size(), 3);
  R.setRandom();
  FieldSet fs;
  add_components(fs, "R", R);
  fs.push_back({"q", R.col(0) * 2.0});
  write_csv(dir / "f.csv", g, fs);
  convert_field_csv(dir / "f.csv", dir / "f.vtk", ExportFormat::vtk);
  const auto s = check_vtk(dir / "f.vtk");
  EXPECT_EQ(s.dims[0], g.nv());
  EXPECT_EQ(s.dims[1], g.nu());
  EXPECT_EQ(s.arrays, (std::vector<std::string>{"R", "q"}));
  std::ifstream in(dir / "f.vtk");
  std::string line;
  while (std::getline(in, line) && line.rfind("POINTS", 0) != 0) {
  }
  double x, y, z;
  in >> x >> y >> z;
  EXPECT_EQ(x, R(0, 0));
  EXPECT_EQ(z, R(0, 2));

  convert_field_csv(dir / "f.csv", dir / "q.csv", ExportFormat::csv, {"q"});
  const auto t = read_csv(dir / "q.csv");
  EXPECT_EQ(t.header, (std::vector<std::string>{"u", "v", "q"}));
  EXPECT_EQ(t.column("q")[5], fs.back().values[5]);
  EXPECT_THROW(convert_field_csv(dir / "f.csv", dir / "z.csv", ExportFormat::csv, {"nope"}), IoError);
}

TEST(GaugeFile, RoundTripWithSingularNodes) {
  const Grid g = patch(9);
  GaugeField w = flat_vortex_potential({Vec2(0.25, 0.5), 0.3}, g);
  w.w[0].col(0).setRandom();
  const auto dir = scratch("gauge");
  write_gauge_field(dir / "w.csv", w);
  const GaugeField r = read_gauge_field(dir / "w.csv", g);
  EXPECT_EQ(r.w[0], w.w[0]);
  EXPECT_EQ(r.w[1], w.w[1]);
  ASSERT_EQ(r.singular.size(), 1u);
  EXPECT_EQ(r.singular[0].node, w.singular[0].node);
  EXPECT_EQ(r.singular[0].nu, 0.3);

  VectorField R(g.size(), 3);
  R.setRandom();
  write_positions(dir / "p.csv", g, R);
  EXPECT_EQ(read_positions(dir / "p.csv", g), R);
  EXPECT_THROW(read_positions(dir / "p.csv", patch(5)), IoError);
}

TEST(Config, ParsesSectionedText) {
  const auto c = parse_ini(R"(
# comment
[experiment]
scenario = buckling_comparison
seed = 42

[grid]
kind = square
n = 17

[material]
kappa = 1e-3
kappa_g = -0.002

; defects may come in any section order
[defect.1]
nu = -0.1
[defect.0]
x = 0.5
nu = 0.1

[solver]
tol = 1e-7
relax_gauge = yes
)");
  EXPECT_EQ(c.scenario, "buckling_comparison");
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.grid.n, 17);
  EXPECT_EQ(c.material.kappa, 1e-3);
  EXPECT_EQ(c.material.kappa_g, -0.002);
  ASSERT_EQ(c.defects.size(), 2u);
  EXPECT_EQ(c.defects[0].center, Vec2(0.5, 0.0));
  EXPECT_EQ(c.defects[1].nu, -0.1);
  EXPECT_EQ(c.solver.tol, 1e-7);
  EXPECT_TRUE(c.solver.relax_gauge);
  EXPECT_EQ(c.solver.max_iter, SolverSpec{}.max_iter);
}

TEST(Config, RoundTripsLosslessly) {
  const ExperimentConfig c = sample_config();
  const std::string ini    = to_ini(c);
  EXPECT_EQ(parse_ini(ini), c) << ini;
  EXPECT_EQ(to_ini(parse_ini(ini)), ini);
  const std::string json = to_json(c).dump();
  EXPECT_EQ(parse_json(json), c) << json;
  EXPECT_EQ(parse_json(to_json(ExperimentConfig{}).dump()), ExperimentConfig{});
  EXPECT_EQ(parse_ini(to_ini(ExperimentConfig{})), ExperimentConfig{});

  // random values through both formats
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> U(-10.0, 10.0);
  for (int t = 0; t < 50; ++t) {
    ExperimentConfig r = c;
    r.material.lambda  = U(rng);
    r.material.nu      = U(rng) * 1e-7;
    r.grid.half_width  = std::exp(U(rng));
    r.defects.push_back({Vec2(U(rng), U(rng)), U(rng)});
    r.perturbation = U(rng) * 1e-200;
    EXPECT_EQ(parse_ini(to_ini(r)), r);
    EXPECT_EQ(parse_json(to_json(r).dump()), r);
  }
}

TEST(Config, RejectsMalformedInput) {
  EXPECT_THROW(parse_ini("[experiment]\nscenari = relax_shape\n"), ConfigError);
  EXPECT_THROW(parse_ini("[experimental]\nscenario = relax_shape\n"), ConfigError);
  EXPECT_THROW(parse_ini("scenario = relax_shape\n"), ConfigError);
  EXPECT_THROW(parse_ini("[grid]\nn = 3.5\n"), ConfigError);
  EXPECT_THROW(parse_ini("[material]\nkappa = soft\n"), ConfigError);
  EXPECT_THROW(parse_ini("[defect.1]\nnu = 0.1\n"), ConfigError);
  EXPECT_THROW(parse_ini("[defect.0]\nnu = 0.1\n[defect.00]\nnu = 0.2\n"), ConfigError);
  EXPECT_THROW(parse_ini("[defect.0]\nz = 1\n"), ConfigError);
  EXPECT_THROW(parse_ini("[boundary]\nshape = glued\n"), ConfigError);
  EXPECT_THROW(parse_ini("[solver]\nrelax_gauge = maybe\n"), ConfigError);
  EXPECT_THROW(parse_ini("[grid\nn = 3\n"), ConfigError);
  EXPECT_THROW(parse_json("{\"grid\": {\"n\": [1]}}"), ConfigError);
  EXPECT_THROW(parse_json("{\"defects\": {\"nu\": 1}}"), ConfigError);
  EXPECT_THROW(parse_json("[1, 2]"), ConfigError);
  EXPECT_THROW(parse_json("{"), ConfigError);
}

TEST(Config, SetterSharesKeysWithParsers) {
  ExperimentConfig c;
  for (const auto& [key, value] : config_entries(sample_config()))
    set_config_value(c, key, value);
  EXPECT_EQ(c, sample_config());
  set_config_value(c, "defect.2.nu", "0.5");
  EXPECT_EQ(c.defects.size(), 3u);
  EXPECT_THROW(set_config_value(c, "defect.4.nu", "0.5"), ConfigError);
  EXPECT_THROW(set_config_value(c, "material", "1"), ConfigError);
}

TEST(Config, ValidationPerScenario) {
  ExperimentConfig c;
  EXPECT_THROW(validate(c), ConfigError); // no scenario
  c.scenario = "flat_disclination";
  EXPECT_THROW(validate(c), ConfigError); // needs a disk
  c.grid.kind = "disk";
  EXPECT_NO_THROW(validate(c));
  c.defects = {{Vec2(0.1, 0.0), 0.1}};
  EXPECT_THROW(validate(c), ConfigError); // off-centre
  c.defects.clear();
  c.solver.tol = 0.0;
  EXPECT_THROW(validate(c), ConfigError);
  c.solver.tol       = 1e-8;
  c.material.mu      = -1.0;
  EXPECT_THROW(validate(c), ConfigError);
  c.material.mu = 1.0;

  c.scenario  = "sphere_disclination";
  c.grid.kind = "square";
  c.grid.n    = 32;
  EXPECT_THROW(validate(c), ConfigError); // centre must be a node
  c.grid.n = 33;
  EXPECT_NO_THROW(validate(c));
  c.grid.sphere_radius = 1.0;
  EXPECT_THROW(validate(c), ConfigError);

  c.scenario  = "relax_shape";
  c.defects   = {{Vec2(1.5, 0.0), 0.1}};
  EXPECT_THROW(validate(c), ConfigError);
  c.defects.clear();
  c.initial_shape = "bumpy";
  EXPECT_THROW(validate(c), ConfigError);
}

TEST(Config, ShippedSamplesLoadAndValidate) {
  int count = 0;
  for (const auto& entry : fs::directory_iterator(DISCGAUGE_SOURCE_DIR "/configs")) {
    SCOPED_TRACE(entry.path().string());
    const ExperimentConfig c = load_config(entry.path());
    EXPECT_NO_THROW(validate(c));
    EXPECT_EQ(parse_ini(to_ini(c)), c);
    ++count;
  }
  EXPECT_GE(count, 5);
}
