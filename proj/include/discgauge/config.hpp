#pragma once
/**
 * \file config.hpp
 * Experiment configuration: sectioned key-value text (INI style) or JSON.
 *
 * Every setting has a flat dotted key such as `material.kappa` or `defect.0.nu`; both
 * parsers and parameter sweeps go through the same setter, so the accepted keys are
 * exactly those produced by `config_entries()`.
 */

#include <discgauge/io.hpp>
#include <discgauge/minimizer.hpp>
#include <discgauge/vonkarman.hpp>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <cstdint>
#include <sstream>

namespace discgauge {

/// Invalid or inconsistent configuration (CLI exit code 2).
class ConfigError : public Error
{
public:
  using Error::Error;
};

inline const std::vector<std::string>& scenario_names() {
  static const std::vector<std::string> names = {"flat_disclination", "buckling_comparison", "sphere_disclination",
                                                 "planar_ek_with_w0", "relax_shape"};
  return names;
}

struct GridSpec
{
  /// square (Cartesian open patch), disk (polar) or sphere (closed, polar)
  std::string kind{"square"};
  /// Nodes along u: x for square, r for disk, theta for sphere.
  int n{33};
  /// Nodes along v; 0 picks n for square, 4 n for disk and 2 n for sphere.
  int nv{0};
  double half_width{1.0};
  /// Disk radius.
  double radius{1.0};
  /// Radius of the spherical cap used as reference by sphere_disclination on a square grid.
  double sphere_radius{2.0};

  int v_nodes() const {
    if (nv > 0)
      return nv;
    return kind == "disk" ? 4 * n : kind == "sphere" ? 2 * n : n;
  }

  Grid build() const {
    if (kind == "square")
      return Grid(n, v_nodes(), {-half_width, half_width}, {-half_width, half_width}, Topology::open_patch);
    if (kind == "disk")
      return Grid::polar_disk(n, v_nodes(), radius);
    if (kind == "sphere")
      return Grid::sphere(n, v_nodes());
    throw ConfigError("grid.kind must be square, disk or sphere, got '" + kind + "'");
  }

  bool operator==(const GridSpec&) const = default;
};

struct BoundarySpec
{
  EdgeCondition bending{EdgeCondition::free};
  EdgeCondition in_plane{EdgeCondition::free};
  /// Edge treatment of the shape minimizer.
  ShapeBoundary shape{ShapeBoundary::free};

  bool operator==(const BoundarySpec&) const = default;
};

struct SolverSpec
{
  double tol{1e-8};
  int max_iter{200};
  /// Minimizer checkpoints every this many iterations (0 = off).
  int checkpoint_every{0};
  /// Positions CSV to start the minimizer from.
  std::string resume{};
  bool relax_gauge{false};

  bool operator==(const SolverSpec&) const = default;
};

struct ExperimentConfig
{
  std::string scenario{};
  GridSpec grid{};
  MaterialParams material{};
  std::vector<DisclinationSpec> defects{};
  /// Defects already present in the reference state (W0).
  std::vector<DisclinationSpec> reference_defects{};
  BoundarySpec boundary{};
  SolverSpec solver{};
  std::string output_dir{};
  std::uint64_t seed{1};
  /// Amplitude of the initial out-of-plane seed.
  double perturbation{0.05};
  /// Initial height of relax_shape: flat, cone, saddle or random.
  std::string initial_shape{"flat"};

  /// The defect list, or one centred defect of charge material.nu when none is given.
  std::vector<DisclinationSpec> effective_defects() const {
    if (!defects.empty())
      return defects;
    return {DisclinationSpec{Vec2::Zero(), material.nu}};
  }
};

inline bool operator==(const DisclinationSpec& a, const DisclinationSpec& b) {
  return a.center == b.center && a.nu == b.nu;
}

inline bool operator==(const MaterialParams& a, const MaterialParams& b) {
  return a.lambda == b.lambda && a.mu == b.mu && a.kappa == b.kappa && a.kappa_g == b.kappa_g && a.s == b.s &&
         a.nu == b.nu;
}

inline bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
  return a.scenario == b.scenario && a.grid == b.grid && a.material == b.material && a.defects == b.defects &&
         a.reference_defects == b.reference_defects && a.boundary == b.boundary && a.solver == b.solver &&
         a.output_dir == b.output_dir && a.seed == b.seed && a.perturbation == b.perturbation &&
         a.initial_shape == b.initial_shape;
}

namespace detail {

inline double config_double(const std::string& key, const std::string& v) {
  try {
    return parse_double(v);
  } catch (const Error&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

template <class Int>
Int config_int(const std::string& key, const std::string& v) {
  Int x{};
  const auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  if (v.empty() || r.ec != std::errc{} || r.ptr != v.data() + v.size())
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return x;
}

inline bool config_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes")
    return true;
  if (v == "false" || v == "0" || v == "no")
    return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::string trim(std::string s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos)
    return {};
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline void set_defect_field(std::vector<DisclinationSpec>& list, const std::string& key, const std::string& rest,
                             const std::string& value) {
  const auto dot = rest.find('.');
  if (dot == std::string::npos)
    throw ConfigError("unknown key '" + key + "'");
  const auto idx = config_int<std::size_t>(key, rest.substr(0, dot));
  if (idx > list.size())
    throw ConfigError(key + ": defect indices must be consecutive from 0");
  if (idx == list.size())
    list.push_back({Vec2::Zero(), 0.0});
  auto& d            = list[idx];
  const auto field   = rest.substr(dot + 1);
  if (field == "x")
    d.center[0] = config_double(key, value);
  else if (field == "y")
    d.center[1] = config_double(key, value);
  else if (field == "nu")
    d.nu = config_double(key, value);
  else
    throw ConfigError("unknown key '" + key + "'");
}

} // namespace detail

/// Sets one dotted key from its text value. Unknown keys are errors.
inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& raw) {
  using namespace detail;
  const std::string v = trim(raw);
  auto num            = [&] { return config_double(key, v); };
  auto integer        = [&] { return config_int<int>(key, v); };
  auto edge           = [&] {
    try {
      return edge_condition_from_string(v);
    } catch (const Error& e) {
      throw ConfigError(key + ": " + e.what());
    }
  };

  if (key.rfind("defect.", 0) == 0)
    return set_defect_field(c.defects, key, key.substr(7), v);
  if (key.rfind("reference_defect.", 0) == 0)
    return set_defect_field(c.reference_defects, key, key.substr(17), v);

  if (key == "experiment.scenario")
    c.scenario = v;
  else if (key == "experiment.output_dir")
    c.output_dir = v;
  else if (key == "experiment.seed")
    c.seed = config_int<std::uint64_t>(key, v);
  else if (key == "experiment.perturbation")
    c.perturbation = num();
  else if (key == "experiment.initial_shape")
    c.initial_shape = v;
  else if (key == "grid.kind")
    c.grid.kind = v;
  else if (key == "grid.n")
    c.grid.n = integer();
  else if (key == "grid.nv")
    c.grid.nv = integer();
  else if (key == "grid.half_width")
    c.grid.half_width = num();
  else if (key == "grid.radius")
    c.grid.radius = num();
  else if (key == "grid.sphere_radius")
    c.grid.sphere_radius = num();
  else if (key == "material.lambda")
    c.material.lambda = num();
  else if (key == "material.mu")
    c.material.mu = num();
  else if (key == "material.kappa")
    c.material.kappa = num();
  else if (key == "material.kappa_g")
    c.material.kappa_g = num();
  else if (key == "material.s")
    c.material.s = num();
  else if (key == "material.nu")
    c.material.nu = num();
  else if (key == "boundary.bending")
    c.boundary.bending = edge();
  else if (key == "boundary.in_plane")
    c.boundary.in_plane = edge();
  else if (key == "boundary.shape") {
    try {
      c.boundary.shape = shape_boundary_from_string(v);
    } catch (const Error& e) {
      throw ConfigError(key + ": " + e.what());
    }
  } else if (key == "solver.tol")
    c.solver.tol = num();
  else if (key == "solver.max_iter")
    c.solver.max_iter = integer();
  else if (key == "solver.checkpoint_every")
    c.solver.checkpoint_every = integer();
  else if (key == "solver.resume")
    c.solver.resume = v;
  else if (key == "solver.relax_gauge")
    c.solver.relax_gauge = config_bool(key, v);
  else
    throw ConfigError("unknown key '" + key + "'");
}

/// Every setting as (dotted key, text) in a fixed order. Defect keys are expanded per entry.
inline std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& c) {
  const auto f = format_double;
  std::vector<std::pair<std::string, std::string>> e = {
      {"experiment.scenario", c.scenario},
      {"experiment.output_dir", c.output_dir},
      {"experiment.seed", std::to_string(c.seed)},
      {"experiment.perturbation", f(c.perturbation)},
      {"experiment.initial_shape", c.initial_shape},
      {"grid.kind", c.grid.kind},
      {"grid.n", std::to_string(c.grid.n)},
      {"grid.nv", std::to_string(c.grid.nv)},
      {"grid.half_width", f(c.grid.half_width)},
      {"grid.radius", f(c.grid.radius)},
      {"grid.sphere_radius", f(c.grid.sphere_radius)},
      {"material.lambda", f(c.material.lambda)},
      {"material.mu", f(c.material.mu)},
      {"material.kappa", f(c.material.kappa)},
      {"material.kappa_g", f(c.material.kappa_g)},
      {"material.s", f(c.material.s)},
      {"material.nu", f(c.material.nu)},
      {"boundary.bending", to_string(c.boundary.bending)},
      {"boundary.in_plane", to_string(c.boundary.in_plane)},
      {"boundary.shape", to_string(c.boundary.shape)},
      {"solver.tol", f(c.solver.tol)},
      {"solver.max_iter", std::to_string(c.solver.max_iter)},
      {"solver.checkpoint_every", std::to_string(c.solver.checkpoint_every)},
      {"solver.resume", c.solver.resume},
      {"solver.relax_gauge", c.solver.relax_gauge ? "true" : "false"},
  };
  auto defects = [&](const std::string& prefix, const std::vector<DisclinationSpec>& list) {
    for (std::size_t i = 0; i < list.size(); ++i) {
      const std::string p = prefix + std::to_string(i) + ".";
      e.push_back({p + "x", f(list[i].center[0])});
      e.push_back({p + "y", f(list[i].center[1])});
      e.push_back({p + "nu", f(list[i].nu)});
    }
  };
  defects("defect.", c.defects);
  defects("reference_defect.", c.reference_defects);
  return e;
}

namespace detail {

/// Splits "defect.3.nu" into ("defect.3", "nu").
inline std::pair<std::string, std::string> split_key(const std::string& key) {
  const auto dot = key.rfind('.');
  return {key.substr(0, dot), key.substr(dot + 1)};
}

/// Orders sections so that defect.N comes in index order (the setter appends).
inline int section_rank(const std::string& section, std::size_t& index) {
  static const std::vector<std::string> fixed = {"experiment", "grid", "material", "boundary", "solver"};
  for (std::size_t r = 0; r < fixed.size(); ++r)
    if (section == fixed[r]) {
      index = 0;
      return int(r);
    }
  for (const auto& [prefix, rank] : {std::pair<std::string, int>{"defect.", 5}, {"reference_defect.", 6}})
    if (section.rfind(prefix, 0) == 0) {
      index = config_int<std::size_t>(section, section.substr(prefix.size()));
      return rank;
    }
  throw ConfigError("unknown section [" + section + "]");
}

inline ExperimentConfig apply_sections(const std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>>& sections) {
  struct Item
  {
    int rank;
    std::size_t index;
    std::size_t pos;
  };
  std::vector<Item> order;
  for (std::size_t s = 0; s < sections.size(); ++s) {
    std::size_t idx = 0;
    const int rank  = section_rank(sections[s].first, idx);
    order.push_back({rank, idx, s});
  }
  std::stable_sort(order.begin(), order.end(),
                   [](const Item& a, const Item& b) { return std::tie(a.rank, a.index) < std::tie(b.rank, b.index); });
  for (std::size_t q = 1; q < order.size(); ++q)
    if (order[q].rank == order[q - 1].rank && order[q].index == order[q - 1].index)
      throw ConfigError("duplicate section [" + sections[order[q].pos].first + "]");
  ExperimentConfig c;
  for (const auto& it : order) {
    const auto& [name, entries] = sections[it.pos];
    for (const auto& [k, v] : entries)
      set_config_value(c, name + "." + k, v);
  }
  return c;
}

} // namespace detail

/// Parses the sectioned text format. Keys outside a section are rejected.
inline ExperimentConfig parse_ini(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }
  std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>> sections;
  for (const auto& [name, sec] : tree) {
    if (sec.empty())
      throw ConfigError("key '" + name + "' outside a section");
    std::vector<std::pair<std::string, std::string>> entries;
    for (const auto& [k, v] : sec) {
      if (!v.empty())
        throw ConfigError("nested key in [" + name + "]");
      entries.emplace_back(k, v.data());
    }
    sections.emplace_back(name, std::move(entries));
  }
  return detail::apply_sections(sections);
}

/**
 * Parses the JSON form: one object per section, with `defects` and
 * `reference_defects` as arrays of {x, y, nu}. Values may be numbers, strings or booleans.
 */
inline ExperimentConfig parse_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }
  if (!j.is_object())
    throw ConfigError("JSON config must be an object");
  auto text_of = [](const std::string& key, const nlohmann::json& v) -> std::string {
    if (v.is_string())
      return v.get<std::string>();
    if (v.is_boolean())
      return v.get<bool>() ? "true" : "false";
    if (v.is_number_integer())
      return v.is_number_unsigned() ? std::to_string(v.get<std::uint64_t>()) : std::to_string(v.get<std::int64_t>());
    if (v.is_number_float())
      return format_double(v.get<double>());
    throw ConfigError(key + ": unsupported JSON value");
  };
  std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>> sections;
  for (const auto& [name, sec] : j.items()) {
    if (name == "defects" || name == "reference_defects") {
      if (!sec.is_array())
        throw ConfigError(name + " must be an array");
      const std::string prefix = name == "defects" ? "defect." : "reference_defect.";
      for (std::size_t i = 0; i < sec.size(); ++i) {
        if (!sec[i].is_object())
          throw ConfigError(name + " entries must be objects");
        std::vector<std::pair<std::string, std::string>> entries;
        for (const auto& [k, v] : sec[i].items())
          entries.emplace_back(k, text_of(prefix + std::to_string(i) + "." + k, v));
        sections.emplace_back(prefix + std::to_string(i), std::move(entries));
      }
      continue;
    }
    if (!sec.is_object())
      throw ConfigError("section '" + name + "' must be an object");
    std::vector<std::pair<std::string, std::string>> entries;
    for (const auto& [k, v] : sec.items())
      entries.emplace_back(k, text_of(name + "." + k, v));
    sections.emplace_back(name, std::move(entries));
  }
  return detail::apply_sections(sections);
}

inline std::string to_ini(const ExperimentConfig& c) {
  std::ostringstream out;
  std::string current;
  for (const auto& [key, value] : config_entries(c)) {
    const auto [section, name] = detail::split_key(key);
    if (section != current) {
      out << (current.empty() ? "" : "\n") << '[' << section << "]\n";
      current = section;
    }
    out << name << " = " << value << '\n';
  }
  return out.str();
}

inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  auto defects = [](const std::vector<DisclinationSpec>& list) {
    nlohmann::ordered_json a = nlohmann::ordered_json::array();
    for (const auto& d : list)
      a.push_back({{"x", d.center[0]}, {"y", d.center[1]}, {"nu", d.nu}});
    return a;
  };
  nlohmann::ordered_json j;
  j["experiment"] = {{"scenario", c.scenario},         {"output_dir", c.output_dir},
                     {"seed", c.seed},                 {"perturbation", c.perturbation},
                     {"initial_shape", c.initial_shape}};
  j["grid"]       = {{"kind", c.grid.kind},         {"n", c.grid.n},
                     {"nv", c.grid.nv},             {"half_width", c.grid.half_width},
                     {"radius", c.grid.radius},     {"sphere_radius", c.grid.sphere_radius}};
  j["material"]   = {{"lambda", c.material.lambda}, {"mu", c.material.mu}, {"kappa", c.material.kappa},
                     {"kappa_g", c.material.kappa_g}, {"s", c.material.s},   {"nu", c.material.nu}};
  j["boundary"]   = {{"bending", to_string(c.boundary.bending)},
                     {"in_plane", to_string(c.boundary.in_plane)},
                     {"shape", to_string(c.boundary.shape)}};
  j["solver"]     = {{"tol", c.solver.tol},
                     {"max_iter", c.solver.max_iter},
                     {"checkpoint_every", c.solver.checkpoint_every},
                     {"resume", c.solver.resume},
                     {"relax_gauge", c.solver.relax_gauge}};
  j["defects"]           = defects(c.defects);
  j["reference_defects"] = defects(c.reference_defects);
  return j;
}

/// Reads a config file; `.json` selects the JSON form, anything else the sectioned text form.
inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError(path.string() + ": cannot open config");
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return path.extension() == ".json" ? parse_json(buf.str()) : parse_ini(buf.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

/// Throws ConfigError on the first problem; run_experiment writes nothing in that case.
inline void validate(const ExperimentConfig& c) {
  const auto& names = scenario_names();
  if (std::find(names.begin(), names.end(), c.scenario) == names.end()) {
    std::string list;
    for (const auto& n : names)
      list += (list.empty() ? "" : ", ") + n;
    throw ConfigError("unknown scenario '" + c.scenario + "' (expected one of " + list + ")");
  }
  try {
    c.material.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (!(c.solver.tol > 0.0))
    throw ConfigError("solver.tol must be positive");
  if (c.solver.max_iter < 1)
    throw ConfigError("solver.max_iter must be at least 1");
  if (c.solver.checkpoint_every < 0)
    throw ConfigError("solver.checkpoint_every must be non-negative");
  if (!std::isfinite(c.perturbation))
    throw ConfigError("experiment.perturbation must be finite");
  const auto& gs = c.grid;
  if (gs.n < 5 || gs.nv < 0 || (gs.nv > 0 && gs.nv < 4))
    throw ConfigError("grid.n must be at least 5 and grid.nv 0 or at least 4");
  if (gs.kind != "square" && gs.kind != "disk" && gs.kind != "sphere")
    throw ConfigError("grid.kind must be square, disk or sphere, got '" + gs.kind + "'");
  if (!(gs.half_width > 0.0) || !(gs.radius > 0.0) || !(gs.sphere_radius > 0.0))
    throw ConfigError("grid lengths must be positive");
  for (const auto* list : {&c.defects, &c.reference_defects})
    for (const auto& d : *list)
      if (!d.center.allFinite() || !std::isfinite(d.nu))
        throw ConfigError("defect entries must be finite");

  auto need_kind = [&](std::initializer_list<const char*> kinds) {
    for (const char* k : kinds)
      if (gs.kind == k)
        return;
    throw ConfigError(c.scenario + " does not support grid.kind = " + gs.kind);
  };
  auto single_centred = [&] {
    const auto d = c.effective_defects();
    if (d.size() != 1 || d[0].center.norm() != 0.0)
      throw ConfigError(c.scenario + " needs exactly one defect at the origin");
    if (d[0].nu == 0.0)
      throw ConfigError(c.scenario + " needs a nonzero Frank index");
  };
  auto inside_square = [&](const std::vector<DisclinationSpec>& list) {
    for (const auto& d : list)
      if (d.center.cwiseAbs().maxCoeff() >= gs.half_width)
        throw ConfigError("defect centres must lie inside the patch");
  };

  if (c.scenario == "flat_disclination") {
    need_kind({"disk"});
    single_centred();
    if (c.boundary.in_plane != EdgeCondition::free)
      throw ConfigError("flat_disclination solves the stress-free rim only (boundary.in_plane = free)");
  } else if (c.scenario == "buckling_comparison") {
    need_kind({"square"});
    single_centred();
    if (c.boundary.bending != EdgeCondition::free || c.boundary.in_plane != EdgeCondition::free)
      throw ConfigError("buckling_comparison uses free edges (boundary.bending = boundary.in_plane = free)");
    if (!(c.perturbation > 0.0))
      throw ConfigError("buckling_comparison needs experiment.perturbation > 0 as seed amplitude");
  } else if (c.scenario == "sphere_disclination") {
    need_kind({"square", "sphere"});
    if (gs.kind == "square") {
      single_centred();
      if (gs.n % 2 == 0 || gs.v_nodes() != gs.n)
        throw ConfigError("sphere_disclination on a square grid needs an odd n and nv = n (defect on the centre node)");
      if (!(gs.sphere_radius > std::sqrt(2.0) * gs.half_width))
        throw ConfigError("grid.sphere_radius must exceed the patch half diagonal");
    }
  } else {
    need_kind({"square"});
    inside_square(c.effective_defects());
    inside_square(c.reference_defects);
    const auto& s = c.initial_shape;
    if (s != "flat" && s != "cone" && s != "saddle" && s != "random")
      throw ConfigError("experiment.initial_shape must be flat, cone, saddle or random");
  }
}

} // namespace discgauge
