#pragma once
/**
 * \file io.hpp
 * CSV and legacy VTK export of nodal fields, gauge-field files and minimizer checkpoints.
 *
 * CSV files are node-major (node k = i * nv + j on row k + 1) with the columns
 * u, v, then one column per field. Numbers use the shortest representation that
 * reads back to the same double.
 */

#include <discgauge/gauge.hpp>

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

namespace discgauge {

/// I/O failure; the message starts with the offending path.
class IoError : public Error
{
public:
  IoError(const std::filesystem::path& path, const std::string& what)
      : Error(path.string() + ": " + what),
        path_{path} {}
  const std::filesystem::path& path() const noexcept { return path_; }

private:
  std::filesystem::path path_;
};

/// Shortest decimal text that parses back to exactly x.
inline std::string format_double(double x) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

inline double parse_double(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t'))
    s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  if (!s.empty() && s.front() == '+')
    s.remove_prefix(1);
  double x     = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), x);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size())
    throw Error("not a number: '" + std::string(s) + "'");
  return x;
}

struct NamedField
{
  std::string name;
  ScalarField values;
};

using FieldSet = std::vector<NamedField>;

/// Appends name_x, name_y, name_z.
inline void add_components(FieldSet& fs, const std::string& name, const VectorField& f) {
  static const char* suffix[] = {"_x", "_y", "_z"};
  for (int c = 0; c < 3; ++c)
    fs.push_back({name + suffix[c], f.col(c)});
}

enum class ExportFormat
{
  csv,
  vtk
};

inline ExportFormat export_format_from_string(const std::string& s) {
  if (s == "csv")
    return ExportFormat::csv;
  if (s == "vtk")
    return ExportFormat::vtk;
  throw Error("unknown export format '" + s + "' (csv or vtk)");
}

namespace detail {

inline void check_field_sizes(Eigen::Index n, const FieldSet& fs) {
  if (fs.empty())
    throw Error("export: empty field list");
  for (const auto& f : fs) {
    if (f.values.size() != n)
      throw ShapeMismatchError("export: field '" + f.name + "' does not match the grid");
    if (f.name.empty() || f.name.find_first_of(", \t\n\"") != std::string::npos)
      throw Error("export: bad field name '" + f.name + "'");
  }
}

inline void check_fields(const Grid& g, const FieldSet& fs) { check_field_sizes(g.size(), fs); }

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::error_code ec;
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw IoError(path, "cannot open for writing");
  return out;
}

inline void finish(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out)
    throw IoError(path, "write failed");
}

} // namespace detail

inline void write_csv(const std::filesystem::path& path, const Grid& g, const FieldSet& fs) {
  detail::check_fields(g, fs);
  auto out = detail::open_out(path);
  out << "u,v";
  for (const auto& f : fs)
    out << ',' << f.name;
  out << '\n';
  for (Eigen::Index k = 0; k < g.size(); ++k) {
    auto [i, j] = g.ij(k);
    out << format_double(g.u(i)) << ',' << format_double(g.v(j));
    for (const auto& f : fs)
      out << ',' << format_double(f.values[k]);
    out << '\n';
  }
  detail::finish(out, path);
}

struct CsvTable
{
  std::vector<std::string> header;
  std::vector<std::vector<double>> columns;

  const std::vector<double>& column(const std::string& name) const {
    for (std::size_t c = 0; c < header.size(); ++c)
      if (header[c] == name)
        return columns[c];
    throw Error("csv: no column '" + name + "'");
  }
  std::size_t rows() const { return columns.empty() ? 0 : columns.front().size(); }
};

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in)
    throw IoError(path, "cannot open for reading");
  CsvTable t;
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> parts;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
      parts.push_back(item);
    return parts;
  };
  if (!std::getline(in, line))
    throw IoError(path, "empty file");
  if (!line.empty() && line.back() == '\r')
    line.pop_back();
  t.header = split(line);
  t.columns.resize(t.header.size());
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r")
      continue;
    const auto parts = split(line);
    if (parts.size() != t.header.size())
      throw IoError(path, "row " + std::to_string(row) + " has " + std::to_string(parts.size()) + " values, expected " +
                              std::to_string(t.header.size()));
    for (std::size_t c = 0; c < parts.size(); ++c) {
      try {
        t.columns[c].push_back(parse_double(parts[c]));
      } catch (const Error& e) {
        throw IoError(path, "row " + std::to_string(row) + ": " + e.what());
      }
    }
  }
  return t;
}

/**
 * Legacy ASCII VTK structured grid with nu x nv points in node order (j fastest), so
 * the dimensions are (nv, nu, 1). Fields named base_x, base_y, base_z in sequence are
 * written as one VECTORS block.
 */
inline void write_vtk(const std::filesystem::path& path, int nu, int nv, const VectorField& points, const FieldSet& fs,
                      const std::string& title = "discgauge fields") {
  const Eigen::Index n = Eigen::Index(nu) * nv;
  detail::check_field_sizes(n, fs);
  if (points.rows() != n || points.cols() != 3)
    throw ShapeMismatchError("export: point array does not match the grid");
  auto out = detail::open_out(path);
  out << "# vtk DataFile Version 3.0\n" << title << "\nASCII\nDATASET STRUCTURED_GRID\n";
  out << "DIMENSIONS " << nv << ' ' << nu << " 1\n";
  out << "POINTS " << n << " double\n";
  for (Eigen::Index k = 0; k < n; ++k)
    out << format_double(points(k, 0)) << ' ' << format_double(points(k, 1)) << ' ' << format_double(points(k, 2))
        << '\n';
  out << "POINT_DATA " << n << '\n';
  auto ends_with = [](const std::string& s, const char* suf) {
    return s.size() > 2 && s.compare(s.size() - 2, 2, suf) == 0;
  };
  for (std::size_t f = 0; f < fs.size();) {
    const std::string& name = fs[f].name;
    const std::string base  = name.substr(0, name.size() - 2);
    if (f + 2 < fs.size() && ends_with(name, "_x") && fs[f + 1].name == base + "_y" && fs[f + 2].name == base + "_z") {
      out << "VECTORS " << base << " double\n";
      for (Eigen::Index k = 0; k < n; ++k)
        out << format_double(fs[f].values[k]) << ' ' << format_double(fs[f + 1].values[k]) << ' '
            << format_double(fs[f + 2].values[k]) << '\n';
      f += 3;
      continue;
    }
    out << "SCALARS " << name << " double 1\nLOOKUP_TABLE default\n";
    for (Eigen::Index k = 0; k < n; ++k)
      out << format_double(fs[f].values[k]) << '\n';
    ++f;
  }
  detail::finish(out, path);
}

/// Grid form; without `points` the parameter plane (u, v, 0) is used.
inline void write_vtk(const std::filesystem::path& path, const Grid& g, const FieldSet& fs,
                      const VectorField* points = nullptr, const std::string& title = "discgauge fields") {
  detail::check_fields(g, fs);
  if (points)
    return write_vtk(path, g.nu(), g.nv(), *points, fs, title);
  VectorField plane(g.size(), 3);
  for (Eigen::Index k = 0; k < g.size(); ++k) {
    auto [i, j] = g.ij(k);
    plane.row(k) << g.u(i), g.v(j), 0.0;
  }
  write_vtk(path, g.nu(), g.nv(), plane, fs, title);
}

struct VtkSummary
{
  int dims[3]{0, 0, 0};
  Eigen::Index points{0};
  std::vector<std::string> arrays;
};

/// Structural check of a legacy ASCII structured-grid file: header, counts and array lengths.
inline VtkSummary check_vtk(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in)
    throw IoError(path, "cannot open for reading");
  auto fail = [&](const std::string& what) { return IoError(path, "invalid VTK: " + what); };
  std::string line;
  std::getline(in, line);
  if (line.rfind("# vtk DataFile Version", 0) != 0)
    throw fail("missing version line");
  std::getline(in, line); // title
  std::getline(in, line);
  if (line != "ASCII")
    throw fail("only ASCII files are supported");
  std::getline(in, line);
  if (line != "DATASET STRUCTURED_GRID")
    throw fail("expected DATASET STRUCTURED_GRID");
  VtkSummary s;
  std::string word, type;
  if (!(in >> word >> s.dims[0] >> s.dims[1] >> s.dims[2]) || word != "DIMENSIONS")
    throw fail("missing DIMENSIONS");
  const Eigen::Index expect = Eigen::Index(s.dims[0]) * s.dims[1] * s.dims[2];
  if (!(in >> word >> s.points >> type) || word != "POINTS")
    throw fail("missing POINTS");
  if (s.points != expect)
    throw fail("POINTS count differs from DIMENSIONS");
  auto read_values = [&](Eigen::Index count) {
    double x;
    for (Eigen::Index q = 0; q < count; ++q)
      if (!(in >> x))
        throw fail("truncated data");
  };
  read_values(3 * s.points);
  Eigen::Index npd = 0;
  if (!(in >> word >> npd) || word != "POINT_DATA")
    throw fail("missing POINT_DATA");
  if (npd != s.points)
    throw fail("POINT_DATA count differs from POINTS");
  while (in >> word) {
    std::string name;
    if (word == "SCALARS") {
      int ncomp = 1;
      in >> name >> type;
      std::getline(in, line);
      if (!line.empty())
        std::istringstream(line) >> ncomp;
      if (!(in >> word >> type) || word != "LOOKUP_TABLE")
        throw fail("SCALARS " + name + " without LOOKUP_TABLE");
      read_values(ncomp * npd);
    } else if (word == "VECTORS") {
      in >> name >> type;
      read_values(3 * npd);
    } else {
      throw fail("unexpected keyword " + word);
    }
    s.arrays.push_back(name);
  }
  return s;
}

inline void export_fields(const std::filesystem::path& path, const Grid& g, const FieldSet& fs, ExportFormat fmt,
                          const VectorField* points = nullptr) {
  if (fmt == ExportFormat::csv)
    write_csv(path, g, fs);
  else
    write_vtk(path, g, fs, points);
}

/**
 * Re-exports a node-major field CSV (columns u, v, fields). The number of v nodes is the
 * length of the leading run of equal u. VTK points come from R_x, R_y, R_z or x, y, z when
 * present, else from (u, v, 0). An empty `names` selects every field column.
 */
inline void convert_field_csv(const std::filesystem::path& in, const std::filesystem::path& out, ExportFormat fmt,
                              const std::vector<std::string>& names = {}) {
  const CsvTable t = read_csv(in);
  if (t.header.size() < 3 || t.header[0] != "u" || t.header[1] != "v")
    throw IoError(in, "expected columns u, v and at least one field");
  const auto& u = t.column("u");
  std::size_t nv = 1;
  while (nv < u.size() && u[nv] == u[0])
    ++nv;
  if (u.empty() || u.size() % nv != 0)
    throw IoError(in, "rows do not form a structured grid");
  const auto n = Eigen::Index(u.size());
  auto col     = [&](const std::string& name) { return ScalarField(Eigen::Map<const ScalarField>(t.column(name).data(), n)); };
  FieldSet fs;
  if (names.empty()) {
    for (std::size_t c = 2; c < t.header.size(); ++c)
      fs.push_back({t.header[c], col(t.header[c])});
  } else {
    for (const auto& name : names) {
      try {
        fs.push_back({name, col(name)});
      } catch (const Error& e) {
        throw IoError(in, e.what());
      }
    }
  }
  detail::check_field_sizes(n, fs);
  if (fmt == ExportFormat::vtk) {
    auto has = [&](const std::string& name) {
      return std::find(t.header.begin(), t.header.end(), name) != t.header.end();
    };
    VectorField pts(n, 3);
    if (has("R_x") && has("R_y") && has("R_z"))
      pts << col("R_x"), col("R_y"), col("R_z");
    else if (has("x") && has("y") && has("z"))
      pts << col("x"), col("y"), col("z");
    else
      pts << col("u"), col("v"), ScalarField::Zero(n);
    write_vtk(out, int(u.size() / nv), int(nv), pts, fs, in.filename().string());
    return;
  }
  auto os = detail::open_out(out);
  os << "u,v";
  for (const auto& f : fs)
    os << ',' << f.name;
  os << '\n';
  const auto& v = t.column("v");
  for (Eigen::Index k = 0; k < n; ++k) {
    os << format_double(u[std::size_t(k)]) << ',' << format_double(v[std::size_t(k)]);
    for (const auto& f : fs)
      os << ',' << format_double(f.values[k]);
    os << '\n';
  }
  detail::finish(os, out);
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  auto out = detail::open_out(path);
  out << j.dump(2) << '\n';
  detail::finish(out, path);
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in)
    throw IoError(path, "cannot open for reading");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path, e.what());
  }
}

/// Gauge CSV (u, v, W1x ... W2z) and its singular-node sidecar `<path>.singular.json`.
inline void write_gauge_field(const std::filesystem::path& path, const GaugeField& w) {
  FieldSet fs;
  static const char* names[2][3] = {{"W1x", "W1y", "W1z"}, {"W2x", "W2y", "W2z"}};
  for (int a = 0; a < 2; ++a)
    for (int c = 0; c < 3; ++c)
      fs.push_back({names[a][c], w[a].col(c)});
  write_csv(path, w.grid, fs);
  nlohmann::json s = nlohmann::json::array();
  for (const auto& n : w.singular)
    s.push_back({{"node", n.node}, {"nu", n.nu}});
  write_json(path.string() + ".singular.json", {{"role", w.role == GaugeField::Role::reference ? "reference" : "dynamical"},
                                                {"singular", s}});
}

inline GaugeField read_gauge_field(const std::filesystem::path& path, const Grid& g) {
  const CsvTable t = read_csv(path);
  if (Eigen::Index(t.rows()) != g.size())
    throw IoError(path, "row count differs from the grid");
  GaugeField w = GaugeField::zero(g);
  static const char* names[2][3] = {{"W1x", "W1y", "W1z"}, {"W2x", "W2y", "W2z"}};
  for (int a = 0; a < 2; ++a)
    for (int c = 0; c < 3; ++c)
      w[a].col(c) = Eigen::Map<const ScalarField>(t.column(names[a][c]).data(), g.size());
  const auto side = std::filesystem::path(path.string() + ".singular.json");
  if (std::filesystem::exists(side)) {
    const auto j = read_json(side);
    if (j.value("role", "dynamical") == "reference")
      w.role = GaugeField::Role::reference;
    for (const auto& n : j.at("singular"))
      w.singular.push_back({n.at("node").get<Eigen::Index>(), n.at("nu").get<double>()});
  }
  return w;
}

/// Positions CSV (u, v, x, y, z) as written by checkpoints.
inline void write_positions(const std::filesystem::path& path, const Grid& g, const VectorField& R) {
  write_csv(path, g, {{"x", R.col(0)}, {"y", R.col(1)}, {"z", R.col(2)}});
}

inline VectorField read_positions(const std::filesystem::path& path, const Grid& g) {
  const CsvTable t = read_csv(path);
  if (Eigen::Index(t.rows()) != g.size())
    throw IoError(path, "row count differs from the grid");
  VectorField R(g.size(), 3);
  const char* names[] = {"x", "y", "z"};
  for (int c = 0; c < 3; ++c)
    R.col(c) = Eigen::Map<const ScalarField>(t.column(names[c]).data(), g.size());
  return R;
}

} // namespace discgauge
