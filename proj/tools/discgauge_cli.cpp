// discgauge: run, sweep and export disclination experiments.

#include <discgauge/experiment.hpp>

#include <CLI11.hpp>

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <optional>
#include <thread>

namespace fs = std::filesystem;
using namespace discgauge;

namespace {

struct Overrides
{
  std::optional<double> tol;
  std::optional<int> max_iter;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::vector<std::string> set;
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--tol", o.tol, "Solver tolerance (solver.tol)");
  cmd->add_option("--max-iter", o.max_iter, "Iteration limit (solver.max_iter)");
  cmd->add_option("--seed", o.seed, "Seed for random perturbations (experiment.seed)");
  cmd->add_option("--out-dir", o.out_dir, "Output directory; overrides experiment.output_dir");
  cmd->add_option("--set", o.set, "Override any key, e.g. --set material.kappa=0.01")->take_all();
}

std::pair<std::string, std::string> split_assignment(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("expected key=value, got '" + s + "'");
  return {s.substr(0, eq), s.substr(eq + 1)};
}

/// --out-dir wins; otherwise experiment.output_dir, relative to $DISCGAUGE_OUTPUT_ROOT when set;
/// otherwise $DISCGAUGE_OUTPUT_ROOT (or ./discgauge_out) / <config stem>.
fs::path output_dir(const ExperimentConfig& c, const Overrides& o, const fs::path& config_path) {
  if (!o.out_dir.empty())
    return o.out_dir;
  const char* env = std::getenv("DISCGAUGE_OUTPUT_ROOT");
  const fs::path root = env && *env ? fs::path(env) : fs::path("discgauge_out");
  if (!c.output_dir.empty()) {
    const fs::path p = c.output_dir;
    return p.is_absolute() || !(env && *env) ? p : root / p;
  }
  return root / config_path.stem();
}

ExperimentConfig load_with_overrides(const fs::path& path, const Overrides& o) {
  ExperimentConfig c = load_config(path);
  if (o.tol)
    c.solver.tol = *o.tol;
  if (o.max_iter)
    c.solver.max_iter = *o.max_iter;
  if (o.seed)
    c.seed = *o.seed;
  for (const auto& s : o.set) {
    const auto [k, v] = split_assignment(s);
    set_config_value(c, k, v);
  }
  c.output_dir = output_dir(c, o, path).string();
  return c;
}

void report(const RunResult& r, const std::string& dir) {
  if (r.exit_code == exit_ok)
    std::cout << "ok: " << dir << '\n';
  else
    std::cerr << "error (exit " << r.exit_code << "): " << r.message << '\n';
}

int cmd_run(const fs::path& config, const Overrides& o) {
  const ExperimentConfig c = load_with_overrides(config, o);
  const RunResult r        = run_experiment(c);
  report(r, c.output_dir);
  return r.exit_code;
}

struct SweepAxis
{
  std::string key;
  std::vector<std::string> values;
};

int cmd_sweep(const fs::path& config, const Overrides& o, const std::vector<std::string>& params, int jobs) {
  const ExperimentConfig base = load_with_overrides(config, o);
  std::vector<SweepAxis> axes;
  for (const auto& p : params) {
    const auto [k, list] = split_assignment(p);
    SweepAxis a{k, {}};
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ','))
      a.values.push_back(item);
    if (a.values.empty())
      throw ConfigError("--param " + k + " has no values");
    axes.push_back(std::move(a));
  }
  if (axes.empty())
    throw ConfigError("sweep needs at least one --param key=a,b,c");

  // Cartesian product, first axis slowest; every run is validated before any is started
  std::vector<ExperimentConfig> runs;
  std::vector<std::vector<std::string>> labels;
  std::size_t total = 1;
  for (const auto& a : axes)
    total *= a.values.size();
  for (std::size_t r = 0; r < total; ++r) {
    ExperimentConfig c = base;
    std::vector<std::string> lab;
    std::size_t rest = r;
    for (std::size_t q = axes.size(); q-- > 0;) {
      const auto& v = axes[q].values[rest % axes[q].values.size()];
      rest /= axes[q].values.size();
      set_config_value(c, axes[q].key, v);
      lab.insert(lab.begin(), v);
    }
    char name[32];
    std::snprintf(name, sizeof name, "run_%04zu", r);
    c.output_dir = (fs::path(base.output_dir) / name).string();
    validate(c);
    runs.push_back(std::move(c));
    labels.push_back(std::move(lab));
  }

  std::vector<RunResult> results(runs.size());
  std::atomic<std::size_t> next{0};
  std::mutex io;
  auto worker = [&] {
    for (std::size_t r; (r = next++) < runs.size();) {
      results[r] = run_experiment(runs[r]);
      std::lock_guard<std::mutex> lock(io);
      report(results[r], runs[r].output_dir);
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < std::max(1, std::min<int>(jobs, int(runs.size()))); ++t)
    pool.emplace_back(worker);
  for (auto& t : pool)
    t.join();

  nlohmann::ordered_json summary;
  summary["config"] = fs::absolute(config).string();
  for (const auto& a : axes)
    summary["parameters"].push_back(a.key);
  int code = exit_ok;
  for (std::size_t r = 0; r < runs.size(); ++r) {
    nlohmann::ordered_json e = {{"directory", fs::path(runs[r].output_dir).filename().string()},
                                {"values", labels[r]},
                                {"exit_code", results[r].exit_code}};
    if (!results[r].message.empty())
      e["message"] = results[r].message;
    if (results[r].manifest.contains("energies"))
      e["energies"] = results[r].manifest["energies"];
    summary["runs"].push_back(e);
    code = std::max(code, results[r].exit_code);
  }
  write_json(fs::path(base.output_dir) / "sweep.json", summary);
  return code;
}

int cmd_check(const fs::path& config, const std::string& format) {
  const ExperimentConfig c = load_config(config);
  validate(c);
  if (format == "json")
    std::cout << to_json(c).dump(2) << '\n';
  else
    std::cout << to_ini(c);
  return exit_ok;
}

int cmd_export(const fs::path& input, const std::string& format, const std::vector<std::string>& fields,
               fs::path out) {
  const ExportFormat fmt = export_format_from_string(format);
  if (out.empty()) {
    out = input;
    out.replace_extension(fmt == ExportFormat::vtk ? ".vtk" : ".export.csv");
  }
  convert_field_csv(input, out, fmt, fields);
  std::cout << "wrote " << out.string() << '\n';
  return exit_ok;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gauge-theory disclination experiments on elastic surfaces"};
  app.set_version_flag("--version", DISCGAUGE_VERSION);
  app.require_subcommand(1);

  fs::path config;
  Overrides over;
  auto* run = app.add_subcommand("run", "Run the experiment described by a config file");
  run->add_option("config", config, "Config file (.ini or .json)")->required()->check(CLI::ExistingFile);
  add_overrides(run, over);

  std::vector<std::string> params;
  int jobs = 1;
  auto* sweep = app.add_subcommand("sweep", "Run a Cartesian parameter sweep; one subdirectory per run");
  sweep->add_option("config", config, "Config file (.ini or .json)")->required()->check(CLI::ExistingFile);
  sweep->add_option("--param", params, "key=a,b,c (repeatable)")->required()->take_all();
  sweep->add_option("--jobs", jobs, "Runs executed in parallel")->check(CLI::PositiveNumber);
  add_overrides(sweep, over);

  fs::path input, out;
  std::string format = "vtk";
  std::vector<std::string> fields;
  auto* exp = app.add_subcommand("export", "Convert a field CSV written by run to CSV or legacy VTK");
  exp->add_option("input", input, "Field CSV")->required()->check(CLI::ExistingFile);
  exp->add_option("--format", format, "csv or vtk")->check(CLI::IsMember({"csv", "vtk"}));
  exp->add_option("--fields", fields, "Columns to export (default: all)")->delimiter(',');
  exp->add_option("-o,--output", out, "Output path");

  std::string check_format = "ini";
  auto* check = app.add_subcommand("check", "Validate a config and print it in normalized form");
  check->add_option("config", config, "Config file (.ini or .json)")->required()->check(CLI::ExistingFile);
  check->add_option("--format", check_format, "ini or json")->check(CLI::IsMember({"ini", "json"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*run)
      return cmd_run(config, over);
    if (*sweep)
      return cmd_sweep(config, over, params, jobs);
    if (*exp)
      return cmd_export(input, format, fields, out);
    return cmd_check(config, check_format);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return exit_config_error;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return exit_io_error;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
