// safeaoc: run, replay and sweep closed-loop experiments.
//
// Exit codes: 0 ok, 2 invalid configuration or arguments, 3 runtime fault,
// 4 replay mismatch.

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "safeaoc/harness.hpp"

namespace fs = std::filesystem;
using namespace safeaoc;

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 2;
constexpr int kRuntime = 3;
constexpr int kMismatch = 4;

constexpr const char* kTrajectory = "trajectory.csv";
constexpr const char* kSummary = "summary.json";
constexpr const char* kResolved = "config.resolved.json";

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("safeaoc");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  const char* env = std::getenv("SAFEAOC_LOG_LEVEL");
  const std::string level = env ? env : "info";
  if (level == "error") spdlog::set_level(spdlog::level::err);
  else if (level == "warn") spdlog::set_level(spdlog::level::warn);
  else if (level == "debug") spdlog::set_level(spdlog::level::debug);
  else spdlog::set_level(spdlog::level::info);
  if (env && level != "error" && level != "warn" && level != "info" && level != "debug")
    spdlog::warn("SAFEAOC_LOG_LEVEL='{}' not recognised, using info", level);
}

struct CommonOptions {
  std::string config;
  std::string out;
  std::string mode;
  std::optional<std::uint64_t> seed;
  std::optional<double> duration;
  std::vector<std::string> sets;
};

/// Config file plus flags plus --set overrides, resolved against the
/// benchmark defaults.
json build_config(const CommonOptions& o) {
  json doc = load_json_file(o.config);
  json resolved = resolve_config_json(doc);
  if (!o.mode.empty()) apply_override(resolved, "mode", o.mode);
  if (o.seed) apply_override(resolved, "seed", std::to_string(*o.seed));
  if (o.duration) apply_override(resolved, "duration", format_double(*o.duration));
  for (const std::string& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw Error(ErrorKind::Config, "override '" + s + "' is not key=value");
    apply_override(resolved, s.substr(0, eq), s.substr(eq + 1));
  }
  return resolved;
}

std::string csv_text(const TrajectoryLog& log) {
  std::ostringstream ss;
  write_csv(ss, log);
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error(ErrorKind::Config, "cannot write '" + p.string() + "'");
  out << text;
}

struct RunOutcome {
  int code = kOk;
  Summary summary;
  std::string message;
};

/// Runs a resolved configuration and writes the three artifacts into dir.
RunOutcome run_resolved(const json& resolved, const fs::path& dir) {
  RunOutcome r;
  const ExperimentConfig cfg = config_from_json(resolved);
  for (const std::string& w : validate_config(cfg)) spdlog::warn("{}", w);
  fs::create_directories(dir);
  write_file(dir / kResolved, resolved.dump(2) + "\n");
  TrajectoryLog log = run_experiment(cfg);
  write_file(dir / kTrajectory, csv_text(log));
  if (log.records.empty()) {
    write_file(dir / kSummary, json{{"records", 0}, {"fault", log.fault}}.dump(2) + "\n");
    r.code = kRuntime;
    r.message = log.fault.empty() ? "no records" : log.fault;
    return r;
  }
  r.summary = metrics(log);
  const auto gains = gain_diagnostics(cfg, estimate_gain_constants(cfg, log));
  write_file(dir / kSummary, summary_to_json(r.summary, log, gains).dump(2) + "\n");
  if (!log.fault.empty()) {
    r.code = kRuntime;
    r.message = log.fault;
  }
  return r;
}

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return e.kind() == ErrorKind::Config ? kValidation : kRuntime;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kRuntime;
  }
}

int cmd_run(const CommonOptions& o) {
  return guarded([&] {
    const json resolved = build_config(o);
    config_from_json(resolved);
    validate_config(config_from_json(resolved));
    const fs::path dir = o.out.empty() ? fs::path("run_out") : fs::path(o.out);
    spdlog::info("running {} ({}) into {}", resolved["benchmark"].get<std::string>(),
                 resolved["mode"].get<std::string>(), dir.string());
    const RunOutcome r = run_resolved(resolved, dir);
    if (r.code != kOk) {
      spdlog::error("run aborted: {}", r.message);
      return r.code;
    }
    spdlog::info("min h(x) = {:.6g}, final |xtilde| = {:.3g}, final |x| = {:.3g}", r.summary.min_h_x,
                 r.summary.final_xtilde, r.summary.final_x_norm);
    return kOk;
  });
}

int cmd_validate(const CommonOptions& o) {
  return guarded([&] {
    const json resolved = build_config(o);
    const auto warnings = validate_config(config_from_json(resolved));
    for (const std::string& w : warnings) spdlog::warn("{}", w);
    std::cout << "config ok";
    if (!warnings.empty()) std::cout << " (" << warnings.size() << " warning" << (warnings.size() > 1 ? "s" : "") << ")";
    std::cout << "\n";
    return kOk;
  });
}

int cmd_replay(const std::string& logdir) {
  return guarded([&] {
    const fs::path dir(logdir);
    if (!fs::exists(dir / kResolved)) {
      spdlog::error("missing {} in {}", kResolved, dir.string());
      return kValidation;
    }
    if (!fs::exists(dir / kTrajectory)) {
      spdlog::error("missing {} in {}", kTrajectory, dir.string());
      return kValidation;
    }
    const json resolved = resolve_config_json(load_json_file((dir / kResolved).string()));
    const TrajectoryLog log = run_experiment(config_from_json(resolved));
    std::istringstream fresh(csv_text(log));
    std::ifstream stored(dir / kTrajectory, std::ios::binary);
    std::string a, b;
    long line = 0;
    while (true) {
      const bool more_a = static_cast<bool>(std::getline(fresh, a));
      const bool more_b = static_cast<bool>(std::getline(stored, b));
      if (!more_a && !more_b) break;
      if (more_a != more_b || a != b) {
        if (line == 0)
          std::cout << "replay mismatch in the header line\n";
        else
          std::cout << "replay mismatch at row " << (line - 1) << " (file line " << (line + 1) << ")\n";
        return kMismatch;
      }
      ++line;
    }
    std::cout << "replay identical (" << (line - 1) << " rows)\n";
    return kOk;
  });
}

std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '_') ? c : '_';
  return out;
}

int cmd_sweep(const CommonOptions& o, const std::string& key, std::vector<std::string> values, int jobs) {
  return guarded([&] {
    values.erase(std::remove_if(values.begin(), values.end(), [](const std::string& v) { return v.empty(); }),
                 values.end());
    if (values.empty()) {
      spdlog::error("sweep needs at least one value");
      return kValidation;
    }
    const json base = build_config(o);
    // numeric sweeps are reported in ascending order
    bool numeric = true;
    for (const std::string& v : values) {
      char* end = nullptr;
      std::strtod(v.c_str(), &end);
      numeric = numeric && end && *end == '\0' && !v.empty();
    }
    if (numeric)
      std::stable_sort(values.begin(), values.end(),
                       [](const std::string& a, const std::string& b) { return std::stod(a) < std::stod(b); });
    std::vector<json> configs;
    for (const std::string& v : values) {
      json c = base;
      apply_override(c, key, v);
      validate_config(config_from_json(c));
      configs.push_back(std::move(c));
    }
    const fs::path root = o.out.empty() ? fs::path("sweep_out") : fs::path(o.out);
    fs::create_directories(root);
    std::vector<RunOutcome> outcomes(values.size());
    std::mutex mu;
    size_t next = 0;
    auto worker = [&] {
      while (true) {
        size_t i;
        {
          std::lock_guard<std::mutex> lock(mu);
          if (next >= values.size()) return;
          i = next++;
        }
        char prefix[16];
        std::snprintf(prefix, sizeof prefix, "%03zu_", i);
        const fs::path dir = root / (prefix + sanitize(values[i]));
        try {
          outcomes[i] = run_resolved(configs[i], dir);
        } catch (const std::exception& e) {
          outcomes[i].code = kRuntime;
          outcomes[i].message = e.what();
        }
      }
    };
    const int n_threads = std::max(1, std::min<int>(jobs, static_cast<int>(values.size())));
    std::vector<std::thread> pool;
    for (int t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    for (std::thread& t : pool) t.join();

    std::ostringstream table;
    table << "value,min_h_x,min_h_xhat,final_xtilde_norm,max_xtilde_norm_second_half,final_x_norm,status\n";
    bool failed = false;
    for (size_t i = 0; i < values.size(); ++i) {
      const RunOutcome& r = outcomes[i];
      table << values[i];
      if (r.summary.records > 0) {
        table << ',' << format_double(r.summary.min_h_x) << ',' << format_double(r.summary.min_h_xhat) << ','
              << format_double(r.summary.final_xtilde) << ',' << format_double(r.summary.max_xtilde_second_half) << ','
              << format_double(r.summary.final_x_norm);
      } else {
        table << ",,,,,";
      }
      table << ',' << (r.code == kOk ? "ok" : "fault") << '\n';
      if (r.code != kOk) {
        failed = true;
        spdlog::error("sweep value {} failed: {}", values[i], r.message);
      }
    }
    write_file(root / "comparison.csv", table.str());
    std::cout << table.str();
    return failed ? kRuntime : kOk;
  });
}

int cmd_demo(const std::string& out) {
  return guarded([&] {
    json resolved = config_to_json(benchmark_config(BenchmarkId::ConvexSet));
    apply_override(resolved, "duration", "5");
    const fs::path dir = out.empty() ? fs::path("demo_out") : fs::path(out);
    spdlog::info("demo: 5 s of the convex-set study, robust filter, into {}", dir.string());
    const RunOutcome r = run_resolved(resolved, dir);
    std::cout << "min h(x) = " << r.summary.min_h_x << "\nfinal |x - xhat| = " << r.summary.final_xtilde
              << "\nfinal |x| = " << r.summary.final_x_norm << "\nartifacts in " << dir.string() << "\n";
    return r.code;
  });
}

void add_common(CLI::App* app, CommonOptions& o, bool config_required) {
  auto* c = app->add_option("--config", o.config, "experiment config (JSON)");
  if (config_required) c->required();
  app->add_option("--out", o.out, "output directory");
  app->add_option("--mode", o.mode, "robust_cbf | plain_cbf | no_cbf");
  app->add_option("--seed", o.seed, "random seed");
  app->add_option("--duration", o.duration, "simulated seconds");
  app->add_option("--set", o.sets, "dotted override key=value (repeatable)")->take_all();
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"safe output-feedback actor-critic experiments"};
  app.require_subcommand(1, 1);

  CommonOptions run_opts, val_opts, sweep_opts;
  auto* run = app.add_subcommand("run", "run one experiment");
  add_common(run, run_opts, true);

  auto* validate = app.add_subcommand("validate-config", "check a config and its overrides");
  add_common(validate, val_opts, true);

  std::string logdir;
  auto* replay = app.add_subcommand("replay", "re-run a logged experiment and compare trajectory.csv");
  replay->add_option("logdir", logdir, "directory written by run")->required();

  std::string key;
  std::vector<std::string> values;
  int jobs = 1;
  auto* sweep = app.add_subcommand("sweep", "run one experiment per value of a config key");
  add_common(sweep, sweep_opts, true);
  sweep->add_option("--key", key, "dotted config key")->required();
  sweep->add_option("--values", values, "comma-separated values")->delimiter(',');
  sweep->add_option("--jobs", jobs, "parallel runs (outputs stay per value)")->check(CLI::PositiveNumber);

  std::string demo_out;
  auto* demo = app.add_subcommand("demo", "short convex-set run with default parameters");
  demo->add_option("--out", demo_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kValidation;
  }

  if (*run) return cmd_run(run_opts);
  if (*validate) return cmd_validate(val_opts);
  if (*replay) return cmd_replay(logdir);
  if (*sweep) return cmd_sweep(sweep_opts, key, values, jobs);
  if (*demo) return cmd_demo(demo_out);
  return kValidation;
}
