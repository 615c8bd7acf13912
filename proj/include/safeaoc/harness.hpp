#pragma once

// Closed-loop experiments: plant, observer, critic/actor, history stacks,
// trainer and safety filter advanced together on one fixed-step RK4 grid.

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "safeaoc/critic.hpp"
#include "safeaoc/dnn.hpp"
#include "safeaoc/histstack.hpp"
#include "safeaoc/observer.hpp"
#include "safeaoc/plant.hpp"
#include "safeaoc/qp.hpp"
#include "safeaoc/trainer.hpp"

namespace safeaoc {

using json = nlohmann::json;

enum class SafetyMode { RobustCbf, PlainCbf, NoCbf };

inline SafetyMode parse_mode(const std::string& s) {
  if (s == "robust_cbf") return SafetyMode::RobustCbf;
  if (s == "plain_cbf") return SafetyMode::PlainCbf;
  if (s == "no_cbf") return SafetyMode::NoCbf;
  throw Error(ErrorKind::Config, "mode must be robust_cbf, plain_cbf or no_cbf, got '" + s + "'");
}

inline std::string to_string(SafetyMode m) {
  switch (m) {
    case SafetyMode::RobustCbf: return "robust_cbf";
    case SafetyMode::PlainCbf: return "plain_cbf";
    case SafetyMode::NoCbf: return "no_cbf";
  }
  return "unknown";
}

enum class DriftSource { Estimated, True };

inline DriftSource parse_drift_source(const std::string& s) {
  if (s == "estimated") return DriftSource::Estimated;
  if (s == "true") return DriftSource::True;
  throw Error(ErrorKind::Config, "drift_source must be estimated or true, got '" + s + "'");
}

inline std::string to_string(DriftSource d) { return d == DriftSource::Estimated ? "estimated" : "true"; }

// ---------------------------------------------------------------------------
// configuration

struct PretrainConfig {
  bool enabled = true;
  int trajectories = 40;
  double horizon = 2.0;
  double box = 2.5;
  double sample_dt = 0.05;
  int rounds = 4;
  int epochs_per_round = 50;
};

struct TrainerConfig {
  bool enabled = true;
  double period = 2.0;
  double end = -1.0;  // negative: half the duration
  int sample_stride = 10;
  int buffer = 500;
  LmConfig lm{200, 5e-3, 1e-3, 10.0, 0.1, 1e10, 50};
};

struct ExperimentConfig {
  BenchmarkId benchmark = BenchmarkId::ConvexSet;
  SafetyMode mode = SafetyMode::RobustCbf;
  DriftSource drift_source = DriftSource::Estimated;
  std::uint64_t seed = 1;
  double duration = 30.0;
  double dt = 1e-3;
  Vec x0;
  Vec xhat0;

  Vec Wc0;
  Vec Wa0;
  Mat Gamma0;
  CriticGains critic;
  int extrap_per_axis = 10;
  double extrap_half = 1.0;

  Mat A;
  std::vector<double> poles;
  std::optional<Mat> K;  // literal gain overriding the poles
  Mat S;
  double k_theta = 100.0;
  double gamma_scale = 1.0;
  double kappa = 0.5;
  double theta_bar = 50.0;
  double theta_band = 0.1;
  bool icl = true;

  std::vector<int> dnn_hidden{10, 6, 7};
  std::vector<Activation> dnn_activations{Activation::ElliotSym, Activation::LogSigmoid, Activation::TanhSigmoid};
  int dnn_feature_layers = 2;
  PretrainConfig pretrain;

  StackParams stack;
  std::string stack_init = "empty";  // or "preroll"

  TrainerConfig trainer;

  double eps = 0.0;
  double lip_F = 0.0;
  double lip_G = 0.0;
  double classk_gain = 1.0;
  double u_max = 10.0;  // actuator bound, every mode; 0 disables
  DriftSource safety_drift = DriftSource::True;

  double training_end() const { return trainer.end < 0.0 ? 0.5 * duration : trainer.end; }
};

inline json vec_to_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vec vec_from_json(const json& j, const std::string& key) {
  if (!j.is_array()) throw Error(ErrorKind::Config, key + " must be an array of numbers");
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw Error(ErrorKind::Config, key + " must be an array of numbers");
    v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  }
  return v;
}

inline json mat_to_json(const Mat& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) rows.push_back(vec_to_json(m.row(i).transpose()));
  return rows;
}

inline Mat mat_from_json(const json& j, const std::string& key) {
  if (!j.is_array() || j.empty()) throw Error(ErrorKind::Config, key + " must be a non-empty array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const Vec first = vec_from_json(j[0], key);
  Mat m(rows, first.size());
  for (Eigen::Index i = 0; i < rows; ++i) {
    const Vec r = vec_from_json(j[static_cast<size_t>(i)], key);
    if (r.size() != first.size()) throw Error(ErrorKind::Config, key + " rows differ in length");
    m.row(i) = r.transpose();
  }
  return m;
}

inline json config_to_json(const ExperimentConfig& c) {
  json j;
  j["benchmark"] = to_string(c.benchmark);
  j["mode"] = to_string(c.mode);
  j["drift_source"] = to_string(c.drift_source);
  j["seed"] = c.seed;
  j["duration"] = c.duration;
  j["dt"] = c.dt;
  j["x0"] = vec_to_json(c.x0);
  j["xhat0"] = vec_to_json(c.xhat0);
  j["critic"] = {{"Wc0", vec_to_json(c.Wc0)},
                 {"Wa0", vec_to_json(c.Wa0)},
                 {"Gamma0", mat_to_json(c.Gamma0)},
                 {"kc", c.critic.kc},
                 {"ka1", c.critic.ka1},
                 {"ka2", c.critic.ka2},
                 {"nu", c.critic.nu},
                 {"beta", c.critic.beta},
                 {"Wbar", c.critic.Wbar},
                 {"proj_band", c.critic.proj_band},
                 {"gamma_min", c.critic.gamma_min},
                 {"gamma_max", c.critic.gamma_max},
                 {"extrap_per_axis", c.extrap_per_axis},
                 {"extrap_half", c.extrap_half}};
  std::vector<std::string> acts;
  for (Activation a : c.dnn_activations) acts.push_back(to_string(a));
  j["observer"] = {{"A", mat_to_json(c.A)},
                   {"poles", c.poles},
                   {"K", c.K ? mat_to_json(*c.K) : json(nullptr)},
                   {"S", mat_to_json(c.S)},
                   {"k_theta", c.k_theta},
                   {"gamma_scale", c.gamma_scale},
                   {"kappa", c.kappa},
                   {"theta_bar", c.theta_bar},
                   {"theta_band", c.theta_band},
                   {"icl", c.icl}};
  j["dnn"] = {{"hidden", c.dnn_hidden},
              {"activations", acts},
              {"feature_layers", c.dnn_feature_layers},
              {"pretrain",
               {{"enabled", c.pretrain.enabled},
                {"trajectories", c.pretrain.trajectories},
                {"horizon", c.pretrain.horizon},
                {"box", c.pretrain.box},
                {"sample_dt", c.pretrain.sample_dt},
                {"rounds", c.pretrain.rounds},
                {"epochs_per_round", c.pretrain.epochs_per_round}}}};
  j["stack"] = {{"window", c.stack.window},
                {"capacity", c.stack.capacity},
                {"eig_threshold", c.stack.eig_threshold},
                {"sample_period", c.stack.sample_period},
                {"purge_ratio", c.stack.purge_ratio},
                {"dwell", c.stack.dwell},
                {"init", c.stack_init}};
  j["trainer"] = {{"enabled", c.trainer.enabled},
                  {"period", c.trainer.period},
                  {"end", c.trainer.end},
                  {"sample_stride", c.trainer.sample_stride},
                  {"buffer", c.trainer.buffer},
                  {"max_epochs", c.trainer.lm.max_epochs},
                  {"target_mse", c.trainer.lm.target_mse},
                  {"damping_init", c.trainer.lm.damping_init},
                  {"damping_up", c.trainer.lm.damping_up},
                  {"damping_down", c.trainer.lm.damping_down},
                  {"damping_max", c.trainer.lm.damping_max},
                  {"val_patience", c.trainer.lm.val_patience}};
  j["safety"] = {{"eps", c.eps},
                 {"lip_F", c.lip_F},
                 {"lip_G", c.lip_G},
                 {"classk_gain", c.classk_gain},
                 {"u_max", c.u_max},
                 {"drift_source", to_string(c.safety_drift)}};
  return j;
}

namespace detail {

inline const json& at(const json& j, const std::string& path) {
  const json* cur = &j;
  std::stringstream ss(path);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!cur->is_object() || !cur->contains(part)) throw Error(ErrorKind::Config, "missing config field '" + path + "'");
    cur = &(*cur)[part];
  }
  return *cur;
}

inline double num(const json& j, const std::string& path) {
  const json& v = at(j, path);
  if (!v.is_number()) throw Error(ErrorKind::Config, "config field '" + path + "' must be a number");
  return v.get<double>();
}

inline int integer(const json& j, const std::string& path) {
  const json& v = at(j, path);
  if (!v.is_number_integer()) throw Error(ErrorKind::Config, "config field '" + path + "' must be an integer");
  return v.get<int>();
}

inline bool boolean(const json& j, const std::string& path) {
  const json& v = at(j, path);
  if (!v.is_boolean()) throw Error(ErrorKind::Config, "config field '" + path + "' must be true or false");
  return v.get<bool>();
}

inline std::string str(const json& j, const std::string& path) {
  const json& v = at(j, path);
  if (!v.is_string()) throw Error(ErrorKind::Config, "config field '" + path + "' must be a string");
  return v.get<std::string>();
}

}  // namespace detail

inline ExperimentConfig config_from_json(const json& j) {
  using namespace detail;
  ExperimentConfig c;
  c.benchmark = parse_benchmark(str(j, "benchmark"));
  c.mode = parse_mode(str(j, "mode"));
  c.drift_source = parse_drift_source(str(j, "drift_source"));
  const json& seed = at(j, "seed");
  if (!seed.is_number_unsigned() && !(seed.is_number_integer() && seed.get<long long>() >= 0))
    throw Error(ErrorKind::Config, "config field 'seed' must be a nonnegative integer");
  c.seed = seed.get<std::uint64_t>();
  c.duration = num(j, "duration");
  c.dt = num(j, "dt");
  c.x0 = vec_from_json(at(j, "x0"), "x0");
  c.xhat0 = vec_from_json(at(j, "xhat0"), "xhat0");

  c.Wc0 = vec_from_json(at(j, "critic.Wc0"), "critic.Wc0");
  c.Wa0 = vec_from_json(at(j, "critic.Wa0"), "critic.Wa0");
  c.Gamma0 = mat_from_json(at(j, "critic.Gamma0"), "critic.Gamma0");
  c.critic.kc = num(j, "critic.kc");
  c.critic.ka1 = num(j, "critic.ka1");
  c.critic.ka2 = num(j, "critic.ka2");
  c.critic.nu = num(j, "critic.nu");
  c.critic.beta = num(j, "critic.beta");
  c.critic.Wbar = num(j, "critic.Wbar");
  c.critic.proj_band = num(j, "critic.proj_band");
  c.critic.gamma_min = num(j, "critic.gamma_min");
  c.critic.gamma_max = num(j, "critic.gamma_max");
  c.extrap_per_axis = integer(j, "critic.extrap_per_axis");
  c.extrap_half = num(j, "critic.extrap_half");

  c.A = mat_from_json(at(j, "observer.A"), "observer.A");
  const Vec poles = vec_from_json(at(j, "observer.poles"), "observer.poles");
  c.poles.assign(poles.data(), poles.data() + poles.size());
  const json& k = at(j, "observer.K");
  if (!k.is_null()) c.K = mat_from_json(k, "observer.K");
  c.S = mat_from_json(at(j, "observer.S"), "observer.S");
  c.k_theta = num(j, "observer.k_theta");
  c.gamma_scale = num(j, "observer.gamma_scale");
  c.kappa = num(j, "observer.kappa");
  c.theta_bar = num(j, "observer.theta_bar");
  c.theta_band = num(j, "observer.theta_band");
  c.icl = boolean(j, "observer.icl");

  try {
    c.dnn_hidden = at(j, "dnn.hidden").get<std::vector<int>>();
  } catch (const json::exception&) {
    throw Error(ErrorKind::Config, "config field 'dnn.hidden' must be an array of integers");
  }
  c.dnn_activations.clear();
  const json& acts = at(j, "dnn.activations");
  if (!acts.is_array()) throw Error(ErrorKind::Config, "config field 'dnn.activations' must be an array");
  for (const json& a : acts) {
    if (!a.is_string()) throw Error(ErrorKind::Config, "dnn.activations entries must be strings");
    c.dnn_activations.push_back(parse_activation(a.get<std::string>()));
  }
  c.dnn_feature_layers = integer(j, "dnn.feature_layers");
  c.pretrain.enabled = boolean(j, "dnn.pretrain.enabled");
  c.pretrain.trajectories = integer(j, "dnn.pretrain.trajectories");
  c.pretrain.horizon = num(j, "dnn.pretrain.horizon");
  c.pretrain.box = num(j, "dnn.pretrain.box");
  c.pretrain.sample_dt = num(j, "dnn.pretrain.sample_dt");
  c.pretrain.rounds = integer(j, "dnn.pretrain.rounds");
  c.pretrain.epochs_per_round = integer(j, "dnn.pretrain.epochs_per_round");

  c.stack.window = num(j, "stack.window");
  c.stack.capacity = integer(j, "stack.capacity");
  c.stack.eig_threshold = num(j, "stack.eig_threshold");
  c.stack.sample_period = num(j, "stack.sample_period");
  c.stack.purge_ratio = num(j, "stack.purge_ratio");
  c.stack.dwell = num(j, "stack.dwell");
  c.stack.kappa = c.kappa;
  c.stack_init = str(j, "stack.init");

  c.trainer.enabled = boolean(j, "trainer.enabled");
  c.trainer.period = num(j, "trainer.period");
  c.trainer.end = num(j, "trainer.end");
  c.trainer.sample_stride = integer(j, "trainer.sample_stride");
  c.trainer.buffer = integer(j, "trainer.buffer");
  c.trainer.lm.max_epochs = integer(j, "trainer.max_epochs");
  c.trainer.lm.target_mse = num(j, "trainer.target_mse");
  c.trainer.lm.damping_init = num(j, "trainer.damping_init");
  c.trainer.lm.damping_up = num(j, "trainer.damping_up");
  c.trainer.lm.damping_down = num(j, "trainer.damping_down");
  c.trainer.lm.damping_max = num(j, "trainer.damping_max");
  c.trainer.lm.val_patience = integer(j, "trainer.val_patience");

  c.eps = num(j, "safety.eps");
  c.lip_F = num(j, "safety.lip_F");
  c.lip_G = num(j, "safety.lip_G");
  c.classk_gain = num(j, "safety.classk_gain");
  c.u_max = num(j, "safety.u_max");
  c.safety_drift = parse_drift_source(str(j, "safety.drift_source"));
  return c;
}

/// Printed parameters of the two studies. Values the second study inherits
/// from the first are copied.
inline ExperimentConfig benchmark_config(BenchmarkId id) {
  ExperimentConfig c;
  c.benchmark = id;
  c.A.resize(2, 2);
  c.S = Mat::Identity(2, 2);
  c.critic.nu = 0.7;
  c.critic.beta = 0.01;
  if (id == BenchmarkId::ConvexSet) {
    c.x0 = (Vec(2) << -2.0, 1.0).finished();
    c.xhat0 = (Vec(2) << -2.5, 1.5).finished();
    c.Wa0 = Vec::Constant(3, 0.5);
    c.Wc0 = Vec::Constant(3, 1.0);
    c.Gamma0 = 0.5 * Mat::Identity(3, 3);
    c.critic.ka1 = 0.5;
    c.critic.ka2 = 0.1;
    c.critic.kc = 5.0;
    c.A << -0.6, -1.0, 0.0, 0.0;
    c.poles = {-5.0, -6.0};
    c.eps = 0.7;
    c.lip_F = 0.2;
    c.lip_G = 0.2;
  } else {
    c.x0 = (Vec(2) << -0.5, 2.0).finished();
    c.xhat0 = (Vec(2) << -0.75, 2.25).finished();
    c.Wa0 = Vec::Constant(3, 0.5);
    c.Wc0 = Vec::Constant(3, 0.5);
    c.Gamma0 = Mat::Identity(3, 3);
    c.critic.ka1 = 1.0;
    c.critic.ka2 = 0.5;
    c.critic.kc = 0.5;
    c.A << -1.0, -1.0, -0.5, -0.5;
    c.poles = {-3.0, -4.0};
    c.eps = 0.5;
    c.lip_F = 0.1;
    c.lip_G = 0.1;
  }
  c.stack.kappa = c.kappa;
  return c;
}

inline bool is_multiple(double value, double step) {
  const double r = value / step;
  return std::abs(r - std::round(r)) <= 1e-9 * std::max(1.0, std::abs(r));
}

/// Throws a config error on any violated invariant; returns warnings for
/// conditions that are reported but do not block a run.
inline std::vector<std::string> validate_config(const ExperimentConfig& c) {
  std::vector<std::string> warnings;
  auto fail = [](const std::string& m) { throw Error(ErrorKind::Config, m); };
  const Benchmark b = benchmark_system(c.benchmark);
  const int n = b.plant.n;
  const int L = n * (n + 1) / 2;
  if (!(c.duration >= 0.0) || !std::isfinite(c.duration)) fail("duration must be >= 0");
  IntegratorConfig{c.dt}.validate();
  if (!is_multiple(c.duration, c.dt)) fail("dt must divide duration");
  if (c.x0.size() != n || c.xhat0.size() != n) fail("x0 and xhat0 must have " + std::to_string(n) + " entries");
  if (!c.x0.allFinite() || !c.xhat0.allFinite()) fail("x0 and xhat0 must be finite");
  if (c.Wc0.size() != L || c.Wa0.size() != L) fail("critic.Wc0 and critic.Wa0 must have " + std::to_string(L) + " entries");
  if (c.Gamma0.rows() != L || c.Gamma0.cols() != L) fail("critic.Gamma0 must be " + std::to_string(L) + "x" + std::to_string(L));
  if (max_abs(c.Gamma0 - c.Gamma0.transpose()) > 1e-12 || sym_eig_min(c.Gamma0) <= 0.0)
    fail("critic.Gamma0 must be symmetric positive definite");
  c.critic.validate();
  if (c.extrap_per_axis < 1 || !(c.extrap_half > 0.0)) fail("critic extrapolation grid must be non-empty");
  if (c.A.rows() != n || c.A.cols() != n) fail("observer.A must be " + std::to_string(n) + "x" + std::to_string(n));
  if (c.S.rows() != n || c.S.cols() != n || max_abs(c.S - c.S.transpose()) > 1e-12 || sym_eig_min(c.S) <= 0.0)
    fail("observer.S must be symmetric positive definite");
  if (c.K) {
    if (c.K->rows() != n || c.K->cols() != b.plant.q) fail("observer.K must be n x q");
  } else if (static_cast<int>(c.poles.size()) != n) {
    fail("observer.poles must have " + std::to_string(n) + " entries");
  }
  if (!(c.k_theta > 0.0) || !(c.gamma_scale > 0.0) || !(c.kappa > 0.0) || !(c.theta_bar > 0.0) || !(c.theta_band > 0.0))
    fail("observer gains k_theta, gamma_scale, kappa, theta_bar, theta_band must be > 0");
  if (c.dnn_hidden.size() != c.dnn_activations.size() || c.dnn_hidden.empty())
    fail("dnn.hidden and dnn.activations must have the same non-zero length");
  if (c.dnn_feature_layers < 1 || c.dnn_feature_layers > static_cast<int>(c.dnn_hidden.size()))
    fail("dnn.feature_layers must lie in [1, layers]");
  for (int w : c.dnn_hidden)
    if (w < 1) fail("dnn.hidden widths must be positive");
  if (c.pretrain.trajectories < 1 || !(c.pretrain.horizon > 0.0) || !(c.pretrain.box > 0.0) ||
      !(c.pretrain.sample_dt > 0.0) || c.pretrain.rounds < 0 || c.pretrain.epochs_per_round < 0)
    fail("dnn.pretrain settings must be positive");
  c.stack.validate();
  if (!is_multiple(c.stack.window, c.dt)) fail("dt must divide stack.window");
  if (!is_multiple(c.stack.sample_period, c.dt)) fail("dt must divide stack.sample_period");
  if (c.stack_init != "preroll" && c.stack_init != "empty") fail("stack.init must be preroll or empty");
  if (!(c.trainer.period > 0.0) || c.trainer.sample_stride < 1 || c.trainer.buffer < 2)
    fail("trainer.period, trainer.sample_stride and trainer.buffer must be positive");
  c.trainer.lm.validate();
  SafetySpec s;
  s.classk_gain = c.classk_gain;
  s.eps = c.eps;
  s.lip_F = c.lip_F;
  s.lip_G = Vec::Constant(b.plant.m, c.lip_G);
  s.validate(b.plant.m);
  if (!(c.u_max >= 0.0)) fail("safety.u_max must be >= 0");

  if (c.mode == SafetyMode::RobustCbf && c.eps > 0.0) {
    // closed ball around xhat0 must sit inside the safe set
    double worst = b.safety.barrier(c.xhat0);
    for (int k = 0; k < 720; ++k) {
      const double a = 2.0 * M_PI * k / 720.0;
      Vec p = c.xhat0;
      p(0) += c.eps * std::cos(a);
      p(1) += c.eps * std::sin(a);
      worst = std::min(worst, b.safety.barrier(p));
    }
    if (worst < 0.0) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "closed ball of radius eps=%g around xhat0 leaves the safe set (min h = %.4g)",
                    c.eps, worst);
      warnings.emplace_back(buf);
    }
  }
  if (b.safety.barrier(c.x0) < 0.0) warnings.emplace_back("x0 starts outside the safe set");
  return warnings;
}

// ---------------------------------------------------------------------------
// dotted overrides

/// Sets `path` in `doc` from text, type-checked against the value already
/// there. Numbers must parse completely, arrays and null take JSON text.
inline void apply_override(json& doc, const std::string& path, const std::string& text) {
  json* cur = &doc;
  std::stringstream ss(path);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!cur->is_object() || !cur->contains(part)) throw Error(ErrorKind::Config, "unknown config key '" + path + "'");
    cur = &(*cur)[part];
  }
  json& slot = *cur;
  if (slot.is_object()) throw Error(ErrorKind::Config, "config key '" + path + "' is a section, not a value");
  if (slot.is_number()) {
    if (slot.is_number_integer() || slot.is_number_unsigned()) {
      std::size_t used = 0;
      long long v = 0;
      try {
        v = std::stoll(text, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != text.size())
        throw Error(ErrorKind::Config, "override '" + path + "' expects an integer, got '" + text + "'");
      if (slot.is_number_unsigned() && v < 0)
        throw Error(ErrorKind::Config, "override '" + path + "' expects a nonnegative integer");
      slot = v;
      return;
    }
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(text, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != text.size() || !std::isfinite(v))
      throw Error(ErrorKind::Config, "override '" + path + "' expects a number, got '" + text + "'");
    slot = v;
    return;
  }
  if (slot.is_boolean()) {
    if (text == "true") slot = true;
    else if (text == "false") slot = false;
    else throw Error(ErrorKind::Config, "override '" + path + "' expects true or false, got '" + text + "'");
    return;
  }
  if (slot.is_string()) {
    slot = text;
    return;
  }
  json parsed;
  try {
    parsed = json::parse(text);
  } catch (const json::exception&) {
    throw Error(ErrorKind::Config, "override '" + path + "' expects JSON, got '" + text + "'");
  }
  if (!slot.is_null() && !parsed.is_null() && parsed.type() != slot.type())
    throw Error(ErrorKind::Config, "override '" + path + "' changes the value type");
  slot = parsed;
}

/// Defaults for the benchmark named in `doc`, merged with `doc`. Keys that
/// are not part of the schema are rejected.
inline json resolve_config_json(const json& doc) {
  if (!doc.is_object()) throw Error(ErrorKind::Config, "config must be a JSON object");
  if (!doc.contains("benchmark") || !doc["benchmark"].is_string())
    throw Error(ErrorKind::Config, "missing config field 'benchmark'");
  json base = config_to_json(benchmark_config(parse_benchmark(doc["benchmark"].get<std::string>())));
  std::function<void(const json&, const json&, const std::string&)> check = [&](const json& ref, const json& in,
                                                                               const std::string& prefix) {
    for (auto it = in.begin(); it != in.end(); ++it) {
      const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
      if (!ref.contains(it.key())) throw Error(ErrorKind::Config, "unknown config key '" + key + "'");
      if (ref[it.key()].is_object()) {
        if (!it.value().is_object()) throw Error(ErrorKind::Config, "config key '" + key + "' must be a section");
        check(ref[it.key()], it.value(), key);
      }
    }
  };
  check(base, doc, "");
  const json ref = base;
  base.merge_patch(doc);
  // integer literals in float slots stay floats so later overrides type-check
  std::function<void(const json&, json&)> widen = [&](const json& r, json& v) {
    for (auto it = r.begin(); it != r.end(); ++it) {
      if (!v.contains(it.key())) continue;
      json& slot = v[it.key()];
      if (it.value().is_object() && slot.is_object()) widen(it.value(), slot);
      else if (it.value().is_number_float() && slot.is_number_integer()) slot = slot.get<double>();
    }
  };
  widen(ref, base);
  // merge_patch drops explicit nulls; K is the only nullable field
  if (doc.contains("observer") && doc["observer"].contains("K") && doc["observer"]["K"].is_null())
    base["observer"]["K"] = nullptr;
  if (!base["observer"].contains("K")) base["observer"]["K"] = nullptr;
  return base;
}

inline json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Config, "cannot open config file '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Config, "cannot parse '" + path + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------
// assembled components

struct ExperimentSetup {
  Benchmark system;
  BasisSpec basis;
  ObserverState observer;
  CriticState critic;
  StackManagerState stacks;
};

/// Offline fit of the inner layers on simulated plant data: random initial
/// states, random piecewise-constant inputs, targets f(x) - A x. The outer
/// layer is refit by least squares between LM rounds; it is discarded
/// afterwards.
inline DnnSpec pretrain_dnn(const Benchmark& b, const Mat& a, DnnSpec dnn, const PretrainConfig& pc,
                            std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> box(-pc.box, pc.box);
  std::uniform_real_distribution<double> uin(-1.0, 1.0);
  const double h = 0.01;
  const int per_sample = std::max(1, static_cast<int>(std::lround(pc.sample_dt / h)));
  const int steps = static_cast<int>(std::lround(pc.horizon / h));
  TrainSet set;
  for (int k = 0; k < pc.trajectories; ++k) {
    Vec x(b.plant.n);
    for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = box(rng);
    Vec u = Vec::Constant(b.plant.m, uin(rng));
    for (int s = 0; s <= steps; ++s) {
      if (x.norm() > 2.0 * pc.box || !x.allFinite()) break;
      if (s % per_sample == 0) {
        set.inputs.push_back(x);
        set.targets.push_back(b.plant.drift(x) - a * x);
      }
      if (s % 50 == 0) u = Vec::Constant(b.plant.m, uin(rng));
      x = rk4_step([&](const Vec& z, double) { return Vec(b.plant.drift(z) + b.plant.effectiveness(z) * u); }, x,
                   0.0, h);
    }
  }
  for (size_t i = 0; i < set.inputs.size(); ++i) {
    const auto pos = (i + seed) % 20;
    (pos < 14 ? set.train : pos < 17 ? set.val : set.test).push_back(static_cast<int>(i));
  }
  if (set.train.empty()) return dnn;
  LmConfig lm;
  lm.max_epochs = pc.epochs_per_round;
  lm.target_mse = 1e-8;
  for (int r = 0; r < pc.rounds; ++r) {
    Mat phi(static_cast<Eigen::Index>(set.train.size()), dnn.feature_dim());
    Mat tgt(static_cast<Eigen::Index>(set.train.size()), b.plant.n);
    for (size_t s = 0; s < set.train.size(); ++s) {
      const auto i = static_cast<size_t>(set.train[s]);
      phi.row(static_cast<Eigen::Index>(s)) = dnn_features(dnn, set.inputs[i]).transpose();
      tgt.row(static_cast<Eigen::Index>(s)) = set.targets[i].transpose();
    }
    Mat gram = phi.transpose() * phi;
    gram.diagonal().array() += 1e-6;
    const Mat theta = gram.ldlt().solve(phi.transpose() * tgt);
    dnn = lm_train(dnn, theta, set, lm).dnn;
  }
  return dnn;
}

inline Mat observer_gain(const ExperimentConfig& c, const Benchmark& b) {
  if (c.K) return *c.K;
  return place_observer_gain(c.A, b.plant.output_matrix, c.poles);
}

inline ExperimentSetup make_setup(const ExperimentConfig& c) {
  ExperimentSetup s;
  s.system = benchmark_system(c.benchmark);
  s.system.safety.eps = c.eps;
  s.system.safety.lip_F = c.lip_F;
  s.system.safety.lip_G = Vec::Constant(s.system.plant.m, c.lip_G);
  s.system.safety.classk_gain = c.classk_gain;
  s.basis = quadratic_basis(s.system.plant.n);

  DnnSpec dnn = make_dnn(s.system.plant.n, c.dnn_hidden, c.dnn_activations, c.dnn_feature_layers, c.seed);
  if (c.pretrain.enabled) dnn = pretrain_dnn(s.system, c.A, dnn, c.pretrain, c.seed);
  ObserverGains og;
  og.k_theta = c.k_theta;
  og.kappa = c.kappa;
  og.gamma = c.gamma_scale * Mat::Identity(dnn.feature_dim(), dnn.feature_dim());
  og.theta_bar = c.theta_bar;
  og.band = c.theta_band;
  s.observer = make_observer(c.xhat0, c.A, s.system.plant.output_matrix, observer_gain(c, s.system), c.S, dnn, og);

  s.critic.Wc = c.Wc0;
  s.critic.Wa = c.Wa0;
  s.critic.Gamma = c.Gamma0;
  s.critic.gains = c.critic;
  s.critic.extrap_points = extrapolation_grid(c.extrap_per_axis, c.extrap_half);

  StackParams sp = c.stack;
  sp.kappa = c.kappa;
  s.stacks = make_stack_manager(sp, dnn.feature_dim(), s.system.plant.n);
  return s;
}

// ---------------------------------------------------------------------------
// log

enum StackEvent : int { kEventNone = 0, kEventPurge = 1, kEventDnnSwap = 2 };

struct StepRecord {
  double t = 0.0;
  Vec x, xhat, u, pi;
  double h_x = 0.0;
  double h_xhat = 0.0;
  double xtilde_norm = 0.0;
  bool within_eps = true;
  double bellman_mean_abs = 0.0;
  double bellman_max_abs = 0.0;
  Vec Wc, Wa;
  Mat theta;
  double critic_rank = 0.0;
  double stack_eig = 0.0;
  double aux_eig = 0.0;
  int stack_size = 0;
  int aux_size = 0;
  double gamma_min = 0.0;
  double gamma_max = 0.0;
  int stack_event = kEventNone;
  int qp_status = -1;  // -1 unfiltered, 0 optimal, 1 infeasible, 2 degenerate
  double qp_kkt = 0.0;
  bool saturated = false;
};

struct PurgeEvent {
  double t = 0.0;
  double eig = 0.0;
};

struct TrainingEvent {
  double t = 0.0;
  int samples = 0;
  int epochs = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;
  double test_mse = 0.0;
  std::string stop;
};

struct TrajectoryLog {
  std::vector<StepRecord> records;
  std::vector<PurgeEvent> purges;
  std::vector<TrainingEvent> trainings;
  std::vector<std::string> warnings;
  std::string fault;  // empty when the run completed
  DnnSpec final_dnn;
  double eps = 0.0;
  double wall_seconds = 0.0;
};

// ---------------------------------------------------------------------------
// run

namespace detail {

// Offsets of each block inside the packed coupled state.
struct Layout {
  Eigen::Index n, L, p;
  Eigen::Index x() const { return 0; }
  Eigen::Index xhat() const { return n; }
  Eigen::Index wc() const { return 2 * n; }
  Eigen::Index wa() const { return 2 * n + L; }
  Eigen::Index gamma() const { return 2 * n + 2 * L; }
  Eigen::Index theta() const { return 2 * n + 2 * L + L * L; }
  Eigen::Index size() const { return theta() + p * n; }
};

inline Vec pack(const Layout& l, const Vec& x, const ObserverState& o, const CriticState& c) {
  Vec z(l.size());
  z.segment(l.x(), l.n) = x;
  z.segment(l.xhat(), l.n) = o.xhat;
  z.segment(l.wc(), l.L) = c.Wc;
  z.segment(l.wa(), l.L) = c.Wa;
  z.segment(l.gamma(), l.L * l.L) = Eigen::Map<const Vec>(c.Gamma.data(), l.L * l.L);
  z.segment(l.theta(), l.p * l.n) = Eigen::Map<const Vec>(o.theta.data(), l.p * l.n);
  return z;
}

}  // namespace detail

struct FilterResult {
  Vec u;
  int status = -1;
  double kkt = 0.0;
  bool saturated = false;
};

/// Desired policy at xhat passed through the mode's safety filter, then
/// clipped to the actuator bound. A QP that does not report optimal falls
/// back to the boundary point along the channel signs.
inline FilterResult safety_filter(SafetyMode mode, const Benchmark& b, const Vec& xhat, const Vec& desired,
                                  const Vec& drift_at_xhat, double u_max) {
  FilterResult r;
  if (mode == SafetyMode::NoCbf) {
    r.u = desired;
  } else {
    SafetySpec spec = b.safety;
    if (mode == SafetyMode::PlainCbf) spec.eps = 0.0;
    const RobustBounds rb = robust_bounds(spec, b.plant, xhat, drift_at_xhat);
    const SafetyQP qp{desired, rb.F, rb.Gminus, rb.Gplus};
    const QPSolution sol = solve_safety_qp(qp);
    r.status = static_cast<int>(sol.status);
    r.kkt = sol.kkt_residual;
    r.u = sol.status == QPStatus::Optimal ? sol.u : detail::project_along_signs(qp, desired);
  }
  if (!r.u.allFinite()) throw Error(ErrorKind::NoSolution, "safety filter produced a non-finite input");
  if (u_max > 0.0) {
    const Vec clipped = r.u.cwiseMax(-u_max).cwiseMin(u_max);
    r.saturated = (clipped - r.u).cwiseAbs().maxCoeff() > 0.0;
    r.u = clipped;
  }
  return r;
}

/// Pre-roll under zero input from (x0, xhat0): stack data gathered with the
/// manager's swap test, then installed as the active stack and tagged
/// synthetic. The experiment state itself is not advanced.
inline void preroll_stack(const ExperimentConfig& c, ExperimentSetup& s) {
  const Benchmark& b = s.system;
  WindowAccumulator acc(c.stack.window, c.dt, c.stack.sample_period);
  StackManagerState tmp = s.stacks;
  Vec x = c.x0;
  ObserverState o = s.observer;
  const Vec u = Vec::Zero(b.plant.m);
  const int needed = c.stack.capacity;
  const long max_steps = std::lround((c.stack.window + (needed + 5) * c.stack.sample_period) / c.dt);
  for (long k = 0; k <= max_steps && !tmp.auxiliary.full(); ++k) {
    const double t = static_cast<double>(k) * c.dt;
    auto d = acc.push({t, o.xhat, dnn_features(o.dnn, o.xhat), o.A * o.xhat + b.plant.effectiveness(o.xhat) * u});
    if (d) {
      d->synthetic = true;
      consider(tmp, *d);
    }
    const int n = b.plant.n;
    Vec z(2 * n);
    z << x, o.xhat;
    z = rk4_step(
        [&](const Vec& w, double) {
          Vec out(2 * n);
          const Vec xs = w.head(n);
          const Vec xh = w.tail(n);
          out << b.plant.drift(xs) + b.plant.effectiveness(xs) * u,
              observer_rhs(o, o.theta, xh, u, b.plant.output_matrix * xs, b.plant.effectiveness);
          return out;
        },
        z, t, c.dt);
    x = z.head(n);
    o.xhat = z.tail(n);
  }
  s.stacks.active = tmp.auxiliary;
  s.stacks.active.set_role(StackRole::Active);
}

inline TrajectoryLog run_experiment(const ExperimentConfig& cfg) {
  const auto wall_start = std::chrono::steady_clock::now();
  TrajectoryLog log;
  log.warnings = validate_config(cfg);
  log.eps = cfg.eps;
  ExperimentSetup s = make_setup(cfg);
  const Benchmark& b = s.system;
  const PlantModel& plant = b.plant;
  const Mat& C = plant.output_matrix;
  if (cfg.stack_init == "preroll") preroll_stack(cfg, s);

  ObserverState& obs = s.observer;
  CriticState& cr = s.critic;
  StackManagerState& stacks = s.stacks;
  Vec x = cfg.x0;

  const detail::Layout lay{plant.n, s.basis.L, obs.dnn.feature_dim()};
  const ExtrapolationCache cache = build_extrapolation_cache(s.basis, plant, b.cost, cr.extrap_points);
  const auto npts = static_cast<Eigen::Index>(cr.extrap_points.size());
  Mat pts(plant.n, npts);
  for (Eigen::Index k = 0; k < npts; ++k) pts.col(k) = cr.extrap_points[static_cast<size_t>(k)];
  Mat true_drift(plant.n, npts);
  for (Eigen::Index k = 0; k < npts; ++k) true_drift.col(k) = plant.drift(pts.col(k));
  Mat feat;  // p x N features at the extrapolation points for the current DNN
  auto refresh_features = [&] {
    feat.resize(obs.dnn.feature_dim(), npts);
    for (Eigen::Index k = 0; k < npts; ++k) feat.col(k) = dnn_features(obs.dnn, pts.col(k));
  };
  refresh_features();
  auto extrap_drifts = [&](const Mat& theta) {
    std::vector<Vec> d(static_cast<size_t>(npts));
    if (cfg.drift_source == DriftSource::True) {
      for (Eigen::Index k = 0; k < npts; ++k) d[static_cast<size_t>(k)] = true_drift.col(k);
    } else {
      const Mat all = obs.A * pts + theta.transpose() * feat;
      for (Eigen::Index k = 0; k < npts; ++k) d[static_cast<size_t>(k)] = all.col(k);
    }
    return d;
  };

  WindowAccumulator acc(cfg.stack.window, cfg.dt, cfg.stack.sample_period);
  std::vector<ObserverSample> train_buf;
  const long steps = std::lround(cfg.duration / cfg.dt);
  const double t_train_end = cfg.training_end();
  int pending_event = kEventNone;

  for (long k = 0; k <= steps; ++k) {
    const double t = static_cast<double>(k) * cfg.dt;
    StepRecord rec;
    rec.t = t;
    rec.x = x;
    rec.xhat = obs.xhat;
    rec.pi = approx_policy(s.basis, plant, b.cost, cr.Wa, obs.xhat);
    FilterResult fr;
    try {
      const Vec fhat = cfg.safety_drift == DriftSource::True ? plant.drift(obs.xhat) : estimated_drift(obs, obs.xhat);
      fr = safety_filter(cfg.mode, b, obs.xhat, rec.pi, fhat, cfg.u_max);
    } catch (const Error& e) {
      log.fault = e.what();
      break;
    }
    const Vec u = fr.u;
    rec.u = u;
    rec.qp_status = fr.status;
    rec.qp_kkt = fr.kkt;
    rec.saturated = fr.saturated;
    rec.h_x = b.safety.barrier(x);
    rec.h_xhat = b.safety.barrier(obs.xhat);
    rec.xtilde_norm = (x - obs.xhat).norm();
    rec.within_eps = rec.xtilde_norm <= cfg.eps;
    rec.Wc = cr.Wc;
    rec.Wa = cr.Wa;
    rec.theta = obs.theta;
    {
      const std::vector<Vec> drifts = extrap_drifts(obs.theta);
      double sum = 0.0, mx = 0.0;
      for (Eigen::Index j = 0; j < npts; ++j) {
        const auto jj = static_cast<size_t>(j);
        const Vec up = -0.5 * cache.gRinv[jj] * (cache.jac[jj].transpose() * cr.Wa);
        const Vec omega = cache.jac[jj] * (drifts[jj] + cache.g[jj] * up);
        const double delta = std::abs(cr.Wc.dot(omega) + cache.Q[jj] + up.dot(cache.R * up));
        sum += delta;
        mx = std::max(mx, delta);
      }
      rec.bellman_mean_abs = npts > 0 ? sum / static_cast<double>(npts) : 0.0;
      rec.bellman_max_abs = mx;
      rec.critic_rank = rank_monitor(cache, drifts, cr.gains.nu, cr.Wa);
    }
    rec.stack_eig = stacks.active.min_eig();
    rec.aux_eig = stacks.auxiliary.min_eig();
    rec.stack_size = stacks.active.size();
    rec.aux_size = stacks.auxiliary.size();
    {
      const SymEigen ge = sym_eig(cr.Gamma);
      rec.gamma_min = ge.values(0);
      rec.gamma_max = ge.values(ge.values.size() - 1);
    }
    rec.stack_event = pending_event;
    pending_event = kEventNone;

    // stack bookkeeping and trainer data at t with the input held on [t, t+dt)
    const Mat gx = plant.effectiveness(obs.xhat);
    const Vec y = C * x;
    if (cfg.icl) {
      try {
        auto d = acc.push({t, obs.xhat, dnn_features(obs.dnn, obs.xhat), obs.A * obs.xhat + gx * u});
        if (d) consider(stacks, *d);
      } catch (const Error& e) {
        log.fault = e.what();
        log.records.push_back(std::move(rec));
        break;
      }
      if (maybe_purge(stacks, t)) {
        log.purges.push_back({t, stacks.active.min_eig()});
        rec.stack_event |= kEventPurge;
        acc.clear();
      }
    }
    if (cfg.trainer.enabled && t <= t_train_end && k % cfg.trainer.sample_stride == 0) {
      train_buf.push_back({t, obs.xhat, observer_rhs(obs, obs.theta, obs.xhat, u, y, plant.effectiveness), u});
      if (static_cast<int>(train_buf.size()) > cfg.trainer.buffer) train_buf.erase(train_buf.begin());
    }
    log.records.push_back(std::move(rec));
    if (k == steps) break;

    // coupled RK4 over (x, xhat, Wc, Wa, Gamma, theta) with u held
    const Vec z0 = detail::pack(lay, x, obs, cr);
    const Mat gamma_before = cr.Gamma;
    auto rhs = [&](const Vec& z, double) {
      Vec out(z.size());
      const Vec xs = z.segment(lay.x(), lay.n);
      const Vec xh = z.segment(lay.xhat(), lay.n);
      const Mat theta = Eigen::Map<const Mat>(z.data() + lay.theta(), lay.p, lay.n);
      out.segment(lay.x(), lay.n) = plant.drift(xs) + plant.effectiveness(xs) * u;
      out.segment(lay.xhat(), lay.n) = observer_rhs(obs, theta, xh, u, C * xs, plant.effectiveness);
      const Mat gamma = Eigen::Map<const Mat>(z.data() + lay.gamma(), lay.L, lay.L);
      const CriticDerivative cd = critic_rhs(cache, extrap_drifts(theta), cr.gains, z.segment(lay.wc(), lay.L), gamma,
                                             z.segment(lay.wa(), lay.L));
      out.segment(lay.wc(), lay.L) = cd.dWc;
      out.segment(lay.wa(), lay.L) = cd.dWa;
      out.segment(lay.gamma(), lay.L * lay.L) = Eigen::Map<const Vec>(cd.dGamma.data(), lay.L * lay.L);
      if (cfg.icl) {
        const Mat dth = icl_rhs(obs.gains, stacks.active, theta);
        out.segment(lay.theta(), lay.p * lay.n) = Eigen::Map<const Vec>(dth.data(), lay.p * lay.n);
      } else {
        out.segment(lay.theta(), lay.p * lay.n).setZero();
      }
      return out;
    };
    Vec z1;
    try {
      z1 = rk4_step(rhs, z0, t, cfg.dt);
    } catch (const IntegrationFault& e) {
      log.fault = e.what();
      break;
    }
    x = z1.segment(lay.x(), lay.n);
    obs.xhat = z1.segment(lay.xhat(), lay.n);
    cr.Wc = z1.segment(lay.wc(), lay.L);
    cr.Wa = z1.segment(lay.wa(), lay.L);
    cr.Gamma = Eigen::Map<const Mat>(z1.data() + lay.gamma(), lay.L, lay.L);
    obs.theta = Eigen::Map<const Mat>(z1.data() + lay.theta(), lay.p, lay.n);
    enforce_critic_bounds(cr.gains, gamma_before, cr.Gamma, cr.Wa);
    clamp_theta(obs.gains, obs.theta);

    // inner-layer training at the schedule marks of the first phase
    const double t_next = static_cast<double>(k + 1) * cfg.dt;
    if (cfg.trainer.enabled && t_next <= t_train_end + 0.5 * cfg.dt &&
        swap_schedule(t_next, cfg.trainer.period, cfg.dt) && train_buf.size() >= 20) {
      const TrainSet set = build_trainset(train_buf, obs.A, plant.effectiveness, cfg.seed);
      const LmReport rep = lm_train(obs.dnn, obs.theta, set, cfg.trainer.lm);
      log.trainings.push_back({t_next, static_cast<int>(train_buf.size()), rep.epochs, rep.train_mse, rep.val_mse,
                               rep.test_mse, to_string(rep.stop)});
      if (rep.epochs > 0) {
        obs.dnn = rep.dnn;
        refresh_features();
        auto phi = [&](const Vec& v) { return dnn_features(obs.dnn, v); };
        rebuild_regressors(stacks.active, phi);
        rebuild_regressors(stacks.auxiliary, phi);
        acc.clear();
        pending_event |= kEventDnnSwap;
      }
    }
  }
  log.final_dnn = obs.dnn;
  log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
  return log;
}

// ---------------------------------------------------------------------------
// metrics

struct Summary {
  int records = 0;
  double duration = 0.0;
  double min_h_x = 0.0;
  double min_h_xhat = 0.0;
  double final_xtilde = 0.0;
  double max_xtilde_second_half = 0.0;
  double final_x_norm = 0.0;
  double max_Wc_norm = 0.0;
  double max_Wa_norm = 0.0;
  double max_theta_norm = 0.0;
  double min_critic_rank = 0.0;
  double min_gamma_eig = 0.0;
  double max_gamma_eig = 0.0;
  bool hypothesis_held = true;  // |xtilde| <= eps at every record
  std::vector<double> purge_eigs;
  int purges = 0;
  int trainings = 0;
  int qp_failures = 0;
  std::string fault;
};

inline Summary metrics(const TrajectoryLog& log) {
  if (log.records.empty()) throw Error(ErrorKind::EmptySet, "metrics: empty log");
  Summary s;
  const auto& r = log.records;
  s.records = static_cast<int>(r.size());
  s.duration = r.back().t - r.front().t;
  const double half = r.front().t + 0.5 * s.duration;
  s.min_h_x = s.min_h_xhat = std::numeric_limits<double>::infinity();
  s.min_critic_rank = s.min_gamma_eig = std::numeric_limits<double>::infinity();
  s.max_gamma_eig = -std::numeric_limits<double>::infinity();
  for (const StepRecord& rec : r) {
    s.min_h_x = std::min(s.min_h_x, rec.h_x);
    s.min_h_xhat = std::min(s.min_h_xhat, rec.h_xhat);
    if (rec.t >= half) s.max_xtilde_second_half = std::max(s.max_xtilde_second_half, rec.xtilde_norm);
    s.max_Wc_norm = std::max(s.max_Wc_norm, rec.Wc.norm());
    s.max_Wa_norm = std::max(s.max_Wa_norm, rec.Wa.norm());
    s.max_theta_norm = std::max(s.max_theta_norm, rec.theta.norm());
    s.min_critic_rank = std::min(s.min_critic_rank, rec.critic_rank);
    s.min_gamma_eig = std::min(s.min_gamma_eig, rec.gamma_min);
    s.max_gamma_eig = std::max(s.max_gamma_eig, rec.gamma_max);
    s.hypothesis_held = s.hypothesis_held && rec.within_eps;
    if (rec.qp_status > 0) ++s.qp_failures;
  }
  s.final_xtilde = r.back().xtilde_norm;
  s.final_x_norm = r.back().x.norm();
  for (const PurgeEvent& p : log.purges) s.purge_eigs.push_back(p.eig);
  s.purges = static_cast<int>(log.purges.size());
  s.trainings = static_cast<int>(log.trainings.size());
  s.fault = log.fault;
  return s;
}

// ---------------------------------------------------------------------------
// sufficient gain conditions

/// Bounds and Lipschitz constants entering the conditions; everything not
/// derivable from the configuration is estimated from a run.
struct GainEstimates {
  double phi_bar = 0.0;        // sup |phi|
  double grad_phi_bar = 0.0;   // sup |d phi / dx| (inner map included)
  double L_Phi = 1.0;
  double L_gRsigma = 0.0;
  double eps_pi = 0.0;
  double L_g = 0.0;
  double eps_theta_bar = 0.0;  // sup |f - A x - theta^T phi|
  double g_bar = 0.0;
  double grad_sigma_bar = 0.0;
  double Gsigma_bar = 0.0;
  double c1 = 0.0;             // inf lambda_min of the extrapolated regressor
  double sigma_theta = 0.0;    // lower bound on lambda_min of the stack
  double gamma_lower = 0.0;
  double gamma_upper = 0.0;
  double ultimate_bound = 0.0;  // mu^-1(iota)
  double region_bound = 0.0;    // upsilon_bar^-1(upsilon_lower(chi))
};

struct GainConstants {
  double lam_min_S = 0.0;
  double lam_max_P = 0.0;
  double l3 = 0.0, l5 = 0.0, l7 = 0.0, l10 = 0.0, l11 = 0.0;
  double c_lower = 0.0;
  double sigma_theta = 0.0;
  double k_theta = 0.0, kc = 0.0, ka1 = 0.0, ka2 = 0.0;
  double ultimate_bound = 0.0;
  double region_bound = 0.0;
};

struct GainCondition {
  std::string name;
  double lhs = 0.0;
  double rhs = 0.0;
  bool strict = false;
  bool satisfied = false;
};

inline GainConstants gain_constants(const ExperimentConfig& c, const GainEstimates& e) {
  const Benchmark b = benchmark_system(c.benchmark);
  const Mat K = observer_gain(c, b);
  const Mat P = solve_lyapunov(c.A - K * b.plant.output_matrix, c.S);
  GainConstants g;
  g.lam_min_S = sym_eig_min(c.S);
  g.lam_max_P = sym_eig_max(P);
  const double lam_max_R = sym_eig_max(b.cost.R);
  const double Wbar = c.critic.Wbar;
  g.l3 = e.gamma_lower > 0.0 && c.critic.nu > 0.0
             ? c.critic.kc * e.Gsigma_bar * Wbar / (8.0 * std::sqrt(c.critic.nu * e.gamma_lower))
             : (e.Gsigma_bar > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
  g.l5 = g.l3 + c.critic.ka1;
  const double vartheta1 = c.theta_bar * e.grad_phi_bar * e.L_Phi + 0.5 * e.L_gRsigma * Wbar + e.eps_pi * e.L_g;
  const double vartheta2 = e.g_bar * e.g_bar * e.grad_sigma_bar / lam_max_R;
  g.l7 = 2.0 * g.lam_max_P * vartheta1;
  g.l10 = 2.0 * g.lam_max_P * e.phi_bar;
  g.l11 = 2.0 * g.lam_max_P * vartheta2;
  g.c_lower = (e.gamma_upper > 0.0 && c.critic.kc > 0.0 ? c.critic.beta / (2.0 * e.gamma_upper * c.critic.kc) : 0.0) +
              0.5 * e.c1;
  g.sigma_theta = e.sigma_theta;
  g.k_theta = c.k_theta;
  g.kc = c.critic.kc;
  g.ka1 = c.critic.ka1;
  g.ka2 = c.critic.ka2;
  g.ultimate_bound = e.ultimate_bound;
  g.region_bound = e.region_bound;
  return g;
}

namespace detail {
// a / b with 0 / 0 read as 0 and x / 0 as +inf
inline double ratio(double a, double b) {
  if (a == 0.0) return 0.0;
  return b > 0.0 ? a / b : std::numeric_limits<double>::infinity();
}
}  // namespace detail

/// The five sufficient condition groups, in order: state-estimate gain,
/// outer-layer learning gain, actor gains, ultimate bound inside the region
/// of attraction, and the sharper state-estimate gain.
inline std::vector<GainCondition> evaluate_gain_conditions(const GainConstants& g) {
  using detail::ratio;
  std::vector<GainCondition> out;
  auto add = [&](std::string name, double lhs, double rhs, bool strict) {
    out.push_back({std::move(name), lhs, rhs, strict, strict ? lhs > rhs : lhs >= rhs});
  };
  add("state_estimate_gain", g.lam_min_S, 5.0 * g.l7, false);
  add("outer_layer_gain", g.k_theta, ratio(15.0 * g.l10 * g.l10, 4.0 * g.sigma_theta * g.lam_min_S), false);
  add("actor_gain", g.ka1 + g.ka2,
      ratio(9.0 * g.l5 * g.l5, 4.0 * g.kc * g.c_lower) + ratio(15.0 * g.l11 * g.l11, 4.0 * g.lam_min_S) + 3.0 * g.l3,
      false);
  add("ultimate_bound", g.region_bound, g.ultimate_bound, false);
  add("estimate_error_gain", g.lam_min_S, 3.0 * g.l7, g.l7 > 0.0);
  return out;
}

inline std::vector<GainCondition> gain_diagnostics(const ExperimentConfig& c, const GainEstimates& e) {
  return evaluate_gain_conditions(gain_constants(c, e));
}

/// Empirical constants from a finished run: sup norms over the logged
/// estimates, finite-difference Lipschitz estimates over the extrapolation
/// grid, and the learning monitors recorded in the log.
inline GainEstimates estimate_gain_constants(const ExperimentConfig& c, const TrajectoryLog& log) {
  GainEstimates e;
  if (log.records.empty()) return e;
  const Benchmark b = benchmark_system(c.benchmark);
  const BasisSpec basis = quadratic_basis(b.plant.n);
  const DnnSpec& dnn = log.final_dnn;
  const Mat& theta = log.records.back().theta;
  const size_t stride = std::max<size_t>(1, log.records.size() / 500);
  const double h = 1e-6;
  for (size_t i = 0; i < log.records.size(); i += stride) {
    const StepRecord& r = log.records[i];
    if (dnn.weights.empty()) break;
    const Vec phi = dnn_features(dnn, r.xhat);
    e.phi_bar = std::max(e.phi_bar, phi.norm());
    Mat jac(phi.size(), r.xhat.size());
    for (Eigen::Index j = 0; j < r.xhat.size(); ++j) {
      Vec xp = r.xhat, xm = r.xhat;
      xp(j) += h;
      xm(j) -= h;
      jac.col(j) = (dnn_features(dnn, xp) - dnn_features(dnn, xm)) / (2.0 * h);
    }
    e.grad_phi_bar = std::max(e.grad_phi_bar, std::sqrt(sym_eig_max(jac.transpose() * jac)));
    e.eps_theta_bar = std::max(e.eps_theta_bar, (b.plant.drift(r.x) - c.A * r.x - theta.transpose() *
                                                                                         dnn_features(dnn, r.x)).norm());
    e.grad_sigma_bar = std::max(e.grad_sigma_bar, basis.sigma_jac(r.x).norm());
    e.c1 = i == 0 ? r.critic_rank : std::min(e.c1, r.critic_rank);
  }
  const std::vector<Vec> pts = extrapolation_grid(c.extrap_per_axis, c.extrap_half);
  const ExtrapolationCache cache = build_extrapolation_cache(basis, b.plant, b.cost, pts);
  for (const Mat& gs : cache.Gsigma) e.Gsigma_bar = std::max(e.Gsigma_bar, gs.norm());
  for (size_t i = 0; i < pts.size(); ++i)
    for (size_t j = i + 1; j < pts.size(); ++j) {
      const double d = (pts[i] - pts[j]).norm();
      if (d <= 0.0 || d > 0.3) continue;
      e.L_g = std::max(e.L_g, (cache.g[i] - cache.g[j]).norm() / d);
      const Mat a = cache.g[i] * cache.gRinv[i] * cache.jac[i].transpose();
      const Mat bb = cache.g[j] * cache.gRinv[j] * cache.jac[j].transpose();
      e.L_gRsigma = std::max(e.L_gRsigma, (a - bb).norm() / d);
    }
  e.g_bar = b.plant.g_bar;
  e.gamma_lower = std::numeric_limits<double>::infinity();
  for (const StepRecord& r : log.records) {
    e.gamma_lower = std::min(e.gamma_lower, r.gamma_min);
    e.gamma_upper = std::max(e.gamma_upper, r.gamma_max);
  }
  double sig = std::numeric_limits<double>::infinity();
  for (const StepRecord& r : log.records)
    if (r.stack_size > 0) sig = std::min(sig, r.stack_eig);
  e.sigma_theta = std::isfinite(sig) ? sig : 0.0;
  return e;
}

// ---------------------------------------------------------------------------
// output

inline std::vector<std::string> csv_header(const TrajectoryLog& log) {
  std::vector<std::string> h{"t"};
  if (log.records.empty()) return h;
  const StepRecord& r = log.records.front();
  auto vec = [&](const std::string& base, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) h.push_back(base + std::to_string(i + 1));
  };
  vec("x", r.x.size());
  vec("xhat", r.xhat.size());
  vec("u", r.u.size());
  vec("pi", r.pi.size());
  for (const char* s : {"h_x", "h_xhat", "xtilde_norm", "within_eps", "bellman_mean_abs", "bellman_max_abs"})
    h.emplace_back(s);
  vec("Wc", r.Wc.size());
  vec("Wa", r.Wa.size());
  for (Eigen::Index j = 0; j < r.theta.cols(); ++j)
    for (Eigen::Index i = 0; i < r.theta.rows(); ++i)
      h.push_back("theta_" + std::to_string(i + 1) + "_" + std::to_string(j + 1));
  for (const char* s : {"critic_rank", "stack_eig", "aux_eig", "stack_size", "aux_size", "gamma_min", "gamma_max",
                        "stack_event", "qp_status", "qp_kkt", "saturated"})
    h.emplace_back(s);
  return h;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_csv(std::ostream& out, const TrajectoryLog& log) {
  const auto header = csv_header(log);
  for (size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << '\n';
  std::string line;
  for (const StepRecord& r : log.records) {
    line.clear();
    auto put = [&](double v) {
      if (!line.empty()) line += ',';
      line += format_double(v);
    };
    auto put_int = [&](long v) {
      if (!line.empty()) line += ',';
      line += std::to_string(v);
    };
    put(r.t);
    for (const Vec* v : {&r.x, &r.xhat, &r.u, &r.pi})
      for (Eigen::Index i = 0; i < v->size(); ++i) put((*v)(i));
    put(r.h_x);
    put(r.h_xhat);
    put(r.xtilde_norm);
    put_int(r.within_eps ? 1 : 0);
    put(r.bellman_mean_abs);
    put(r.bellman_max_abs);
    for (Eigen::Index i = 0; i < r.Wc.size(); ++i) put(r.Wc(i));
    for (Eigen::Index i = 0; i < r.Wa.size(); ++i) put(r.Wa(i));
    for (Eigen::Index j = 0; j < r.theta.cols(); ++j)
      for (Eigen::Index i = 0; i < r.theta.rows(); ++i) put(r.theta(i, j));
    put(r.critic_rank);
    put(r.stack_eig);
    put(r.aux_eig);
    put_int(r.stack_size);
    put_int(r.aux_size);
    put(r.gamma_min);
    put(r.gamma_max);
    put_int(r.stack_event);
    put_int(r.qp_status);
    put(r.qp_kkt);
    put_int(r.saturated ? 1 : 0);
    out << line << '\n';
  }
}

inline json summary_to_json(const Summary& s, const TrajectoryLog& log, const std::vector<GainCondition>& gains) {
  json j;
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  j["records"] = s.records;
  j["duration"] = s.duration;
  j["min_h_x"] = num(s.min_h_x);
  j["min_h_xhat"] = num(s.min_h_xhat);
  j["final_xtilde_norm"] = num(s.final_xtilde);
  j["max_xtilde_norm_second_half"] = num(s.max_xtilde_second_half);
  j["final_x_norm"] = num(s.final_x_norm);
  j["max_Wc_norm"] = num(s.max_Wc_norm);
  j["max_Wa_norm"] = num(s.max_Wa_norm);
  j["max_theta_norm"] = num(s.max_theta_norm);
  j["min_critic_rank"] = num(s.min_critic_rank);
  j["gamma_eig_range"] = {num(s.min_gamma_eig), num(s.max_gamma_eig)};
  j["estimate_within_eps_throughout"] = s.hypothesis_held;
  j["purge_eigs"] = s.purge_eigs;
  j["purges"] = s.purges;
  j["qp_failures"] = s.qp_failures;
  j["fault"] = s.fault.empty() ? json(nullptr) : json(s.fault);
  j["warnings"] = log.warnings;
  j["wall_seconds"] = log.wall_seconds;
  json tr = json::array();
  for (const TrainingEvent& t : log.trainings)
    tr.push_back({{"t", t.t},
                  {"samples", t.samples},
                  {"epochs", t.epochs},
                  {"train_mse", t.train_mse},
                  {"val_mse", t.val_mse},
                  {"test_mse", t.test_mse},
                  {"stop", t.stop}});
  j["trainings"] = tr;
  json g = json::array();
  for (const GainCondition& c : gains)
    g.push_back({{"name", c.name}, {"lhs", num(c.lhs)}, {"rhs", num(c.rhs)}, {"strict", c.strict},
                 {"satisfied", c.satisfied}});
  j["gain_conditions"] = g;
  return j;
}

}  // namespace safeaoc
