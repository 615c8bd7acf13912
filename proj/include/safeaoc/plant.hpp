#pragma once

// Control-affine plant models, barrier geometry, and the robustified
// constraint bounds F, G-, G+ evaluated at a state estimate.

#include <functional>
#include <string>
#include <vector>

#include "safeaoc/numerics.hpp"

namespace safeaoc {

using VectorField = std::function<Vec(const Vec&)>;
using MatrixField = std::function<Mat(const Vec&)>;
using ScalarField = std::function<double(const Vec&)>;

/// x' = f(x) + g(x) u,  y = C x.
struct PlantModel {
  std::string name;
  int n = 0;
  int m = 0;
  int q = 0;
  VectorField drift;
  MatrixField effectiveness;
  Mat output_matrix;
  double g_bar = 0.0;  // bound on ||g(x)|| over the working set
};

struct SafetySpec {
  ScalarField barrier;
  VectorField barrier_grad;  // gradient of h as a column vector
  double classk_gain = 1.0;  // alpha(s) = c s
  double eps = 0.0;
  double lip_F = 0.0;
  Vec lip_G;  // one per input channel

  void validate(int m) const {
    if (!(eps >= 0.0)) throw Error(ErrorKind::Config, "safety.eps must be >= 0");
    if (!(classk_gain > 0.0)) throw Error(ErrorKind::Config, "safety.classk_gain must be > 0");
    if (!(lip_F >= 0.0)) throw Error(ErrorKind::Config, "safety.lip_F must be >= 0");
    if (lip_G.size() != m) throw Error(ErrorKind::Config, "safety.lip_G must have one entry per input");
    if ((lip_G.array() < 0.0).any()) throw Error(ErrorKind::Config, "safety.lip_G entries must be >= 0");
  }

  double alpha(double s) const { return classk_gain * s; }
};

struct CostSpec {
  ScalarField state_cost;
  Mat R;

  double operator()(const Vec& x, const Vec& u) const { return state_cost(x) + u.dot(R * u); }
};

struct BarrierValue {
  double h = 0.0;
  Vec grad;
};

inline BarrierValue eval_barrier(const SafetySpec& spec, const Vec& x) {
  return {spec.barrier(x), spec.barrier_grad(x)};
}

enum class BenchmarkId { ConvexSet, Obstacle };

inline BenchmarkId parse_benchmark(const std::string& id) {
  if (id == "convex_set") return BenchmarkId::ConvexSet;
  if (id == "obstacle") return BenchmarkId::Obstacle;
  throw Error(ErrorKind::Config, "unknown benchmark id '" + id + "'");
}

inline std::string to_string(BenchmarkId id) {
  return id == BenchmarkId::ConvexSet ? "convex_set" : "obstacle";
}

struct Benchmark {
  PlantModel plant;
  SafetySpec safety;
  CostSpec cost;
};

inline constexpr double kObstacleCenterX = -0.7;
inline constexpr double kObstacleCenterY = 1.2;
inline constexpr double kObstacleRadius = 0.35;

inline Benchmark benchmark_system(BenchmarkId id) {
  Benchmark b;
  b.plant.n = 2;
  b.plant.m = 1;
  b.plant.q = 1;
  b.plant.output_matrix = Mat(1, 2);
  b.plant.output_matrix << 1.0, 0.0;
  b.cost.state_cost = [](const Vec& x) { return x.squaredNorm(); };
  b.cost.R = Mat::Identity(1, 1);
  b.safety.classk_gain = 1.0;

  switch (id) {
    case BenchmarkId::ConvexSet:
      b.plant.name = "convex_set";
      b.plant.drift = [](const Vec& x) {
        Vec f(2);
        f << -0.6 * x(0) - x(1), x(0) * x(0) * x(0);
        return f;
      };
      b.plant.effectiveness = [](const Vec& x) {
        Mat g(2, 1);
        g << 0.0, x(1);
        return g;
      };
      b.plant.g_bar = 3.0;  // |x2| on the [-3, 3]^2 working square
      b.safety.barrier = [](const Vec& x) { return -x(1) * x(1) - x(0) + 1.0; };
      b.safety.barrier_grad = [](const Vec& x) {
        Vec g(2);
        g << -1.0, -2.0 * x(1);
        return g;
      };
      b.safety.eps = 0.7;
      b.safety.lip_F = 0.2;
      b.safety.lip_G = Vec::Constant(1, 0.2);
      break;
    case BenchmarkId::Obstacle:
      b.plant.name = "obstacle";
      b.plant.drift = [](const Vec& x) {
        Vec f(2);
        const double x1sq = x(0) * x(0);
        f << -x(0) - x(1), -0.5 * x(0) - 0.5 * x(1) * (1.0 - x1sq) - x1sq * x(1);
        return f;
      };
      b.plant.effectiveness = [](const Vec& x) {
        Mat g(2, 1);
        g << 0.0, std::cos(2.0 * x(0)) + 2.0;
        return g;
      };
      b.plant.g_bar = 3.0;
      b.safety.barrier = [](const Vec& x) {
        return std::hypot(x(0) - kObstacleCenterX, x(1) - kObstacleCenterY) - kObstacleRadius;
      };
      b.safety.barrier_grad = [](const Vec& x) {
        Vec g(2);
        const double dx = x(0) - kObstacleCenterX;
        const double dy = x(1) - kObstacleCenterY;
        const double d = std::hypot(dx, dy);
        if (d == 0.0) {
          g.setZero();
        } else {
          g << dx / d, dy / d;
        }
        return g;
      };
      b.safety.eps = 0.5;
      b.safety.lip_F = 0.1;
      b.safety.lip_G = Vec::Constant(1, 0.1);
      break;
  }
  return b;
}

/// Smallest magnitude a robust channel bound may take after sign clamping.
inline constexpr double kSignClampFloor = 1e-9;

struct RobustBounds {
  double F = 0.0;
  Vec Gminus;
  Vec Gplus;
  double nominal_F = 0.0;
  Vec nominal_G;
  std::vector<bool> clamped;     // band straddled zero and was shrunk
  std::vector<bool> degenerate;  // |nominal| below the clamp floor
  bool any_degenerate() const {
    for (bool d : degenerate)
      if (d) return true;
    return false;
  }
};

/// F, G-, G+ at xhat with the given drift value standing in for f(xhat).
inline RobustBounds robust_bounds(const SafetySpec& spec, const PlantModel& plant, const Vec& xhat,
                                  const Vec& drift_at_xhat) {
  const BarrierValue bv = eval_barrier(spec, xhat);
  const Mat g = plant.effectiveness(xhat);
  RobustBounds out;
  out.nominal_F = bv.grad.dot(drift_at_xhat) + spec.alpha(bv.h);
  out.F = out.nominal_F - spec.lip_F * spec.eps;
  out.nominal_G = g.transpose() * bv.grad;
  const Eigen::Index m = out.nominal_G.size();
  out.Gminus.resize(m);
  out.Gplus.resize(m);
  out.clamped.assign(static_cast<size_t>(m), false);
  out.degenerate.assign(static_cast<size_t>(m), false);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double nominal = out.nominal_G(i);
    const double width = spec.lip_G(i) * spec.eps;
    double lo = nominal - width;
    double hi = nominal + width;
    const auto idx = static_cast<size_t>(i);
    if (std::abs(nominal) < kSignClampFloor) out.degenerate[idx] = true;
    if (nominal >= 0.0) {
      if (lo < kSignClampFloor) {
        lo = nominal > 0.0 ? std::min(kSignClampFloor, nominal) : kSignClampFloor;
        out.clamped[idx] = true;
      }
      hi = std::max(hi, lo);
    } else {
      if (hi > -kSignClampFloor) {
        hi = std::max(-kSignClampFloor, nominal);
        out.clamped[idx] = true;
      }
    }
    out.Gminus(i) = lo;
    out.Gplus(i) = hi;
  }
  return out;
}

inline RobustBounds robust_bounds(const SafetySpec& spec, const PlantModel& plant, const Vec& xhat) {
  return robust_bounds(spec, plant, xhat, plant.drift(xhat));
}

}  // namespace safeaoc
