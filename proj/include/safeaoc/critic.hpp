#pragma once

// Actor-critic approximation of the value function and policy, with
// Bellman errors extrapolated to a fixed set of states.

#include <functional>
#include <vector>

#include "safeaoc/plant.hpp"

namespace safeaoc {

struct BasisSpec {
  int L = 0;
  std::function<Vec(const Vec&)> sigma;
  std::function<Mat(const Vec&)> sigma_jac;  // L x n
};

/// All monomials x_i x_j, i <= j, in row-major order. For n = 2 this is
/// [x1^2, x1 x2, x2^2].
inline BasisSpec quadratic_basis(int n) {
  BasisSpec b;
  b.L = n * (n + 1) / 2;
  b.sigma = [n, L = b.L](const Vec& x) {
    Vec s(L);
    int k = 0;
    for (int i = 0; i < n; ++i)
      for (int j = i; j < n; ++j) s(k++) = x(i) * x(j);
    return s;
  };
  b.sigma_jac = [n, L = b.L](const Vec& x) {
    Mat d = Mat::Zero(L, n);
    int k = 0;
    for (int i = 0; i < n; ++i)
      for (int j = i; j < n; ++j) {
        d(k, i) += x(j);
        d(k, j) += x(i);
        ++k;
      }
    return d;
  };
  return b;
}

struct CriticGains {
  double kc = 0.0;
  double ka1 = 0.0;
  double ka2 = 0.0;
  double nu = 0.0;
  double beta = 0.0;
  double Wbar = 10.0;
  double proj_band = 0.1;
  double gamma_max = 1e4;
  double gamma_min = 1e-6;

  void validate() const {
    if (!(kc >= 0.0 && ka1 >= 0.0 && ka2 >= 0.0 && beta >= 0.0))
      throw Error(ErrorKind::Config, "critic gains must be nonnegative");
    if (!(nu > 0.0)) throw Error(ErrorKind::Config, "critic.nu must be > 0");
    if (!(Wbar > 0.0) || !(proj_band > 0.0)) throw Error(ErrorKind::Config, "critic projection radius and band must be > 0");
    if (!(gamma_min > 0.0) || !(gamma_max > gamma_min)) throw Error(ErrorKind::Config, "critic Gamma clamp must satisfy 0 < min < max");
  }
};

struct CriticState {
  Vec Wc;
  Vec Wa;
  Mat Gamma;
  CriticGains gains;
  std::vector<Vec> extrap_points;
};

/// per_axis x per_axis uniform grid over [-half, half]^2, x1 varying slowest.
inline std::vector<Vec> extrapolation_grid(int per_axis = 10, double half = 1.0) {
  std::vector<Vec> pts;
  for (int i = 0; i < per_axis; ++i)
    for (int j = 0; j < per_axis; ++j) {
      Vec x(2);
      const double step = per_axis > 1 ? 2.0 * half / (per_axis - 1) : 0.0;
      x << -half + step * i, -half + step * j;
      pts.push_back(x);
    }
  return pts;
}

inline double approx_value(const BasisSpec& basis, const Vec& Wc, const Vec& x) { return Wc.dot(basis.sigma(x)); }

/// -1/2 R^-1 g(x)^T grad(sigma)(x)^T Wa
inline Vec approx_policy(const BasisSpec& basis, const PlantModel& plant, const CostSpec& cost, const Vec& Wa,
                         const Vec& x) {
  const Mat g = plant.effectiveness(x);
  return -0.5 * cost.R.ldlt().solve(g.transpose() * (basis.sigma_jac(x).transpose() * Wa));
}

struct BellmanTerms {
  double delta = 0.0;
  Vec omega;
  double rho = 1.0;
};

inline BellmanTerms bellman_error(const BasisSpec& basis, const VectorField& drift, const PlantModel& plant,
                                  const CostSpec& cost, const Vec& Wc, const Vec& Wa, double nu, const Vec& x) {
  const Vec u = approx_policy(basis, plant, cost, Wa, x);
  BellmanTerms bt;
  bt.omega = basis.sigma_jac(x) * (drift(x) + plant.effectiveness(x) * u);
  bt.delta = Wc.dot(bt.omega) + cost(x, u);
  bt.rho = 1.0 + nu * bt.omega.squaredNorm();
  return bt;
}

/// Smooth projection onto the ball of radius `radius`: the outward radial
/// part of rhs is scaled by 1 - c with c rising linearly from 0 at the radius
/// to 1 at (1 + band) * radius.
inline Vec smooth_proj(const Vec& value, const Vec& rhs, double radius, double band = 0.1) {
  if (!(radius > 0.0)) throw Error(ErrorKind::Contract, "smooth_proj requires radius > 0");
  const double norm = value.norm();
  if (norm <= radius) return rhs;
  const double outward = value.dot(rhs);
  if (outward <= 0.0) return rhs;
  const double c = std::min(1.0, (norm - radius) / (band * radius));
  return rhs - c * (outward / (norm * norm)) * value;
}

/// Matrix overload, Frobenius geometry.
inline Mat smooth_proj_matrix(const Mat& value, const Mat& rhs, double radius, double band = 0.1) {
  const Vec out = smooth_proj(Eigen::Map<const Vec>(value.data(), value.size()),
                              Eigen::Map<const Vec>(rhs.data(), rhs.size()), radius, band);
  return Eigen::Map<const Mat>(out.data(), value.rows(), value.cols());
}

/// Quantities at the extrapolation points that do not depend on the weights.
struct ExtrapolationCache {
  std::vector<Mat> jac;     // grad sigma, L x n
  std::vector<Mat> g;       // n x m
  std::vector<Mat> gRinv;   // R^-1 g^T, m x n
  std::vector<Mat> Gsigma;  // grad sigma g R^-1 g^T grad sigma^T, L x L
  std::vector<double> Q;
  Mat R;
};

inline ExtrapolationCache build_extrapolation_cache(const BasisSpec& basis, const PlantModel& plant,
                                                    const CostSpec& cost, const std::vector<Vec>& points) {
  ExtrapolationCache c;
  c.R = cost.R;
  const auto ldlt = cost.R.ldlt();
  for (const Vec& x : points) {
    const Mat jac = basis.sigma_jac(x);
    const Mat g = plant.effectiveness(x);
    const Mat rg = ldlt.solve(g.transpose());
    c.jac.push_back(jac);
    c.g.push_back(g);
    c.gRinv.push_back(rg);
    c.Gsigma.push_back(jac * g * rg * jac.transpose());
    c.Q.push_back(cost.state_cost(x));
  }
  return c;
}

struct CriticDerivative {
  Vec dWc;
  Mat dGamma;
  Vec dWa;
};

/// Right-hand side of the critic, gain and actor laws given the drift at
/// each extrapolation point.
inline CriticDerivative critic_rhs(const ExtrapolationCache& cache, const std::vector<Vec>& drifts,
                                   const CriticGains& k, const Vec& Wc, const Mat& Gamma, const Vec& Wa) {
  const auto N = static_cast<double>(cache.jac.size());
  const Eigen::Index L = Wc.size();
  Vec sum_w = Vec::Zero(L);
  Mat sum_ww = Mat::Zero(L, L);
  Vec sum_a = Vec::Zero(L);
  for (size_t k_ = 0; k_ < cache.jac.size(); ++k_) {
    const Vec u = -0.5 * cache.gRinv[k_] * (cache.jac[k_].transpose() * Wa);
    const Vec omega = cache.jac[k_] * (drifts[k_] + cache.g[k_] * u);
    const double rho = 1.0 + k.nu * omega.squaredNorm();
    const double delta = Wc.dot(omega) + cache.Q[k_] + u.dot(cache.R * u);
    sum_w += (delta / rho) * omega;
    sum_ww += (omega * omega.transpose()) / (rho * rho);
    sum_a += (omega.dot(Wc) / rho) * (cache.Gsigma[k_].transpose() * Wa);
  }
  CriticDerivative d;
  if (N == 0.0) {
    d.dWc = Vec::Zero(L);
    d.dGamma = k.beta * Gamma;
    d.dWa = smooth_proj(Wa, Vec(-k.ka1 * (Wa - Wc) - k.ka2 * Wa), k.Wbar, k.proj_band);
    return d;
  }
  d.dWc = -(k.kc / N) * (Gamma * sum_w);
  d.dGamma = k.beta * Gamma - (k.kc / N) * (Gamma * sum_ww * Gamma);
  const Vec actor = -k.ka1 * (Wa - Wc) + (k.kc / (4.0 * N)) * sum_a - k.ka2 * Wa;
  d.dWa = smooth_proj(Wa, actor, k.Wbar, k.proj_band);
  return d;
}

/// Gamma clamp and radial actor clamp applied after every integration step.
/// Returns false when the Gamma update was paused.
inline bool enforce_critic_bounds(const CriticGains& k, const Mat& gamma_before, Mat& gamma, Vec& Wa) {
  gamma = 0.5 * (gamma + gamma.transpose());
  bool kept = true;
  const SymEigen e = sym_eig(gamma);
  if (e.values(0) < k.gamma_min || e.values(e.values.size() - 1) > k.gamma_max) {
    gamma = gamma_before;
    kept = false;
  }
  const double cap = k.Wbar * (1.0 + k.proj_band);
  const double n = Wa.norm();
  if (n > cap) Wa *= cap / n;
  return kept;
}

inline void check_critic_finite(const Vec& Wc, const Mat& Gamma, const Vec& Wa, double t) {
  if (!Wc.allFinite() || !Gamma.allFinite() || !Wa.allFinite())
    throw Error(ErrorKind::LearningFault, "non-finite critic update at t=" + std::to_string(t) + " |Wc|=" +
                                              std::to_string(Wc.norm()) + " |Wa|=" + std::to_string(Wa.norm()));
}

/// One RK4 step of the coupled (Wc, Gamma, Wa) laws with a fixed drift.
inline CriticState update_step(const CriticState& s, const BasisSpec& basis, const VectorField& drift,
                               const PlantModel& plant, const CostSpec& cost, double dt) {
  if (!(dt > 0.0)) throw Error(ErrorKind::Contract, "update_step requires dt > 0");
  const Eigen::Index L = s.Wc.size();
  const ExtrapolationCache cache = build_extrapolation_cache(basis, plant, cost, s.extrap_points);
  std::vector<Vec> drifts;
  for (const Vec& x : s.extrap_points) drifts.push_back(drift(x));

  Vec z(2 * L + L * L);
  z << s.Wc, s.Wa, Eigen::Map<const Vec>(s.Gamma.data(), L * L);
  auto rhs = [&](const Vec& w, double) {
    const Mat gamma = Eigen::Map<const Mat>(w.data() + 2 * L, L, L);
    const CriticDerivative d = critic_rhs(cache, drifts, s.gains, w.head(L), gamma, w.segment(L, L));
    Vec out(w.size());
    out << d.dWc, d.dWa, Eigen::Map<const Vec>(d.dGamma.data(), L * L);
    return out;
  };
  Vec next;
  try {
    next = rk4_step(rhs, z, 0.0, dt);
  } catch (const IntegrationFault&) {
    throw Error(ErrorKind::LearningFault, "non-finite critic update (|Wc|=" + std::to_string(s.Wc.norm()) +
                                              ", |Wa|=" + std::to_string(s.Wa.norm()) + ")");
  }
  CriticState out = s;
  out.Wc = next.head(L);
  out.Wa = next.segment(L, L);
  out.Gamma = Eigen::Map<const Mat>(next.data() + 2 * L, L, L);
  check_critic_finite(out.Wc, out.Gamma, out.Wa, dt);
  enforce_critic_bounds(s.gains, s.Gamma, out.Gamma, out.Wa);
  return out;
}

/// lambda_min of (1/N) sum omega omega^T / rho^2 at the current weights.
inline double rank_monitor(const ExtrapolationCache& cache, const std::vector<Vec>& drifts, double nu,
                           const Vec& Wa) {
  if (cache.jac.empty()) return 0.0;
  const Eigen::Index L = Wa.size();
  Mat sum = Mat::Zero(L, L);
  for (size_t k = 0; k < cache.jac.size(); ++k) {
    const Vec u = -0.5 * cache.gRinv[k] * (cache.jac[k].transpose() * Wa);
    const Vec omega = cache.jac[k] * (drifts[k] + cache.g[k] * u);
    const double rho = 1.0 + nu * omega.squaredNorm();
    sum += (omega * omega.transpose()) / (rho * rho);
  }
  return sym_eig_min(sum / static_cast<double>(cache.jac.size()));
}

inline double rank_monitor(const CriticState& s, const BasisSpec& basis, const VectorField& drift,
                           const PlantModel& plant, const CostSpec& cost) {
  const ExtrapolationCache cache = build_extrapolation_cache(basis, plant, cost, s.extrap_points);
  std::vector<Vec> drifts;
  for (const Vec& x : s.extrap_points) drifts.push_back(drift(x));
  return rank_monitor(cache, drifts, s.gains.nu, s.Wa);
}

}  // namespace safeaoc
