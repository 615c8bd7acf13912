#pragma once

// Brute-force reference minimizers for the safety QP. Test use only: they
// never touch the active-set solver and scan the feasible set directly.

#include <optional>

#include "safeaoc/qp.hpp"

namespace safeaoc {

/// Grid minimizer of 1/2 (u - u_des)^2 over feasible u in [lo, hi] (m = 1).
inline std::optional<double> scalar_oracle(const SafetyQP& qp, double resolution, double lo = -5.0,
                                           double hi = 5.0) {
  if (qp.m() != 1) throw Error(ErrorKind::Contract, "scalar_oracle requires m = 1");
  const auto steps = static_cast<long>(std::floor((hi - lo) / resolution));
  std::optional<double> best;
  double best_cost = std::numeric_limits<double>::infinity();
  Vec u(1);
  for (long k = 0; k <= steps; ++k) {
    u(0) = lo + static_cast<double>(k) * resolution;
    if (qp.constraint_value(u) < 0.0) continue;
    const double cost = 0.5 * (u(0) - qp.desired(0)) * (u(0) - qp.desired(0));
    if (cost < best_cost) {
      best_cost = cost;
      best = u(0);
    }
  }
  return best;
}

/// Two-channel grid minimizer. u1 is scanned on a grid refined around the
/// incumbent down to `resolution`; for each grid value the best u2 is the
/// projection of u_des,2 onto a half-line and is computed exactly. The
/// profile over u1 is convex, so every level's argmin lies within one
/// spacing of the true u1.
inline std::optional<Vec> grid2_oracle(const SafetyQP& qp, double resolution, double lo = -5.0,
                                       double hi = 5.0) {
  if (qp.m() != 2) throw Error(ErrorKind::Contract, "grid2_oracle requires m = 2");
  auto best_u2 = [&](double u1) {
    const double r = qp.F + std::min(qp.Gminus(0) * u1, qp.Gplus(0) * u1);
    // min{G-2 u2, G+2 u2} >= -r; the left side is monotone in u2
    const bool positive = qp.Gplus(1) > 0.0;
    const double gain = r >= 0.0 ? (positive ? qp.Gplus(1) : qp.Gminus(1)) : (positive ? qp.Gminus(1) : qp.Gplus(1));
    const double edge = -r / gain;
    const double d = qp.desired(1);
    return positive ? std::max(d, edge) : std::min(d, edge);
  };
  auto cost = [&](double u1) {
    const double u2 = best_u2(u1);
    return 0.5 * ((u1 - qp.desired(0)) * (u1 - qp.desired(0)) + (u2 - qp.desired(1)) * (u2 - qp.desired(1)));
  };
  double spacing = 1e-2;
  double left = lo;
  double right = hi;
  double best = lo;
  while (true) {
    const auto steps = static_cast<long>(std::ceil((right - left) / spacing));
    double best_cost = std::numeric_limits<double>::infinity();
    for (long k = 0; k <= steps; ++k) {
      const double u1 = left + static_cast<double>(k) * spacing;
      const double c = cost(u1);
      if (c < best_cost) {
        best_cost = c;
        best = u1;
      }
    }
    if (spacing <= resolution * (1.0 + 1e-12)) break;
    left = best - 2.0 * spacing;
    right = best + 2.0 * spacing;
    spacing = std::max(resolution, spacing / 10.0);
  }
  // u2 tracks the constraint edge with slope |G_1 / G_2|, so a grid-level error
  // in u1 can be amplified; the reduced cost is convex, finish by ternary search
  double a = best - spacing;
  double b = best + spacing;
  for (int it = 0; it < 200 && b - a > 1e-15 * (1.0 + std::abs(best)); ++it) {
    const double m1 = a + (b - a) / 3.0;
    const double m2 = b - (b - a) / 3.0;
    if (cost(m1) <= cost(m2)) b = m2; else a = m1;
  }
  if (cost(0.5 * (a + b)) <= cost(best)) best = 0.5 * (a + b);
  Vec u(2);
  u << best, best_u2(best);
  if (qp.constraint_value(u) < -1e-12) return std::nullopt;
  return u;
}

/// Exact minimizer for small m. F + sum_i min{G-_i u_i, G+_i u_i} >= 0 is
/// the intersection of the 2^m halfspaces F + sum_i G^{s_i}_i u_i >= 0, so the
/// projection of u_des is found by trying every subset of tight halfspaces
/// and keeping the cheapest KKT point.
inline std::optional<Vec> enumeration_oracle(const SafetyQP& qp) {
  const Eigen::Index m = qp.m();
  if (m < 1 || m > 3) throw Error(ErrorKind::Contract, "enumeration_oracle requires 1 <= m <= 3");
  const int h = 1 << m;
  Mat normals(h, m);
  for (int s = 0; s < h; ++s)
    for (Eigen::Index i = 0; i < m; ++i) normals(s, i) = (s >> i) & 1 ? qp.Gplus(i) : qp.Gminus(i);
  auto feasible = [&](const Vec& u) { return (normals * u).minCoeff() + qp.F >= -1e-12; };

  std::optional<Vec> best;
  double best_cost = std::numeric_limits<double>::infinity();
  for (long subset = 0; subset < (1L << h); ++subset) {
    std::vector<int> rows;
    for (int s = 0; s < h; ++s)
      if ((subset >> s) & 1) rows.push_back(s);
    if (static_cast<Eigen::Index>(rows.size()) > m) continue;
    Vec u = qp.desired;
    if (!rows.empty()) {
      Mat a(static_cast<Eigen::Index>(rows.size()), m);
      Vec r(a.rows());
      for (size_t k = 0; k < rows.size(); ++k) {
        a.row(static_cast<Eigen::Index>(k)) = normals.row(rows[k]);
        r(static_cast<Eigen::Index>(k)) = -qp.F - normals.row(rows[k]).dot(qp.desired);
      }
      // u = u_des + A^T mu with A A^T mu = r; multipliers mu must be >= 0
      const Mat gram = a * a.transpose();
      Eigen::FullPivLU<Mat> lu(gram);
      if (!lu.isInvertible()) continue;
      const Vec mu = lu.solve(r);
      if (mu.minCoeff() < -1e-12) continue;
      u += a.transpose() * mu;
    }
    if (!feasible(u)) continue;
    const double cost = 0.5 * (u - qp.desired).squaredNorm();
    if (cost < best_cost) {
      best_cost = cost;
      best = u;
    }
  }
  return best;
}

}  // namespace safeaoc
