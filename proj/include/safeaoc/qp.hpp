#pragma once

// Robust-CBF safety filter:
//
//   min_u  1/2 |u - u_des|^2
//   s.t.   F + sum_i min{G-_i u_i, G+_i u_i} >= 0
//
// The non-smooth constraint is lifted with auxiliary z_i <= G-_i u_i,
// z_i <= G+_i u_i, F + sum z_i >= 0 and the resulting standard-form QP over
// w = (u, z) is solved with a primal active-set iteration.

#include <limits>
#include <vector>

#include "safeaoc/numerics.hpp"

namespace safeaoc {

struct SafetyQP {
  Vec desired;
  double F = 0.0;
  Vec Gminus;
  Vec Gplus;

  Eigen::Index m() const { return desired.size(); }

  void validate() const {
    const Eigen::Index n = m();
    if (Gminus.size() != n || Gplus.size() != n) throw Error(ErrorKind::Contract, "SafetyQP: dimension mismatch");
    if (!desired.allFinite() || !std::isfinite(F) || !Gminus.allFinite() || !Gplus.allFinite())
      throw Error(ErrorKind::Contract, "SafetyQP: non-finite data");
    for (Eigen::Index i = 0; i < n; ++i) {
      const bool same_sign = (Gminus(i) > 0.0 && Gplus(i) > 0.0) || (Gminus(i) < 0.0 && Gplus(i) < 0.0);
      if (!same_sign) throw Error(ErrorKind::Contract, "SafetyQP: channel bounds must share a nonzero sign");
      if (Gminus(i) > Gplus(i)) throw Error(ErrorKind::Contract, "SafetyQP: Gminus must not exceed Gplus");
    }
  }

  /// F + sum_i min{G-_i u_i, G+_i u_i}
  double constraint_value(const Vec& u) const {
    double v = F;
    for (Eigen::Index i = 0; i < u.size(); ++i) v += std::min(Gminus(i) * u(i), Gplus(i) * u(i));
    return v;
  }
};

enum class QPStatus { Optimal, Infeasible, Degenerate };

inline const char* to_string(QPStatus s) {
  switch (s) {
    case QPStatus::Optimal: return "optimal";
    case QPStatus::Infeasible: return "infeasible";
    case QPStatus::Degenerate: return "degenerate";
  }
  return "unknown";
}

struct QPSolution {
  Vec u;
  Vec z;
  std::vector<int> active_set;  // rows of the standard-form constraint matrix
  QPStatus status = QPStatus::Optimal;
  double kkt_residual = 0.0;
  int iterations = 0;
  bool passthrough = false;  // desired input was already admissible
};

/// Decision vector w = (u, z); constraints A w >= b.
struct StandardForm {
  Mat H;
  Vec c;
  Mat A;
  Vec b;
};

inline StandardForm build_standard_form(const SafetyQP& qp) {
  const Eigen::Index m = qp.m();
  StandardForm sf;
  sf.H = Mat::Zero(2 * m, 2 * m);
  sf.H.topLeftCorner(m, m).setIdentity();
  sf.c = Vec::Zero(2 * m);
  sf.c.head(m) = -qp.desired;
  sf.A = Mat::Zero(2 * m + 1, 2 * m);
  sf.b = Vec::Zero(2 * m + 1);
  for (Eigen::Index i = 0; i < m; ++i) {
    sf.A(2 * i, i) = qp.Gminus(i);
    sf.A(2 * i, m + i) = -1.0;
    sf.A(2 * i + 1, i) = qp.Gplus(i);
    sf.A(2 * i + 1, m + i) = -1.0;
    sf.A(2 * m, m + i) = 1.0;
  }
  sf.b(2 * m) = -qp.F;
  return sf;
}

namespace detail {

inline constexpr double kSlackTol = 1e-9;
inline constexpr double kKktTol = 1e-8;

inline Vec min_pieces(const SafetyQP& qp, const Vec& u) {
  Vec z(u.size());
  for (Eigen::Index i = 0; i < u.size(); ++i) z(i) = std::min(qp.Gminus(i) * u(i), qp.Gplus(i) * u(i));
  return z;
}

// Moves u along sign(G) until the min-constraint is tight. The constraint is
// concave, increasing and piecewise linear along that ray, so Newton from the
// left converges in at most one step per breakpoint.
inline Vec project_along_signs(const SafetyQP& qp, const Vec& start) {
  const Eigen::Index m = qp.m();
  Vec dir(m);
  for (Eigen::Index i = 0; i < m; ++i) dir(i) = qp.Gplus(i) > 0.0 ? 1.0 : -1.0;
  double t = 0.0;
  for (int it = 0; it < 4 * static_cast<int>(m) + 8; ++it) {
    const Vec u = start + t * dir;
    const double value = qp.constraint_value(u);
    if (value >= 0.0) break;
    double slope = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
      // right derivative of min{G- u, G+ u} along dir
      const double lo = qp.Gminus(i) * u(i);
      const double hi = qp.Gplus(i) * u(i);
      const double dlo = qp.Gminus(i) * dir(i);
      const double dhi = qp.Gplus(i) * dir(i);
      slope += lo < hi ? dlo : (hi < lo ? dhi : std::min(dlo, dhi));
    }
    t += -value / slope;
  }
  return start + t * dir;
}

inline Vec active_multipliers(const StandardForm& sf, const Vec& w, const std::vector<int>& working) {
  const Vec grad = sf.H * w + sf.c;
  if (working.empty()) return Vec(0);
  Mat at(sf.A.cols(), static_cast<Eigen::Index>(working.size()));
  for (size_t k = 0; k < working.size(); ++k) at.col(static_cast<Eigen::Index>(k)) = sf.A.row(working[k]).transpose();
  return at.completeOrthogonalDecomposition().solve(grad);
}

inline double kkt_residual(const StandardForm& sf, const Vec& w, const std::vector<int>& working) {
  const Vec grad = sf.H * w + sf.c;
  Vec lambda = active_multipliers(sf, w, working);
  Vec stat = grad;
  for (size_t k = 0; k < working.size(); ++k) {
    const double l = std::max(lambda(static_cast<Eigen::Index>(k)), 0.0);
    stat -= l * sf.A.row(working[k]).transpose();
  }
  double res = stat.cwiseAbs().maxCoeff();
  for (size_t k = 0; k < working.size(); ++k) {
    res = std::max(res, -std::min(lambda(static_cast<Eigen::Index>(k)), 0.0));
    const double slack = sf.A.row(working[k]).dot(w) - sf.b(working[k]);
    res = std::max(res, std::abs(slack * lambda(static_cast<Eigen::Index>(k))));
  }
  const Vec slack = sf.A * w - sf.b;
  res = std::max(res, -std::min(slack.minCoeff(), 0.0));
  return res;
}

}  // namespace detail

/// Unique minimizer of the safety QP. Returns the desired input unchanged when
/// it already satisfies the constraint.
inline QPSolution solve_safety_qp(const SafetyQP& qp) {
  qp.validate();
  const Eigen::Index m = qp.m();
  QPSolution sol;

  if (qp.constraint_value(qp.desired) >= 0.0) {
    sol.u = qp.desired;
    sol.z = detail::min_pieces(qp, sol.u);
    sol.passthrough = true;
    const StandardForm sf = build_standard_form(qp);
    Vec w(2 * m);
    w << sol.u, sol.z;
    const Vec slack = sf.A * w - sf.b;
    for (int j = 0; j < static_cast<int>(slack.size()); ++j)
      if (std::abs(slack(j)) <= detail::kSlackTol) sol.active_set.push_back(j);
    return sol;
  }

  const StandardForm sf = build_standard_form(qp);
  const int rows = static_cast<int>(sf.A.rows());
  const int sum_row = 2 * static_cast<int>(m);

  Vec u0 = detail::project_along_signs(qp, qp.desired);
  Vec w(2 * m);
  w << u0, detail::min_pieces(qp, u0);

  std::vector<int> working{sum_row};
  for (Eigen::Index i = 0; i < m; ++i) {
    const double lo = qp.Gminus(i) * u0(i);
    const double hi = qp.Gplus(i) * u0(i);
    working.push_back(hi < lo ? 2 * static_cast<int>(i) + 1 : 2 * static_cast<int>(i));
  }

  const int max_iter = 100 * static_cast<int>(m);
  bool converged = false;
  int iter = 0;
  for (; iter < max_iter; ++iter) {
    const Eigen::Index nw = static_cast<Eigen::Index>(working.size());
    const Eigen::Index nv = 2 * m;
    Mat kkt = Mat::Zero(nv + nw, nv + nw);
    kkt.topLeftCorner(nv, nv) = sf.H;
    for (Eigen::Index k = 0; k < nw; ++k) {
      kkt.block(nv + k, 0, 1, nv) = sf.A.row(working[static_cast<size_t>(k)]);
      kkt.block(0, nv + k, nv, 1) = sf.A.row(working[static_cast<size_t>(k)]).transpose();
    }
    Vec rhs = Vec::Zero(nv + nw);
    rhs.head(nv) = -(sf.H * w + sf.c);
    const Vec solution = kkt.completeOrthogonalDecomposition().solve(rhs);
    if (!solution.allFinite() || (kkt * solution - rhs).cwiseAbs().maxCoeff() > 1e-9 * std::max(1.0, rhs.norm())) {
      break;
    }
    const Vec p = solution.head(nv);

    if (p.cwiseAbs().maxCoeff() <= 1e-13 * std::max(1.0, w.cwiseAbs().maxCoeff())) {
      const Vec lambda = detail::active_multipliers(sf, w, working);
      Eigen::Index worst = -1;
      double most_negative = -1e-12;
      for (Eigen::Index k = 0; k < lambda.size(); ++k) {
        if (lambda(k) < most_negative) {
          most_negative = lambda(k);
          worst = k;
        }
      }
      if (worst < 0) {
        converged = true;
        break;
      }
      working.erase(working.begin() + worst);
      continue;
    }

    double step = 1.0;
    int blocking = -1;
    for (int j = 0; j < rows; ++j) {
      if (std::find(working.begin(), working.end(), j) != working.end()) continue;
      const double ap = sf.A.row(j).dot(p);
      if (ap >= -1e-14) continue;
      const double ratio = std::max(0.0, (sf.b(j) - sf.A.row(j).dot(w)) / ap);
      if (ratio < step) {
        step = ratio;
        blocking = j;
      }
    }
    w += step * p;
    if (blocking >= 0) working.push_back(blocking);
  }
  sol.iterations = iter;

  sol.u = w.head(m);
  sol.z = w.tail(m);
  sol.active_set = working;
  std::sort(sol.active_set.begin(), sol.active_set.end());
  sol.kkt_residual = detail::kkt_residual(sf, w, working);
  if (!converged) {
    sol.status = QPStatus::Degenerate;
  } else if (qp.constraint_value(sol.u) < -detail::kSlackTol) {
    sol.status = QPStatus::Infeasible;
  } else {
    sol.status = QPStatus::Optimal;
  }
  return sol;
}

}  // namespace safeaoc
