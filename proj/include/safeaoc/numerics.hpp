#pragma once

// Dense linear-algebra and integration kernels shared by every other module.
// Storage is Eigen; the eigen/Lyapunov/pole-placement algorithms are written
// out here because the small sizes (n <= 20) make the plain versions exact
// enough and easy to audit.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <span>
#include <string>
#include <vector>

#include "safeaoc/errors.hpp"

namespace safeaoc {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

enum class IntegratorMethod { Rk4 };

struct IntegratorConfig {
  double step = 1e-3;
  IntegratorMethod method = IntegratorMethod::Rk4;

  void validate() const {
    if (!(step > 0.0) || step > 0.01) {
      throw Error(ErrorKind::Config, "integrator step must lie in (0, 0.01], got " + std::to_string(step));
    }
  }
};

inline bool all_finite(const Vec& v) { return v.allFinite(); }

/// One classical fourth-order Runge-Kutta step of dx/dt = deriv(x, t).
template <typename Deriv>
Vec rk4_step(Deriv&& deriv, const Vec& state, double t, double dt) {
  if (!(dt > 0.0)) throw Error(ErrorKind::Contract, "rk4_step requires dt > 0");
  auto stage = [&](const Vec& x, double tau) {
    Vec k = deriv(x, tau);
    if (!k.allFinite()) throw IntegrationFault("non-finite derivative", tau);
    return k;
  };
  const Vec k1 = stage(state, t);
  const Vec k2 = stage(state + 0.5 * dt * k1, t + 0.5 * dt);
  const Vec k3 = stage(state + 0.5 * dt * k2, t + 0.5 * dt);
  const Vec k4 = stage(state + dt * k3, t + dt);
  return state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

inline double max_abs(const Mat& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

/// Throws a contract error unless |M - M^T| <= tol * max(1, |M|).
inline void require_symmetric(const Mat& m, double tol = 1e-10) {
  if (m.rows() != m.cols()) throw Error(ErrorKind::Contract, "matrix is not square");
  const double asym = max_abs(m - m.transpose());
  if (asym > tol * std::max(1.0, max_abs(m))) {
    throw Error(ErrorKind::Contract, "matrix is not symmetric (asymmetry " + std::to_string(asym) + ")");
  }
}

struct SymEigen {
  Vec values;   // ascending
  Mat vectors;  // columns, matching values
};

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix. The input is
/// symmetrized as (M + M^T)/2 after the asymmetry check.
inline SymEigen sym_eig(const Mat& m_in) {
  require_symmetric(m_in);
  const Eigen::Index n = m_in.rows();
  Mat a = 0.5 * (m_in + m_in.transpose());
  Mat v = Mat::Identity(n, n);
  if (n == 0) return {Vec(0), v};

  const double scale = std::max(a.norm(), 1e-300);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (std::sqrt(off) <= 1e-17 * scale) break;

    for (Eigen::Index p = 0; p < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<Eigen::Index> order(static_cast<size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](auto i, auto j) { return a(i, i) < a(j, j); });
  SymEigen out{Vec(n), Mat(n, n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    out.values(i) = a(order[static_cast<size_t>(i)], order[static_cast<size_t>(i)]);
    out.vectors.col(i) = v.col(order[static_cast<size_t>(i)]);
  }
  return out;
}

inline double sym_eig_min(const Mat& m) {
  if (m.rows() == 0) return 0.0;
  return sym_eig(m).values(0);
}

inline double sym_eig_max(const Mat& m) {
  if (m.rows() == 0) return 0.0;
  const SymEigen e = sym_eig(m);
  return e.values(e.values.size() - 1);
}

/// Eigenvalues of a general real matrix (used only for Hurwitz checks and
/// pole verification).
inline Eigen::VectorXcd eigenvalues(const Mat& m) {
  Eigen::EigenSolver<Mat> solver(m, false);
  return solver.eigenvalues();
}

inline bool is_hurwitz(const Mat& m) {
  if (m.rows() == 0) return true;
  const Eigen::VectorXcd ev = eigenvalues(m);
  for (Eigen::Index i = 0; i < ev.size(); ++i)
    if (!(ev(i).real() < 0.0)) return false;
  return true;
}

/// Coefficients [1, c1, ..., cn] of det(sI - M) via Faddeev-LeVerrier.
inline Vec char_poly(const Mat& m) {
  const Eigen::Index n = m.rows();
  Vec c = Vec::Zero(n + 1);
  c(0) = 1.0;
  Mat mk = Mat::Zero(n, n);
  const Mat id = Mat::Identity(n, n);
  for (Eigen::Index k = 1; k <= n; ++k) {
    mk = m * mk + c(k - 1) * id;
    c(k) = -(m * mk).trace() / static_cast<double>(k);
  }
  return c;
}

/// Coefficients [1, c1, ..., cn] of prod_i (s - r_i) for real roots r_i.
inline Vec poly_from_roots(std::span<const double> roots) {
  Vec c = Vec::Zero(static_cast<Eigen::Index>(roots.size()) + 1);
  c(0) = 1.0;
  Eigen::Index deg = 0;
  for (double r : roots) {
    for (Eigen::Index k = deg + 1; k >= 1; --k) c(k) -= r * c(k - 1);
    ++deg;
  }
  return c;
}

/// Solves Acl^T P + P Acl = -S by Kronecker vectorization and dense LU.
inline Mat solve_lyapunov(const Mat& acl, const Mat& s) {
  const Eigen::Index n = acl.rows();
  if (acl.cols() != n || s.rows() != n || s.cols() != n)
    throw Error(ErrorKind::Contract, "solve_lyapunov: dimension mismatch");
  if (!is_hurwitz(acl)) throw Error(ErrorKind::NoSolution, "solve_lyapunov: closed-loop matrix is not Hurwitz");
  require_symmetric(s);
  if (!(sym_eig_min(s) > 0.0)) throw Error(ErrorKind::Contract, "solve_lyapunov: S is not positive definite");

  const Mat id = Mat::Identity(n, n);
  const Mat at = acl.transpose();
  Mat kron(n * n, n * n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      // vec(A^T P) = (I (x) A^T) vec(P), vec(P A) = (A^T (x) I) vec(P)
      kron.block(i * n, j * n, n, n) = id(i, j) * at + at(i, j) * id;
    }
  Eigen::FullPivLU<Mat> lu(kron);
  if (!lu.isInvertible()) throw Error(ErrorKind::Numeric, "solve_lyapunov: singular Kronecker system");
  const Vec rhs = -Eigen::Map<const Vec>(s.data(), n * n);
  const Vec p = lu.solve(rhs);
  Mat pm = Eigen::Map<const Mat>(p.data(), n, n);
  return 0.5 * (pm + pm.transpose());
}

/// Observer gain K (n x 1) placing eig(A - K C) at the given real poles,
/// via Ackermann's formula on the dual pair (A^T, C^T).
inline Mat place_observer_gain(const Mat& a, const Mat& c, std::span<const double> poles) {
  const Eigen::Index n = a.rows();
  if (a.cols() != n || c.rows() != 1 || c.cols() != n || static_cast<Eigen::Index>(poles.size()) != n)
    throw Error(ErrorKind::Contract, "place_observer_gain: dimension mismatch");

  Mat obs(n, n);
  Mat row = c;
  for (Eigen::Index i = 0; i < n; ++i) {
    obs.row(i) = row;
    row = row * a;
  }
  Eigen::FullPivLU<Mat> lu(obs);
  if (lu.rank() < n) throw Error(ErrorKind::RankDeficiency, "place_observer_gain: (A, C) is not observable");

  const Vec coeffs = poly_from_roots(poles);
  Mat pa = Mat::Zero(n, n);
  Mat apow = Mat::Identity(n, n);
  for (Eigen::Index k = n; k >= 0; --k) {
    pa += coeffs(k) * apow;
    apow = apow * a;
  }
  Vec en = Vec::Zero(n);
  en(n - 1) = 1.0;
  Mat k = pa * lu.solve(en);

  const Vec achieved = char_poly(a - k * c);
  const double tol = 1e-8 * std::max(1.0, coeffs.cwiseAbs().maxCoeff());
  if ((achieved - coeffs).cwiseAbs().maxCoeff() > tol)
    throw Error(ErrorKind::Numeric, "place_observer_gain: pole placement residual exceeds tolerance");
  return k;
}

}  // namespace safeaoc
