#pragma once

// Luenberger-type observer with a DNN drift model whose outer layer is
// adapted by integral concurrent learning.

#include <span>

#include "safeaoc/critic.hpp"
#include "safeaoc/dnn.hpp"
#include "safeaoc/histstack.hpp"

namespace safeaoc {

struct ObserverGains {
  double k_theta = 100.0;
  double kappa = 0.5;
  Mat gamma;  // p x p
  double theta_bar = 50.0;
  double band = 0.1;
};

struct ObserverState {
  Vec xhat;
  Mat theta;  // p x n
  Mat A;
  Mat K;  // n x q
  Mat C;  // q x n
  Mat P;
  Mat S;
  DnnSpec dnn;
  ObserverGains gains;
};

/// Builds an observer, checking that A - K C is Hurwitz and solving
/// (A - K C)^T P + P (A - K C) = -S.
inline ObserverState make_observer(const Vec& xhat0, const Mat& a, const Mat& c, const Mat& k, const Mat& s,
                                   const DnnSpec& dnn, const ObserverGains& gains) {
  dnn.validate();
  const Eigen::Index n = a.rows();
  const int p = dnn.feature_dim();
  if (xhat0.size() != n || c.cols() != n || k.rows() != n || k.cols() != c.rows() || dnn.widths.front() != n)
    throw Error(ErrorKind::Config, "observer: dimension mismatch");
  if (gains.gamma.rows() != p || gains.gamma.cols() != p)
    throw Error(ErrorKind::Config, "observer: gamma must be p x p with p = " + std::to_string(p));
  if (!(gains.k_theta > 0.0) || !(gains.kappa > 0.0) || !(gains.theta_bar > 0.0))
    throw Error(ErrorKind::Config, "observer: k_theta, kappa and theta_bar must be > 0");
  const Mat acl = a - k * c;
  if (!is_hurwitz(acl)) throw Error(ErrorKind::Config, "observer: A - K C is not Hurwitz");
  ObserverState o;
  o.xhat = xhat0;
  o.theta = Mat::Zero(p, n);
  o.A = a;
  o.K = k;
  o.C = c;
  o.S = s;
  o.P = solve_lyapunov(acl, s);
  o.dnn = dnn;
  o.gains = gains;
  return o;
}

/// A xhat + theta^T phi(xhat)
inline Vec estimated_drift(const ObserverState& o, const Vec& xhat) {
  return o.A * xhat + o.theta.transpose() * dnn_features(o.dnn, xhat);
}

inline Vec observer_rhs(const ObserverState& o, const Mat& theta, const Vec& xhat, const Vec& u, const Vec& y,
                        const MatrixField& g) {
  return o.A * xhat + theta.transpose() * dnn_features(o.dnn, xhat) + g(xhat) * u + o.K * (y - o.C * xhat);
}

/// RK4 step of the state estimate with theta, u and y held over the step.
inline ObserverState observer_step(const ObserverState& o, const Vec& u, const Vec& y, const MatrixField& g,
                                   double dt) {
  ObserverState out = o;
  try {
    out.xhat = rk4_step([&](const Vec& x, double) { return observer_rhs(o, o.theta, x, u, y, g); }, o.xhat, 0.0, dt);
  } catch (const IntegrationFault&) {
    throw Error(ErrorKind::ObserverFault, "observer state became non-finite");
  }
  return out;
}

/// Projected ICL law k_theta gamma (B - Sigma_Y theta), where the stack
/// caches Sigma_Y and B = sum Y (Xdiff - Gu)^T / (1 + kappa |Y|^2).
inline Mat icl_rhs(const ObserverGains& g, const HistoryStack& stack, const Mat& theta) {
  if (stack.empty()) return Mat::Zero(theta.rows(), theta.cols());
  const Mat f = g.k_theta * g.gamma * (stack.cross() - stack.sigma_y() * theta);
  return smooth_proj_matrix(theta, f, g.theta_bar, g.band);
}

inline void clamp_theta(const ObserverGains& g, Mat& theta) {
  const double cap = g.theta_bar * (1.0 + g.band);
  const double n = theta.norm();
  if (n > cap) theta *= cap / n;
}

inline ObserverState icl_update(const ObserverState& o, const HistoryStack& stack, double dt) {
  ObserverState out = o;
  if (stack.empty()) return out;
  const Eigen::Index p = o.theta.rows();
  const Eigen::Index n = o.theta.cols();
  Vec z = Eigen::Map<const Vec>(o.theta.data(), p * n);
  z = rk4_step(
      [&](const Vec& w, double) {
        const Mat d = icl_rhs(o.gains, stack, Eigen::Map<const Mat>(w.data(), p, n));
        return Vec(Eigen::Map<const Vec>(d.data(), d.size()));
      },
      z, 0.0, dt);
  out.theta = Eigen::Map<const Mat>(z.data(), p, n);
  clamp_theta(o.gains, out.theta);
  return out;
}

}  // namespace safeaoc
