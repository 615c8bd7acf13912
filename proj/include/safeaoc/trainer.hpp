#pragma once

// Levenberg-Marquardt training of the inner DNN layers with the outer layer
// frozen.

#include <optional>
#include <string>
#include <vector>

#include "safeaoc/dnn.hpp"
#include "safeaoc/plant.hpp"

namespace safeaoc {

/// One logged observer sample. xhat_dot is the observer right-hand side
/// actually integrated at this step.
struct ObserverSample {
  double t = 0.0;
  Vec xhat;
  Vec xhat_dot;
  Vec u;
};

struct TrainSet {
  std::vector<Vec> inputs;
  std::vector<Vec> targets;
  std::vector<int> train;
  std::vector<int> val;
  std::vector<int> test;
};

struct SplitFractions {
  double train = 0.70;
  double val = 0.15;
  double test = 0.15;
};

/// Targets are r = xhat_dot - A xhat - g(xhat) u: the part of the observer
/// velocity attributed to the unknown drift (network term plus output
/// injection). Samples are dealt into train / val / test by position in a
/// stride of 20, rotated by the seed.
inline TrainSet build_trainset(const std::vector<ObserverSample>& log, const Mat& a, const MatrixField& g,
                               std::uint64_t seed, SplitFractions split = {}) {
  if (log.empty()) throw Error(ErrorKind::EmptySet, "build_trainset: empty log");
  if (std::abs(split.train + split.val + split.test - 1.0) > 1e-12 || split.train <= 0.0 || split.val < 0.0 ||
      split.test < 0.0)
    throw Error(ErrorKind::Config, "trainer split fractions must be nonnegative and sum to 1");
  constexpr int kStride = 20;
  const int n_train = static_cast<int>(std::lround(split.train * kStride));
  const int n_val = static_cast<int>(std::lround(split.val * kStride));
  TrainSet set;
  for (size_t i = 0; i < log.size(); ++i) {
    const ObserverSample& s = log[i];
    if (i > 0 && !(s.t > log[i - 1].t)) throw Error(ErrorKind::Ordering, "build_trainset: log is not time-ordered");
    Vec r = s.xhat_dot - a * s.xhat - g(s.xhat) * s.u;
    if (!r.allFinite() || !s.xhat.allFinite()) throw Error(ErrorKind::Contract, "build_trainset: non-finite sample");
    set.inputs.push_back(s.xhat);
    set.targets.push_back(std::move(r));
    const int idx = static_cast<int>(i);
    const int pos = static_cast<int>((i + seed) % kStride);
    if (pos < n_train)
      set.train.push_back(idx);
    else if (pos < n_train + n_val)
      set.val.push_back(idx);
    else
      set.test.push_back(idx);
  }
  return set;
}

struct LmConfig {
  int max_epochs = 10000;
  double target_mse = 5e-3;
  double damping_init = 1e-3;
  double damping_up = 10.0;
  double damping_down = 0.1;
  double damping_max = 1e10;
  int val_patience = 50;

  void validate() const {
    if (max_epochs < 0) throw Error(ErrorKind::Config, "trainer.max_epochs must be >= 0");
    if (!(target_mse > 0.0)) throw Error(ErrorKind::Config, "trainer.target_mse must be > 0");
    if (!(damping_init > 0.0)) throw Error(ErrorKind::Config, "trainer.damping_init must be > 0");
    if (!(damping_up > 1.0) || !(damping_down > 0.0 && damping_down < 1.0))
      throw Error(ErrorKind::Config, "trainer damping factors must satisfy up > 1 and 0 < down < 1");
    if (val_patience < 1) throw Error(ErrorKind::Config, "trainer.val_patience must be >= 1");
  }
};

enum class LmStop { Budget, TargetReached, ValidationPatience, Stalled };

inline const char* to_string(LmStop s) {
  switch (s) {
    case LmStop::Budget: return "epoch_budget";
    case LmStop::TargetReached: return "target_mse";
    case LmStop::ValidationPatience: return "validation_patience";
    case LmStop::Stalled: return "stalled";
  }
  return "unknown";
}

struct LmReport {
  DnnSpec dnn;
  int epochs = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;
  double test_mse = 0.0;
  LmStop stop = LmStop::Budget;
  std::vector<double> train_history;  // train MSE after every accepted step
};

/// Mean over samples of |theta^T phi(x) - target|^2.
inline double dataset_mse(const DnnSpec& d, const Mat& theta, const TrainSet& set, const std::vector<int>& idx) {
  if (idx.empty()) return 0.0;
  double sum = 0.0;
  for (int i : idx) {
    const auto k = static_cast<size_t>(i);
    sum += (theta.transpose() * dnn_features(d, set.inputs[k]) - set.targets[k]).squaredNorm();
  }
  return sum / static_cast<double>(idx.size());
}

inline LmReport lm_train(const DnnSpec& dnn, const Mat& theta, const TrainSet& set, const LmConfig& cfg) {
  cfg.validate();
  if (set.train.empty()) throw Error(ErrorKind::EmptySet, "lm_train: empty training split");
  const Eigen::Index nout = theta.cols();
  const Eigen::Index np = dnn.parameter_count();
  const auto rows = static_cast<Eigen::Index>(set.train.size()) * nout;
  const std::vector<int>& monitor = set.val.empty() ? set.train : set.val;

  LmReport rep;
  DnnSpec cur = dnn;
  double lambda = cfg.damping_init;
  double mse = dataset_mse(cur, theta, set, set.train);
  double best_val = dataset_mse(cur, theta, set, monitor);
  DnnSpec best = cur;
  int since_best = 0;

  Mat jac(rows, np);
  Vec res(rows);
  while (rep.epochs < cfg.max_epochs) {
    if (mse <= cfg.target_mse) {
      rep.stop = LmStop::TargetReached;
      break;
    }
    for (size_t s = 0; s < set.train.size(); ++s) {
      const auto k = static_cast<size_t>(set.train[s]);
      const auto r0 = static_cast<Eigen::Index>(s) * nout;
      jac.middleRows(r0, nout) = output_weight_jacobian(cur, theta, set.inputs[k]);
      res.segment(r0, nout) = theta.transpose() * dnn_features(cur, set.inputs[k]) - set.targets[k];
    }
    const Mat jtj = jac.transpose() * jac;
    const Vec jtr = jac.transpose() * res;
    const Vec w0 = cur.flat();
    bool accepted = false;
    while (lambda <= cfg.damping_max) {
      Mat sys = jtj;
      sys.diagonal().array() += lambda;
      const Vec step = sys.ldlt().solve(-jtr);
      DnnSpec trial = cur;
      trial.set_flat(w0 + step);
      const double trial_mse = step.allFinite() ? dataset_mse(trial, theta, set, set.train) : INFINITY;
      if (trial_mse < mse) {
        cur = std::move(trial);
        mse = trial_mse;
        lambda = std::max(lambda * cfg.damping_down, 1e-20);
        accepted = true;
        break;
      }
      lambda *= cfg.damping_up;
    }
    if (!accepted) {
      rep.stop = LmStop::Stalled;
      break;
    }
    ++rep.epochs;
    rep.train_history.push_back(mse);
    const double val = dataset_mse(cur, theta, set, monitor);
    if (val < best_val) {
      best_val = val;
      best = cur;
      since_best = 0;
    } else if (++since_best >= cfg.val_patience) {
      rep.stop = LmStop::ValidationPatience;
      break;
    }
  }
  if (rep.epochs >= cfg.max_epochs && rep.stop == LmStop::Budget && mse <= cfg.target_mse) rep.stop = LmStop::TargetReached;
  // the weights with the best validation error are kept
  rep.dnn = best;
  rep.train_mse = dataset_mse(best, theta, set, set.train);
  rep.val_mse = dataset_mse(best, theta, set, set.val);
  rep.test_mse = dataset_mse(best, theta, set, set.test);
  return rep;
}

/// True when now lies within half a step of a positive multiple of period.
inline bool swap_schedule(double now, double period, double dt) {
  if (!(period > 0.0)) throw Error(ErrorKind::Contract, "swap_schedule requires period > 0");
  const double k = std::round(now / period);
  return k >= 1.0 && std::abs(now - k * period) <= 0.5 * dt;
}

}  // namespace safeaoc
