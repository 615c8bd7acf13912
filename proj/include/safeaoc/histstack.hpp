#pragma once

// Integral measurements for concurrent learning and the two-stack
// (active / auxiliary) manager with eigenvalue-driven replacement and a
// dwell time between purges.

#include <deque>
#include <optional>
#include <vector>

#include "safeaoc/numerics.hpp"

namespace safeaoc {

/// One integral measurement over [stamp - window, stamp]:
/// Xdiff = theta^T Y + Gu + residual.
struct IclDatum {
  Vec Y;
  Vec Xdiff;
  Vec Gu;
  double stamp = 0.0;
  bool synthetic = false;
  // raw window samples, kept so Y can be re-integrated after a feature change
  std::vector<double> window_t;
  std::vector<Vec> window_xhat;
};

enum class StackRole { Active, Auxiliary };

class HistoryStack {
 public:
  HistoryStack() = default;
  HistoryStack(int capacity, double kappa, int p, int n, StackRole role = StackRole::Active)
      : capacity_(capacity), kappa_(kappa), role_(role), sigma_(Mat::Zero(p, p)), cross_(Mat::Zero(p, n)) {
    if (capacity < 1) throw Error(ErrorKind::Config, "history stack capacity must be >= 1");
    if (!(kappa >= 0.0)) throw Error(ErrorKind::Config, "kappa must be >= 0");
  }

  int capacity() const { return capacity_; }
  double kappa() const { return kappa_; }
  StackRole role() const { return role_; }
  void set_role(StackRole r) { role_ = r; }
  int size() const { return static_cast<int>(data_.size()); }
  bool full() const { return size() >= capacity_; }
  bool empty() const { return data_.empty(); }
  const std::vector<IclDatum>& data() const { return data_; }

  /// sum Y Y^T / (1 + kappa |Y|^2)
  const Mat& sigma_y() const { return sigma_; }
  /// sum Y (Xdiff - Gu)^T / (1 + kappa |Y|^2)
  const Mat& cross() const { return cross_; }
  double min_eig() const { return min_eig_; }

  double weight(const Vec& y) const { return 1.0 / (1.0 + kappa_ * y.squaredNorm()); }
  Mat outer(const Vec& y) const { return weight(y) * (y * y.transpose()); }

  void push(const IclDatum& d) {
    if (full()) throw Error(ErrorKind::Contract, "history stack is full");
    check(d);
    data_.push_back(d);
    sigma_ += outer(d.Y);
    cross_ += weight(d.Y) * (d.Y * (d.Xdiff - d.Gu).transpose());
    refresh_eig();
  }

  void replace(int slot, const IclDatum& d) {
    check(d);
    IclDatum& old = data_.at(static_cast<size_t>(slot));
    sigma_ -= outer(old.Y);
    cross_ -= weight(old.Y) * (old.Y * (old.Xdiff - old.Gu).transpose());
    old = d;
    sigma_ += outer(d.Y);
    cross_ += weight(d.Y) * (d.Y * (d.Xdiff - d.Gu).transpose());
    refresh_eig();
  }

  void clear() {
    data_.clear();
    sigma_.setZero();
    cross_.setZero();
    min_eig_ = 0.0;
  }

  /// From-scratch recomputation of the cached Gram matrix.
  Mat recompute_sigma() const {
    Mat s = Mat::Zero(sigma_.rows(), sigma_.cols());
    for (const IclDatum& d : data_) s += outer(d.Y);
    return s;
  }

 private:
  void check(const IclDatum& d) const {
    if (d.Y.size() != sigma_.rows() || d.Xdiff.size() != cross_.cols() || d.Gu.size() != cross_.cols())
      throw Error(ErrorKind::Contract, "ICL datum dimension mismatch");
    if (!d.Y.allFinite() || !d.Xdiff.allFinite() || !d.Gu.allFinite())
      throw Error(ErrorKind::Contract, "ICL datum is not finite");
  }

  void refresh_eig() {
    sigma_ = 0.5 * (sigma_ + sigma_.transpose());
    // PSD by construction; round-off below zero would block the purge gate
    min_eig_ = std::max(0.0, sym_eig_min(sigma_));
  }

  int capacity_ = 0;
  double kappa_ = 0.0;
  StackRole role_ = StackRole::Active;
  std::vector<IclDatum> data_;
  Mat sigma_;
  Mat cross_;
  double min_eig_ = 0.0;
};

/// Sliding trapezoidal integrals of the features and of A xhat + g(xhat) u
/// over the last `window` seconds, emitted every `period` seconds.
class WindowAccumulator {
 public:
  WindowAccumulator() = default;
  WindowAccumulator(double window, double dt, double period)
      : dt_(dt),
        window_steps_(static_cast<long>(std::lround(window / dt))),
        period_steps_(static_cast<long>(std::lround(period / dt))) {
    if (!(dt > 0.0) || window_steps_ < 1 || period_steps_ < 1)
      throw Error(ErrorKind::Config, "window and sample period must be positive multiples of dt");
  }

  struct Sample {
    double t;
    Vec xhat;
    Vec features;
    Vec gu;
  };

  std::optional<IclDatum> push(Sample s) {
    if (!buf_.empty() && !(s.t > buf_.back().t))
      throw Error(ErrorKind::Ordering, "window sample time " + std::to_string(s.t) + " does not advance");
    buf_.push_back(std::move(s));
    ++count_;
    while (static_cast<long>(buf_.size()) > window_steps_ + 1) buf_.pop_front();
    if (static_cast<long>(buf_.size()) < window_steps_ + 1) return std::nullopt;
    if ((count_ - 1 - window_steps_) % period_steps_ != 0) return std::nullopt;

    IclDatum d;
    d.Y = Vec::Zero(buf_.front().features.size());
    d.Gu = Vec::Zero(buf_.front().gu.size());
    for (size_t i = 1; i < buf_.size(); ++i) {
      const double h = buf_[i].t - buf_[i - 1].t;
      d.Y += 0.5 * h * (buf_[i].features + buf_[i - 1].features);
      d.Gu += 0.5 * h * (buf_[i].gu + buf_[i - 1].gu);
    }
    d.Xdiff = buf_.back().xhat - buf_.front().xhat;
    d.stamp = buf_.back().t;
    for (const Sample& b : buf_) {
      d.window_t.push_back(b.t);
      d.window_xhat.push_back(b.xhat);
    }
    return d;
  }

  void clear() {
    buf_.clear();
    count_ = 0;
  }

  double dt() const { return dt_; }

 private:
  double dt_ = 0.0;
  long window_steps_ = 0;
  long period_steps_ = 0;
  long count_ = 0;
  std::deque<Sample> buf_;
};

/// Re-integrates Y for every datum that carries its window samples, using a
/// new feature map, and rebuilds the caches. Data without samples are kept.
template <typename Features>
void rebuild_regressors(HistoryStack& s, Features&& features) {
  std::vector<IclDatum> data = s.data();
  s.clear();
  for (IclDatum& d : data) {
    if (d.window_t.size() >= 2) {
      Vec prev = features(d.window_xhat.front());
      d.Y.setZero();
      for (size_t i = 1; i < d.window_t.size(); ++i) {
        Vec cur = features(d.window_xhat[i]);
        d.Y += 0.5 * (d.window_t[i] - d.window_t[i - 1]) * (cur + prev);
        prev = std::move(cur);
      }
    }
    s.push(d);
  }
}

struct StackParams {
  double dwell = 2.0;
  double eig_threshold = 1e-6;
  double sample_period = 0.05;
  double purge_ratio = 0.5;
  double window = 0.25;
  int capacity = 20;
  double kappa = 0.5;

  void validate() const {
    if (!(dwell >= 0.0)) throw Error(ErrorKind::Config, "stack.dwell must be >= 0");
    if (!(eig_threshold >= 0.0)) throw Error(ErrorKind::Config, "stack.eig_threshold must be >= 0");
    if (!(sample_period > 0.0)) throw Error(ErrorKind::Config, "stack.sample_period must be > 0");
    if (!(purge_ratio > 0.0 && purge_ratio <= 1.0)) throw Error(ErrorKind::Config, "stack.purge_ratio must lie in (0, 1]");
    if (!(window > 0.0)) throw Error(ErrorKind::Config, "stack.window must be > 0");
    if (capacity < 1) throw Error(ErrorKind::Config, "stack.capacity must be >= 1");
    if (!(kappa > 0.0)) throw Error(ErrorKind::Config, "stack.kappa must be > 0");
  }
};

struct StackManagerState {
  HistoryStack active;
  HistoryStack auxiliary;
  int switch_count = 0;
  double last_purge = 0.0;
  double best_eig = 0.0;
  StackParams params;
};

inline StackManagerState make_stack_manager(const StackParams& params, int p, int n) {
  params.validate();
  StackManagerState m;
  m.params = params;
  m.active = HistoryStack(params.capacity, params.kappa, p, n, StackRole::Active);
  m.auxiliary = HistoryStack(params.capacity, params.kappa, p, n, StackRole::Auxiliary);
  return m;
}

/// lambda_min(Sigma - w_i Y_i Y_i^T + w_* Y_* Y_*^T) - lambda_min(Sigma) for
/// every slot i.
inline Vec swap_gains(const HistoryStack& s, const Vec& candidate) {
  Vec gains(s.size());
  const Mat add = s.outer(candidate);
  for (int i = 0; i < s.size(); ++i)
    gains(i) = sym_eig_min(s.sigma_y() - s.outer(s.data()[static_cast<size_t>(i)].Y) + add) - s.min_eig();
  return gains;
}

/// Offers a datum to the auxiliary stack. Returns true when it was stored.
inline bool consider(StackManagerState& m, const IclDatum& d) {
  if (!m.auxiliary.full()) {
    m.auxiliary.push(d);
    return true;
  }
  const Vec gains = swap_gains(m.auxiliary, d.Y);
  Eigen::Index best = 0;
  const double gain = gains.maxCoeff(&best);
  if (gain >= m.params.eig_threshold && gain > 0.0) {
    m.auxiliary.replace(static_cast<int>(best), d);
    return true;
  }
  return false;
}

/// Replaces the active stack by the auxiliary one when it is full, good
/// enough relative to the best minimum eigenvalue seen, and the dwell time
/// since the last purge has elapsed.
inline bool maybe_purge(StackManagerState& m, double now) {
  if (!m.auxiliary.full()) return false;
  const double lam = m.auxiliary.min_eig();
  if (lam < m.params.purge_ratio * m.best_eig) return false;
  if (now - m.last_purge < m.params.dwell) return false;
  m.active = m.auxiliary;
  m.active.set_role(StackRole::Active);
  m.auxiliary.clear();
  m.last_purge = now;
  m.best_eig = std::max(m.best_eig, lam);
  ++m.switch_count;
  return true;
}

}  // namespace safeaoc
