#include <gtest/gtest.h>

#include <random>

#include "safeaoc/trainer.hpp"

using namespace safeaoc;

namespace {

const MatrixField kG = [](const Vec&) { return Mat::Zero(2, 1); };

DnnSpec small_net(std::uint64_t seed) {
  return make_dnn(2, {4, 3}, {Activation::ElliotSym, Activation::TanhSigmoid}, 1, seed);
}

TrainSet synthetic_set(int count, const std::function<Vec(const Vec&)>& target, std::uint64_t seed) {
  std::mt19937 rng(static_cast<unsigned>(seed));
  std::uniform_real_distribution<double> ud(-1.5, 1.5);
  std::vector<ObserverSample> log;
  for (int i = 0; i < count; ++i) {
    ObserverSample s;
    s.t = 0.01 * i;
    s.xhat = Vec(2);
    s.xhat << ud(rng), ud(rng);
    s.u = Vec::Zero(1);
    s.xhat_dot = target(s.xhat);
    log.push_back(s);
  }
  return build_trainset(log, Mat::Zero(2, 2), kG, seed);
}

}  // namespace

TEST(BuildTrainset, SplitCounts) {
  const TrainSet s = synthetic_set(100, [](const Vec& x) { return x; }, 3);
  EXPECT_EQ(s.train.size(), 70u);
  EXPECT_EQ(s.val.size(), 15u);
  EXPECT_EQ(s.test.size(), 15u);
}

TEST(BuildTrainset, EmptyLogIsEmptySetError) {
  try {
    build_trainset({}, Mat::Zero(2, 2), kG, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptySet);
  }
}

TEST(BuildTrainset, MatchingLinearModelGivesZeroTargets) {
  Mat a(2, 2);
  a << -0.6, -1, 0, 0;
  std::vector<ObserverSample> log;
  Vec x(2);
  x << -2.0, 1.0;
  for (int i = 0; i < 50; ++i) {
    ObserverSample s{0.01 * i, x, a * x, Vec::Zero(1)};
    log.push_back(s);
    x += 0.01 * (a * x);
  }
  const TrainSet set = build_trainset(log, a, kG, 0);
  for (const Vec& r : set.targets) EXPECT_LE(r.norm(), 1e-15);
}

TEST(BuildTrainset, SyntheticDriftIsRecovered) {
  // observer velocity A xhat + f0(xhat) + g u with f0 = [sin x1, 0]
  Mat a(2, 2);
  a << -1, 0, 0, -2;
  const MatrixField g = [](const Vec& x) {
    Mat m(2, 1);
    m << 0.0, 1.0 + x(0) * x(0);
    return m;
  };
  std::vector<ObserverSample> log;
  for (int i = 0; i < 40; ++i) {
    Vec x(2);
    x << -2.0 + 0.1 * i, 0.05 * i;
    Vec u = Vec::Constant(1, std::cos(0.3 * i));
    Vec f0(2);
    f0 << std::sin(x(0)), 0.0;
    log.push_back({0.01 * i, x, Vec(a * x + f0 + g(x) * u), u});
  }
  const TrainSet set = build_trainset(log, a, g, 1);
  for (size_t i = 0; i < set.targets.size(); ++i) {
    EXPECT_NEAR(set.targets[i](0), std::sin(set.inputs[i](0)), 1e-12);
    EXPECT_NEAR(set.targets[i](1), 0.0, 1e-12);
  }
}

TEST(BuildTrainset, RejectsTimeRegression) {
  std::vector<ObserverSample> log{{0.1, Vec::Zero(2), Vec::Zero(2), Vec::Zero(1)},
                                  {0.1, Vec::Zero(2), Vec::Zero(2), Vec::Zero(1)}};
  EXPECT_THROW(build_trainset(log, Mat::Zero(2, 2), kG, 0), Error);
}

TEST(LmTrain, ZeroEpochBudgetIsNoOp) {
  const DnnSpec d = small_net(1);
  const TrainSet set = synthetic_set(60, [](const Vec& x) { return Vec(x.array().sin()); }, 2);
  LmConfig cfg;
  cfg.max_epochs = 0;
  const LmReport rep = lm_train(d, Mat::Ones(3, 2), set, cfg);
  EXPECT_EQ(rep.dnn.flat(), d.flat());
  EXPECT_EQ(rep.epochs, 0);
}

TEST(LmTrain, ZeroTargetsAreFitted) {
  const TrainSet set = synthetic_set(100, [](const Vec&) { return Vec(Vec::Zero(2)); }, 4);
  LmConfig cfg;
  cfg.target_mse = 1e-12;
  cfg.max_epochs = 500;
  const LmReport rep = lm_train(small_net(5), Mat::Ones(3, 2), set, cfg);
  EXPECT_LE(rep.train_mse, 1e-10);
}

TEST(LmTrain, TeacherStudent) {
  std::mt19937 rng(16);
  std::normal_distribution<double> nd;
  const DnnSpec teacher = small_net(6);
  Mat theta(3, 2);
  for (Eigen::Index i = 0; i < theta.size(); ++i) theta.data()[i] = nd(rng);
  const TrainSet set =
      synthetic_set(200, [&](const Vec& x) { return Vec(theta.transpose() * dnn_features(teacher, x)); }, 7);
  DnnSpec student = teacher;
  Vec w = student.flat();
  for (Eigen::Index i = 0; i < w.size(); ++i) w(i) += 0.2 * nd(rng);
  student.set_flat(w);
  LmConfig cfg;
  cfg.target_mse = 1e-9;
  cfg.max_epochs = 1000;
  cfg.val_patience = 1000;
  const LmReport rep = lm_train(student, theta, set, cfg);
  EXPECT_LE(rep.train_mse, 1e-6) << to_string(rep.stop);
  for (size_t i = 1; i < rep.train_history.size(); ++i) EXPECT_LE(rep.train_history[i], rep.train_history[i - 1]);
}

TEST(LmTrain, FixedSeedIsBitReproducible) {
  const TrainSet set = synthetic_set(80, [](const Vec& x) { return Vec(x.array().sin()); }, 8);
  LmConfig cfg;
  cfg.max_epochs = 30;
  const LmReport a = lm_train(small_net(9), Mat::Ones(3, 2), set, cfg);
  const LmReport b = lm_train(small_net(9), Mat::Ones(3, 2), set, cfg);
  EXPECT_EQ(a.dnn.flat(), b.dnn.flat());
  EXPECT_EQ(a.train_mse, b.train_mse);
}

TEST(LmTrain, ConfigValidation) {
  LmConfig cfg;
  cfg.damping_up = 0.5;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = LmConfig{};
  cfg.target_mse = 0.0;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(SwapSchedule, Examples) {
  EXPECT_TRUE(swap_schedule(2.0, 2.0, 1e-3));
  EXPECT_FALSE(swap_schedule(1.999, 2.0, 1e-3));
  EXPECT_TRUE(swap_schedule(4.0005, 2.0, 1e-3));
  EXPECT_FALSE(swap_schedule(4.0015, 2.0, 1e-3));
  EXPECT_THROW(swap_schedule(1.0, 0.0, 1e-3), Error);
}

TEST(SwapSchedule, FiresOncePerPeriodOnStepGrid) {
  int fired = 0;
  for (int k = 0; k <= 30000; ++k) fired += swap_schedule(k * 1e-3, 2.0, 1e-3) ? 1 : 0;
  EXPECT_EQ(fired, 15);
}
