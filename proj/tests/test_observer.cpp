#include <gtest/gtest.h>

#include <random>

#include "safeaoc/observer.hpp"
#include "safeaoc/plant.hpp"

using namespace safeaoc;

namespace {

Mat mat2(double a, double b, double c, double d) {
  Mat m(2, 2);
  m << a, b, c, d;
  return m;
}

Mat row(double a, double b) {
  Mat m(1, 2);
  m << a, b;
  return m;
}

Mat col(double a, double b) {
  Mat m(2, 1);
  m << a, b;
  return m;
}

ObserverGains gains_for(int p) {
  ObserverGains g;
  g.gamma = Mat::Identity(p, p);
  return g;
}

ObserverState convex_observer() {
  const DnnSpec dnn = default_dnn(2, 3);
  Vec x0(2);
  x0 << -2.5, 1.5;
  return make_observer(x0, mat2(-0.6, -1, 0, 0), row(1, 0), col(10.4, -30), Mat::Identity(2, 2), dnn, gains_for(13));
}

// exp(M) by scaling and squaring of a long Taylor series
Mat expm(const Mat& m) {
  int squarings = 0;
  double norm = m.cwiseAbs().rowwise().sum().maxCoeff();
  while (norm > 0.1) {
    norm /= 2.0;
    ++squarings;
  }
  const Mat a = m / std::pow(2.0, squarings);
  Mat term = Mat::Identity(m.rows(), m.cols());
  Mat sum = term;
  for (int k = 1; k < 30; ++k) {
    term = term * a / static_cast<double>(k);
    sum += term;
  }
  for (int i = 0; i < squarings; ++i) sum = sum * sum;
  return sum;
}

const MatrixField kZeroG = [](const Vec&) { return Mat::Zero(2, 1); };

}  // namespace

TEST(MakeObserver, SolvesLyapunovAndRejectsUnstableGain) {
  const ObserverState o = convex_observer();
  const Mat acl = o.A - o.K * o.C;
  EXPECT_LE(max_abs(acl.transpose() * o.P + o.P * acl + o.S), 1e-9);
  EXPECT_EQ(o.theta.rows(), 13);
  EXPECT_EQ(o.theta.cols(), 2);
  EXPECT_THROW(make_observer(Vec::Zero(2), mat2(-0.6, -1, 0, 0), row(1, 0), col(-10, 0), Mat::Identity(2, 2),
                             default_dnn(2, 3), gains_for(13)),
               Error);
  EXPECT_THROW(make_observer(Vec::Zero(2), mat2(-0.6, -1, 0, 0), row(1, 0), col(10.4, -30), Mat::Identity(2, 2),
                             default_dnn(2, 3), gains_for(7)),
               Error);
}

TEST(EstimatedDrift, ZeroThetaIsLinearPart) {
  const ObserverState o = convex_observer();
  Vec x(2);
  x << 0.4, -1.1;
  EXPECT_EQ(estimated_drift(o, x), o.A * x);
}

TEST(EstimatedDrift, OddNetworkVanishesAtOrigin) {
  DnnSpec d = make_dnn(2, {5, 4}, {Activation::ElliotSym, Activation::TanhSigmoid}, 1, 4);
  for (Mat& w : d.weights) w.col(w.cols() - 1).setZero();
  ObserverState o = make_observer(Vec::Zero(2), mat2(-0.6, -1, 0, 0), row(1, 0), col(10.4, -30),
                                  Mat::Identity(2, 2), d, gains_for(4));
  o.theta.setRandom();
  EXPECT_EQ(estimated_drift(o, Vec::Zero(2)), Vec::Zero(2));
}

TEST(EstimatedDrift, MatchesHandComposition) {
  ObserverState o = convex_observer();
  std::mt19937 rng(14);
  std::uniform_real_distribution<double> ud(-1, 1);
  for (Eigen::Index i = 0; i < o.theta.size(); ++i) o.theta.data()[i] = ud(rng);
  Vec x(2);
  x << 0.3, 0.8;
  // explicit layer-by-layer composition
  const Mat& w1 = o.dnn.weights[0];
  const Mat& w2 = o.dnn.weights[1];
  const Mat& w3 = o.dnn.weights[2];
  Vec a1 = w1.leftCols(2) * x + w1.col(2);
  for (Eigen::Index i = 0; i < a1.size(); ++i) a1(i) = a1(i) / (1.0 + std::abs(a1(i)));
  Vec a2 = w2.leftCols(10) * a1 + w2.col(10);
  for (Eigen::Index i = 0; i < a2.size(); ++i) a2(i) = 1.0 / (1.0 + std::exp(-a2(i)));
  Vec a3 = w3.leftCols(6) * a2 + w3.col(6);
  for (Eigen::Index i = 0; i < a3.size(); ++i) a3(i) = std::tanh(a3(i));
  Vec phi(13);
  phi << a2, a3;
  const Vec expected = o.A * x + o.theta.transpose() * phi;
  EXPECT_LE((estimated_drift(o, x) - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ObserverStep, EquilibriumStaysPut) {
  ObserverState o = convex_observer();
  o.xhat.setZero();
  for (int k = 0; k < 100; ++k) o = observer_step(o, Vec::Zero(1), o.C * o.xhat, kZeroG, 1e-3);
  EXPECT_EQ(o.xhat, Vec::Zero(2));
}

TEST(ObserverStep, LinearFlowMatchesMatrixExponential) {
  ObserverState o = convex_observer();
  o.K.setZero();
  o.A = mat2(-1.0, 0.5, -0.3, -2.0);
  const Vec x0 = o.xhat;
  for (int k = 0; k < 1000; ++k) o = observer_step(o, Vec::Zero(1), Vec::Zero(1), kZeroG, 1e-3);
  const Vec exact = expm(o.A) * x0;
  EXPECT_LE((o.xhat - exact).norm(), 1e-10);
}

TEST(ObserverStep, ConvexSetStepsStayFinite) {
  const Benchmark b = benchmark_system(BenchmarkId::ConvexSet);
  ObserverState o = convex_observer();
  Vec x(2);
  x << -2.0, 1.0;
  const double dt = 1e-3;
  for (int k = 0; k < 500; ++k) {
    const Vec y = o.C * x;
    const Vec u = Vec::Zero(1);
    o = observer_step(o, u, y, b.plant.effectiveness, dt);
    x = rk4_step([&](const Vec& s, double) { return Vec(b.plant.drift(s) + b.plant.effectiveness(s) * u); }, x,
                 k * dt, dt);
    ASSERT_TRUE(o.xhat.allFinite());
  }
  // with theta = 0 the unmodelled x1^3 term drives the error towards the
  // steady state of e' = (A - K C) e + [0, x1^3], about 3 in norm here
  EXPECT_LT((x - o.xhat).norm(), 5.0);
}

TEST(ObserverStep, NonFiniteStateIsObserverFault) {
  ObserverState o = convex_observer();
  o.xhat(0) = std::numeric_limits<double>::quiet_NaN();
  try {
    observer_step(o, Vec::Zero(1), Vec::Zero(1), kZeroG, 1e-3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ObserverFault);
  }
}

TEST(ObserverStep, LinearPlantDecayRateMatchesSlowestPole) {
  // f(x) = A x exactly and theta = 0, so e' = (A - K C) e. Plant and
  // observer are integrated as one system so y is not held over a step.
  const Mat a = mat2(-0.6, -1.0, 0.0, 0.0);
  const ObserverState o = convex_observer();
  Vec z(4);
  z << -2.0, 1.0, o.xhat;
  const double dt = 1e-3;
  auto rhs = [&](const Vec& w, double) {
    Vec d(4);
    const Vec x = w.head(2);
    d << a * x, observer_rhs(o, o.theta, w.tail(2), Vec::Zero(1), o.C * x, kZeroG);
    return d;
  };
  std::vector<double> err;
  for (int k = 0; k <= 3000; ++k) {
    err.push_back((z.head(2) - z.tail(2)).norm());
    z = rk4_step(rhs, z, k * dt, dt);
  }
  const double rate = -(std::log(err[3000]) - std::log(err[1500])) / 1.5;
  EXPECT_NEAR(rate, 5.0, 0.2 * 5.0);
}

TEST(IclUpdate, EmptyStackLeavesThetaUnchanged) {
  ObserverState o = convex_observer();
  o.theta.setConstant(0.3);
  HistoryStack s(20, 0.5, 13, 2);
  EXPECT_EQ(icl_update(o, s, 1e-3).theta, o.theta);
}

TEST(IclUpdate, ZeroResidualLeavesThetaUnchanged) {
  ObserverState o = convex_observer();
  o.theta.setConstant(0.3);
  HistoryStack s(20, 0.5, 13, 2);
  IclDatum d;
  d.Y = Vec::LinSpaced(13, 0.1, 0.5);
  d.Gu = Vec::Constant(2, 0.2);
  d.Xdiff = o.theta.transpose() * d.Y + d.Gu;
  s.push(d);
  EXPECT_LE(max_abs(icl_update(o, s, 1e-3).theta - o.theta), 1e-15);
}

TEST(IclUpdate, ScalarEulerOracle) {
  DnnSpec d;
  d.widths = {1, 1};
  d.activations = {Activation::TanhSigmoid};
  d.weights = {Mat::Zero(1, 2)};
  ObserverGains g;
  g.k_theta = 1.0;
  g.gamma = Mat::Identity(1, 1);
  g.kappa = 1e-12;
  ObserverState o = make_observer(Vec::Zero(1), -Mat::Identity(1, 1), Mat::Identity(1, 1), Mat::Identity(1, 1),
                                  Mat::Identity(1, 1), d, g);
  o.theta(0, 0) = 0.5;
  HistoryStack s(1, 1e-12, 1, 1);
  IclDatum datum;
  datum.Y = Vec::Ones(1);
  datum.Xdiff = Vec::Constant(1, 2.0);
  datum.Gu = Vec::Zero(1);
  s.push(datum);
  const double dt = 1e-6;
  EXPECT_NEAR(icl_update(o, s, dt).theta(0, 0), 0.5 + dt * (2.0 - 0.5), 1e-8);
  // over a long horizon theta follows 2 - 1.5 e^{-t}
  for (int k = 0; k < 1000; ++k) o = icl_update(o, s, 1e-3);
  EXPECT_NEAR(o.theta(0, 0), 2.0 - 1.5 * std::exp(-1.0), 1e-9);
}

TEST(IclUpdate, ProjectionBoundsTheta) {
  ObserverState o = convex_observer();
  o.gains.theta_bar = 1.0;
  HistoryStack s(1, 0.5, 13, 2);
  IclDatum d;
  d.Y = Vec::Ones(13);
  d.Gu = Vec::Zero(2);
  d.Xdiff = Vec::Constant(2, 1e3);
  s.push(d);
  for (int k = 0; k < 2000; ++k) {
    o = icl_update(o, s, 1e-3);
    ASSERT_LE(o.theta.norm(), 1.1 + 1e-12);
  }
}

TEST(IclUpdate, IdentifiesSyntheticOuterLayer) {
  std::mt19937 rng(15);
  std::normal_distribution<double> nd;
  DnnSpec d;
  d.widths = {2, 4};
  d.activations = {Activation::TanhSigmoid};
  d.weights = {Mat::Zero(4, 3)};
  ObserverGains g;
  g.k_theta = 10.0;
  g.gamma = Mat::Identity(4, 4);
  g.kappa = 0.5;
  ObserverState o = make_observer(Vec::Zero(2), -Mat::Identity(2, 2), row(1, 0), col(1, 0), Mat::Identity(2, 2), d, g);
  Mat theta_star(4, 2);
  for (Eigen::Index i = 0; i < theta_star.size(); ++i) theta_star.data()[i] = nd(rng);
  HistoryStack s(10, 0.5, 4, 2);
  for (int k = 0; k < 10; ++k) {
    IclDatum datum;
    datum.Y = Vec(4);
    for (int i = 0; i < 4; ++i) datum.Y(i) = nd(rng);
    datum.Gu = Vec::Constant(2, nd(rng));
    datum.Xdiff = theta_star.transpose() * datum.Y + datum.Gu;
    s.push(datum);
  }
  for (int k = 0; k < 10000; ++k) o = icl_update(o, s, 1e-3);
  EXPECT_LE((o.theta - theta_star).norm() / theta_star.norm(), 0.01);
}
