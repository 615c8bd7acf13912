#pragma once

// Feed-forward feature network. Inner layers carry a bias column; the
// feature vector is the concatenation of the last `feature_layers` layer
// activations.

#include <nlohmann/json.hpp>

#include <random>
#include <string>
#include <vector>

#include "safeaoc/numerics.hpp"

namespace safeaoc {

enum class Activation { ElliotSym, LogSigmoid, TanhSigmoid };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::ElliotSym: return "elliot_sym";
    case Activation::LogSigmoid: return "log_sigmoid";
    case Activation::TanhSigmoid: return "tanh_sigmoid";
  }
  return "unknown";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "elliot_sym") return Activation::ElliotSym;
  if (s == "log_sigmoid") return Activation::LogSigmoid;
  if (s == "tanh_sigmoid") return Activation::TanhSigmoid;
  throw Error(ErrorKind::Config, "unknown activation '" + s + "'");
}

inline double activate(Activation a, double s) {
  switch (a) {
    case Activation::ElliotSym: return s / (1.0 + std::abs(s));
    case Activation::LogSigmoid: return 1.0 / (1.0 + std::exp(-s));
    case Activation::TanhSigmoid: return std::tanh(s);
  }
  return 0.0;
}

inline double activate_deriv(Activation a, double s) {
  switch (a) {
    case Activation::ElliotSym: {
      const double d = 1.0 + std::abs(s);
      return 1.0 / (d * d);
    }
    case Activation::LogSigmoid: {
      const double v = 1.0 / (1.0 + std::exp(-s));
      return v * (1.0 - v);
    }
    case Activation::TanhSigmoid: {
      const double t = std::tanh(s);
      return 1.0 - t * t;
    }
  }
  return 0.0;
}

struct DnnSpec {
  std::vector<int> widths;  // input n, then one entry per inner layer
  std::vector<Activation> activations;
  std::vector<Mat> weights;  // layer l: widths[l+1] x (widths[l] + 1), bias last
  int feature_layers = 1;

  int layers() const { return static_cast<int>(activations.size()); }

  int feature_dim() const {
    int p = 0;
    for (int l = layers() - feature_layers; l < layers(); ++l) p += widths[static_cast<size_t>(l + 1)];
    return p;
  }

  int parameter_count() const {
    int c = 0;
    for (const Mat& w : weights) c += static_cast<int>(w.size());
    return c;
  }

  void validate() const {
    if (widths.size() < 2 || activations.size() + 1 != widths.size() || weights.size() != activations.size())
      throw Error(ErrorKind::Config, "dnn: widths, activations and weights disagree in layer count");
    if (feature_layers < 1 || feature_layers > layers())
      throw Error(ErrorKind::Config, "dnn: feature_layers must lie in [1, layers]");
    for (size_t l = 0; l < weights.size(); ++l) {
      if (widths[l] < 1 || widths[l + 1] < 1) throw Error(ErrorKind::Config, "dnn: widths must be positive");
      if (weights[l].rows() != widths[l + 1] || weights[l].cols() != widths[l] + 1)
        throw Error(ErrorKind::Config, "dnn: weight shape mismatch in layer " + std::to_string(l));
      if (!weights[l].allFinite()) throw Error(ErrorKind::Config, "dnn: non-finite weights");
    }
  }

  /// Flattened inner weights, layer by layer, column-major within a layer.
  Vec flat() const {
    Vec v(parameter_count());
    Eigen::Index o = 0;
    for (const Mat& w : weights) {
      v.segment(o, w.size()) = Eigen::Map<const Vec>(w.data(), w.size());
      o += w.size();
    }
    return v;
  }

  void set_flat(const Vec& v) {
    Eigen::Index o = 0;
    for (Mat& w : weights) {
      w = Eigen::Map<const Mat>(v.data() + o, w.rows(), w.cols());
      o += w.size();
    }
  }
};

/// Uniform(-s, s) weights with s = 1/sqrt(fan_in + 1).
inline DnnSpec make_dnn(int n, const std::vector<int>& hidden, const std::vector<Activation>& acts,
                        int feature_layers, std::uint64_t seed) {
  DnnSpec d;
  d.widths.push_back(n);
  d.widths.insert(d.widths.end(), hidden.begin(), hidden.end());
  d.activations = acts;
  d.feature_layers = feature_layers;
  std::mt19937_64 rng(seed);
  for (size_t l = 0; l < hidden.size(); ++l) {
    const int in = d.widths[l];
    const double s = 1.0 / std::sqrt(static_cast<double>(in + 1));
    std::uniform_real_distribution<double> ud(-s, s);
    Mat w(d.widths[l + 1], in + 1);
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = ud(rng);
    d.weights.push_back(w);
  }
  d.validate();
  return d;
}

/// 10/6/7 network with Elliot, log-sigmoid and tanh layers; the last two
/// layers form a 13-dimensional feature vector.
inline DnnSpec default_dnn(int n, std::uint64_t seed) {
  return make_dnn(n, {10, 6, 7}, {Activation::ElliotSym, Activation::LogSigmoid, Activation::TanhSigmoid}, 2, seed);
}

struct DnnForward {
  std::vector<Vec> pre;   // pre-activations per layer
  std::vector<Vec> post;  // post[0] = input, post[l+1] = layer l output
  Vec features;
};

inline DnnForward dnn_forward(const DnnSpec& d, const Vec& x) {
  DnnForward f;
  f.post.push_back(x);
  for (int l = 0; l < d.layers(); ++l) {
    const Mat& w = d.weights[static_cast<size_t>(l)];
    const Vec& in = f.post.back();
    Vec s = w.leftCols(in.size()) * in + w.col(in.size());
    Vec a(s.size());
    for (Eigen::Index i = 0; i < s.size(); ++i) a(i) = activate(d.activations[static_cast<size_t>(l)], s(i));
    f.pre.push_back(std::move(s));
    f.post.push_back(std::move(a));
  }
  f.features.resize(d.feature_dim());
  Eigen::Index o = 0;
  for (int l = d.layers() - d.feature_layers; l < d.layers(); ++l) {
    const Vec& a = f.post[static_cast<size_t>(l + 1)];
    f.features.segment(o, a.size()) = a;
    o += a.size();
  }
  return f;
}

inline Vec dnn_features(const DnnSpec& d, const Vec& x) { return dnn_forward(d, x).features; }

/// Jacobian of theta^T features(x) (n_out rows) with respect to the flat
/// inner weights, by reverse accumulation.
inline Mat output_weight_jacobian(const DnnSpec& d, const Mat& theta, const Vec& x) {
  const DnnForward f = dnn_forward(d, x);
  const Eigen::Index nout = theta.cols();
  const int layers = d.layers();
  Mat jac = Mat::Zero(nout, d.parameter_count());

  std::vector<Eigen::Index> offset(static_cast<size_t>(layers));
  Eigen::Index o = 0;
  for (int l = 0; l < layers; ++l) {
    offset[static_cast<size_t>(l)] = o;
    o += d.weights[static_cast<size_t>(l)].size();
  }
  // rows of theta belonging to each feature layer
  std::vector<Eigen::Index> feat_row(static_cast<size_t>(layers), -1);
  Eigen::Index r = 0;
  for (int l = layers - d.feature_layers; l < layers; ++l) {
    feat_row[static_cast<size_t>(l)] = r;
    r += d.widths[static_cast<size_t>(l + 1)];
  }

  for (Eigen::Index k = 0; k < nout; ++k) {
    // g = d output_k / d post[l+1], walked from the last layer down
    Vec g = Vec::Zero(d.widths.back());
    for (int l = layers - 1; l >= 0; --l) {
      const auto ls = static_cast<size_t>(l);
      if (feat_row[ls] >= 0) g += theta.col(k).segment(feat_row[ls], d.widths[ls + 1]);
      Vec delta(g.size());
      for (Eigen::Index i = 0; i < g.size(); ++i) delta(i) = g(i) * activate_deriv(d.activations[ls], f.pre[ls](i));
      const Vec& in = f.post[ls];
      const Mat& w = d.weights[ls];
      // d s_i / d W(i, j) = in_j (bias column: 1); column-major flattening
      for (Eigen::Index j = 0; j < w.cols(); ++j) {
        const double input = j < in.size() ? in(j) : 1.0;
        for (Eigen::Index i = 0; i < w.rows(); ++i) jac(k, offset[ls] + j * w.rows() + i) = delta(i) * input;
      }
      if (l > 0) g = w.leftCols(in.size()).transpose() * delta;
    }
  }
  return jac;
}

inline nlohmann::json dnn_to_json(const DnnSpec& d) {
  nlohmann::json j;
  j["widths"] = d.widths;
  j["feature_layers"] = d.feature_layers;
  std::vector<std::string> acts;
  for (Activation a : d.activations) acts.push_back(to_string(a));
  j["activations"] = acts;
  nlohmann::json ws = nlohmann::json::array();
  for (const Mat& w : d.weights) {
    std::vector<double> rows;
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index c = 0; c < w.cols(); ++c) rows.push_back(w(i, c));
    ws.push_back(rows);
  }
  j["weights"] = ws;
  return j;
}

inline DnnSpec dnn_from_json(const nlohmann::json& j) {
  DnnSpec d;
  try {
    d.widths = j.at("widths").get<std::vector<int>>();
    d.feature_layers = j.value("feature_layers", 1);
    for (const auto& a : j.at("activations")) d.activations.push_back(parse_activation(a.get<std::string>()));
    const auto& ws = j.at("weights");
    if (ws.size() != d.activations.size()) throw Error(ErrorKind::Config, "dnn: weights/activations count mismatch");
    for (size_t l = 0; l < ws.size(); ++l) {
      const auto vals = ws[l].get<std::vector<double>>();
      const int rows = d.widths.at(l + 1);
      const int cols = d.widths.at(l) + 1;
      if (static_cast<int>(vals.size()) != rows * cols)
        throw Error(ErrorKind::Config, "dnn: layer " + std::to_string(l) + " has the wrong number of weights");
      Mat w(rows, cols);
      for (int i = 0; i < rows; ++i)
        for (int c = 0; c < cols; ++c) w(i, c) = vals[static_cast<size_t>(i * cols + c)];
      d.weights.push_back(w);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, std::string("dnn: ") + e.what());
  }
  d.validate();
  return d;
}

}  // namespace safeaoc
