#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "predinet/errors.hpp"
#include "predinet/random.hpp"
#include "predinet/tensor.hpp"

namespace predinet {

enum class InitKind { truncated_normal, zeros };

struct InitScheme {
  InitKind kind = InitKind::truncated_normal;
  std::size_t fan_in = 1;
  double gain = 1.0;

  static InitScheme weights(std::size_t fan_in, double gain = 1.0) { return {InitKind::truncated_normal, fan_in, gain}; }
  static InitScheme zeros() { return {InitKind::zeros, 1, 0.0}; }

  /// Variance of the drawn values.
  double target_variance() const { return kind == InitKind::zeros ? 0.0 : gain * gain / static_cast<double>(fan_in); }
};

// Standard deviation of N(0,1) truncated to [-2, 2].
inline constexpr double kTruncatedStd = 0.87962566103423978;

/// Weights: normal truncated at two standard deviations, rescaled so the
/// resulting standard deviation is gain/sqrt(fan_in). Biases: zeros.
template <class T = float>
Tensor<T> init_params(const Shape& shape, Rng& rng, InitScheme scheme) {
  Tensor<T> t(shape);
  if (scheme.kind == InitKind::zeros) return t;
  if (scheme.fan_in == 0) throw ConfigError("init_params: fan_in must be positive");
  const double sigma = scheme.gain / std::sqrt(static_cast<double>(scheme.fan_in)) / kTruncatedStd;
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : t.data()) {
    double z;
    do {
      z = normal(rng);
    } while (std::abs(z) > 2.0);
    v = static_cast<T>(z * sigma);
  }
  return t;
}

enum class OptimizerKind { sgd, adam };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adam)");
}

/// Optimizer hyperparameters and per-parameter moment buffers. Adam uses the
/// TensorFlow defaults beta1=0.9, beta2=0.999, epsilon=1e-8 and the
/// bias-corrected step size lr * sqrt(1 - beta2^t) / (1 - beta1^t).
template <class T = float>
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::sgd;
  T learning_rate = T(0.01);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T epsilon = T(1e-8);
  std::uint64_t step = 0;
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;

  static OptimizerState sgd(T lr) {
    OptimizerState s;
    s.learning_rate = lr;
    return s;
  }
  static OptimizerState adam(T lr) {
    OptimizerState s;
    s.kind = OptimizerKind::adam;
    s.learning_rate = lr;
    return s;
  }
};

/// Applies one update to every tensor in `params` and zeroes their grads.
/// The moment buffers are bound to `params` by position.
template <class T>
void optimizer_step(OptimizerState<T>& state, const std::vector<Tensor<T>*>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->has_grad()) {
      throw UsageError("optimizer_step: parameter " + std::to_string(i) + " has no gradient");
    }
  }
  ++state.step;
  if (state.kind == OptimizerKind::sgd) {
    for (auto* p : params) {
      auto g = p->grad();
      auto d = p->data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= state.learning_rate * g[i];
      p->zero_grad();
    }
    return;
  }
  if (state.first_moment.empty()) {
    for (auto* p : params) {
      state.first_moment.emplace_back(p->shape());
      state.second_moment.emplace_back(p->shape());
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw UsageError("optimizer_step: parameter list changed size between steps");
  }
  const double t = static_cast<double>(state.step);
  const T lr_t = static_cast<T>(static_cast<double>(state.learning_rate) *
                                std::sqrt(1.0 - std::pow(static_cast<double>(state.beta2), t)) /
                                (1.0 - std::pow(static_cast<double>(state.beta1), t)));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto* p = params[k];
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    if (m.shape() != p->shape()) throw UsageError("optimizer_step: moment shape does not match parameter");
    auto g = p->grad();
    auto d = p->data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      m[i] = state.beta1 * m[i] + (T{1} - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (T{1} - state.beta2) * g[i] * g[i];
      d[i] -= lr_t * m[i] / (std::sqrt(v[i]) + state.epsilon);
    }
    p->zero_grad();
  }
}

}  // namespace predinet
