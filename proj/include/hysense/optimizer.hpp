#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hysense/errors.hpp"
#include "hysense/network.hpp"

namespace hysense {

enum class BoundMode {
  adabound,    // dynamic bounds converging to lr2
  adam_limit,  // bounds (0, inf): plain Adam
  sgd_limit,   // bounds (lr2, lr2): SGD with momentum-averaged gradient
};

struct AdaBoundConfig {
  double lr1 = 1e-3;  // initial (Adam-phase) learning rate
  double lr2 = 1e-2;  // final learning rate both bounds converge to
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  BoundMode mode = BoundMode::adabound;

  void validate() const {
    if (!(lr1 > 0) || !(lr2 > 0)) throw ConfigError("AdaBound: learning rates must be positive");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
      throw ConfigError("AdaBound: betas must lie in [0, 1)");
    if (!(epsilon > 0)) throw ConfigError("AdaBound: epsilon must be positive");
  }
};

struct RateBounds {
  double lower;
  double upper;
};

/// lower(t) = lr2 (1 - 1/((1-beta2) t + 1)), upper(t) = lr2 (1 + 1/((1-beta2) t)).
inline RateBounds bound_schedule(std::uint64_t t, const AdaBoundConfig& c) {
  if (t < 1) throw ConfigError("bound_schedule: step index starts at 1");
  const double gamma = 1.0 - c.beta2;
  const double td = static_cast<double>(t);
  return {c.lr2 * (1.0 - 1.0 / (gamma * td + 1.0)), c.lr2 * (1.0 + 1.0 / (gamma * td))};
}

inline RateBounds effective_bounds(std::uint64_t t, const AdaBoundConfig& c) {
  switch (c.mode) {
    case BoundMode::adam_limit:
      return {0.0, std::numeric_limits<double>::infinity()};
    case BoundMode::sgd_limit:
      return {c.lr2, c.lr2};
    case BoundMode::adabound:
      break;
  }
  return bound_schedule(t, c);
}

template <typename T>
struct ParamView {
  std::string_view name;
  std::span<T> value;
  std::span<const T> grad;
};

/// AdaBound with bias correction folded into the step size:
///   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
///   rate = clip(lr1 sqrt(1-b2^t)/(1-b1^t) / (sqrt(v) + eps), lower(t), upper(t))
///   theta <- theta - rate * m
template <typename T>
class AdaBound {
 public:
  struct Moments {
    std::vector<T> m;
    std::vector<T> v;
  };

  explicit AdaBound(AdaBoundConfig config) : config_(config) { config_.validate(); }

  const AdaBoundConfig& config() const { return config_; }
  // Number of completed steps; the next step uses t = step_count() + 1.
  std::uint64_t step_count() const { return steps_; }

  const Moments* moments(std::string_view name) const {
    auto it = state_.find(std::string(name));
    return it == state_.end() ? nullptr : &it->second;
  }

  /// Applies one update to every view. A non-finite gradient anywhere aborts
  /// the step before any parameter or moment is touched.
  void step(std::span<const ParamView<T>> params) {
    for (const auto& p : params) {
      if (p.value.size() != p.grad.size())
        throw ShapeError("AdaBound: gradient size mismatch for " + std::string(p.name));
      for (T g : p.grad)
        if (!std::isfinite(g))
          throw NumericError("AdaBound: non-finite gradient in " + std::string(p.name));
    }
    const std::uint64_t t = steps_ + 1;
    const double td = static_cast<double>(t);
    const double step_size = config_.lr1 * std::sqrt(1.0 - std::pow(config_.beta2, td)) /
                             (1.0 - std::pow(config_.beta1, td));
    const auto bounds = effective_bounds(t, config_);
    const double b1 = config_.beta1, b2 = config_.beta2;
    for (const auto& p : params) {
      auto& st = state_[std::string(p.name)];
      if (st.m.size() != p.value.size()) {
        st.m.assign(p.value.size(), T{0});
        st.v.assign(p.value.size(), T{0});
      }
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        const double m = b1 * st.m[i] + (1.0 - b1) * g;
        const double v = b2 * st.v[i] + (1.0 - b2) * g * g;
        st.m[i] = static_cast<T>(m);
        st.v[i] = static_cast<T>(v);
        const double rate =
            std::clamp(step_size / (std::sqrt(v) + config_.epsilon), bounds.lower, bounds.upper);
        p.value[i] = static_cast<T>(p.value[i] - rate * m);
      }
    }
    steps_ = t;
  }

  /// Steps every trainable parameter of a model using the gradients left by
  /// its most recent backward. Frozen parameters are untouched.
  void step(Model<T>& model) {
    std::vector<ParamView<T>> views;
    for (auto& e : model.parameters())
      if (!e.buffer && e.trainable) views.push_back({e.name, e.value->data(), e.grad->data()});
    step(std::span<const ParamView<T>>(views));
  }

 private:
  AdaBoundConfig config_;
  std::uint64_t steps_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace hysense
