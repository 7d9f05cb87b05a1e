#pragma once

#include <cmath>
#include <map>
#include <string>
#include <string_view>
#include <variant>

#include "hyperat/errors.hpp"
#include "hyperat/tensor.hpp"

namespace hyperat {

// Heavy-ball SGD with coupled weight decay: v = mu v + (g + wd p); p -= lr v.
template <class T>
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(Mat<T>& param, const Mat<T>& grad, const std::string& name, double lr) {
    require_shape(grad, param.rows(), param.cols(), "gradient of " + name);
    auto [it, fresh] = velocity_.try_emplace(name, Mat<T>::Zero(param.rows(), param.cols()));
    Mat<T>& v = it->second;
    v = static_cast<T>(momentum_) * v + grad + static_cast<T>(weight_decay_) * param;
    param -= static_cast<T>(lr) * v;
  }

  const std::map<std::string, Mat<T>>& velocity() const { return velocity_; }

 private:
  double momentum_;
  double weight_decay_;
  std::map<std::string, Mat<T>> velocity_;
};

template <class T>
class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  // Call once per optimizer step, before the per-parameter updates.
  void begin_step() { ++t_; }

  void step(Mat<T>& param, const Mat<T>& grad, const std::string& name, double lr) {
    require_shape(grad, param.rows(), param.cols(), "gradient of " + name);
    if (t_ == 0) throw ConfigError("Adam::begin_step was not called");
    auto& s = state_[name];
    if (s.m.size() == 0) {
      s.m = Mat<T>::Zero(param.rows(), param.cols());
      s.v = Mat<T>::Zero(param.rows(), param.cols());
    }
    Mat<T> g = grad;
    if (weight_decay_ != 0.0) g += static_cast<T>(weight_decay_) * param;
    s.m = static_cast<T>(beta1_) * s.m + static_cast<T>(1 - beta1_) * g;
    s.v = static_cast<T>(beta2_) * s.v + static_cast<T>(1 - beta2_) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    param.array() -= static_cast<T>(lr / c1) * s.m.array() /
                     ((s.v.array() / static_cast<T>(c2)).sqrt() + static_cast<T>(eps_));
  }

 private:
  struct Moments {
    Mat<T> m, v;
  };
  double beta1_, beta2_, eps_, weight_decay_;
  long t_ = 0;
  std::map<std::string, Moments> state_;
};

enum class OptimizerKind { Sgd, Adam };

inline std::string_view optimizer_name(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer '" + std::string(s) + "' (expected sgd or adam)");
}

// Either optimizer behind one interface; momentum is Adam's beta1 when kind == Adam.
template <class T>
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double momentum, double weight_decay)
      : impl_(kind == OptimizerKind::Sgd ? Impl(Sgd<T>(momentum, weight_decay))
                                         : Impl(Adam<T>(momentum, 0.999, 1e-8, weight_decay))) {}

  void begin_step() {
    if (auto* a = std::get_if<Adam<T>>(&impl_)) a->begin_step();
  }
  void step(Mat<T>& param, const Mat<T>& grad, const std::string& name, double lr) {
    std::visit([&](auto& o) { o.step(param, grad, name, lr); }, impl_);
  }

 private:
  using Impl = std::variant<Sgd<T>, Adam<T>>;
  Impl impl_;
};

}  // namespace hyperat
