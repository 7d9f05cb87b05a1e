#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hyperat/errors.hpp"
#include "hyperat/losses.hpp"
#include "hyperat/tensor.hpp"

namespace hyperat {

// A classifier whose logits can be differentiated with respect to its input.
template <class M>
concept DifferentiableClassifier = requires(const M& m, const Mat<typename M::Scalar>& x, typename M::Tape& tape) {
  { m.logits(x) } -> std::convertible_to<Mat<typename M::Scalar>>;
  { m.forward(x, &tape) } -> std::convertible_to<Mat<typename M::Scalar>>;
  { m.input_gradient(tape, x) } -> std::convertible_to<Mat<typename M::Scalar>>;
};

// l_inf attack budget, in pixel units.
struct AttackBudget {
  double epsilon = 0.1;
  double step_size = 0.02;
  int iterations = 10;
  int restarts = 1;
  bool random_start = true;

  void validate() const {
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("attack epsilon must be >= 0");
    if (epsilon > 0.0 && !(step_size > 0.0 && step_size <= epsilon)) {
      throw ConfigError("attack step size must satisfy 0 < step <= epsilon");
    }
    if (iterations < 1) throw ConfigError("attack iterations must be >= 1");
    if (restarts < 1) throw ConfigError("attack restarts must be >= 1");
  }

  bool operator==(const AttackBudget&) const = default;
};

template <class T>
struct AdvBatch {
  Mat<T> x_adv;
  Mat<T> delta;
};

namespace detail {

// Largest T not exceeding eps, so the double-precision bound also holds.
template <class T>
T epsilon_as(double eps) {
  T e = static_cast<T>(eps);
  while (static_cast<double>(e) > eps) e = std::nextafter(e, T(0));
  return e;
}

// Projects onto {|v - x| <= eps} intersected with [0, 1], guaranteeing the
// bound on the rounded difference as well.
template <class T>
void project_linf(Mat<T>& v, const Mat<T>& x, T eps) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const T xi = x.data()[i];
    T vi = std::clamp(v.data()[i], xi - eps, xi + eps);
    vi = std::clamp(vi, T(0), T(1));
    while (vi - xi > eps) vi = std::nextafter(vi, xi);
    while (xi - vi > eps) vi = std::nextafter(vi, xi);
    v.data()[i] = vi;
  }
}

template <class T>
PerExampleLoss<T> attack_loss(const Mat<T>& logits, std::span<const int> y, LossKind kind,
                              const Mat<T>& clean_probs) {
  switch (kind) {
    case LossKind::CrossEntropy: return cross_entropy_per_example(logits, y);
    case LossKind::KlVsClean: return kl_per_example(clean_probs, logits);
    case LossKind::CwMargin: return cw_margin_per_example(logits, y);
  }
  throw ConfigError("unknown attack loss");
}

}  // namespace detail

// Projected sign-gradient ascent on `kind`, with optional uniform random
// start. With several restarts the per-example result of maximal final loss
// is kept. Deterministic for a fixed seed.
template <DifferentiableClassifier Model>
AdvBatch<typename Model::Scalar> pgd_attack(const Model& model, const Mat<typename Model::Scalar>& x,
                                            std::span<const int> y, const AttackBudget& budget, LossKind kind,
                                            std::uint64_t seed) {
  using T = typename Model::Scalar;
  budget.validate();
  if (static_cast<Eigen::Index>(y.size()) != x.rows()) {
    throw DimensionError("label count " + std::to_string(y.size()) + " != batch " + std::to_string(x.rows()));
  }
  if (x.size() > 0 && (x.minCoeff() < T(0) || x.maxCoeff() > T(1))) {
    throw ConfigError("attack input must lie in [0, 1]");
  }
  AdvBatch<T> out;
  if (budget.epsilon == 0.0 || x.rows() == 0) {
    out.x_adv = x;
    out.delta = Mat<T>::Zero(x.rows(), x.cols());
    return out;
  }

  const T eps = detail::epsilon_as<T>(budget.epsilon);
  const T step = static_cast<T>(budget.step_size);
  Mat<T> clean_probs;
  if (kind == LossKind::KlVsClean) clean_probs = softmax_rows(model.logits(x));

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> start(-budget.epsilon, budget.epsilon);
  Mat<T> best = x;
  std::vector<T> best_loss(static_cast<std::size_t>(x.rows()), -std::numeric_limits<T>::infinity());

  for (int r = 0; r < budget.restarts; ++r) {
    Mat<T> adv = x;
    if (budget.random_start) {
      for (Eigen::Index i = 0; i < adv.size(); ++i) adv.data()[i] += static_cast<T>(start(rng));
      detail::project_linf(adv, x, eps);
    }
    for (int it = 0; it < budget.iterations; ++it) {
      typename Model::Tape tape;
      const Mat<T> logits = model.forward(adv, &tape);
      const auto loss = detail::attack_loss(logits, y, kind, clean_probs);
      const Mat<T> g = model.input_gradient(tape, loss.grad);
      for (Eigen::Index i = 0; i < g.rows(); ++i) {
        if (!g.row(i).allFinite()) {
          throw NumericalError("non-finite input gradient for batch index " + std::to_string(i) +
                               " at attack iteration " + std::to_string(it));
        }
      }
      adv += step * g.unaryExpr([](T v) { return static_cast<T>((v > T(0)) - (v < T(0))); });
      detail::project_linf(adv, x, eps);
    }
    const auto final_loss = detail::attack_loss(model.logits(adv), y, kind, clean_probs);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const T v = final_loss.values[static_cast<std::size_t>(i)];
      if (v > best_loss[static_cast<std::size_t>(i)] || r == 0) {
        best_loss[static_cast<std::size_t>(i)] = v;
        best.row(i) = adv.row(i);
      }
    }
  }
  out.delta = best - x;
  out.x_adv = std::move(best);
  return out;
}

// Single full-size sign step from the clean input.
template <DifferentiableClassifier Model>
AdvBatch<typename Model::Scalar> fgsm_attack(const Model& model, const Mat<typename Model::Scalar>& x,
                                             std::span<const int> y, double epsilon,
                                             LossKind kind = LossKind::CrossEntropy) {
  return pgd_attack(model, x, y, AttackBudget{epsilon, epsilon, 1, 1, false}, kind, 0);
}

// Linear classifier logits = x W^T + b; used by tests and as a reference model.
template <class T>
struct LinearClassifier {
  using Scalar = T;
  struct Tape {};
  Mat<T> weight;  // classes x inputs
  Mat<T> bias;    // 1 x classes

  Mat<T> logits(const Mat<T>& x) const {
    Mat<T> z = x * weight.transpose();
    z.rowwise() += bias.row(0);
    return z;
  }
  Mat<T> forward(const Mat<T>& x, Tape*) const { return logits(x); }
  Mat<T> input_gradient(const Tape&, const Mat<T>& dlogits) const { return dlogits * weight; }
};

}  // namespace hyperat
