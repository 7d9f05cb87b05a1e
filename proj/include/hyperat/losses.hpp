#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hyperat/errors.hpp"
#include "hyperat/tensor.hpp"

namespace hyperat {

// Loss maximized by the attack's inner loop.
enum class LossKind { CrossEntropy, KlVsClean, CwMargin };

inline std::string_view loss_kind_name(LossKind k) {
  switch (k) {
    case LossKind::CrossEntropy: return "cross_entropy";
    case LossKind::KlVsClean: return "kl_vs_clean";
    case LossKind::CwMargin: return "cw_margin";
  }
  return "?";
}

inline LossKind parse_loss_kind(std::string_view s) {
  if (s == "cross_entropy") return LossKind::CrossEntropy;
  if (s == "kl_vs_clean") return LossKind::KlVsClean;
  if (s == "cw_margin") return LossKind::CwMargin;
  throw ConfigError("unknown loss kind '" + std::string(s) + "'");
}

inline constexpr double kProbClamp = 1e-12;

// KL(p || q) for probability vectors; both are clamped to [1e-12, 1] before
// taking logs.
template <class T>
T kl_divergence(std::span<const T> p, std::span<const T> q) {
  if (p.size() != q.size()) {
    throw DimensionError("kl_divergence: length " + std::to_string(p.size()) + " vs " + std::to_string(q.size()));
  }
  T out = T(0);
  for (std::size_t j = 0; j < p.size(); ++j) {
    const T pj = std::clamp(p[j], static_cast<T>(kProbClamp), T(1));
    const T qj = std::clamp(q[j], static_cast<T>(kProbClamp), T(1));
    out += pj * std::log(pj / qj);
  }
  return out;
}

template <class T>
T entropy(std::span<const T> p) {
  T out = T(0);
  for (T pj : p) {
    const T c = std::clamp(pj, static_cast<T>(kProbClamp), T(1));
    out -= c * std::log(c);
  }
  return out;
}

// Decoupled divergence between two probability vectors:
//   w_mse * sum_j w_j (p_j - q_j)^2  +  w_ce * (-sum_j p_j log q_j).
// Empty `class_weights` means equal unit weights.
template <class T>
T decoupled_divergence(std::span<const T> p, std::span<const T> q, std::span<const double> class_weights,
                       double w_mse, double w_ce) {
  if (p.size() != q.size()) throw DimensionError("decoupled_divergence: length mismatch");
  if (!class_weights.empty() && class_weights.size() != p.size()) {
    throw DimensionError("decoupled_divergence: class weight count mismatch");
  }
  T sq = T(0), ce = T(0);
  for (std::size_t j = 0; j < p.size(); ++j) {
    const T w = class_weights.empty() ? T(1) : static_cast<T>(class_weights[j]);
    sq += w * (p[j] - q[j]) * (p[j] - q[j]);
    ce -= p[j] * std::log(std::clamp(q[j], static_cast<T>(kProbClamp), T(1)));
  }
  return static_cast<T>(w_mse) * sq + static_cast<T>(w_ce) * ce;
}

// Per-example losses with the gradient of their SUM with respect to logits.
template <class T>
struct PerExampleLoss {
  std::vector<T> values;
  Mat<T> grad;
};

// Mean objective over a batch, with gradients with respect to the clean and
// adversarial logits (d_clean is empty when the objective ignores the clean pass).
template <class T>
struct ObjectiveGrad {
  T value = T(0);
  Mat<T> d_clean;
  Mat<T> d_adv;
};

namespace detail {

template <class T>
void check_labels(const Mat<T>& logits, std::span<const int> y) {
  if (static_cast<Eigen::Index>(y.size()) != logits.rows()) {
    throw DimensionError("label count " + std::to_string(y.size()) + " != batch " + std::to_string(logits.rows()));
  }
  for (int label : y) {
    if (label < 0 || label >= logits.cols()) throw DimensionError("label " + std::to_string(label) + " out of range");
  }
}

}  // namespace detail

template <class T>
PerExampleLoss<T> cross_entropy_per_example(const Mat<T>& logits, std::span<const int> y) {
  detail::check_labels(logits, y);
  const Mat<T> logp = log_softmax_rows(logits);
  PerExampleLoss<T> out;
  out.values.resize(y.size());
  out.grad = logp.array().exp().matrix();
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    out.values[static_cast<std::size_t>(i)] = -logp(i, y[static_cast<std::size_t>(i)]);
    out.grad(i, y[static_cast<std::size_t>(i)]) -= T(1);
  }
  return out;
}

template <class T>
T mean_cross_entropy(const Mat<T>& logits, std::span<const int> y) {
  const auto ce = cross_entropy_per_example(logits, y);
  T s = T(0);
  for (T v : ce.values) s += v;
  return s / static_cast<T>(ce.values.size());
}

// Margin of the strongest wrong class over the true class: z_top_other - z_y.
// Positive iff the example is misclassified.
template <class T>
PerExampleLoss<T> cw_margin_per_example(const Mat<T>& logits, std::span<const int> y) {
  if (logits.cols() < 2) throw ConfigError("cw margin loss needs at least two classes");
  detail::check_labels(logits, y);
  PerExampleLoss<T> out;
  out.values.resize(y.size());
  out.grad = Mat<T>::Zero(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int yi = y[static_cast<std::size_t>(i)];
    Eigen::Index best = -1;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      if (j == yi) continue;
      if (best < 0 || logits(i, j) > logits(i, best)) best = j;
    }
    out.values[static_cast<std::size_t>(i)] = logits(i, best) - logits(i, yi);
    out.grad(i, best) = T(1);
    out.grad(i, yi) = T(-1);
  }
  return out;
}

template <class T>
std::vector<T> cw_margin_loss(const Mat<T>& logits, std::span<const int> y) {
  return cw_margin_per_example(logits, y).values;
}

// KL(p_clean || softmax(adv_logits)) per example; gradient w.r.t. adv logits only.
template <class T>
PerExampleLoss<T> kl_per_example(const Mat<T>& clean_probs, const Mat<T>& adv_logits) {
  require_shape(clean_probs, adv_logits.rows(), adv_logits.cols(), "clean probabilities");
  const Mat<T> logq = log_softmax_rows(adv_logits);
  PerExampleLoss<T> out;
  out.values.resize(static_cast<std::size_t>(adv_logits.rows()));
  for (Eigen::Index i = 0; i < adv_logits.rows(); ++i) {
    T v = T(0);
    for (Eigen::Index j = 0; j < adv_logits.cols(); ++j) {
      const T p = clean_probs(i, j);
      if (p > T(0)) v += p * (std::log(p) - logq(i, j));
    }
    out.values[static_cast<std::size_t>(i)] = v;
  }
  out.grad = logq.array().exp().matrix() - clean_probs;
  return out;
}

// ---------------------------------------------------------------------------
// Defense objectives. All are batch means.
// ---------------------------------------------------------------------------

template <class T>
ObjectiveGrad<T> loss_vanilla_at(const Mat<T>& adv_logits, std::span<const int> y) {
  auto ce = cross_entropy_per_example(adv_logits, y);
  const T n = static_cast<T>(y.size());
  ObjectiveGrad<T> out;
  for (T v : ce.values) out.value += v;
  out.value /= n;
  out.d_adv = ce.grad / n;
  return out;
}

namespace detail {

// Per-example KL(softmax(zc) || softmax(za)) with gradients through both branches.
template <class T>
struct KlTerms {
  Mat<T> p, q, logp, logq;
  std::vector<T> kl;
  Mat<T> d_clean;  // d KL_i / d zc (row i)
  Mat<T> d_adv;    // d KL_i / d za
};

template <class T>
KlTerms<T> kl_terms(const Mat<T>& clean_logits, const Mat<T>& adv_logits) {
  KlTerms<T> k;
  k.logp = log_softmax_rows(clean_logits);
  k.logq = log_softmax_rows(adv_logits);
  k.p = k.logp.array().exp().matrix();
  k.q = k.logq.array().exp().matrix();
  const Mat<T> diff = k.logp - k.logq;
  k.kl.resize(static_cast<std::size_t>(clean_logits.rows()));
  for (Eigen::Index i = 0; i < diff.rows(); ++i) k.kl[static_cast<std::size_t>(i)] = k.p.row(i).dot(diff.row(i));
  k.d_clean = softmax_backward(k.p, diff);
  k.d_adv = k.q - k.p;
  return k;
}

}  // namespace detail

template <class T>
ObjectiveGrad<T> loss_trades(const Mat<T>& clean_logits, const Mat<T>& adv_logits, std::span<const int> y,
                             double beta) {
  require_shape(adv_logits, clean_logits.rows(), clean_logits.cols(), "adversarial logits");
  auto ce = cross_entropy_per_example(clean_logits, y);
  auto kl = detail::kl_terms(clean_logits, adv_logits);
  const T n = static_cast<T>(y.size());
  const T b = static_cast<T>(beta);
  ObjectiveGrad<T> out;
  for (std::size_t i = 0; i < y.size(); ++i) out.value += ce.values[i] + b * kl.kl[i];
  out.value /= n;
  out.d_clean = (ce.grad + b * kl.d_clean) / n;
  out.d_adv = (b * kl.d_adv) / n;
  return out;
}

// Boosted CE on the adversarial pass plus a KL term weighted by the clean
// misclassification confidence (1 - p_y(x)).
template <class T>
ObjectiveGrad<T> loss_mart(const Mat<T>& clean_logits, const Mat<T>& adv_logits, std::span<const int> y,
                           double lambda) {
  require_shape(adv_logits, clean_logits.rows(), clean_logits.cols(), "adversarial logits");
  detail::check_labels(adv_logits, y);
  auto kl = detail::kl_terms(clean_logits, adv_logits);
  const T n = static_cast<T>(y.size());
  const T lam = static_cast<T>(lambda);
  const auto C = adv_logits.cols();
  ObjectiveGrad<T> out;
  out.d_clean = Mat<T>::Zero(clean_logits.rows(), C);
  Mat<T> g_q = Mat<T>::Zero(adv_logits.rows(), C);  // dBCE/dq
  Mat<T> d_adv_reg(adv_logits.rows(), C);
  for (Eigen::Index i = 0; i < adv_logits.rows(); ++i) {
    const int yi = y[static_cast<std::size_t>(i)];
    Eigen::Index other = -1;
    for (Eigen::Index j = 0; j < C; ++j) {
      if (j == yi) continue;
      if (other < 0 || kl.q(i, j) > kl.q(i, other)) other = j;
    }
    const T one_minus = std::max(T(1) - kl.q(i, other), static_cast<T>(kProbClamp));
    const T bce = -kl.logq(i, yi) - std::log(one_minus);
    g_q(i, other) = T(1) / one_minus;

    const T py = kl.p(i, yi);
    const T w = T(1) - py;
    const T kli = kl.kl[static_cast<std::size_t>(i)];
    out.value += bce + lam * kli * w;

    // d(-p_y)/dzc = -p_y (e_y - p)
    Mat<T> dpy = -py * kl.p.row(i);
    dpy(0, yi) += py;
    out.d_clean.row(i) = lam * (w * kl.d_clean.row(i) - kli * dpy);
    d_adv_reg.row(i) = lam * w * kl.d_adv.row(i);
  }
  // -log q_y contributes (q - e_y); the wrong-class term goes through the softmax Jacobian.
  Mat<T> d_ce = kl.q;
  for (Eigen::Index i = 0; i < adv_logits.rows(); ++i) d_ce(i, y[static_cast<std::size_t>(i)]) -= T(1);
  out.d_adv = (d_ce + softmax_backward(kl.q, g_q) + d_adv_reg) / n;
  out.d_clean /= n;
  out.value /= n;
  return out;
}

struct DklOptions {
  double beta = 6.0;
  double w_mse = 1.0;
  double w_ce = 1.0;
  std::vector<double> class_weights;  // empty: equal weights
  bool stop_gradient = true;          // stop-gradient on p(x) inside the CE part
  bool operator==(const DklOptions&) const = default;
};

// CE(f(x), y) + beta * mean D(p(x), p(x_adv)) with the decoupled divergence D.
template <class T>
ObjectiveGrad<T> loss_dkl(const Mat<T>& clean_logits, const Mat<T>& adv_logits, std::span<const int> y,
                          const DklOptions& opt) {
  require_shape(adv_logits, clean_logits.rows(), clean_logits.cols(), "adversarial logits");
  const auto C = clean_logits.cols();
  if (!opt.class_weights.empty() && static_cast<Eigen::Index>(opt.class_weights.size()) != C) {
    throw DimensionError("dkl class weight count mismatch");
  }
  auto ce = cross_entropy_per_example(clean_logits, y);
  const Mat<T> logp = log_softmax_rows(clean_logits);
  const Mat<T> logq = log_softmax_rows(adv_logits);
  const Mat<T> p = logp.array().exp().matrix();
  const Mat<T> q = logq.array().exp().matrix();
  const T n = static_cast<T>(y.size());
  const T b = static_cast<T>(opt.beta);
  const T wm = static_cast<T>(opt.w_mse);
  const T wc = static_cast<T>(opt.w_ce);

  Mat<T> w(1, C);
  for (Eigen::Index j = 0; j < C; ++j) {
    w(0, j) = opt.class_weights.empty() ? T(1) : static_cast<T>(opt.class_weights[static_cast<std::size_t>(j)]);
  }
  const Mat<T> diff = p - q;
  ObjectiveGrad<T> out;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const T sq = (diff.row(i).array().square() * w.row(0).array()).sum();
    const T cross = -p.row(i).dot(logq.row(i));
    out.value += ce.values[static_cast<std::size_t>(i)] + b * (wm * sq + wc * cross);
  }
  out.value /= n;

  const Mat<T> g_sq = T(2) * (diff.array().rowwise() * w.row(0).array()).matrix();
  Mat<T> d_clean = ce.grad + b * wm * softmax_backward(p, g_sq);
  if (!opt.stop_gradient) d_clean += b * wc * softmax_backward(p, Mat<T>(-logq));
  Mat<T> d_adv = b * wm * softmax_backward(q, Mat<T>(-g_sq)) + b * wc * (q - p);
  out.d_clean = d_clean / n;
  out.d_adv = d_adv / n;
  return out;
}

// CE(f(x), y) + beta * mean ||p(x) - p(x_adv)||_2.
template <class T>
ObjectiveGrad<T> loss_score(const Mat<T>& clean_logits, const Mat<T>& adv_logits, std::span<const int> y,
                            double beta) {
  require_shape(adv_logits, clean_logits.rows(), clean_logits.cols(), "adversarial logits");
  auto ce = cross_entropy_per_example(clean_logits, y);
  const Mat<T> p = softmax_rows(clean_logits);
  const Mat<T> q = softmax_rows(adv_logits);
  const T n = static_cast<T>(y.size());
  const T b = static_cast<T>(beta);
  Mat<T> g = Mat<T>::Zero(p.rows(), p.cols());
  ObjectiveGrad<T> out;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const T norm = (p.row(i) - q.row(i)).norm();
    out.value += ce.values[static_cast<std::size_t>(i)] + b * norm;
    if (norm > static_cast<T>(1e-12)) g.row(i) = (p.row(i) - q.row(i)) / norm;
  }
  out.value /= n;
  out.d_clean = (ce.grad + b * softmax_backward(p, g)) / n;
  out.d_adv = (b * softmax_backward(q, Mat<T>(-g))) / n;
  return out;
}

}  // namespace hyperat
