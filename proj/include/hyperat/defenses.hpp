#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "hyperat/errors.hpp"
#include "hyperat/losses.hpp"
#include "hyperat/tensor.hpp"

namespace hyperat {

// Hyperparameters of the defense objectives; none are prescribed by the
// method itself, these follow the usual defaults of each defense.
struct DefenseParams {
  double trades_beta = 6.0;
  double mart_lambda = 5.0;
  DklOptions dkl{};
  double score_beta = 6.0;
  bool operator==(const DefenseParams&) const = default;
};

inline const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> ids{"vanilla_at", "trades", "mart", "dkl", "score"};
  return ids;
}

// The four defenses combined by default ("score" is an opt-in extension slot).
inline const std::vector<std::string>& default_methods() {
  static const std::vector<std::string> ids{"vanilla_at", "trades", "mart", "dkl"};
  return ids;
}

struct DefenseSpec {
  std::string method;
  LossKind inner = LossKind::CrossEntropy;
  bool uses_clean_branch = false;
  DefenseParams params;
};

inline DefenseSpec make_defense(std::string_view method, const DefenseParams& params = {}) {
  DefenseSpec d;
  d.method = std::string(method);
  d.params = params;
  if (method == "vanilla_at") {
    d.inner = LossKind::CrossEntropy;
    d.uses_clean_branch = false;
  } else if (method == "mart") {
    d.inner = LossKind::CrossEntropy;
    d.uses_clean_branch = true;
    if (params.mart_lambda <= 0) throw ConfigError("mart lambda must be positive");
  } else if (method == "trades") {
    d.inner = LossKind::KlVsClean;
    d.uses_clean_branch = true;
    if (params.trades_beta <= 0) throw ConfigError("trades beta must be positive");
  } else if (method == "dkl") {
    d.inner = LossKind::KlVsClean;
    d.uses_clean_branch = true;
    if (params.dkl.beta <= 0 || params.dkl.w_mse < 0 || params.dkl.w_ce < 0) {
      throw ConfigError("dkl weights must be positive");
    }
  } else if (method == "score") {
    d.inner = LossKind::KlVsClean;
    d.uses_clean_branch = true;
    if (params.score_beta <= 0) throw ConfigError("score beta must be positive");
  } else {
    throw LookupError("unknown defense method '" + std::string(method) + "'");
  }
  return d;
}

// Evaluates the defense objective L_tau on precomputed logits. `clean_logits`
// may be empty for defenses that do not use the clean pass.
template <class T>
ObjectiveGrad<T> defense_objective(const DefenseSpec& d, const Mat<T>& clean_logits, const Mat<T>& adv_logits,
                                   std::span<const int> y) {
  if (d.uses_clean_branch && clean_logits.size() == 0) {
    throw ConfigError("defense '" + d.method + "' requires clean logits");
  }
  if (d.method == "vanilla_at") return loss_vanilla_at(adv_logits, y);
  if (d.method == "trades") return loss_trades(clean_logits, adv_logits, y, d.params.trades_beta);
  if (d.method == "mart") return loss_mart(clean_logits, adv_logits, y, d.params.mart_lambda);
  if (d.method == "dkl") return loss_dkl(clean_logits, adv_logits, y, d.params.dkl);
  if (d.method == "score") return loss_score(clean_logits, adv_logits, y, d.params.score_beta);
  throw LookupError("unknown defense method '" + d.method + "'");
}

// Model-level convenience: runs the forward passes and returns the objective value.
template <class Model>
typename Model::Scalar defense_loss(const DefenseSpec& d, const Model& model, const Mat<typename Model::Scalar>& x,
                                    const Mat<typename Model::Scalar>& x_adv, std::span<const int> y) {
  using T = typename Model::Scalar;
  const Mat<T> clean = d.uses_clean_branch ? model.logits(x) : Mat<T>();
  return defense_objective(d, clean, model.logits(x_adv), y).value;
}

}  // namespace hyperat
