#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hyperat/attacks.hpp"
#include "hyperat/backbone.hpp"
#include "hyperat/hyperlora.hpp"
#include "hyperat/losses.hpp"
#include "hyperat/optim.hpp"

namespace hyperat {

// Method-wise x layer-wise merge weights lambda[m][l] (shared by the three
// positions of a layer) and the CE/KL trade-off of the tuning surrogate.
struct MergeCoefficients {
  Mat<double> lambda;  // M x L
  double tradeoff = 1.0;

  static MergeCoefficients uniform(int methods, int layers, double tradeoff = 1.0) {
    if (methods < 1 || layers < 1) throw ConfigError("merge coefficients need M >= 1 and L >= 1");
    MergeCoefficients c;
    c.lambda = Mat<double>::Constant(methods, layers, 1.0 / methods);
    c.tradeoff = tradeoff;
    return c;
  }

  int methods() const { return static_cast<int>(lambda.rows()); }
  int layers() const { return static_cast<int>(lambda.cols()); }
  bool operator==(const MergeCoefficients& o) const { return lambda == o.lambda && tradeoff == o.tradeoff; }
};

// Per-method site deltas, indexed [method][site].
template <class T>
using SpecialistDeltas = std::vector<SiteDeltas<T>>;

template <class T>
SpecialistDeltas<T> specialist_deltas(const std::vector<AdapterSet<T>>& sets) {
  SpecialistDeltas<T> out;
  for (const auto& s : sets) out.push_back(adapter_deltas(s));
  return out;
}

template <class T>
struct MergedAdapter {
  SiteDeltas<T> deltas;
};

namespace detail {

template <class T>
void check_specialists(const SpecialistDeltas<T>& sp, const std::vector<InjectionSite>& sites) {
  if (sp.empty()) throw ConfigError("no specialists to merge");
  for (std::size_t m = 0; m < sp.size(); ++m) {
    if (sp[m].size() != sites.size()) {
      throw ConfigError("specialist " + std::to_string(m) + " covers " + std::to_string(sp[m].size()) +
                        " sites, expected " + std::to_string(sites.size()));
    }
    for (const auto& s : sites) {
      const auto& d = sp[m][static_cast<std::size_t>(s.index())];
      if (d.rows() != s.out_dim || d.cols() != s.in_dim) {
        throw ConfigError("specialist " + std::to_string(m) + " has a mismatched delta at layer " +
                          std::to_string(s.layer) + " " + std::string(position_name(s.position)));
      }
    }
  }
}

}  // namespace detail

// delta(l, j) = sum_m lambda[m][l] * delta_m(l, j). Always combines the
// products B*A, never the factors.
template <class T>
MergedAdapter<T> merge_weighted(const SpecialistDeltas<T>& sp, const MergeCoefficients& coeffs,
                                const std::vector<InjectionSite>& sites) {
  detail::check_specialists(sp, sites);
  if (coeffs.methods() != static_cast<int>(sp.size())) {
    throw ConfigError("coefficient matrix has " + std::to_string(coeffs.methods()) + " methods, " +
                      std::to_string(sp.size()) + " specialists given");
  }
  MergedAdapter<T> out;
  out.deltas.resize(sites.size());
  for (const auto& s : sites) {
    if (s.layer >= coeffs.layers()) throw ConfigError("coefficient matrix has too few layers");
    const auto i = static_cast<std::size_t>(s.index());
    Mat<T> acc = Mat<T>::Zero(s.out_dim, s.in_dim);
    for (std::size_t m = 0; m < sp.size(); ++m) {
      const T w = static_cast<T>(coeffs.lambda(static_cast<Eigen::Index>(m), s.layer));
      acc += w * sp[m][i];
    }
    out.deltas[i] = std::move(acc);
  }
  return out;
}

// Even merge: the per-site arithmetic mean of the specialist deltas.
template <class T>
MergedAdapter<T> merge_equal(const SpecialistDeltas<T>& sp, const std::vector<InjectionSite>& sites) {
  detail::check_specialists(sp, sites);
  int layers = 0;
  for (const auto& s : sites) layers = std::max(layers, s.layer + 1);
  return merge_weighted(sp, MergeCoefficients::uniform(static_cast<int>(sp.size()), layers), sites);
}

template <class T>
Mat<T> merged_forward(const BackboneState<T>& base, const SpecialistDeltas<T>& sp, const MergeCoefficients& coeffs,
                      const Mat<T>& x) {
  const auto merged = merge_weighted(sp, coeffs, base.sites);
  return forward_logits(base, x, &merged.deltas);
}

struct CoefficientOptConfig {
  int iterations = 7;
  double lr = 1e-2;
  AttackBudget attack{0.1, 0.02, 10, 1, true};
  std::uint64_t seed = 0;
  bool operator==(const CoefficientOptConfig&) const = default;
};

struct CoefficientOptResult {
  MergeCoefficients coeffs;
  std::vector<double> surrogate;  // value at the start of each round
  double final_surrogate = std::nan("");
};

namespace detail {

template <class T>
struct SurrogateEval {
  double value = 0.0;
  Mat<double> grad;  // d surrogate / d lambda (M x L)
};

// CE(f(x), y) + tradeoff * KL(f(x) || f(x_adv)), with x_adv regenerated by
// PGD against the current merge.
template <class T>
SurrogateEval<T> merge_surrogate(const BackboneState<T>& base, const SpecialistDeltas<T>& sp,
                                 const MergeCoefficients& coeffs, const Mat<T>& x, std::span<const int> y,
                                 const CoefficientOptConfig& cfg, bool want_grad) {
  const auto merged = merge_weighted(sp, coeffs, base.sites);
  const VitModel<T> model(base, &merged.deltas);
  const auto adv = pgd_attack(model, x, y, cfg.attack, LossKind::CrossEntropy, cfg.seed);
  typename VitModel<T>::Tape clean_tape, adv_tape;
  const Mat<T> zc = model.forward(x, &clean_tape);
  const Mat<T> za = model.forward(adv.x_adv, &adv_tape);
  // Same algebra as TRADES with beta = tradeoff.
  const auto obj = loss_trades(zc, za, y, coeffs.tradeoff);
  SurrogateEval<T> out;
  out.value = static_cast<double>(obj.value);
  if (!std::isfinite(out.value) || !want_grad) return out;

  const GradRequest req{.sites = true};
  auto gc = model.backward(clean_tape, obj.d_clean, req);
  auto ga = model.backward(adv_tape, obj.d_adv, req);
  out.grad = Mat<double>::Zero(coeffs.methods(), coeffs.layers());
  for (const auto& s : base.sites) {
    const auto i = static_cast<std::size_t>(s.index());
    const Mat<T> g = gc.sites[i] + ga.sites[i];
    for (std::size_t m = 0; m < sp.size(); ++m) {
      out.grad(static_cast<Eigen::Index>(m), s.layer) += static_cast<double>(g.cwiseProduct(sp[m][i]).sum());
    }
  }
  return out;
}

}  // namespace detail

// Tunes lambda on one fixed training batch: each round regenerates x_adv
// against the current merge, evaluates the surrogate and takes one Adam step
// on lambda only. Backbone and specialists are read-only.
template <class T>
CoefficientOptResult optimize_coefficients(const BackboneState<T>& base, const SpecialistDeltas<T>& sp,
                                           const MergeCoefficients& init, const Mat<T>& x, std::span<const int> y,
                                           const CoefficientOptConfig& cfg) {
  if (cfg.iterations < 0) throw ConfigError("coefficient iterations must be >= 0");
  if (!(cfg.lr >= 0.0)) throw ConfigError("coefficient learning rate must be >= 0");
  CoefficientOptResult res;
  res.coeffs = init;
  if (cfg.iterations == 0) return res;
  Adam<double> adam;
  for (int round = 0; round < cfg.iterations; ++round) {
    auto ev = detail::merge_surrogate(base, sp, res.coeffs, x, y, cfg, true);
    if (!std::isfinite(ev.value) || !ev.grad.allFinite()) {
      throw NumericalError("non-finite merge surrogate at round " + std::to_string(round));
    }
    res.surrogate.push_back(ev.value);
    adam.begin_step();
    adam.step(res.coeffs.lambda, ev.grad, "lambda", cfg.lr);
  }
  res.final_surrogate = detail::merge_surrogate(base, sp, res.coeffs, x, y, cfg, false).value;
  if (!std::isfinite(res.final_surrogate)) {
    throw NumericalError("non-finite merge surrogate at round " + std::to_string(cfg.iterations));
  }
  return res;
}

inline nlohmann::json coefficients_to_json(const MergeCoefficients& c, const std::vector<std::string>& methods) {
  if (static_cast<int>(methods.size()) != c.methods()) throw ConfigError("method name count mismatch");
  nlohmann::json rows = nlohmann::json::array();
  for (int m = 0; m < c.methods(); ++m) {
    for (int l = 0; l < c.layers(); ++l) {
      rows.push_back({{"method", methods[static_cast<std::size_t>(m)]}, {"layer", l}, {"value", c.lambda(m, l)}});
    }
  }
  return {{"tradeoff", c.tradeoff}, {"coefficients", rows}};
}

inline MergeCoefficients coefficients_from_json(const nlohmann::json& j, const std::vector<std::string>& methods) {
  int layers = 0;
  for (const auto& r : j.at("coefficients")) layers = std::max(layers, r.at("layer").get<int>() + 1);
  MergeCoefficients c = MergeCoefficients::uniform(static_cast<int>(methods.size()), std::max(layers, 1),
                                                   j.at("tradeoff").get<double>());
  for (const auto& r : j.at("coefficients")) {
    const auto name = r.at("method").get<std::string>();
    auto it = std::find(methods.begin(), methods.end(), name);
    if (it == methods.end()) throw LookupError("unknown method '" + name + "' in coefficient file");
    c.lambda(it - methods.begin(), r.at("layer").get<int>()) = r.at("value").get<double>();
  }
  return c;
}

inline void save_coefficients(const std::filesystem::path& path, const MergeCoefficients& c,
                              const std::vector<std::string>& methods) {
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write " + path.string());
  out << coefficients_to_json(c, methods).dump(2) << "\n";
}

inline MergeCoefficients load_coefficients(const std::filesystem::path& path, const std::vector<std::string>& methods) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open " + path.string());
  return coefficients_from_json(nlohmann::json::parse(in), methods);
}

}  // namespace hyperat
