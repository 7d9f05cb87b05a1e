#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hyperat/attacks.hpp"
#include "hyperat/backbone.hpp"
#include "hyperat/dataset.hpp"
#include "hyperat/defenses.hpp"
#include "hyperat/hyperlora.hpp"
#include "hyperat/optim.hpp"

namespace hyperat {

inline std::vector<int> default_milestones(int epochs) {
  std::vector<int> out;
  for (double frac : {0.7, 0.9}) {
    const int m = static_cast<int>(std::floor(frac * epochs));
    if (m > 0 && m < epochs && (out.empty() || m > out.back())) out.push_back(m);
  }
  return out;
}

struct TrainConfig {
  int epochs = 10;
  int batch_size = 128;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<int> lr_milestones = default_milestones(10);
  double lr_decay = 0.1;
  std::uint64_t seed = 0;
  std::vector<double> method_weights;  // empty: uniform
  OptimizerKind optimizer = OptimizerKind::Sgd;
  double max_grad_norm = 1.0;  // global clipping threshold, 0 disables
  AttackBudget attack{0.1, 0.02, 10, 1, true};

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
    if (epochs < 0 || batch_size < 1) throw ConfigError("epochs must be >= 0 and batch_size >= 1");
    if (!(max_grad_norm >= 0.0)) throw ConfigError("max_grad_norm must be >= 0");
    for (std::size_t i = 0; i < lr_milestones.size(); ++i) {
      if (lr_milestones[i] <= 0 || lr_milestones[i] >= std::max(epochs, 1) ||
          (i > 0 && lr_milestones[i] <= lr_milestones[i - 1])) {
        throw ConfigError("lr milestones must be strictly increasing and inside (0, epochs)");
      }
    }
    attack.validate();
  }

  // Learning rate during (0-based) epoch `epoch`: lr * decay^(milestones passed).
  double lr_at(int epoch) const {
    double out = lr;
    for (int m : lr_milestones) {
      if (epoch >= m) out *= lr_decay;
    }
    return out;
  }

  bool operator==(const TrainConfig&) const = default;
};

inline int sample_method(std::mt19937_64& rng, const MethodRegistry& registry, std::span<const double> weights = {}) {
  if (registry.size() < 1) throw ConfigError("cannot sample from an empty method registry");
  if (weights.empty()) return std::uniform_int_distribution<int>(0, registry.size() - 1)(rng);
  if (static_cast<int>(weights.size()) != registry.size()) throw ConfigError("method weight count mismatch");
  return std::discrete_distribution<int>(weights.begin(), weights.end())(rng);
}

// Everything HyperAT trains or reads: the frozen backbone (with its trainable
// head/norm subset), the shared hypernetwork, and one defense per method.
template <class T>
struct HyperatState {
  BackboneState<T> backbone;
  HyperLora<T> hyper;
  std::vector<DefenseSpec> defenses;  // indexed like hyper.registry

  AdapterSet<T> specialist(int method) const { return generate_method(hyper, method, backbone.sites); }
  std::vector<AdapterSet<T>> specialists() const {
    return generate_all(hyper.hypernet, hyper.bank, hyper.registry, backbone.sites);
  }
};

template <class T>
HyperatState<T> make_hyperat_state(BackboneState<T> backbone, const MethodRegistry& registry,
                                   const HyperConfig& hcfg, const DefenseParams& dparams, std::uint64_t seed) {
  HyperatState<T> st;
  st.backbone = std::move(backbone);
  st.hyper = init_hyperlora<T>(registry, st.backbone.spec, hcfg, seed);
  for (const auto& m : registry.methods()) st.defenses.push_back(make_defense(m, dparams));
  return st;
}

// Loss of defense `method` at (x, x_adv) and its gradients with respect to
// the trainable backbone subset and every hypernetwork-side parameter.
template <class T>
struct HyperatGradients {
  T value{};
  BackboneParams<T> backbone;
  HyperLora<T> hyper;
};

template <class T>
HyperatGradients<T> hyperat_gradients(const HyperatState<T>& st, int method, const Mat<T>& x, const Mat<T>& x_adv,
                                      std::span<const int> y) {
  const DefenseSpec& def = st.defenses.at(static_cast<std::size_t>(method));
  const auto& sites = st.backbone.sites;
  const SiteDeltas<T> deltas = adapter_deltas(generate_method(st.hyper, method, sites));
  const VitModel<T> model(st.backbone, &deltas);
  typename VitModel<T>::Tape adv_tape, clean_tape;
  const Mat<T> adv_logits = model.forward(x_adv, &adv_tape);
  Mat<T> clean_logits;
  if (def.uses_clean_branch) clean_logits = model.forward(x, &clean_tape);
  const auto obj = defense_objective(def, clean_logits, adv_logits, y);

  const GradRequest req{.input = false, .params = true, .sites = true};
  BackboneGrads<T> g = model.backward(adv_tape, obj.d_adv, req);
  if (def.uses_clean_branch) {
    BackboneGrads<T> gc = model.backward(clean_tape, obj.d_clean, req);
    auto dst = g.params.named();
    auto src = gc.params.named();
    for (std::size_t i = 0; i < dst.size(); ++i) *dst[i].second += *src[i].second;
    for (std::size_t i = 0; i < g.sites.size(); ++i) g.sites[i] += gc.sites[i];
  }
  HyperatGradients<T> out;
  out.value = obj.value;
  out.hyper = zeros_like(st.hyper);
  hyper_backward(st.hyper, method, sites, g.sites, out.hyper);
  out.backbone = std::move(g.params);
  return out;
}

struct StepRecord {
  long step = 0;
  int epoch = 0;
  std::string method;
  double loss = 0.0;
  double lr = 0.0;

  nlohmann::json to_json() const {
    return {{"step", step}, {"epoch", epoch}, {"method", method}, {"loss", loss}, {"lr", lr}};
  }
};

using StepSink = std::function<void(const StepRecord&)>;

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9e3779b97f4a7c15ULL + b + 0x632be59bd9b4e019ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Per minibatch: sample a defense, attack the current adapted model with
// that defense's inner loss, evaluate its objective, and take one SGD step on
// {trainable backbone subset, embeddings + projector, hypernetwork heads}.
template <class T>
class HyperatTrainer {
 public:
  HyperatTrainer(HyperatState<T>& state, TrainConfig cfg)
      : state_(&state),
        cfg_(std::move(cfg)),
        method_rng_(cfg_.seed),
        data_rng_(mix_seed(cfg_.seed, 1)),
        opt_(cfg_.optimizer, cfg_.momentum, cfg_.weight_decay),
        running_sum_(static_cast<std::size_t>(state.hyper.registry.size()), 0.0),
        running_count_(running_sum_.size(), 0) {
    cfg_.validate();
    if (state.defenses.size() != static_cast<std::size_t>(state.hyper.registry.size())) {
      throw ConfigError("one defense per registered method is required");
    }
  }

  int sample() { return sample_method(method_rng_, state_->hyper.registry, cfg_.method_weights); }

  // The inner attack loss most recently used (exposed for routing checks).
  LossKind last_inner_loss() const { return last_inner_; }
  long step() const { return step_; }
  int epoch() const { return epoch_; }
  const TrainConfig& config() const { return cfg_; }

  // Mean loss per method over the current epoch (NaN if not sampled yet).
  std::vector<double> running_loss() const {
    std::vector<double> out(running_sum_.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = running_count_[i] ? running_sum_[i] / static_cast<double>(running_count_[i]) : std::nan("");
    }
    return out;
  }

  T train_step(const Mat<T>& x, std::span<const int> y, int method, double lr) {
    auto& st = *state_;
    if (method < 0 || method >= st.hyper.registry.size()) throw LookupError("method index out of range");
    if (x.rows() == 0) throw ConfigError("empty training batch");
    const DefenseSpec& def = st.defenses[static_cast<std::size_t>(method)];

    last_inner_ = def.inner;
    auto g = [&] {
      const AdapterSet<T> adapters = generate_method(st.hyper, method, st.backbone.sites);
      const SiteDeltas<T> deltas = adapter_deltas(adapters);
      const VitModel<T> model(st.backbone, &deltas);
      const auto adv = pgd_attack(model, x, y, cfg_.attack, def.inner, mix_seed(cfg_.seed, 1000 + step_));
      return hyperat_gradients(st, method, x, adv.x_adv, y);
    }();
    if (!std::isfinite(static_cast<double>(g.value))) {
      throw NumericalError("non-finite loss for method '" + def.method + "' at step " + std::to_string(step_));
    }

    auto bparams = st.backbone.params.named();
    auto bgrads = g.backbone.named();
    auto hparams = st.hyper.named();
    auto hgrads = g.hyper.named();
    if (cfg_.max_grad_norm > 0.0) {
      double sq = 0.0;
      for (std::size_t i = 0; i < bgrads.size(); ++i) {
        if (st.backbone.trainable(bparams[i].first)) sq += static_cast<double>(bgrads[i].second->squaredNorm());
      }
      for (auto& [name, m] : hgrads) sq += static_cast<double>(m->squaredNorm());
      const double norm = std::sqrt(sq);
      if (norm > cfg_.max_grad_norm) {
        const T c = static_cast<T>(cfg_.max_grad_norm / norm);
        for (auto& [name, m] : bgrads) *m *= c;
        for (auto& [name, m] : hgrads) *m *= c;
      }
    }
    opt_.begin_step();
    for (std::size_t i = 0; i < bparams.size(); ++i) {
      if (st.backbone.trainable(bparams[i].first)) opt_.step(*bparams[i].second, *bgrads[i].second, bparams[i].first, lr);
    }
    for (std::size_t i = 0; i < hparams.size(); ++i) opt_.step(*hparams[i].second, *hgrads[i].second, hparams[i].first, lr);

    running_sum_[static_cast<std::size_t>(method)] += static_cast<double>(g.value);
    running_count_[static_cast<std::size_t>(method)] += 1;
    ++step_;
    return g.value;
  }

  void train_epoch(const Dataset& data, const StepSink& sink = {}) {
    std::fill(running_sum_.begin(), running_sum_.end(), 0.0);
    std::fill(running_count_.begin(), running_count_.end(), 0);
    const double lr = cfg_.lr_at(epoch_);
    auto order = shuffled_indices(data.size(), data_rng_());
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg_.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg_.batch_size));
      std::span<const std::size_t> idx(order.data() + start, end - start);
      const Mat<T> x = data.batch_images<T>(idx);
      const Labels y = data.batch_labels(idx);
      const int method = sample();
      const T loss = train_step(x, y, method, lr);
      if (sink) sink({step_ - 1, epoch_, state_->hyper.registry.name(method), static_cast<double>(loss), lr});
    }
    ++epoch_;
  }

  void train(const Dataset& data, const StepSink& sink = {}) {
    while (epoch_ < cfg_.epochs) train_epoch(data, sink);
  }

 private:
  HyperatState<T>* state_;
  TrainConfig cfg_;
  std::mt19937_64 method_rng_;
  std::mt19937_64 data_rng_;
  Optimizer<T> opt_;
  long step_ = 0;
  int epoch_ = 0;
  LossKind last_inner_ = LossKind::CrossEntropy;
  std::vector<double> running_sum_;
  std::vector<long> running_count_;
};

// Runs the full HyperAT loop and materializes one specialist adapter set per method.
template <class T>
std::vector<AdapterSet<T>> train_hyperat(HyperatState<T>& state, const TrainConfig& cfg, const Dataset& data,
                                         const StepSink& sink = {}) {
  HyperatTrainer<T> trainer(state, cfg);
  trainer.train(data, sink);
  return state.specialists();
}

// Clean (standard) training of every backbone parameter; produces the
// "pretrained" base that HyperAT later freezes.
struct PretrainConfig {
  int epochs = 8;
  int batch_size = 128;
  double lr = 2e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  bool operator==(const PretrainConfig&) const = default;
};

template <class T>
void pretrain(BackboneState<T>& state, const Dataset& data, const PretrainConfig& cfg, const StepSink& sink = {}) {
  if (cfg.epochs < 0 || cfg.batch_size < 1 || !(cfg.lr >= 0.0)) throw ConfigError("invalid pretraining settings");
  const TrainableMask saved = state.trainable;
  state.trainable = TrainableMask::all();
  Adam<T> adam(0.9, 0.999, 1e-8, cfg.weight_decay);
  std::mt19937_64 rng(mix_seed(cfg.seed, 7));
  long step = 0;
  const long total = static_cast<long>(cfg.epochs) *
                     static_cast<long>((data.size() + static_cast<std::size_t>(cfg.batch_size) - 1) / cfg.batch_size);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = shuffled_indices(data.size(), rng());
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::span<const std::size_t> idx(order.data() + start, end - start);
      const Mat<T> x = data.batch_images<T>(idx);
      const Labels y = data.batch_labels(idx);
      // cosine decay
      const double lr = 0.5 * cfg.lr * (1.0 + std::cos(M_PI * static_cast<double>(step) / std::max(total, 1L)));
      const VitModel<T> model(state);
      typename VitModel<T>::Tape tape;
      const Mat<T> logits = model.forward(x, &tape);
      const auto obj = loss_vanilla_at(logits, y);
      if (!std::isfinite(static_cast<double>(obj.value))) {
        throw NumericalError("non-finite pretraining loss at step " + std::to_string(step));
      }
      auto g = model.backward(tape, obj.d_adv, GradRequest{.params = true});
      adam.begin_step();
      auto params = state.params.named();
      auto grads = g.params.named();
      for (std::size_t i = 0; i < params.size(); ++i) adam.step(*params[i].second, *grads[i].second, params[i].first, lr);
      if (sink) sink({step, epoch, "standard", static_cast<double>(obj.value), lr});
      ++step;
    }
  }
  state.trainable = saved;
}

}  // namespace hyperat
