#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "hyperat/checkpoint.hpp"
#include "hyperat/config.hpp"
#include "hyperat/dataset.hpp"
#include "hyperat/evalbench.hpp"
#include "hyperat/merging.hpp"
#include "hyperat/synthetic_digits.hpp"
#include "hyperat/trainer.hpp"

namespace hyperat {

struct ExperimentData {
  Dataset train;
  Dataset test;
};

inline ExperimentData load_experiment_data(const DataConfig& d, std::uint64_t seed) {
  ExperimentData out;
  if (d.source == "synthetic") {
    out.train = synthetic_digits(d.train_size ? d.train_size : 10000, mix_seed(seed, 11));
    out.test = synthetic_digits(d.test_size ? d.test_size : 2000, mix_seed(seed, 12));
    out.train.name = "synthetic_digits/train";
    out.test.name = "synthetic_digits/test";
    return out;
  }
  const DatasetFormat fmt = parse_dataset_format(d.source);
  out.train = load_dataset(d.path, fmt, Split::Train, {mix_seed(seed, 11), d.train_size});
  out.test = load_dataset(d.path, fmt, Split::Test, {mix_seed(seed, 12), d.test_size});
  return out;
}

// Newline-delimited JSON records, flushed per line.
class NdjsonLog {
 public:
  NdjsonLog() = default;
  explicit NdjsonLog(const std::filesystem::path& path) : out_(std::make_shared<std::ofstream>(path, std::ios::app)) {
    if (!*out_) throw IngestionError("cannot open log " + path.string());
  }
  void write(const nlohmann::json& record) const {
    if (out_) *out_ << record.dump() << "\n" << std::flush;
  }
  StepSink sink(std::string stage) const {
    if (!out_) return {};
    return [log = *this, stage](const StepRecord& r) {
      auto j = r.to_json();
      j["stage"] = stage;
      log.write(j);
    };
  }

 private:
  std::shared_ptr<std::ofstream> out_;
};

inline CheckpointBundle run_pretrain(const ExperimentConfig& cfg, const Dataset& train, const NdjsonLog& log = {}) {
  cfg.validate();
  CheckpointBundle b;
  b.config = cfg;
  b.stage = Stage::Pretrained;
  b.backbone = init_backbone<float>(cfg.backbone, mix_seed(cfg.seed, 1));
  PretrainConfig pc = cfg.pretrain;
  pc.seed = mix_seed(cfg.seed, pc.seed + 2);
  pretrain(b.backbone, train, pc, log.sink("pretrain"));
  return b;
}

inline CheckpointBundle run_train(const CheckpointBundle& base, const ExperimentConfig& cfg, const Dataset& train,
                                  const NdjsonLog& log = {}) {
  require_stage(base.stage, "train");
  cfg.validate();
  if (!(base.config.backbone == cfg.backbone)) throw ConfigError("backbone spec differs from the pretrained checkpoint");
  CheckpointBundle b;
  b.config = cfg;
  b.stage = Stage::Hyperat;
  auto st = make_hyperat_state<float>(base.backbone, MethodRegistry(cfg.methods), cfg.hyper, cfg.defense,
                                      mix_seed(cfg.seed, 3));
  st.backbone.trainable = TrainableMask::tuning();
  TrainConfig tc = cfg.train;
  tc.seed = mix_seed(cfg.seed, tc.seed + 4);
  train_hyperat(st, tc, train, log.sink("train"));
  b.backbone = std::move(st.backbone);
  b.hyper = std::move(st.hyper);
  return b;
}

inline int layer_count(const BackboneState<float>& b) { return b.spec.depth; }

inline CheckpointBundle run_merge_equal(const CheckpointBundle& in) {
  require_stage(in.stage, "merge");
  CheckpointBundle b = in;
  b.stage = Stage::Merged;
  b.coeffs = MergeCoefficients::uniform(in.hyper->registry.size(), layer_count(in.backbone), in.config.merge.tradeoff);
  return b;
}

// The fixed tuning batch: the first `tune_batch` examples of a seeded shuffle
// of the training split.
inline std::pair<Mat<float>, Labels> tuning_batch(const Dataset& train, int size, std::uint64_t seed) {
  auto order = shuffled_indices(train.size(), seed);
  order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(size)));
  return {train.batch_images<float>(order), train.batch_labels(order)};
}

struct TunePlusResult {
  CheckpointBundle bundle;
  CoefficientOptResult opt;
};

inline TunePlusResult run_tune_plus(const CheckpointBundle& in, const Dataset& train, std::optional<int> iterations = {},
                                    const NdjsonLog& log = {}) {
  require_stage(in.stage, "tune-plus");
  const auto& mc = in.config.merge;
  CoefficientOptConfig oc = mc.tune;
  if (iterations) oc.iterations = *iterations;
  oc.seed = mix_seed(in.config.seed, oc.seed + 5);
  const MergeCoefficients init =
      in.coeffs ? *in.coeffs
                : MergeCoefficients::uniform(in.hyper->registry.size(), layer_count(in.backbone), mc.tradeoff);
  const auto sp = specialist_deltas(bundle_state(in).specialists());
  const auto [x, y] = tuning_batch(train, mc.tune_batch, mix_seed(in.config.seed, 6));
  TunePlusResult r;
  r.opt = optimize_coefficients(in.backbone, sp, init, x, y, oc);
  for (std::size_t i = 0; i < r.opt.surrogate.size(); ++i) {
    log.write({{"stage", "tune-plus"}, {"round", i}, {"surrogate", r.opt.surrogate[i]}});
  }
  log.write({{"stage", "tune-plus"}, {"round", r.opt.surrogate.size()}, {"surrogate", r.opt.final_surrogate}});
  r.bundle = in;
  r.bundle.stage = Stage::HyperatPlus;
  r.bundle.coeffs = r.opt.coeffs;
  return r;
}

// Site deltas of the model a checkpoint stands for: none for the base, the
// even merge for a fresh HyperAT run, the stored coefficients afterwards.
inline SiteDeltas<float> checkpoint_deltas(const CheckpointBundle& b) {
  if (b.stage == Stage::Pretrained) return {};
  const auto sp = specialist_deltas(bundle_state(b).specialists());
  if (b.stage == Stage::Hyperat) return merge_equal(sp, b.backbone.sites).deltas;
  return merge_weighted(sp, *b.coeffs, b.backbone.sites).deltas;
}

inline SiteDeltas<float> specialist_site_deltas(const CheckpointBundle& b, const std::string& method) {
  const auto st = bundle_state(b);
  return adapter_deltas(st.specialist(st.hyper.registry.index_of(method)));
}

inline std::string checkpoint_model_id(const CheckpointBundle& b) {
  switch (b.stage) {
    case Stage::Pretrained: return "standard";
    case Stage::Hyperat:
    case Stage::Merged: return "hyperat";
    case Stage::HyperatPlus: return "hyperat_plus";
  }
  return "model";
}

inline EvalReport run_eval(const CheckpointBundle& b, const Dataset& test, const EvalProtocol& proto,
                           std::optional<std::string> specialist = {}) {
  const SiteDeltas<float> deltas = specialist ? specialist_site_deltas(b, *specialist) : checkpoint_deltas(b);
  const VitModel<float> model(b.backbone, &deltas);
  return evaluate_model(model, test, proto, specialist ? "specialist:" + *specialist : checkpoint_model_id(b));
}

struct AblationConfig {
  std::vector<int> method_counts{1, 2, 3, 4};
  std::vector<int> ranks{8, 16};
};

// HyperAT from one shared pretrained base while varying the number of
// combined methods (first M of the configured list) and the LoRA rank. Each
// variant is evaluated as an even merge.
inline std::vector<EvalReport> run_ablation(const CheckpointBundle& base, const ExperimentConfig& cfg,
                                            const ExperimentData& data, const AblationConfig& ab,
                                            const NdjsonLog& log = {}) {
  std::vector<EvalReport> out;
  const auto run = [&](ExperimentConfig c, const std::string& id) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto trained = run_train(base, c, data.train, log);
    EvalReport r = run_eval(trained, data.test, c.eval);
    r.model_id = id;
    log.write({{"stage", "ablate"},
               {"variant", id},
               {"report", r.to_json()},
               {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}});
    out.push_back(std::move(r));
  };
  for (int m : ab.method_counts) {
    if (m < 1 || m > static_cast<int>(cfg.methods.size())) {
      throw ConfigError("method count " + std::to_string(m) + " outside 1.." + std::to_string(cfg.methods.size()));
    }
    ExperimentConfig c = cfg;
    c.methods.assign(cfg.methods.begin(), cfg.methods.begin() + m);
    if (!c.train.method_weights.empty()) c.train.method_weights.resize(static_cast<std::size_t>(m));
    run(c, "M=" + std::to_string(m));
  }
  for (int r : ab.ranks) {
    ExperimentConfig c = cfg;
    c.hyper.rank = r;
    c.hyper.alpha = r;
    run(c, "r=" + std::to_string(r));
  }
  return out;
}

}  // namespace hyperat
