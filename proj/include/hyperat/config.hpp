#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hyperat/attacks.hpp"
#include "hyperat/backbone.hpp"
#include "hyperat/defenses.hpp"
#include "hyperat/evalbench.hpp"
#include "hyperat/hyperlora.hpp"
#include "hyperat/merging.hpp"
#include "hyperat/trainer.hpp"

namespace hyperat {

// Where images come from. "synthetic" renders digits procedurally; "idx" and
// "folders" read from `path`.
struct DataConfig {
  std::string source = "synthetic";
  std::string path;
  std::size_t train_size = 10000;  // 0 = whole split
  std::size_t test_size = 2000;
  bool operator==(const DataConfig&) const = default;
};

struct MergeConfig {
  std::string mode = "equal";  // equal | tuned
  double tradeoff = 1.0;       // CE/KL trade-off of the tuning surrogate
  int tune_batch = 128;
  CoefficientOptConfig tune{};
  bool operator==(const MergeConfig&) const = default;
};

struct ExperimentConfig {
  BackboneSpec backbone{};
  std::vector<std::string> methods = default_methods();
  HyperConfig hyper{};
  DefenseParams defense{};
  PretrainConfig pretrain{};
  TrainConfig train{};
  EvalProtocol eval{};
  MergeConfig merge{};
  DataConfig data{};
  std::string output_dir = "runs/default";
  std::uint64_t seed = 0;

  bool operator==(const ExperimentConfig&) const = default;

  void validate() const {
    backbone.validate();
    if (methods.empty()) throw ConfigError("at least one defense method is required");
    for (const auto& m : methods) make_defense(m, defense);
    (void)MethodRegistry(methods);
    train.validate();
    eval.pgd.validate();
    eval.cw.validate();
    merge.tune.attack.validate();
    if (merge.mode != "equal" && merge.mode != "tuned") {
      throw ConfigError("merge mode must be 'equal' or 'tuned', got '" + merge.mode + "'");
    }
    if (merge.tune_batch < 1) throw ConfigError("merge tune_batch must be >= 1");
    if (data.source != "synthetic" && data.source != "idx" && data.source != "folders") {
      throw ConfigError("data source must be synthetic, idx or folders, got '" + data.source + "'");
    }
    if (data.source != "synthetic" && data.path.empty()) throw ConfigError("data path is required for " + data.source);
  }
};

inline void to_json(nlohmann::json& j, OptimizerKind k) { j = std::string(optimizer_name(k)); }
inline void from_json(const nlohmann::json& j, OptimizerKind& k) { k = parse_optimizer(j.get<std::string>()); }

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BackboneSpec, image_size, patch_size, channels, embed_dim, depth,
                                                heads, mlp_ratio, num_classes)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(HyperConfig, embed_dim, context_dim, rank, alpha)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DklOptions, beta, w_mse, w_ce, class_weights, stop_gradient)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DefenseParams, trades_beta, mart_lambda, dkl, score_beta)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AttackBudget, epsilon, step_size, iterations, restarts, random_start)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PretrainConfig, epochs, batch_size, lr, weight_decay, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalProtocol, pgd, cw, run_pgd, run_cw, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CoefficientOptConfig, iterations, lr, attack, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MergeConfig, mode, tradeoff, tune_batch, tune)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataConfig, source, path, train_size, test_size)

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"momentum", c.momentum},
       {"weight_decay", c.weight_decay},
       {"lr_milestones", c.lr_milestones},
       {"lr_decay", c.lr_decay},
       {"seed", c.seed},
       {"method_weights", c.method_weights},
       {"optimizer", c.optimizer},
       {"max_grad_norm", c.max_grad_norm},
       {"attack", c.attack}};
}

// Milestones default to 70% / 90% of whatever epoch count the document sets.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.momentum = j.value("momentum", d.momentum);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.lr_milestones = j.contains("lr_milestones") ? j.at("lr_milestones").get<std::vector<int>>()
                                                : default_milestones(c.epochs);
  c.lr_decay = j.value("lr_decay", d.lr_decay);
  c.seed = j.value("seed", d.seed);
  c.method_weights = j.value("method_weights", d.method_weights);
  c.optimizer = j.value("optimizer", d.optimizer);
  c.max_grad_norm = j.value("max_grad_norm", d.max_grad_norm);
  c.attack = j.value("attack", d.attack);
}

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, backbone, methods, hyper, defense, pretrain, train,
                                                eval, merge, data, output_dir, seed)

namespace detail {

// Every key in `doc` must exist in `reference` (recursively for objects).
inline void reject_unknown_keys(const nlohmann::json& doc, const nlohmann::json& reference, const std::string& where) {
  if (!doc.is_object() || !reference.is_object()) return;
  for (const auto& [key, value] : doc.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!reference.contains(key)) throw ConfigError("unknown configuration key '" + path + "'");
    reject_unknown_keys(value, reference.at(key), path);
  }
}

}  // namespace detail

inline nlohmann::json config_to_json(const ExperimentConfig& c) { return c; }

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, config_to_json(ExperimentConfig{}), "");
  try {
    return j.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed configuration: ") + e.what());
  }
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open configuration file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

inline void save_config(const ExperimentConfig& c, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  out << config_to_json(c).dump(2) << "\n";
  if (!out) throw ConfigError("cannot write configuration file " + path.string());
}

// 64-bit FNV-1a of the canonical (sorted-key, compact) JSON, as 16 hex digits.
inline std::string config_hash(const ExperimentConfig& c) {
  const std::string text = config_to_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline constexpr const char* kOutputRootEnv = "HYPERAT_OUTPUT_ROOT";

// Relative output directories are placed under $HYPERAT_OUTPUT_ROOT when set.
inline std::filesystem::path resolve_output_dir(const std::filesystem::path& dir) {
  if (dir.is_absolute()) return dir;
  if (const char* root = std::getenv(kOutputRootEnv); root && *root) return std::filesystem::path(root) / dir;
  return dir;
}

}  // namespace hyperat
