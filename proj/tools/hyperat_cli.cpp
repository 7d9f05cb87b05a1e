// hyperat: command-line driver for the pretrain -> train -> merge -> tune-plus
// pipeline plus evaluation, attacks and ablations.

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hyperat/hyperat.hpp"

namespace fs = std::filesystem;
using namespace hyperat;

namespace {

// Flags shared by every stage; each one overrides the config file when given.
struct CommonFlags {
  std::optional<std::string> config_path;
  std::optional<std::string> output;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> data_source;
  std::optional<std::string> data_path;
  std::optional<std::size_t> train_size;
  std::optional<std::size_t> test_size;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "JSON experiment configuration")->check(CLI::ExistingFile);
  cmd->add_option("--output", f.output, "output directory (relative paths go under $HYPERAT_OUTPUT_ROOT)");
  cmd->add_option("--seed", f.seed, "experiment seed");
  cmd->add_option("--data-source", f.data_source, "synthetic | idx | folders");
  cmd->add_option("--data-path", f.data_path, "dataset directory for idx / folders");
  cmd->add_option("--train-size", f.train_size, "training examples to use (0 = all)");
  cmd->add_option("--test-size", f.test_size, "test examples to use (0 = all)");
}

template <class T>
void override_with(const std::optional<T>& flag, T& field) {
  if (flag) field = *flag;
}

ExperimentConfig base_config(const CommonFlags& f, const std::optional<ExperimentConfig>& from_checkpoint = {}) {
  ExperimentConfig c = f.config_path ? load_config(*f.config_path) : from_checkpoint.value_or(ExperimentConfig{});
  override_with(f.output, c.output_dir);
  override_with(f.seed, c.seed);
  override_with(f.data_source, c.data.source);
  override_with(f.data_path, c.data.path);
  override_with(f.train_size, c.data.train_size);
  override_with(f.test_size, c.data.test_size);
  return c;
}

struct Run {
  ExperimentConfig cfg;
  fs::path dir;
  NdjsonLog log;
};

Run open_run(ExperimentConfig cfg, const std::string& command) {
  cfg.validate();
  Run r{cfg, resolve_output_dir(cfg.output_dir), {}};
  fs::create_directories(r.dir);
  save_config(cfg, r.dir / ("config." + command + ".json"));
  r.log = NdjsonLog(r.dir / "log.ndjson");
  r.log.write({{"stage", command}, {"event", "start"}, {"config_hash", config_hash(cfg)}});
  return r;
}

void finish(const Run& r, const std::string& command, const nlohmann::json& extra = {}) {
  nlohmann::json j{{"stage", command}, {"event", "done"}};
  if (!extra.is_null()) j["result"] = extra;
  r.log.write(j);
}

fs::path checkpoint_out(const Run& r, const std::optional<std::string>& save, const char* name) {
  return save ? fs::path(*save) : r.dir / name;
}

// "pgd20" / "cw50" / "clean" / "all" -> protocol with the named attacks only.
EvalProtocol protocol_for(const std::string& budget, EvalProtocol p) {
  if (budget == "all") return p;
  p.run_pgd = p.run_cw = false;
  if (budget == "clean") return p;
  const auto digits = budget.find_first_of("0123456789");
  const std::string kind = budget.substr(0, digits);
  int iters = 0;
  if (digits != std::string::npos) {
    try {
      iters = std::stoi(budget.substr(digits));
    } catch (const std::exception&) {
      iters = 0;
    }
  }
  if ((kind != "pgd" && kind != "cw") || (digits != std::string::npos && iters < 1)) {
    throw ConfigError("unknown budget '" + budget + "' (expected pgdN, cwN, clean or all)");
  }
  auto& b = kind == "pgd" ? p.pgd : p.cw;
  if (iters > 0) b.iterations = iters;
  (kind == "pgd" ? p.run_pgd : p.run_cw) = true;
  return p;
}

std::vector<std::string> specialist_names(const CheckpointBundle& b, const std::vector<std::string>& asked) {
  if (asked.size() == 1 && asked[0] == "all") return b.config.methods;
  for (const auto& m : asked) {
    if (std::find(b.config.methods.begin(), b.config.methods.end(), m) == b.config.methods.end()) {
      throw LookupError("checkpoint has no specialist '" + m + "'");
    }
  }
  return asked;
}

Dataset eval_split(const ExperimentConfig& cfg, std::optional<std::size_t> limit) {
  auto data = load_experiment_data(cfg.data, cfg.seed);
  if (limit && *limit > 0) return data.test.head(*limit);
  return data.test;
}

void print_reports(const std::vector<EvalReport>& reports) { std::cout << summarize(reports); }

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const LookupError*>(&e)) return 3;
  if (dynamic_cast<const IngestionError*>(&e)) return 4;
  if (dynamic_cast<const IntegrityError*>(&e)) return 5;
  if (dynamic_cast<const StageError*>(&e)) return 6;
  if (dynamic_cast<const NumericalError*>(&e)) return 7;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HyperAT: hypernetwork-generated LoRA adversarial tuning for a small ViT"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "show help for every subcommand");

  // make-data
  std::string md_out = "data/synthetic";
  std::size_t md_train = 10000, md_test = 2000;
  std::uint64_t md_seed = 0;
  std::string md_format = "idx";
  auto* make_data = app.add_subcommand("make-data", "render the synthetic digit corpus to disk");
  make_data->add_option("--out", md_out, "target directory");
  make_data->add_option("--train", md_train, "training images");
  make_data->add_option("--test", md_test, "test images");
  make_data->add_option("--seed", md_seed, "corpus seed");
  make_data->add_option("--format", md_format, "idx | folders")->check(CLI::IsMember({"idx", "folders"}));

  // pretrain
  CommonFlags pre_f;
  std::optional<int> pre_epochs;
  std::optional<std::string> pre_save;
  auto* pretrain_cmd = app.add_subcommand("pretrain", "clean training of the full backbone");
  add_common(pretrain_cmd, pre_f);
  pretrain_cmd->add_option("--epochs", pre_epochs, "pretraining epochs");
  pretrain_cmd->add_option("--save", pre_save, "checkpoint directory (default <output>/pretrained)");

  // train
  CommonFlags tr_f;
  std::string tr_ckpt;
  std::optional<std::vector<std::string>> tr_methods;
  std::optional<int> tr_epochs, tr_rank;
  std::optional<double> tr_lr, tr_clip;
  std::optional<std::string> tr_save, tr_optimizer;
  auto* train_cmd = app.add_subcommand("train", "HyperAT tuning of a pretrained checkpoint");
  add_common(train_cmd, tr_f);
  train_cmd->add_option("--checkpoint", tr_ckpt, "pretrained checkpoint directory")->required();
  train_cmd->add_option("--methods", tr_methods, "comma-separated defense methods")->delimiter(',');
  train_cmd->add_option("--epochs", tr_epochs, "training epochs (milestones follow at 70% / 90%)");
  train_cmd->add_option("--lr", tr_lr, "learning rate");
  train_cmd->add_option("--optimizer", tr_optimizer, "sgd | adam")->check(CLI::IsMember({"sgd", "adam"}));
  train_cmd->add_option("--max-grad-norm", tr_clip, "global gradient clipping threshold (0 disables)");
  train_cmd->add_option("--rank", tr_rank, "LoRA rank (alpha follows the rank)");
  train_cmd->add_option("--save", tr_save, "checkpoint directory (default <output>/hyperat)");

  // merge
  std::string mg_ckpt, mg_mode = "equal";
  std::optional<std::string> mg_save, mg_output;
  std::optional<int> mg_iters;
  auto* merge_cmd = app.add_subcommand("merge", "merge the specialist adapters");
  merge_cmd->add_option("--checkpoint", mg_ckpt, "HyperAT checkpoint directory")->required();
  merge_cmd->add_option("--mode", mg_mode, "equal | tuned")->check(CLI::IsMember({"equal", "tuned"}));
  merge_cmd->add_option("--iters", mg_iters, "coefficient rounds for --mode tuned");
  merge_cmd->add_option("--output", mg_output, "output directory");
  merge_cmd->add_option("--save", mg_save, "checkpoint directory (default <output>/merged)");

  // tune-plus
  std::string tp_ckpt;
  std::optional<int> tp_iters;
  std::optional<double> tp_lr, tp_tradeoff;
  std::optional<std::string> tp_save, tp_output;
  bool tp_plot = false;
  std::size_t tp_plot_size = 500;
  auto* tune_cmd = app.add_subcommand("tune-plus", "optimize method-wise x layer-wise merge coefficients");
  tune_cmd->add_option("--checkpoint", tp_ckpt, "HyperAT or merged checkpoint directory")->required();
  tune_cmd->add_option("--iters", tp_iters, "optimization rounds (default 7)");
  tune_cmd->add_option("--lr", tp_lr, "coefficient learning rate");
  tune_cmd->add_option("--tradeoff", tp_tradeoff, "CE/KL trade-off of the surrogate");
  tune_cmd->add_option("--output", tp_output, "output directory");
  tune_cmd->add_option("--save", tp_save, "checkpoint directory (default <output>/hyperat_plus)");
  tune_cmd->add_flag("--plot", tp_plot, "write accuracy-vs-round plot files");
  tune_cmd->add_option("--plot-eval-size", tp_plot_size, "test examples per plot point");

  // eval
  std::string ev_ckpt, ev_budget = "all";
  std::optional<std::size_t> ev_size;
  std::vector<std::string> ev_specialists;
  std::optional<std::string> ev_output;
  auto* eval_cmd = app.add_subcommand("eval", "clean / PGD / CW accuracy of a checkpoint");
  eval_cmd->add_option("--checkpoint", ev_ckpt, "checkpoint directory")->required();
  eval_cmd->add_option("--budget", ev_budget, "pgdN | cwN | clean | all");
  eval_cmd->add_option("--eval-size", ev_size, "test examples (0 = full split)");
  eval_cmd->add_option("--specialists", ev_specialists, "also evaluate these specialists ('all' for every one)")
      ->delimiter(',');
  eval_cmd->add_option("--output", ev_output, "output directory");

  // attack
  std::string at_ckpt, at_budget = "pgd20";
  std::size_t at_count = 256;
  std::optional<std::string> at_output;
  auto* attack_cmd = app.add_subcommand("attack", "write adversarial test examples for a checkpoint");
  attack_cmd->add_option("--checkpoint", at_ckpt, "checkpoint directory")->required();
  attack_cmd->add_option("--budget", at_budget, "pgdN | cwN");
  attack_cmd->add_option("--count", at_count, "number of test examples to attack");
  attack_cmd->add_option("--output", at_output, "output directory");

  // ablate
  CommonFlags ab_f;
  std::string ab_ckpt;
  std::vector<int> ab_counts{1, 2, 3, 4}, ab_ranks{8, 16};
  std::optional<int> ab_epochs;
  auto* ablate_cmd = app.add_subcommand("ablate", "method-count and rank sweeps from one pretrained checkpoint");
  add_common(ablate_cmd, ab_f);
  ablate_cmd->add_option("--checkpoint", ab_ckpt, "pretrained checkpoint directory")->required();
  ablate_cmd->add_option("--counts", ab_counts, "numbers of combined methods")->delimiter(',');
  ablate_cmd->add_option("--ranks", ab_ranks, "LoRA ranks")->delimiter(',');
  ablate_cmd->add_option("--epochs", ab_epochs, "training epochs per variant");

  CLI11_PARSE(app, argc, argv);

  try {
    const auto t0 = std::chrono::steady_clock::now();
    const auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

    if (*make_data) {
      const auto train = synthetic_digits(md_train, mix_seed(md_seed, 11));
      const auto test = synthetic_digits(md_test, mix_seed(md_seed, 12));
      const fs::path out = resolve_output_dir(md_out);
      fs::create_directories(out);
      for (auto [split, ds] : {std::pair{Split::Train, &train}, std::pair{Split::Test, &test}}) {
        if (md_format == "idx") {
          const auto [img, lab] = idx_paths(out, split);
          write_idx(*ds, img, lab);
        } else {
          for (std::size_t i = 0; i < ds->size(); ++i) {
            const auto cls = out / std::string(split_name(split)) / std::to_string(ds->labels[i]);
            fs::create_directories(cls);
            char name[32];
            std::snprintf(name, sizeof name, "%06zu.pgm", i);
            write_pgm(cls / name, std::span<const float>(ds->images.row(static_cast<Eigen::Index>(i)).data(),
                                                         static_cast<std::size_t>(ds->images.cols())),
                      ds->height, ds->width);
          }
        }
      }
      std::cout << "wrote " << train.size() << " train / " << test.size() << " test images to " << out.string()
                << "\n";
      return 0;
    }

    if (*pretrain_cmd) {
      auto cfg = base_config(pre_f);
      override_with(pre_epochs, cfg.pretrain.epochs);
      auto run = open_run(cfg, "pretrain");
      const auto data = load_experiment_data(run.cfg.data, run.cfg.seed);
      const auto bundle = run_pretrain(run.cfg, data.train, run.log);
      const auto path = checkpoint_out(run, pre_save, "pretrained");
      save_checkpoint(bundle, path);
      EvalProtocol clean = run.cfg.eval;
      clean.run_pgd = clean.run_cw = false;
      const auto r = run_eval(bundle, data.test, clean);
      finish(run, "pretrain", {{"checkpoint", path.string()}, {"clean_acc", r.metrics[0].accuracy}});
      std::cout << "pretrained checkpoint: " << path.string() << "  clean " << r.metrics[0].accuracy << "%  ("
                << elapsed() << " s)\n";
      return 0;
    }

    if (*train_cmd) {
      const auto base = load_checkpoint(tr_ckpt);
      require_stage(base.stage, "train");
      auto cfg = base_config(tr_f, base.config);
      override_with(tr_methods, cfg.methods);
      if (tr_methods && cfg.train.method_weights.size() != cfg.methods.size()) cfg.train.method_weights.clear();
      if (tr_epochs) {
        cfg.train.epochs = *tr_epochs;
        cfg.train.lr_milestones = default_milestones(*tr_epochs);
      }
      override_with(tr_lr, cfg.train.lr);
      override_with(tr_clip, cfg.train.max_grad_norm);
      if (tr_optimizer) cfg.train.optimizer = parse_optimizer(*tr_optimizer);
      if (tr_rank) {
        cfg.hyper.rank = *tr_rank;
        cfg.hyper.alpha = *tr_rank;
      }
      auto run = open_run(cfg, "train");
      const auto data = load_experiment_data(run.cfg.data, run.cfg.seed);
      const auto bundle = run_train(base, run.cfg, data.train, run.log);
      const auto path = checkpoint_out(run, tr_save, "hyperat");
      save_checkpoint(bundle, path);
      finish(run, "train", {{"checkpoint", path.string()}, {"seconds", elapsed()}});
      std::cout << "HyperAT checkpoint (" << run.cfg.methods.size() << " methods): " << path.string() << "  ("
                << elapsed() << " s)\n";
      return 0;
    }

    if (*merge_cmd) {
      const auto in = load_checkpoint(mg_ckpt);
      require_stage(in.stage, "merge");
      auto cfg = in.config;
      override_with(mg_output, cfg.output_dir);
      cfg.merge.mode = mg_mode;
      auto run = open_run(cfg, "merge");
      CheckpointBundle out;
      if (mg_mode == "equal") {
        out = run_merge_equal(in);
      } else {
        require_stage(in.stage, "tune-plus");
        const auto data = load_experiment_data(run.cfg.data, run.cfg.seed);
        auto src = in;
        src.config = run.cfg;
        out = run_tune_plus(src, data.train, mg_iters, run.log).bundle;
      }
      out.config = run.cfg;
      const auto path = checkpoint_out(run, mg_save, mg_mode == "equal" ? "merged" : "hyperat_plus");
      save_checkpoint(out, path);
      save_coefficients(path / "coefficients.json", *out.coeffs, out.config.methods);
      finish(run, "merge", {{"checkpoint", path.string()}, {"mode", mg_mode}});
      std::cout << "merged checkpoint (" << mg_mode << "): " << path.string() << "\n";
      return 0;
    }

    if (*tune_cmd) {
      auto in = load_checkpoint(tp_ckpt);
      require_stage(in.stage, "tune-plus");
      override_with(tp_output, in.config.output_dir);
      override_with(tp_lr, in.config.merge.tune.lr);
      if (tp_tradeoff) {
        in.config.merge.tradeoff = *tp_tradeoff;
        if (in.coeffs) in.coeffs->tradeoff = *tp_tradeoff;
      }
      if (tp_iters) in.config.merge.tune.iterations = *tp_iters;
      in.config.merge.mode = "tuned";
      auto run = open_run(in.config, "tune-plus");
      const auto data = load_experiment_data(run.cfg.data, run.cfg.seed);
      const auto res = run_tune_plus(in, data.train, {}, run.log);
      const auto path = checkpoint_out(run, tp_save, "hyperat_plus");
      save_checkpoint(res.bundle, path);
      save_coefficients(path / "coefficients.json", *res.bundle.coeffs, res.bundle.config.methods);

      if (tp_plot) {
        // Round k of a longer run equals a k-round run, so each plot point is
        // a fresh optimization truncated at k rounds.
        const Dataset test = data.test.head(tp_plot_size);
        EvalProtocol p = run.cfg.eval;
        p.run_cw = false;
        std::vector<double> clean, robust, surrogate;
        for (int k = 0; k <= run.cfg.merge.tune.iterations; ++k) {
          const auto rk = run_tune_plus(in, data.train, k);
          const auto r = run_eval(rk.bundle, test, p);
          clean.push_back(r.metrics[0].accuracy);
          robust.push_back(r.metrics[1].accuracy);
          surrogate.push_back(rk.opt.surrogate.empty() ? std::nan("") : rk.opt.surrogate.front());
          run.log.write({{"stage", "tune-plus"}, {"plot_round", k}, {"report", r.to_json()}});
        }
        write_accuracy_plot(run.dir / "tune_plus_accuracy", {"clean", "pgd" + std::to_string(p.pgd.iterations)}, {clean, robust});
      }
      finish(run, "tune-plus",
             {{"checkpoint", path.string()}, {"surrogate", res.opt.surrogate}, {"final", res.opt.final_surrogate}});
      std::cout << "surrogate by round:";
      for (double v : res.opt.surrogate) std::cout << " " << v;
      std::cout << " -> " << res.opt.final_surrogate << "\nHyperAT+ checkpoint: " << path.string() << "\n";
      return 0;
    }

    if (*eval_cmd) {
      const auto b = load_checkpoint(ev_ckpt);
      auto cfg = b.config;
      override_with(ev_output, cfg.output_dir);
      auto run = open_run(cfg, "eval");
      const auto proto = protocol_for(ev_budget, run.cfg.eval);
      const auto test = eval_split(run.cfg, ev_size);
      std::vector<EvalReport> reports{run_eval(b, test, proto)};
      if (!ev_specialists.empty()) {
        for (const auto& m : specialist_names(b, ev_specialists)) reports.push_back(run_eval(b, test, proto, m));
      }
      const auto stem = run.dir / ("eval_" + checkpoint_model_id(b) + "_" + ev_budget);
      write_reports(stem, reports);
      nlohmann::json js = nlohmann::json::array();
      for (const auto& r : reports) js.push_back(r.to_json());
      finish(run, "eval", js);
      print_reports(reports);
      std::cout << "report: " << stem.string() << ".{txt,json}\n";
      return 0;
    }

    if (*attack_cmd) {
      const auto b = load_checkpoint(at_ckpt);
      auto cfg = b.config;
      override_with(at_output, cfg.output_dir);
      auto run = open_run(cfg, "attack");
      const auto proto = protocol_for(at_budget, run.cfg.eval);
      if (!proto.run_pgd && !proto.run_cw) throw ConfigError("attack needs a pgdN or cwN budget");
      const auto test = eval_split(run.cfg, at_count);
      const auto deltas = checkpoint_deltas(b);
      const VitModel<float> model(b.backbone, &deltas);
      const AttackBudget& budget = proto.run_pgd ? proto.pgd : proto.cw;
      const LossKind kind = proto.run_pgd ? LossKind::CrossEntropy : LossKind::CwMargin;
      Dataset adv = test;
      for (std::size_t s = 0; s < test.size(); s += 256) {
        std::vector<std::size_t> idx;
        for (std::size_t i = s; i < std::min(test.size(), s + 256); ++i) idx.push_back(i);
        const auto a = pgd_attack(model, test.batch_images<float>(idx), test.batch_labels(idx), budget, kind,
                                  mix_seed(proto.seed, s));
        for (std::size_t i = 0; i < idx.size(); ++i) {
          adv.images.row(static_cast<Eigen::Index>(idx[i])) = a.x_adv.row(static_cast<Eigen::Index>(i));
        }
      }
      const fs::path out = run.dir / ("adversarial_" + at_budget);
      fs::create_directories(out);
      const auto [img, lab] = idx_paths(out, Split::Test);
      write_idx(adv, img, lab);
      const double clean = evaluate_clean(model, test);
      const double fooled = evaluate_clean(model, adv);
      finish(run, "attack", {{"dir", out.string()}, {"clean_acc", clean}, {"adv_acc", fooled}});
      std::cout << test.size() << " examples, clean " << clean << "%, after " << at_budget << " " << fooled
                << "%  -> " << out.string() << "\n";
      return 0;
    }

    if (*ablate_cmd) {
      const auto base = load_checkpoint(ab_ckpt);
      require_stage(base.stage, "train");
      auto cfg = base_config(ab_f, base.config);
      if (ab_epochs) {
        cfg.train.epochs = *ab_epochs;
        cfg.train.lr_milestones = default_milestones(*ab_epochs);
      }
      auto run = open_run(cfg, "ablate");
      const auto data = load_experiment_data(run.cfg.data, run.cfg.seed);
      const auto reports = run_ablation(base, run.cfg, data, {ab_counts, ab_ranks}, run.log);
      write_reports(run.dir / "ablation", reports);
      finish(run, "ablate", {{"variants", reports.size()}});
      print_reports(reports);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 0;
}
