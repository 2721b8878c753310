// Command-line front-end: pretrain / train / attack / eval / run / summarize.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vibtk/checkpoint.hpp"
#include "vibtk/experiment.hpp"

namespace fs = std::filesystem;
using namespace vibtk;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::string model_tag;
  std::uint64_t seed = 1;
  bool seed_set = false;
};

experiment::ExperimentConfig load_cfg(const CommonArgs& args) {
  experiment::ExperimentConfig cfg;
  if (!args.config_path.empty()) {
    cfg = experiment::load_config(args.config_path);
  } else {
    cfg.models = trainer::model_tags();
    cfg.seeds = {1};
  }
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  if (args.seed_set) cfg.seeds = {args.seed};
  if (!args.model_tag.empty()) {
    trainer::parse_tag(args.model_tag);
    cfg.models = {args.model_tag};
  }
  cfg.validate();
  return cfg;
}

struct LoadedData {
  data::Dataset train, test;
};

LoadedData load_data(const experiment::ExperimentConfig& cfg) {
  const std::string root = experiment::resolve_dataset_root(cfg);
  if (!fs::exists(root + "/train-images-idx3-ubyte")) {
    std::cerr << "dataset not found under " << root << "; generating synthetic digits\n";
    data::ensure_synthetic_idx(root, cfg.train_subset, cfg.test_subset, cfg.synthetic_seed);
  }
  LoadedData d{data::load_split(root, "train"), data::load_split(root, "test")};
  if (d.train.size() > cfg.train_subset) d.train = data::take_first(d.train, cfg.train_subset);
  if (d.test.size() > cfg.test_subset) d.test = data::take_first(d.test, cfg.test_subset);
  return d;
}

vib::SoftLabelSet ensure_reference(const experiment::ExperimentConfig& cfg, const LoadedData& d,
                                   std::uint64_t seed) {
  const experiment::Paths paths{cfg.out_dir};
  fs::create_directories(cfg.out_dir);
  if (fs::exists(paths.soft_labels(seed))) return vib::SoftLabelSet::load(paths.soft_labels(seed));
  std::cerr << "pretraining reference (seed " << seed << ")\n";
  auto pre = trainer::pretrain_reference(d.train, d.test, cfg.defaults.epochs, cfg.defaults.lr,
                                         seed + 1000);
  std::cerr << "reference clean test accuracy " << pre.test_accuracy << "\n";
  trainer::Model ref_model;
  ref_model.tag = "Baseline";
  ref_model.baseline = pre.reference;
  checkpoint::save(paths.reference(seed), ref_model, seed);
  pre.soft_labels.save(paths.soft_labels(seed));
  return pre.soft_labels;
}

trainer::Model train_one(const experiment::ExperimentConfig& cfg, const LoadedData& d,
                         const std::string& tag, std::uint64_t seed) {
  const experiment::Paths paths{cfg.out_dir};
  fs::create_directories(cfg.out_dir);
  const auto kind = trainer::parse_tag(tag);
  vib::SoftLabelSet soft;
  if (kind.ref) soft = ensure_reference(cfg, d, seed);
  auto tc = cfg.train_config(tag, seed);
  std::cerr << "training " << tag << " (seed " << seed << ", " << tc.epochs << " epochs)\n";
  auto model = trainer::train_model(tc, d.train, kind.ref ? &soft : nullptr);
  checkpoint::save(paths.model(tag, seed), model, seed);
  std::cerr << "saved " << paths.model(tag, seed) << "\n";
  return model;
}

trainer::Model load_or_train(const experiment::ExperimentConfig& cfg, const LoadedData& d,
                             const std::string& tag, std::uint64_t seed) {
  const experiment::Paths paths{cfg.out_dir};
  if (fs::exists(paths.model(tag, seed))) return checkpoint::load(paths.model(tag, seed)).model;
  return train_one(cfg, d, tag, seed);
}

void print_records(const std::vector<trainer::MetricsRecord>& records) {
  std::cout << experiment::kCsvHeader << "\n";
  for (const auto& r : records) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s,%s,%.2f,%llu,%.4f,%.3f", r.model_tag.c_str(),
                  r.attack.c_str(), r.epsilon, static_cast<unsigned long long>(r.seed), r.accuracy,
                  r.seconds);
    std::cout << buf << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational information bottleneck toolkit"};
  app.require_subcommand(1);

  CommonArgs args;
  float attack_eps = 0.3f;
  std::string attack_kind = "pgd";

  auto add_common = [&](CLI::App* sub, bool needs_model) {
    sub->add_option("--config", args.config_path, "experiment config (JSON)");
    sub->add_option("--out", args.out_dir, "output directory override");
    sub->add_option("--seed", args.seed, "seed override")->each([&](const std::string&) {
      args.seed_set = true;
    });
    auto* m = sub->add_option("--model", args.model_tag, "model tag");
    if (needs_model) m->required();
  };

  auto* pretrain = app.add_subcommand("pretrain", "train the reference network and cache soft labels");
  add_common(pretrain, false);
  auto* train = app.add_subcommand("train", "train one model tag and checkpoint it");
  add_common(train, true);
  auto* attack_cmd = app.add_subcommand("attack", "report adversarial accuracy for one cell");
  add_common(attack_cmd, true);
  attack_cmd->add_option("--eps", attack_eps, "perturbation radius");
  attack_cmd->add_option("--attack", attack_kind, "fgsm | pgd");
  auto* eval = app.add_subcommand("eval", "evaluate a trained checkpoint over the attack grid");
  add_common(eval, true);
  auto* run = app.add_subcommand("run", "full pipeline: pretrain, train, evaluate, emit CSVs");
  add_common(run, false);
  auto* summarize = app.add_subcommand("summarize", "aggregate metrics.csv into summary.csv");
  add_common(summarize, false);

  CLI11_PARSE(app, argc, argv);

  try {
    auto cfg = load_cfg(args);
    const experiment::Paths paths{cfg.out_dir};
    const std::uint64_t seed = cfg.seeds.front();

    if (pretrain->parsed()) {
      auto d = load_data(cfg);
      ensure_reference(cfg, d, seed);
      std::cout << "soft labels: " << paths.soft_labels(seed) << "\n";
    } else if (train->parsed()) {
      auto d = load_data(cfg);
      train_one(cfg, d, args.model_tag, seed);
    } else if (attack_cmd->parsed()) {
      auto d = load_data(cfg);
      auto model = load_or_train(cfg, d, args.model_tag, seed);
      trainer::EvalConfig grid = cfg.grid;
      grid.epsilons = {attack_eps};
      if (attack_kind == "fgsm")
        grid.kinds = {attacks::Kind::Fgsm};
      else if (attack_kind == "pgd")
        grid.kinds = {attacks::Kind::Pgd};
      else
        throw config_error("unknown attack '" + attack_kind + "' (fgsm | pgd)");
      print_records(trainer::evaluate(model, d.test, grid, seed));
    } else if (eval->parsed()) {
      auto d = load_data(cfg);
      auto model = load_or_train(cfg, d, args.model_tag, seed);
      print_records(trainer::evaluate(model, d.test, cfg.grid, seed));
    } else if (run->parsed()) {
      auto result = experiment::run_experiment(cfg, true, &std::cerr);
      std::cout << (result.csv_rewritten ? "metrics written: " : "metrics up to date: ")
                << paths.metrics() << "\n";
    } else if (summarize->parsed()) {
      auto records = experiment::read_metrics_csv(paths.metrics());
      experiment::emit_summary_csv(records, paths.summary());
      std::ifstream in(paths.summary());
      std::cout << in.rdbuf();
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
