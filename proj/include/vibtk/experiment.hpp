#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vibtk/checkpoint.hpp"
#include "vibtk/data.hpp"
#include "vibtk/errors.hpp"
#include "vibtk/trainer.hpp"
#include "vibtk/vib.hpp"

namespace vibtk::experiment {

inline constexpr const char* kCsvHeader = "model,attack,epsilon,seed,accuracy,seconds";
inline constexpr const char* kDatasetEnvVar = "VIBTK_DATA_DIR";

struct ExperimentConfig {
  std::string dataset_root;  // overridden by VIBTK_DATA_DIR when set
  std::size_t train_subset = 10000, test_subset = 2000;
  std::uint64_t synthetic_seed = 2024;  // used only when IDX files are absent
  std::vector<std::string> models;
  std::vector<std::uint64_t> seeds;
  trainer::TrainConfig defaults;  // m/k/lambda/epochs/lr/vib/noise defaults
  trainer::EvalConfig grid;
  std::string out_dir = "runs";

  void validate() const {
    if (models.empty()) throw config_error("models: need at least one model tag");
    for (const auto& tag : models) trainer::parse_tag(tag);
    if (seeds.empty()) throw config_error("seeds: need at least one seed");
    if (grid.epsilons.empty()) throw config_error("epsilons: need at least one value");
    if (!std::is_sorted(grid.epsilons.begin(), grid.epsilons.end()))
      throw config_error("epsilons: must be sorted ascending");
    for (float e : grid.epsilons)
      if (e < 0.0f) throw config_error("epsilons: must be nonnegative");
    if (grid.kinds.empty()) throw config_error("attacks: need at least one attack kind");
    if (out_dir.empty()) throw config_error("out_dir: must not be empty");
  }

  trainer::TrainConfig train_config(const std::string& tag, std::uint64_t seed) const {
    auto cfg = trainer::default_config(tag, seed);
    cfg.m = defaults.m;
    cfg.k = trainer::parse_tag(tag).adversarial ? defaults.k : 0;
    cfg.lambda = defaults.lambda;
    cfg.epochs = defaults.epochs;
    cfg.lr = defaults.lr;
    cfg.clean_noise_sigma = defaults.clean_noise_sigma;
    cfg.vibcfg.beta = defaults.vibcfg.beta;
    cfg.vibcfg.eta = defaults.vibcfg.eta;
    cfg.validate();
    return cfg;
  }
};

namespace detail {

template <typename T>
T field(const nlohmann::json& j, const char* name, T fallback) {
  if (!j.contains(name)) return fallback;
  try {
    return j.at(name).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw config_error(std::string(name) + ": wrong type in config");
  }
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  ExperimentConfig cfg;
  cfg.dataset_root = detail::field<std::string>(j, "dataset_root", "");
  cfg.train_subset = detail::field<std::size_t>(j, "train_subset", 10000);
  cfg.test_subset = detail::field<std::size_t>(j, "test_subset", 2000);
  cfg.synthetic_seed = detail::field<std::uint64_t>(j, "synthetic_seed", 2024);
  cfg.models = detail::field<std::vector<std::string>>(j, "models", {});
  cfg.seeds = detail::field<std::vector<std::uint64_t>>(j, "seeds", {});
  cfg.out_dir = detail::field<std::string>(j, "out_dir", "runs");
  cfg.defaults.m = detail::field<std::size_t>(j, "batch", 100);
  cfg.defaults.k = detail::field<std::size_t>(j, "adversarial_k", 50);
  cfg.defaults.lambda = detail::field<float>(j, "lambda", 0.3f);
  cfg.defaults.epochs = detail::field<int>(j, "epochs", 10);
  cfg.defaults.lr = detail::field<float>(j, "lr", 0.001f);
  cfg.defaults.clean_noise_sigma = detail::field<float>(j, "clean_noise_sigma", 0.05f);
  cfg.defaults.vibcfg.beta = detail::field<float>(j, "beta", 0.001f);
  cfg.defaults.vibcfg.eta = detail::field<std::size_t>(j, "eta", 256);
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    auto kinds = detail::field<std::vector<std::string>>(e, "attacks", {"fgsm", "pgd"});
    cfg.grid.kinds.clear();
    for (const auto& k : kinds) {
      if (k == "fgsm")
        cfg.grid.kinds.push_back(attacks::Kind::Fgsm);
      else if (k == "pgd")
        cfg.grid.kinds.push_back(attacks::Kind::Pgd);
      else
        throw config_error("eval.attacks: unknown attack '" + k + "' (fgsm | pgd)");
    }
    cfg.grid.epsilons = detail::field<std::vector<float>>(e, "epsilons", cfg.grid.epsilons);
    cfg.grid.pgd_alpha = detail::field<float>(e, "pgd_alpha", 0.01f);
    cfg.grid.pgd_steps = detail::field<int>(e, "pgd_steps", 40);
    cfg.grid.pgd_random_start = detail::field<bool>(e, "pgd_random_start", true);
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw config_error("config parse failure in " + path + ": " + e.what());
  }
  return parse_config(j);
}

/// dataset_root resolution order: env var, config field, out_dir/data (where
/// synthetic digits are generated on demand).
inline std::string resolve_dataset_root(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv(kDatasetEnvVar); env && *env) return env;
  if (!cfg.dataset_root.empty()) return cfg.dataset_root;
  return cfg.out_dir + "/data";
}

// ---------------------------------------------------------------------------
// Metrics CSV

namespace detail {

inline std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

inline std::string cell_key(const trainer::MetricsRecord& r) {
  return r.model_tag + "|" + r.attack + "|" + fmt("%.4f", r.epsilon) + "|" + std::to_string(r.seed);
}

inline bool record_order(const trainer::MetricsRecord& a, const trainer::MetricsRecord& b) {
  if (a.model_tag != b.model_tag) return a.model_tag < b.model_tag;
  if (a.attack != b.attack) return a.attack < b.attack;
  if (a.epsilon != b.epsilon) return a.epsilon < b.epsilon;
  return a.seed < b.seed;
}

}  // namespace detail

inline void emit_metrics_csv(std::vector<trainer::MetricsRecord> records, const std::string& path) {
  std::sort(records.begin(), records.end(), detail::record_order);
  std::set<std::string> seen;
  for (const auto& r : records)
    if (!seen.insert(detail::cell_key(r)).second)
      throw consistency_error("duplicate metrics cell " + detail::cell_key(r));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write " + path);
  out << kCsvHeader << "\n";
  for (const auto& r : records)
    out << r.model_tag << "," << r.attack << "," << detail::fmt("%.2f", r.epsilon) << "," << r.seed
        << "," << detail::fmt("%.4f", r.accuracy) << "," << detail::fmt("%.3f", r.seconds) << "\n";
}

inline std::vector<trainer::MetricsRecord> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader)
    throw format_error("bad metrics CSV header in " + path);
  std::vector<trainer::MetricsRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[6];
    for (int i = 0; i < 6; ++i)
      if (!std::getline(ss, f[i], ',')) throw format_error("short metrics row: " + line);
    trainer::MetricsRecord r;
    r.model_tag = f[0];
    r.attack = f[1];
    r.epsilon = std::stof(f[2]);
    r.seed = std::stoull(f[3]);
    r.accuracy = std::stof(f[4]);
    r.seconds = std::stod(f[5]);
    records.push_back(std::move(r));
  }
  return records;
}

/// Mean +/- sample standard deviation (n-1) across seeds per (model, attack,
/// epsilon) cell, rendered as "0.9712±0.0012".
inline void emit_summary_csv(std::vector<trainer::MetricsRecord> records, const std::string& path) {
  std::sort(records.begin(), records.end(), detail::record_order);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write " + path);
  out << "model,attack,epsilon,accuracy,n\n";
  for (std::size_t i = 0; i < records.size();) {
    std::size_t j = i;
    double sum = 0;
    while (j < records.size() && records[j].model_tag == records[i].model_tag &&
           records[j].attack == records[i].attack && records[j].epsilon == records[i].epsilon)
      sum += records[j++].accuracy;
    const std::size_t n = j - i;
    const double mean = sum / static_cast<double>(n);
    double var = 0;
    for (std::size_t t = i; t < j; ++t)
      var += (records[t].accuracy - mean) * (records[t].accuracy - mean);
    const double sd = n > 1 ? std::sqrt(var / static_cast<double>(n - 1)) : 0.0;
    out << records[i].model_tag << "," << records[i].attack << ","
        << detail::fmt("%.2f", records[i].epsilon) << "," << detail::fmt("%.4f", mean) << "±"
        << detail::fmt("%.4f", sd) << "," << n << "\n";
    i = j;
  }
}

// ---------------------------------------------------------------------------
// Orchestration

namespace detail {

inline std::string tag_slug(const std::string& tag) {
  std::string s;
  for (char c : tag) s += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
  return s;
}

}  // namespace detail

struct Paths {
  std::string out;
  std::string metrics() const { return out + "/metrics.csv"; }
  std::string summary() const { return out + "/summary.csv"; }
  std::string reference(std::uint64_t seed) const {
    return out + "/reference_seed" + std::to_string(seed) + ".ckpt";
  }
  std::string soft_labels(std::uint64_t seed) const {
    return out + "/softlabels_seed" + std::to_string(seed) + ".bin";
  }
  std::string model(const std::string& tag, std::uint64_t seed) const {
    return out + "/" + detail::tag_slug(tag) + "_seed" + std::to_string(seed) + ".ckpt";
  }
};

struct RunResult {
  std::vector<trainer::MetricsRecord> records;
  bool csv_rewritten = false;
};

/// Trains and evaluates every (model, seed) cell of the config. Re-runs are
/// idempotent: trained checkpoints are reused and cells already present in the
/// metrics CSV are skipped, so a complete second run leaves files untouched.
inline RunResult run_experiment(const ExperimentConfig& cfg, bool verbose = false,
                                std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  cfg.validate();
  Paths paths{cfg.out_dir};
  fs::create_directories(cfg.out_dir);

  const std::string root = resolve_dataset_root(cfg);
  if (!fs::exists(root + "/train-images-idx3-ubyte"))
    data::ensure_synthetic_idx(root, cfg.train_subset, cfg.test_subset, cfg.synthetic_seed);
  auto train_full = data::load_split(root, "train");
  auto test_full = data::load_split(root, "test");
  auto train = train_full.size() > cfg.train_subset ? data::take_first(train_full, cfg.train_subset)
                                                    : std::move(train_full);
  auto test = test_full.size() > cfg.test_subset ? data::take_first(test_full, cfg.test_subset)
                                                 : std::move(test_full);

  const auto say = [&](const std::string& msg) {
    if (verbose && log) *log << msg << "\n" << std::flush;
  };

  RunResult result;
  if (fs::exists(paths.metrics())) result.records = read_metrics_csv(paths.metrics());
  std::set<std::string> have;
  for (const auto& r : result.records) have.insert(detail::cell_key(r));

  bool changed = false;
  const bool any_ref = std::any_of(cfg.models.begin(), cfg.models.end(),
                                   [](const std::string& t) { return trainer::parse_tag(t).ref; });
  for (std::uint64_t seed : cfg.seeds) {
    vib::SoftLabelSet soft;
    bool soft_ready = false;
    const auto ensure_soft = [&] {
      if (soft_ready) return;
      if (fs::exists(paths.soft_labels(seed))) {
        soft = vib::SoftLabelSet::load(paths.soft_labels(seed));
      } else {
        say("pretraining reference, seed " + std::to_string(seed));
        auto pre = trainer::pretrain_reference(train, test, cfg.defaults.epochs, cfg.defaults.lr,
                                               seed + 1000);
        trainer::Model ref_model;
        ref_model.tag = "Baseline";
        ref_model.baseline = pre.reference;
        checkpoint::save(paths.reference(seed), ref_model, seed);
        pre.soft_labels.save(paths.soft_labels(seed));
        soft = std::move(pre.soft_labels);
      }
      soft_ready = true;
    };
    if (any_ref) ensure_soft();

    for (const auto& tag : cfg.models) {
      const auto kind = trainer::parse_tag(tag);
      std::vector<std::string> expected;
      for (auto k : cfg.grid.kinds)
        for (float e : cfg.grid.epsilons) {
          trainer::MetricsRecord probe{tag, trainer::attack_name(k), e, seed, 0, 0};
          expected.push_back(detail::cell_key(probe));
        }
      const bool complete = fs::exists(paths.model(tag, seed)) &&
                            std::all_of(expected.begin(), expected.end(),
                                        [&](const std::string& c) { return have.count(c) > 0; });
      if (complete) {
        say("skipping " + tag + " seed " + std::to_string(seed) + " (complete)");
        continue;
      }
      trainer::Model model;
      if (fs::exists(paths.model(tag, seed))) {
        say("loading " + tag + " seed " + std::to_string(seed));
        model = checkpoint::load(paths.model(tag, seed)).model;
      } else {
        say("training " + tag + " seed " + std::to_string(seed));
        if (kind.ref) ensure_soft();
        auto tc = cfg.train_config(tag, seed);
        model = trainer::train_model(tc, train, kind.ref ? &soft : nullptr);
        checkpoint::save(paths.model(tag, seed), model, seed);
      }
      say("evaluating " + tag + " seed " + std::to_string(seed));
      auto recs = trainer::evaluate(model, test, cfg.grid, seed);
      // replace any stale cells for this (tag, seed)
      std::set<std::string> fresh;
      for (const auto& r : recs) fresh.insert(detail::cell_key(r));
      std::erase_if(result.records,
                    [&](const trainer::MetricsRecord& r) { return fresh.count(detail::cell_key(r)); });
      for (auto& r : recs) {
        have.insert(detail::cell_key(r));
        result.records.push_back(std::move(r));
      }
      changed = true;
    }
  }

  if (changed || !fs::exists(paths.metrics())) {
    emit_metrics_csv(result.records, paths.metrics());
    emit_summary_csv(result.records, paths.summary());
    result.csv_rewritten = true;
  }
  std::sort(result.records.begin(), result.records.end(), detail::record_order);
  return result;
}

}  // namespace vibtk::experiment
