#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "vibtk/attacks.hpp"
#include "vibtk/autograd.hpp"
#include "vibtk/data.hpp"
#include "vibtk/errors.hpp"
#include "vibtk/mi.hpp"
#include "vibtk/nn.hpp"
#include "vibtk/rng.hpp"
#include "vibtk/serialize.hpp"
#include "vibtk/tensor.hpp"
#include "vibtk/vib.hpp"

namespace vibtk::trainer {

using autograd::Ref;
using autograd::Tape;

// ---------------------------------------------------------------------------
// Model tags

struct ModelKind {
  bool vib = false;         // has encoder/classifier split
  bool mine = false;        // DV regularizer (otherwise closed-form KL when vib)
  bool ref = false;         // soft-label regression task loss
  bool adversarial = false; // mixed clean/adversarial batches
  attacks::Kind train_attack = attacks::Kind::Pgd;
};

inline const std::vector<std::string>& model_tags() {
  static const std::vector<std::string> tags = {
      "Baseline",       "Baseline(REF)", "Baseline(PGD)",  "Baseline(PGD+REF)",
      "VIB-R",          "VIB-M",         "VIB-R(REF)",     "VIB-M(REF)",
      "VIB-M(PGD)",     "VIB-M(REF+FGSM)", "VIB-M(REF+PGD)"};
  return tags;
}

inline ModelKind parse_tag(const std::string& tag) {
  ModelKind k;
  if (tag == "Baseline") return k;
  if (tag == "Baseline(REF)") { k.ref = true; return k; }
  if (tag == "Baseline(PGD)") { k.adversarial = true; return k; }
  if (tag == "Baseline(PGD+REF)") { k.adversarial = true; k.ref = true; return k; }
  k.vib = true;
  if (tag == "VIB-R") return k;
  if (tag == "VIB-R(REF)") { k.ref = true; return k; }
  k.mine = true;
  if (tag == "VIB-M") return k;
  if (tag == "VIB-M(REF)") { k.ref = true; return k; }
  if (tag == "VIB-M(PGD)") { k.adversarial = true; return k; }
  if (tag == "VIB-M(REF+FGSM)") {
    k.adversarial = true;
    k.ref = true;
    k.train_attack = attacks::Kind::Fgsm;
    return k;
  }
  if (tag == "VIB-M(REF+PGD)") { k.adversarial = true; k.ref = true; return k; }
  std::string all;
  for (const auto& t : model_tags()) all += (all.empty() ? "" : ", ") + t;
  throw config_error("unknown model tag '" + tag + "'; valid tags: " + all);
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  std::size_t m = 100, k = 50;
  float lambda = 0.3f;
  int epochs = 10;
  float lr = 0.001f;
  std::uint64_t seed = 1;
  attacks::AttackConfig attack;  // training-time attack (PGD/FGSM per tag)
  vib::VIBConfig vibcfg{0.001f, 256, vib::Mode::M};
  std::string model_tag = "Baseline";
  float clean_noise_sigma = 0.05f;

  void validate() const {
    parse_tag(model_tag);
    if (k > m) throw config_error("adversarial slots k exceed batch size m");
    if (lambda < 0.0f) throw config_error("lambda must be nonnegative");
    if (epochs < 1) throw config_error("epochs must be positive");
    if (clean_noise_sigma < 0.0f) throw config_error("clean_noise_sigma must be nonnegative");
    attack.validate();
  }
};

/// Default training settings plus the matching training attack for the tag.
inline TrainConfig default_config(const std::string& tag, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.model_tag = tag;
  cfg.seed = seed;
  const auto kind = parse_tag(tag);
  if (kind.adversarial) {
    cfg.attack = kind.train_attack == attacks::Kind::Fgsm
                     ? attacks::AttackConfig::fgsm_at(0.3f)
                     : attacks::AttackConfig::pgd_at(0.3f, 0.01f, 20, true);
    // Adversarial samples are defined through the hard-label objective J(w;x;y)
    // even for REF models; only the training loss on them uses the soft labels.
    cfg.attack.loss_mode = attacks::LossMode::HardCe;
  } else {
    cfg.k = 0;
  }
  cfg.vibcfg.mode = kind.mine ? vib::Mode::M : vib::Mode::R;
  return cfg;
}

struct MetricsRecord {
  std::string model_tag;
  std::string attack;  // "fgsm" | "pgd"
  float epsilon = 0.0f;
  std::uint64_t seed = 0;
  float accuracy = 0.0f;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<float> epoch_loss;        // mean combined loss per epoch
  std::vector<float> epoch_clean_acc;   // training accuracy on clean slots
  std::vector<float> epoch_adv_acc;     // training accuracy on adversarial slots
  std::vector<float> epoch_dv;          // mean DV estimate (mine models)
  std::vector<double> epoch_seconds;
};

// ---------------------------------------------------------------------------
// Model

struct Model {
  std::string tag = "Baseline";
  ModelKind kind;
  vib::VIBConfig vibcfg{0.001f, 256, vib::Mode::R};
  nn::Network baseline;              // non-VIB tags
  nn::Network encoder, classifier;   // VIB tags
  nn::Network critic;                // mine tags
  TrainLog log;

  /// C-dim output head. VIB models are read out at z = mu by default; with an
  /// rng the latent is sampled, matching the stochastic test-time readout.
  Ref predict(Tape& tape, Ref x, Rng* rng = nullptr) const {
    if (!kind.vib) return baseline.forward(tape, x, false).out;
    auto heads = vib::split_heads(tape, encoder.forward(tape, x, false).out, vibcfg.eta);
    Ref zin = heads.mu;
    if (rng) zin = vib::reparam_sample(tape, heads.mu, heads.log_sigma, *rng).z;
    return classifier.forward(tape, zin, false).out;
  }
};

inline Model make_model(const TrainConfig& cfg) {
  cfg.validate();
  Model model;
  model.tag = cfg.model_tag;
  model.kind = parse_tag(cfg.model_tag);
  model.vibcfg = cfg.vibcfg;
  Rng seeder(cfg.seed);
  if (!model.kind.vib) {
    model.baseline = nn::make_mlp(nn::Role::Reference, "base", {784, 512, 512, 10});
    nn::init_weights(model.baseline, seeder.engine()());
    return model;
  }
  const std::size_t eta = cfg.vibcfg.eta;
  model.encoder = nn::make_mlp(nn::Role::Encoder, "enc", {784, 512, 2 * eta});
  model.classifier = nn::make_mlp(nn::Role::Classifier, "cls", {eta, 512, 10});
  nn::init_weights(model.encoder, seeder.engine()());
  nn::init_weights(model.classifier, seeder.engine()());
  if (model.kind.mine) {
    model.critic = nn::make_mlp(nn::Role::Discriminator, "disc", {196 + eta, 512, 512, 1});
    nn::init_weights(model.critic, seeder.engine()());
  }
  return model;
}

/// Test accuracy by argmax over the deterministic output head.
inline float accuracy(const Model& model, const Tensor& x, const std::vector<int>& labels,
                      std::size_t chunk = 500, Rng* rng = nullptr) {
  const std::size_t n = x.rows(), d = x.cols();
  std::size_t correct = 0;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t b = std::min(chunk, n - start);
    Tensor xb = Tensor::zeros({b, d});
    std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>(start * d), b * d, xb.data.begin());
    Tape tape;
    auto out = model.predict(tape, tape.constant(xb), rng);
    for (std::size_t i = 0; i < b; ++i) {
      std::size_t arg = 0;
      for (std::size_t c = 1; c < out->value.cols(); ++c)
        if (out->value.at(i, c) > out->value.at(i, arg)) arg = c;
      if (static_cast<int>(arg) == labels[start + i]) ++correct;
    }
  }
  return static_cast<float>(correct) / static_cast<float>(n);
}

// ---------------------------------------------------------------------------
// Stage I: reference pretraining

struct PretrainResult {
  nn::Network reference;
  vib::SoftLabelSet soft_labels;
  float test_accuracy = 0.0f;
};

inline PretrainResult pretrain_reference(const data::Dataset& train, const data::Dataset& test,
                                         int epochs, float lr, std::uint64_t seed) {
  PretrainResult result;
  // "base" prefix keeps the reference checkpoint loadable as a Baseline model
  result.reference = nn::make_mlp(nn::Role::Reference, "base", {784, 512, 512, 10});
  nn::init_weights(result.reference, seed);
  auto opt = nn::OptimizerState::adam(lr);
  Rng rng(seed + 1);
  for (int epoch = 0; epoch < epochs; ++epoch)
    for (auto& b : data::make_batches(train, 100, rng.engine()())) {
      Tape tape;
      auto fwd = result.reference.forward(tape, tape.constant(b.inputs));
      tape.backward(tape.softmax_cross_entropy(fwd.out, b.labels));
      nn::optimizer_step(opt, result.reference, fwd.params);
    }
  Model probe;
  probe.baseline = result.reference;
  result.test_accuracy = accuracy(probe, test.images, test.labels);
  if (result.test_accuracy < 0.90f)
    throw consistency_error("reference undertrained: clean test accuracy " +
                            std::to_string(result.test_accuracy));
  result.soft_labels = vib::extract_soft_labels(result.reference, train);
  return result;
}

// ---------------------------------------------------------------------------
// Stage II/III: mixed-batch training step

struct StepLosses {
  float total = 0, task = 0, kl = 0, dv = 0;
  float clean_acc = 0, adv_acc = 0;  // training accuracy on the respective slots
};

struct Optimizers {
  nn::OptimizerState main_a, main_b, critic;
  explicit Optimizers(float lr)
      : main_a(nn::OptimizerState::adam(lr)),
        main_b(nn::OptimizerState::adam(lr)),
        critic(nn::OptimizerState::adam(lr)) {}
};

namespace detail {

/// Attack loss against the model's own training objective: hard CE
/// or squared distance to the clean-input soft labels.
inline attacks::LossGraph training_attack_loss(const Model& model, const std::vector<int>& labels,
                                               const Tensor* soft_targets, Rng* rng = nullptr) {
  if (soft_targets) {
    Tensor targets = *soft_targets;
    return [&model, targets, rng](Tape& tape, Ref x) {
      return vib::ref_loss(tape, model.predict(tape, x, rng), tape.constant(targets));
    };
  }
  return [&model, labels, rng](Tape& tape, Ref x) {
    return tape.softmax_cross_entropy(model.predict(tape, x, rng), labels);
  };
}

inline Tensor take_rows(const Tensor& t, std::size_t r0, std::size_t r1) {
  const std::size_t d = t.cols();
  Tensor out = Tensor::zeros({r1 - r0, d});
  std::copy_n(t.data.begin() + static_cast<std::ptrdiff_t>(r0 * d), (r1 - r0) * d, out.data.begin());
  return out;
}

/// Row-weight matrix for folding mixed-batch weights into elementwise sums.
inline Tensor weight_matrix(const std::vector<float>& w, std::size_t cols) {
  Tensor out = Tensor::zeros({w.size(), cols});
  for (std::size_t i = 0; i < w.size(); ++i)
    for (std::size_t j = 0; j < cols; ++j) out.at(i, j) = w[i];
  return out;
}

/// Weighted batch KL against the standard-normal prior: sum_i w_i * KL_i.
inline Ref weighted_kl(Tape& tape, Ref mu, Ref log_sigma, const std::vector<float>& w) {
  auto term = tape.add_const(tape.add(tape.square(mu), tape.exp(tape.scale(log_sigma, 2.0f))), -1.0f);
  term = tape.sub(term, tape.scale(log_sigma, 2.0f));
  return tape.scale(tape.sum(tape.mul(term, tape.constant(weight_matrix(w, mu->value.cols())))), 0.5f);
}

inline void check_finite(const Ref& node, const char* term) {
  if (!node->value.all_finite())
    throw numeric_error(std::string("non-finite loss in ") + term + " term");
}

inline float slot_accuracy(const Tensor& out, const std::vector<int>& labels, std::size_t r0,
                           std::size_t r1) {
  if (r0 == r1) return 0.0f;
  std::size_t correct = 0;
  for (std::size_t i = r0; i < r1; ++i) {
    std::size_t arg = 0;
    for (std::size_t c = 1; c < out.cols(); ++c)
      if (out.at(i, c) > out.at(i, arg)) arg = c;
    if (static_cast<int>(arg) == labels[i]) ++correct;
  }
  return static_cast<float>(correct) / static_cast<float>(r1 - r0);
}

}  // namespace detail

/// One mixed-batch step: the first k batch slots are replaced by attacks on the
/// current model, the rest get clean Gaussian noise; the critic takes one
/// ascent step on the DV bound, then encoder/classifier (or the baseline net)
/// take one descent step on the combined loss.
inline StepLosses train_step(Model& model, Optimizers& opts, data::Batch& batch,
                             const vib::SoftLabelSet* soft, const TrainConfig& cfg, Rng& rng) {
  const std::size_t m = batch.labels.size();
  const std::size_t k = model.kind.adversarial ? std::min(cfg.k, m) : 0;
  if (model.kind.ref && !soft) throw config_error("REF model trained without soft labels");

  Tensor soft_targets;  // [m x C] clean-input reference outputs, REF models only
  if (model.kind.ref) soft_targets = soft->gather(batch.ids);

  // -- perturb the batch
  Tensor x = batch.inputs;
  if (k > 0) {
    Tensor xk = detail::take_rows(x, 0, k);
    std::vector<int> lk(batch.labels.begin(), batch.labels.begin() + static_cast<std::ptrdiff_t>(k));
    Tensor sk;
    const bool soft_attack = model.kind.ref && cfg.attack.loss_mode == attacks::LossMode::SoftRef;
    if (soft_attack) sk = detail::take_rows(soft_targets, 0, k);
    auto loss = detail::training_attack_loss(model, lk, soft_attack ? &sk : nullptr);
    Tensor adv = attacks::attack(loss, xk, cfg.attack, rng.engine()());
    std::copy(adv.data.begin(), adv.data.end(), x.data.begin());
    std::fill(batch.adversarial.begin(), batch.adversarial.begin() + static_cast<std::ptrdiff_t>(k), 1);
  }
  const std::size_t d = x.cols();
  for (std::size_t i = k * d; i < m * d; ++i)
    x.data[i] = std::clamp(x.data[i] + rng.normal(0.0f, cfg.clean_noise_sigma), 0.0f, 1.0f);

  // -- mixed-batch weights
  const float denom = static_cast<float>(m - k) + cfg.lambda * static_cast<float>(k);
  std::vector<float> w(m);
  for (std::size_t i = 0; i < m; ++i) w[i] = (i < k ? cfg.lambda : 1.0f) / denom;

  StepLosses losses;

  // -- critic ascent (frozen encoder, fresh latent draw)
  if (model.kind.mine) {
    Tape tc;
    auto xref = tc.constant(x);
    auto heads = vib::split_heads(tc, model.encoder.forward(tc, xref, false).out, model.vibcfg.eta);
    auto latent = vib::reparam_sample(tc, heads.mu, heads.log_sigma, rng);
    auto xfeat = tc.avg_pool2x2(xref, 28, 28);
    auto fwd_j = model.critic.forward(tc, tc.concat_cols(xfeat, latent.z));
    auto fwd_i = model.critic.forward(
        tc, tc.constant(mi::shuffle_marginal(xfeat->value, latent.z->value, rng.engine()())));
    auto dv = mi::dv_estimate(tc, fwd_j.out, fwd_i.out);
    detail::check_finite(dv, "dv");
    if (dv->value.data[0] > 20.0f)
      throw numeric_error("critic blow-up: DV estimate " + std::to_string(dv->value.data[0]));
    // Ascend only while the bound is in its stable band; once the critic
    // saturates the estimate, further ascent steps only overfit the batch and
    // eventually blow the estimate up.
    if (dv->value.data[0] <= 10.0f) {
      tc.backward(dv);
      for (std::size_t i = 0; i < fwd_j.params.size(); ++i) {
        auto& g = fwd_j.params[i]->grad;
        const auto& g2 = fwd_i.params[i]->grad;
        if (g.empty())
          fwd_j.params[i]->grad = g2;
        else if (!g2.empty())
          for (std::size_t j = 0; j < g.size(); ++j) g[j] += g2[j];
      }
      nn::optimizer_step(opts.critic, model.critic, fwd_j.params, -1.0f);
    }
  }

  // -- main descent
  Tape tape;
  auto xref = tape.constant(x);
  Ref out, total, task;
  nn::Network::Fwd enc_fwd, cls_fwd, base_fwd;
  if (model.kind.vib) {
    enc_fwd = model.encoder.forward(tape, xref);
    auto heads = vib::split_heads(tape, enc_fwd.out, model.vibcfg.eta);
    auto latent = vib::reparam_sample(tape, heads.mu, heads.log_sigma, rng);
    cls_fwd = model.classifier.forward(tape, latent.z);
    out = cls_fwd.out;
    if (model.kind.ref) {
      task = tape.sum(tape.mul(tape.square(tape.sub(out, tape.constant(soft_targets))),
                               tape.constant(detail::weight_matrix(w, out->value.cols()))));
    } else {
      task = tape.softmax_cross_entropy_weighted(out, batch.labels, w);
    }
    detail::check_finite(task, "task");
    losses.task = task->value.data[0];
    if (model.kind.mine) {
      auto xfeat = tape.avg_pool2x2(xref, 28, 28);
      auto fwd_j = model.critic.forward(tape, tape.concat_cols(xfeat, latent.z), false);
      auto fwd_i = model.critic.forward(
          tape, tape.constant(mi::shuffle_marginal(xfeat->value, latent.z->value, rng.engine()())),
          false);
      auto dv = mi::dv_estimate(tape, fwd_j.out, fwd_i.out);
      detail::check_finite(dv, "dv");
      losses.dv = dv->value.data[0];
      total = vib::vib_m_loss(tape, task, dv, model.vibcfg.beta);
    } else {
      auto kl = detail::weighted_kl(tape, heads.mu, heads.log_sigma, w);
      detail::check_finite(kl, "kl");
      losses.kl = kl->value.data[0];
      total = model.vibcfg.beta == 0.0f ? task : tape.add(task, tape.scale(kl, model.vibcfg.beta));
    }
  } else {
    base_fwd = model.baseline.forward(tape, xref);
    out = base_fwd.out;
    if (model.kind.ref) {
      task = tape.sum(tape.mul(tape.square(tape.sub(out, tape.constant(soft_targets))),
                               tape.constant(detail::weight_matrix(w, out->value.cols()))));
    } else {
      task = tape.softmax_cross_entropy_weighted(out, batch.labels, w);
    }
    detail::check_finite(task, "task");
    losses.task = task->value.data[0];
    total = task;
  }
  detail::check_finite(total, "total");
  losses.total = total->value.data[0];
  tape.backward(total);
  if (model.kind.vib) {
    nn::optimizer_step(opts.main_a, model.encoder, enc_fwd.params);
    nn::optimizer_step(opts.main_b, model.classifier, cls_fwd.params);
  } else {
    nn::optimizer_step(opts.main_a, model.baseline, base_fwd.params);
  }
  losses.adv_acc = detail::slot_accuracy(out->value, batch.labels, 0, k);
  losses.clean_acc = detail::slot_accuracy(out->value, batch.labels, k, m);
  return losses;
}

/// Full training loop for one tag.
inline Model train_model(const TrainConfig& cfg, const data::Dataset& train,
                         const vib::SoftLabelSet* soft = nullptr) {
  auto model = make_model(cfg);
  Optimizers opts(cfg.lr);
  Rng rng(cfg.seed * 0x9e3779b97f4a7c15ull + 17);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double loss_sum = 0, clean_sum = 0, adv_sum = 0, dv_sum = 0;
    std::size_t nb = 0;
    for (auto& batch : data::make_batches(train, cfg.m, rng.engine()())) {
      auto losses = train_step(model, opts, batch, soft, cfg, rng);
      loss_sum += losses.total;
      clean_sum += losses.clean_acc;
      adv_sum += losses.adv_acc;
      dv_sum += losses.dv;
      ++nb;
    }
    const auto t1 = std::chrono::steady_clock::now();
    model.log.epoch_loss.push_back(static_cast<float>(loss_sum / nb));
    model.log.epoch_clean_acc.push_back(static_cast<float>(clean_sum / nb));
    model.log.epoch_adv_acc.push_back(static_cast<float>(adv_sum / nb));
    model.log.epoch_dv.push_back(static_cast<float>(dv_sum / nb));
    model.log.epoch_seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  return model;
}

// ---------------------------------------------------------------------------
// Evaluation grid

struct EvalConfig {
  std::vector<attacks::Kind> kinds = {attacks::Kind::Fgsm, attacks::Kind::Pgd};
  std::vector<float> epsilons = {0.0f, 0.05f, 0.10f, 0.15f, 0.20f, 0.25f, 0.30f};
  float pgd_alpha = 0.01f;
  int pgd_steps = 40;
  bool pgd_random_start = true;
  bool sample_latent = false;  // stochastic test-time readout for VIB models
  std::size_t chunk = 500;
};

inline const char* attack_name(attacks::Kind k) {
  return k == attacks::Kind::Fgsm ? "fgsm" : "pgd";
}

/// Accuracy over the test split per (attack, epsilon) cell. Evaluation attacks
/// always use hard CE against true labels; epsilon 0 is exactly the clean
/// accuracy.
inline std::vector<MetricsRecord> evaluate(const Model& model, const data::Dataset& test,
                                           const EvalConfig& grid, std::uint64_t seed) {
  std::vector<MetricsRecord> records;
  const std::size_t n = test.size(), d = test.images.cols();
  for (auto kind : grid.kinds) {
    for (float eps : grid.epsilons) {
      if (eps < 0.0f) throw config_error("evaluation epsilon must be nonnegative");
      const auto t0 = std::chrono::steady_clock::now();
      Rng readout_rng(seed * 0x2545f4914f6cdd1dull + 3 +
                      static_cast<std::uint64_t>(eps * 1e6f));
      Rng* readout = grid.sample_latent && model.kind.vib ? &readout_rng : nullptr;
      float acc;
      if (eps == 0.0f) {
        acc = accuracy(model, test.images, test.labels, grid.chunk, readout);
      } else {
        attacks::AttackConfig cfg =
            kind == attacks::Kind::Fgsm
                ? attacks::AttackConfig::fgsm_at(eps)
                : attacks::AttackConfig::pgd_at(eps, grid.pgd_alpha, grid.pgd_steps,
                                                grid.pgd_random_start);
        std::size_t correct = 0;
        const std::string cell_name = attack_name(kind);
        Rng cell_rng(seed ^ serialize::crc32(cell_name.data(), cell_name.size()) ^
                     static_cast<std::uint64_t>(eps * 1e6f));
        for (std::size_t start = 0; start < n; start += grid.chunk) {
          const std::size_t b = std::min(grid.chunk, n - start);
          Tensor xb = detail::take_rows(test.images, start, start + b);
          std::vector<int> lb(test.labels.begin() + static_cast<std::ptrdiff_t>(start),
                              test.labels.begin() + static_cast<std::ptrdiff_t>(start + b));
          auto loss = detail::training_attack_loss(model, lb, nullptr, readout);  // hard CE
          Tensor adv = attacks::attack(loss, xb, cfg, cell_rng.engine()());
          Tape tape;
          auto out = model.predict(tape, tape.constant(adv), readout);
          for (std::size_t i = 0; i < b; ++i) {
            std::size_t arg = 0;
            for (std::size_t c = 1; c < out->value.cols(); ++c)
              if (out->value.at(i, c) > out->value.at(i, arg)) arg = c;
            if (static_cast<int>(arg) == lb[i]) ++correct;
          }
        }
        acc = static_cast<float>(correct) / static_cast<float>(n);
      }
      const auto t1 = std::chrono::steady_clock::now();
      records.push_back({model.tag, attack_name(kind), eps, seed, acc,
                         std::chrono::duration<double>(t1 - t0).count()});
    }
  }
  return records;
}

}  // namespace vibtk::trainer
