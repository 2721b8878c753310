#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>

#include "vibtk/autograd.hpp"
#include "vibtk/errors.hpp"
#include "vibtk/rng.hpp"
#include "vibtk/tensor.hpp"

namespace vibtk::attacks {

using autograd::Ref;
using autograd::Tape;

enum class Kind { Fgsm, Pgd };
enum class LossMode { HardCe, SoftRef };

struct AttackConfig {
  Kind kind = Kind::Fgsm;
  float eps = 0.0f;
  float alpha = 0.0f;  // pgd step size
  int steps = 1;       // pgd step count
  bool random_start = false;
  LossMode loss_mode = LossMode::HardCe;

  void validate() const {
    if (eps < 0.0f) throw config_error("attack epsilon must be nonnegative");
    if (kind == Kind::Pgd && (alpha <= 0.0f || steps < 1))
      throw config_error("pgd needs alpha > 0 and steps >= 1");
  }

  static AttackConfig fgsm_at(float eps) {
    AttackConfig c;
    c.kind = Kind::Fgsm;
    c.eps = eps;
    return c;
  }
  static AttackConfig pgd_at(float eps, float alpha, int steps, bool random_start) {
    AttackConfig c{Kind::Pgd, eps, alpha, steps, random_start};
    c.validate();
    return c;
  }
};

/// Records the attacked loss J(x) for a batch leaf; captures the frozen model
/// and the attack targets (hard labels or clean soft labels).
using LossGraph = std::function<Ref(Tape&, Ref)>;

namespace detail {

inline float sign0(float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

inline std::vector<float> input_grad(const LossGraph& loss, const Tensor& x) {
  Tape tape;
  auto xref = tape.leaf(x, true);
  tape.backward(loss(tape, xref));
  if (xref->grad.empty()) return std::vector<float>(x.size(), 0.0f);  // loss independent of x
  return xref->grad;
}

}  // namespace detail

/// x_adv = clip_[0,1](x + eps * sign(grad_x J)), with sign(0) = 0.
inline Tensor fgsm(const LossGraph& loss, const Tensor& x, float eps) {
  if (eps < 0.0f) throw config_error("attack epsilon must be nonnegative");
  const auto g = detail::input_grad(loss, x);
  Tensor adv = x;
  for (std::size_t i = 0; i < adv.size(); ++i)
    adv.data[i] = std::clamp(adv.data[i] + eps * detail::sign0(g[i]), 0.0f, 1.0f);
  return adv;
}

/// Iterated sign steps projected onto B_inf(x0, eps) intersected with [0,1]^d
/// (epsilon-ball clamp first, then domain clamp). Optional uniform random
/// start inside the ball.
inline Tensor pgd(const LossGraph& loss, const Tensor& x0, const AttackConfig& cfg,
                  std::uint64_t seed) {
  if (cfg.kind != Kind::Pgd) throw config_error("pgd called with non-pgd config");
  cfg.validate();
  Tensor x = x0;
  const auto project = [&](Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      const float lo = x0.data[i] - cfg.eps, hi = x0.data[i] + cfg.eps;
      t.data[i] = std::clamp(std::clamp(t.data[i], lo, hi), 0.0f, 1.0f);
    }
  };
  if (cfg.random_start) {
    Rng rng(seed);
    for (auto& v : x.data) v += rng.uniform(-cfg.eps, cfg.eps);
    project(x);
  }
  for (int s = 0; s < cfg.steps; ++s) {
    const auto g = detail::input_grad(loss, x);
    for (std::size_t i = 0; i < x.size(); ++i) x.data[i] += cfg.alpha * detail::sign0(g[i]);
    project(x);
  }
  return x;
}

/// Dispatch on config.kind; fgsm ignores seed.
inline Tensor attack(const LossGraph& loss, const Tensor& x, const AttackConfig& cfg,
                     std::uint64_t seed) {
  return cfg.kind == Kind::Fgsm ? fgsm(loss, x, cfg.eps) : pgd(loss, x, cfg, seed);
}

}  // namespace vibtk::attacks
