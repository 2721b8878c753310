#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "vibtk/autograd.hpp"
#include "vibtk/data.hpp"
#include "vibtk/errors.hpp"
#include "vibtk/nn.hpp"
#include "vibtk/rng.hpp"
#include "vibtk/tensor.hpp"

namespace vibtk::mi {

using autograd::Ref;
using autograd::Tape;

/// Mean over the batch of KL(N(mu, diag(sigma^2)) || N(0, I)) with
/// sigma = exp(log_sigma):
///   0.5 * sum_j (mu^2 + sigma^2 - 1 - 2*log_sigma)
inline Ref kl_std_normal(Tape& tape, Ref mu, Ref log_sigma) {
  if (!same_shape(mu->value, log_sigma->value))
    throw shape_error("kl_std_normal: mu " + mu->value.shape_str() + " vs log_sigma " +
                      log_sigma->value.shape_str());
  const auto b = static_cast<float>(mu->value.rows());
  const auto total = static_cast<float>(mu->value.size());
  auto t = tape.add(tape.sum(tape.square(mu)), tape.sum(tape.exp(tape.scale(log_sigma, 2.0f))));
  t = tape.sub(t, tape.scale(tape.sum(log_sigma), 2.0f));
  t = tape.add_const(t, -total);
  return tape.scale(t, 0.5f / b);
}

/// Donsker-Varadhan value: mean(t_joint) - log(mean(exp(t_indep))). Critic
/// outputs pass through the tape's clamped exp, so extreme values stay finite.
inline Ref dv_estimate(Tape& tape, Ref t_joint, Ref t_indep) {
  if (t_joint->value.rows() < 2 || t_indep->value.rows() < 2)
    throw contract_error("dv_estimate: need at least 2 samples per side");
  return tape.sub(tape.mean(t_joint), tape.log(tape.mean(tape.exp(t_indep))));
}

/// Re-pairs x rows with deranged z rows to draw from the product of marginals.
/// Output rows are [x_i | z_pi(i)] with pi a fixed-seed derangement.
inline Tensor shuffle_marginal(const Tensor& x_feats, const Tensor& z, std::uint64_t seed) {
  const std::size_t b = x_feats.rows();
  if (z.rows() != b)
    throw shape_error("shuffle_marginal: " + x_feats.shape_str() + " vs " + z.shape_str());
  Rng rng(seed);
  const auto pi = rng.derangement(b);  // throws for b < 2
  const std::size_t dx = x_feats.cols(), dz = z.cols();
  Tensor out = Tensor::zeros({b, dx + dz});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < dx; ++j) out.at(i, j) = x_feats.at(i, j);
    for (std::size_t j = 0; j < dz; ++j) out.at(i, dx + j) = z.at(pi[i], j);
  }
  return out;
}

inline Tensor concat_pairs(const Tensor& x_feats, const Tensor& z) {
  const std::size_t b = x_feats.rows(), dx = x_feats.cols(), dz = z.cols();
  if (z.rows() != b) throw shape_error("concat_pairs: row mismatch");
  Tensor out = Tensor::zeros({b, dx + dz});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < dx; ++j) out.at(i, j) = x_feats.at(i, j);
    for (std::size_t j = 0; j < dz; ++j) out.at(i, dx + j) = z.at(i, j);
  }
  return out;
}

/// DV value of a fixed critic on given pairs (no training).
inline float mine_evaluate(const nn::Network& critic, const std::vector<data::GaussianPair>& pairs,
                           std::uint64_t seed) {
  const std::size_t n = pairs.size();
  Tensor x({n, 1}, std::vector<float>(n)), z({n, 1}, std::vector<float>(n));
  for (std::size_t i = 0; i < n; ++i) {
    x.data[i] = pairs[i].x;
    z.data[i] = pairs[i].z;
  }
  Tape tape;
  auto tj = critic.forward(tape, tape.constant(concat_pairs(x, z)), false).out;
  auto ti = critic.forward(tape, tape.constant(shuffle_marginal(x, z, seed)), false).out;
  return dv_estimate(tape, tj, ti)->value.data[0];
}

/// MINE: full-batch Adam ascent of the DV bound. Returns the estimate averaged
/// over the final 10% of steps.
inline float mine_train(const std::vector<data::GaussianPair>& pairs, nn::Network& critic, int steps,
                        float lr, std::uint64_t seed) {
  const std::size_t n = pairs.size();
  if (n < 4096) throw contract_error("mine_train: need at least 4096 pairs");
  if (critic.output_dim() != 1) throw config_error("mine_train: critic must be scalar-output");
  Tensor x({n, 1}, std::vector<float>(n)), z({n, 1}, std::vector<float>(n));
  for (std::size_t i = 0; i < n; ++i) {
    x.data[i] = pairs[i].x;
    z.data[i] = pairs[i].z;
  }
  const Tensor joint = concat_pairs(x, z);
  Rng shuffle_rng(seed);
  auto opt = nn::OptimizerState::adam(lr);
  const int tail = std::max(1, steps / 10);
  float tail_sum = 0.0f;
  for (int s = 0; s < steps; ++s) {
    Tape tape;
    auto fwd_j = critic.forward(tape, tape.constant(joint));
    auto fwd_i = critic.forward(tape, tape.constant(shuffle_marginal(x, z, shuffle_rng.engine()())));
    auto dv = dv_estimate(tape, fwd_j.out, fwd_i.out);
    const float est = dv->value.data[0];
    if (est > 20.0f || !std::isfinite(est))
      throw numeric_error("mine_train: critic blow-up, DV estimate " + std::to_string(est));
    tape.backward(dv);
    // both forwards share the parameter tensors; merge their gradients
    for (std::size_t i = 0; i < fwd_j.params.size(); ++i) {
      auto& g = fwd_j.params[i]->grad;
      const auto& g2 = fwd_i.params[i]->grad;
      if (g.empty()) {
        fwd_j.params[i]->grad = g2;
      } else if (!g2.empty()) {
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += g2[k];
      }
    }
    nn::optimizer_step(opt, critic, fwd_j.params, -1.0f);  // ascend
    if (s >= steps - tail) tail_sum += est;
  }
  return tail_sum / static_cast<float>(tail);
}

}  // namespace vibtk::mi
