#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "vibtk/autograd.hpp"
#include "vibtk/data.hpp"
#include "vibtk/errors.hpp"
#include "vibtk/mi.hpp"
#include "vibtk/nn.hpp"
#include "vibtk/rng.hpp"
#include "vibtk/serialize.hpp"
#include "vibtk/tensor.hpp"

namespace vibtk::vib {

using autograd::Ref;
using autograd::Tape;

enum class Mode { R, M };

struct VIBConfig {
  float beta = 0.001f;
  std::size_t eta = 256;
  Mode mode = Mode::R;
  float ic = 0.0f;  // informational constant of the Lagrangian; recorded, never used

  VIBConfig() = default;
  VIBConfig(float b, std::size_t e, Mode m, float i = 0.0f) : beta(b), eta(e), mode(m), ic(i) {
    if (beta < 0.0f) throw config_error("beta must be nonnegative");
    if (eta < 1) throw config_error("latent dimension must be at least 1");
  }
};

/// Splits an encoder head of width 2*eta into its (mu, log_sigma) halves.
struct Heads {
  Ref mu, log_sigma;
};
inline Heads split_heads(Tape& tape, Ref enc_out, std::size_t eta) {
  if (enc_out->value.cols() != 2 * eta)
    throw shape_error("encoder output " + enc_out->value.shape_str() + " does not hold 2x" +
                      std::to_string(eta) + " heads");
  return {tape.slice_cols(enc_out, 0, eta), tape.slice_cols(enc_out, eta, 2 * eta)};
}

struct LatentSample {
  Ref mu, log_sigma, z;
  Tensor eps;
};

/// z = mu + exp(log_sigma) (.) eps with eps a fixed draw: gradients reach mu
/// and log_sigma but not eps.
inline LatentSample reparam_with_eps(Tape& tape, Ref mu, Ref log_sigma, Tensor eps) {
  if (!same_shape(mu->value, log_sigma->value) || !same_shape(mu->value, eps))
    throw shape_error("reparam: mismatched shapes");
  auto z = tape.add(mu, tape.mul(tape.exp(log_sigma), tape.constant(eps)));
  return {mu, log_sigma, z, std::move(eps)};
}

inline LatentSample reparam_sample(Tape& tape, Ref mu, Ref log_sigma, Rng& rng) {
  Tensor eps = Tensor::zeros(mu->value.shape);
  rng.fill_normal(eps.data);
  return reparam_with_eps(tape, mu, log_sigma, std::move(eps));
}

struct VibRLoss {
  Ref total, ce, kl;
};

/// CE + beta * KL(posterior || N(0,I)).
inline VibRLoss vib_r_loss(Tape& tape, Ref logits, const std::vector<int>& labels, Ref mu,
                           Ref log_sigma, float beta) {
  auto ce = tape.softmax_cross_entropy(logits, labels);
  auto kl = mi::kl_std_normal(tape, mu, log_sigma);
  auto total = beta == 0.0f ? ce : tape.add(ce, tape.scale(kl, beta));
  return {total, ce, kl};
}

/// task + beta * DV. The minimax is realized by the trainer's alternating
/// updates: critic ascends dv, encoder/classifier descend this total.
inline Ref vib_m_loss(Tape& tape, Ref task_loss, Ref dv, float beta) {
  return beta == 0.0f ? task_loss : tape.add(task_loss, tape.scale(dv, beta));
}

/// Mean over the batch of squared Euclidean distance between output vectors.
inline Ref ref_loss(Tape& tape, Ref o_vib, Ref o_ref) {
  if (!same_shape(o_vib->value, o_ref->value))
    throw shape_error("ref_loss: " + o_vib->value.shape_str() + " vs " + o_ref->value.shape_str());
  const auto b = static_cast<float>(o_vib->value.rows());
  return tape.scale(tape.sum(tape.square(tape.sub(o_vib, o_ref))), 1.0f / b);
}

/// Pre-softmax reference outputs per training sample, keyed by sample index.
struct SoftLabelSet {
  std::size_t classes = 0;
  std::vector<float> values;  // count x classes, row-major in sample-id order

  std::size_t count() const { return classes ? values.size() / classes : 0; }

  const float* row(std::size_t sample_id) const {
    if (sample_id >= count())
      throw consistency_error("soft label for sample " + std::to_string(sample_id) + " missing (have " +
                              std::to_string(count()) + ")");
    return values.data() + sample_id * classes;
  }

  /// Gathers rows for a batch drawn by sample index.
  Tensor gather(const std::vector<std::size_t>& ids) const {
    Tensor out = Tensor::zeros({ids.size(), classes});
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const float* r = row(ids[i]);
      for (std::size_t c = 0; c < classes; ++c) out.at(i, c) = r[c];
    }
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write " + path);
    out.write("VIBTKSLS1", 9);
    serialize::write_u32(out, static_cast<std::uint32_t>(count()));
    serialize::write_u32(out, static_cast<std::uint32_t>(classes));
    serialize::write_u32(out, serialize::crc32(values.data(), values.size() * 4));
    serialize::write_floats(out, values);
  }

  static SoftLabelSet load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path);
    char magic[9];
    if (!in.read(magic, 9) || std::string(magic, 9) != "VIBTKSLS1")
      throw format_error("bad soft-label file magic in " + path);
    const auto n = serialize::read_u32(in, path);
    const auto c = serialize::read_u32(in, path);
    const auto crc = serialize::read_u32(in, path);
    SoftLabelSet s;
    s.classes = c;
    s.values.resize(static_cast<std::size_t>(n) * c);
    serialize::read_floats(in, s.values, path);
    if (serialize::crc32(s.values.data(), s.values.size() * 4) != crc)
      throw format_error("soft-label checksum mismatch in " + path);
    return s;
  }
};

/// Runs the trained reference net over the dataset and caches its pre-softmax
/// output vectors.
inline SoftLabelSet extract_soft_labels(const nn::Network& reference, const data::Dataset& ds,
                                        std::size_t batch = 500) {
  SoftLabelSet out;
  out.classes = reference.output_dim();
  out.values.resize(ds.size() * out.classes);
  const std::size_t d = ds.images.cols();
  for (std::size_t start = 0; start < ds.size(); start += batch) {
    const std::size_t b = std::min(batch, ds.size() - start);
    Tensor x = Tensor::zeros({b, d});
    std::copy_n(ds.images.data.begin() + static_cast<std::ptrdiff_t>(start * d), b * d, x.data.begin());
    Tape tape;
    auto o = reference.forward(tape, tape.constant(x), false).out;
    std::copy_n(o->value.data.begin(), b * out.classes,
                out.values.begin() + static_cast<std::ptrdiff_t>(start * out.classes));
  }
  return out;
}

struct MultiTaskWeights {
  std::vector<float> log_sigma;  // one per task
  float beta = 0.0f;
};

/// sum_k [ E_k / sigma_k^2 + log sigma_k ] + beta * kl.
inline Ref mtvib_loss(Tape& tape, const std::vector<Ref>& task_errors,
                      const std::vector<Ref>& log_sigmas, float beta, Ref kl) {
  if (task_errors.empty() || task_errors.size() != log_sigmas.size())
    throw contract_error("mtvib_loss: need matching nonempty task and weight lists");
  Ref total;
  for (std::size_t k = 0; k < task_errors.size(); ++k) {
    auto inv_var = tape.exp(tape.scale(log_sigmas[k], -2.0f));
    auto term = tape.add(tape.mul(task_errors[k], inv_var), log_sigmas[k]);
    total = total ? tape.add(total, term) : term;
  }
  return beta == 0.0f ? total : tape.add(total, tape.scale(kl, beta));
}

}  // namespace vibtk::vib
