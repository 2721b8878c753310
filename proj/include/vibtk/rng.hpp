#pragma once

#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "vibtk/errors.hpp"

namespace vibtk {

/// Seeded RNG stream. All stochastic choices in the toolkit go through one of
/// these so a run is fully reproducible from its seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  float normal(float mean = 0.0f, float stddev = 1.0f) {
    std::normal_distribution<float> d(mean, stddev);
    return d(gen_);
  }

  float uniform(float lo, float hi) {
    std::uniform_real_distribution<float> d(lo, hi);
    return d(gen_);
  }

  std::size_t index(std::size_t n) {
    std::uniform_int_distribution<std::size_t> d(0, n - 1);
    return d(gen_);
  }

  void fill_normal(std::vector<float>& v, float mean = 0.0f, float stddev = 1.0f) {
    for (auto& x : v) x = normal(mean, stddev);
  }

  void fill_uniform(std::vector<float>& v, float lo, float hi) {
    for (auto& x : v) x = uniform(lo, hi);
  }

  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    std::shuffle(p.begin(), p.end(), gen_);
    return p;
  }

  /// Fixed-point-free permutation (Sattolo's algorithm yields a single cycle,
  /// which for n >= 2 never maps an element to itself).
  std::vector<std::size_t> derangement(std::size_t n) {
    if (n < 2) throw contract_error("cannot form independent pairs: need at least 2 rows");
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    for (std::size_t i = n - 1; i > 0; --i) {
      std::uniform_int_distribution<std::size_t> d(0, i - 1);
      std::swap(p[i], p[d(gen_)]);
    }
    return p;
  }

  std::mt19937& engine() { return gen_; }

  /// Derive an independent child stream, e.g. one per epoch or per sample.
  Rng fork(std::uint64_t salt) {
    return Rng(gen_() ^ (salt * 0x9e3779b97f4a7c15ull));
  }

 private:
  std::mt19937 gen_;
};

}  // namespace vibtk
