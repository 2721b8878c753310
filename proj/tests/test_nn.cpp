#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "vibtk/nn.hpp"
#include "vibtk/rng.hpp"

using namespace vibtk;
using autograd::Tape;

TEST_CASE("dense layer with identity weights and zero bias is the identity") {
  nn::Network net(nn::Role::Reference, {nn::LayerSpec::dense("id", 3, 3)});
  for (std::size_t i = 0; i < 3; ++i) net.params[0].at(i, i) = 1.0f;
  Tape tape;
  auto x = tape.constant(Tensor({2, 3}, {1.0f, -2.0f, 3.5f, 0.0f, 4.0f, -0.25f}));
  auto out = net.forward(tape, x).out;
  REQUIRE(out->value.data == x->value.data);
}

TEST_CASE("zero-weight network yields zero logits, hence uniform softmax") {
  auto net = nn::make_mlp(nn::Role::Reference, "z", {4, 8, 5});
  Tape tape;
  auto x = tape.constant(Tensor({3, 4}, std::vector<float>(12, 0.7f)));
  auto out = net.forward(tape, x).out;
  for (float v : out->value.data) REQUIRE(v == 0.0f);
  // uniform softmax over 5 classes => cross-entropy ln 5 for any label
  auto loss = tape.softmax_cross_entropy(out, {0, 2, 4});
  REQUIRE(loss->value.data[0] == Catch::Approx(std::log(5.0f)).epsilon(1e-6));
}

TEST_CASE("fixed-seed 2-layer MLP reproduces the stored golden forward vector") {
  auto net = nn::make_mlp(nn::Role::Reference, "g", {4, 5, 3});
  nn::init_weights(net, 123);
  Tape tape;
  auto x = tape.constant(Tensor({2, 4}, {0.1f, -0.2f, 0.3f, 0.4f, 0.9f, 0.0f, -0.5f, 0.25f}));
  auto out = net.forward(tape, x).out;
  const float golden[6] = {-0.043477498f, -0.0151875895f, -0.0631065294f,
                           -0.1276384f,   0.07654953f,    0.118526325f};
  REQUIRE(out->value.size() == 6);
  // exact bits depend on the compiler's FP contraction choices, so allow a
  // couple of ULPs around the stored values
  for (std::size_t i = 0; i < 6; ++i)
    REQUIRE(out->value.data[i] == Catch::Approx(golden[i]).margin(1e-7));
}

TEST_CASE("network validates composition and input shape") {
  REQUIRE_THROWS_AS(nn::Network(nn::Role::Reference,
                                {nn::LayerSpec::dense("a", 4, 5), nn::LayerSpec::dense("b", 6, 3)}),
                    config_error);
  REQUIRE_THROWS_AS(nn::Network(nn::Role::Reference,
                                {nn::LayerSpec::dense("a", 4, 5), nn::LayerSpec::dense("a", 5, 3)}),
                    config_error);
  auto net = nn::make_mlp(nn::Role::Reference, "s", {4, 3});
  Tape tape;
  auto x = tape.constant(Tensor::zeros({2, 5}));
  REQUIRE_THROWS_AS(net.forward(tape, x), shape_error);
}

TEST_CASE("parameter count matches the sum implied by the layer specs") {
  auto net = nn::make_mlp(nn::Role::Reference, "p", {784, 512, 512, 10});
  REQUIRE(net.param_count() == 784 * 512 + 512 + 512 * 512 + 512 + 512 * 10 + 10);
  REQUIRE(net.input_dim() == 784);
  REQUIRE(net.output_dim() == 10);
}

TEST_CASE("init_weights is deterministic per seed with zero biases") {
  auto a = nn::make_mlp(nn::Role::Reference, "w", {32, 64, 10});
  auto b = nn::make_mlp(nn::Role::Reference, "w", {32, 64, 10});
  nn::init_weights(a, 7);
  nn::init_weights(b, 7);
  for (std::size_t i = 0; i < a.params.size(); ++i) REQUIRE(a.params[i].data == b.params[i].data);
  nn::init_weights(b, 8);
  REQUIRE(a.params[0].data != b.params[0].data);
  // biases (odd-indexed tensors) stay zero
  for (std::size_t i = 1; i < a.params.size(); i += 2)
    for (float v : a.params[i].data) REQUIRE(v == 0.0f);
}

TEST_CASE("glorot weights have the variance of the uniform law") {
  auto net = nn::make_mlp(nn::Role::Reference, "v", {512, 256});
  nn::init_weights(net, 99);
  const auto& w = net.params[0].data;
  double sum = 0, sq = 0;
  for (float v : w) {
    sum += v;
    sq += static_cast<double>(v) * v;
  }
  const double var = sq / w.size() - (sum / w.size()) * (sum / w.size());
  const double expected = 2.0 / (512.0 + 256.0);
  REQUIRE(var > 0.8 * expected);
  REQUIRE(var < 1.2 * expected);
  const float bound = std::sqrt(6.0f / (512.0f + 256.0f));
  for (float v : w) REQUIRE(std::abs(v) <= bound);
}

namespace {
// One optimizer step driven by hand-set gradients on fresh leaves.
void step_with_grads(nn::OptimizerState& opt, nn::Network& net,
                     const std::vector<std::vector<float>>& grads) {
  Tape tape;
  std::vector<autograd::Ref> refs;
  for (std::size_t i = 0; i < net.params.size(); ++i) {
    refs.push_back(tape.leaf(net.params[i], true));
    refs.back()->grad = grads[i];
  }
  nn::optimizer_step(opt, net, refs);
}
}  // namespace

TEST_CASE("adam with zero gradients is a fixed point") {
  auto net = nn::make_mlp(nn::Role::Reference, "f", {3, 4, 2});
  nn::init_weights(net, 5);
  auto before = net.params;
  auto opt = nn::OptimizerState::adam(0.01f);
  std::vector<std::vector<float>> zeros;
  for (const auto& p : net.params) zeros.emplace_back(p.size(), 0.0f);
  for (int s = 0; s < 5; ++s) step_with_grads(opt, net, zeros);
  for (std::size_t i = 0; i < net.params.size(); ++i) REQUIRE(net.params[i].data == before[i].data);
  REQUIRE(opt.step_count == 5);
}

TEST_CASE("adam first step moves each coordinate by about -lr*sign(g)") {
  auto net = nn::make_mlp(nn::Role::Reference, "f", {3, 4, 2});
  nn::init_weights(net, 5);
  auto before = net.params;
  auto opt = nn::OptimizerState::adam(0.001f);
  std::vector<std::vector<float>> grads;
  Rng rng(11);
  for (const auto& p : net.params) {
    grads.emplace_back(p.size());
    for (auto& g : grads.back()) g = rng.uniform(0.2f, 2.0f) * (rng.uniform(0.0f, 1.0f) < 0.5f ? -1.0f : 1.0f);
  }
  step_with_grads(opt, net, grads);
  for (std::size_t i = 0; i < net.params.size(); ++i)
    for (std::size_t j = 0; j < net.params[i].size(); ++j) {
      const float delta = net.params[i].data[j] - before[i].data[j];
      REQUIRE(delta == Catch::Approx(-0.001f * (grads[i][j] > 0 ? 1.0f : -1.0f)).margin(5e-6));
    }
}

TEST_CASE("adam scalar case: g=1 lr=0.001 gives delta -0.001 within 1e-6") {
  nn::Network net(nn::Role::Reference, {nn::LayerSpec::dense("s", 1, 1)});
  net.params[0].data[0] = 0.5f;
  auto opt = nn::OptimizerState::adam(0.001f);
  step_with_grads(opt, net, {{1.0f}, {0.0f}});
  REQUIRE(std::abs(net.params[0].data[0] - (0.5f - 0.001f)) < 1e-6f);
}

TEST_CASE("nan gradient aborts naming the parameter") {
  auto net = nn::make_mlp(nn::Role::Reference, "d", {2, 3});
  std::vector<std::vector<float>> grads = {std::vector<float>(6, 0.0f), std::vector<float>(3, 0.0f)};
  grads[1][1] = std::numeric_limits<float>::quiet_NaN();
  auto opt = nn::OptimizerState::adam(0.001f);
  REQUIRE_THROWS_WITH(step_with_grads(opt, net, grads), Catch::Matchers::ContainsSubstring("d_fc0.bias"));
}

TEST_CASE("training a small mlp on a separable toy set decreases the loss") {
  // two gaussian blobs at (+-1, +-1)
  Rng rng(42);
  const std::size_t n = 64;
  Tensor x = Tensor::zeros({n, 2});
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % 2);
    y[i] = c;
    const float s = c ? 1.0f : -1.0f;
    x.at(i, 0) = s + rng.normal(0.0f, 0.3f);
    x.at(i, 1) = s + rng.normal(0.0f, 0.3f);
  }
  auto net = nn::make_mlp(nn::Role::Reference, "toy", {2, 16, 2});
  nn::init_weights(net, 1);
  auto opt = nn::OptimizerState::adam(0.01f);
  float first = 0, last = 0;
  for (int step = 0; step < 200; ++step) {
    Tape tape;
    auto fwd = net.forward(tape, tape.constant(x));
    auto loss = tape.softmax_cross_entropy(fwd.out, y);
    if (step == 0) first = loss->value.data[0];
    last = loss->value.data[0];
    tape.backward(loss);
    nn::optimizer_step(opt, net, fwd.params);
  }
  REQUIRE(last < first);
  REQUIRE(last < 0.1f);
}

TEST_CASE("conv2d layer composes into a network and trains a step") {
  nn::Network net(nn::Role::Reference,
                  {nn::LayerSpec::conv2d("c0", 1, 4, 3, 1), nn::LayerSpec::relu("r0"),
                   nn::LayerSpec::flatten("fl"), nn::LayerSpec::dense("fc", 4 * 6 * 6, 3)},
                  1, 6, 6);
  nn::init_weights(net, 3);
  REQUIRE(net.input_dim() == 36);
  REQUIRE(net.output_dim() == 3);
  Tensor x = Tensor::zeros({2, 36});
  Rng rng(9);
  rng.fill_uniform(x.data, 0.0f, 1.0f);
  auto opt = nn::OptimizerState::adam(0.01f);
  float first = 0, last = 0;
  for (int step = 0; step < 30; ++step) {
    Tape tape;
    auto fwd = net.forward(tape, tape.constant(x));
    auto loss = tape.softmax_cross_entropy(fwd.out, {0, 2});
    if (step == 0) first = loss->value.data[0];
    last = loss->value.data[0];
    tape.backward(loss);
    nn::optimizer_step(opt, net, fwd.params);
  }
  REQUIRE(last < first);
}
