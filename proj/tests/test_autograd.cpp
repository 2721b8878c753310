#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "fd_check.hpp"
#include "random_graphs.hpp"
#include "vibtk/autograd.hpp"
#include "vibtk/rng.hpp"

using namespace vibtk;
using autograd::Tape;

TEST_CASE("d(x*x)/dx at x=3 is 6") {
  Tape tape;
  auto x = tape.leaf(Tensor::scalar(3.0f), true);
  auto y = tape.mul(x, x);
  tape.backward(y);
  CHECK(x->grad[0] == Catch::Approx(6.0f));
}

TEST_CASE("product rule for f(x,y)=x*y at (2,5)") {
  Tape tape;
  auto x = tape.leaf(Tensor::scalar(2.0f), true);
  auto y = tape.leaf(Tensor::scalar(5.0f), true);
  tape.backward(tape.mul(x, y));
  CHECK(x->grad[0] == Catch::Approx(5.0f));
  CHECK(y->grad[0] == Catch::Approx(2.0f));
}

TEST_CASE("matmul value oracles") {
  Tape tape;
  auto eye = tape.constant(Tensor({2, 2}, {1, 0, 0, 1}));
  auto a = tape.constant(Tensor({2, 2}, {3, -1, 2, 7}));
  auto ia = tape.matmul(eye, a);
  CHECK(ia->value.data == a->value.data);

  auto l = tape.constant(Tensor({2, 2}, {1, 2, 3, 4}));
  auto r = tape.constant(Tensor({2, 2}, {5, 6, 7, 8}));
  auto lr = tape.matmul(l, r);
  CHECK(lr->value.data == std::vector<float>{19, 22, 43, 50});

  auto z = tape.constant(Tensor::zeros({2, 2}));
  auto za = tape.matmul(z, a);
  for (float v : za->value.data) CHECK(v == 0.0f);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape tape;
  auto a = tape.constant(Tensor::zeros({2, 3}));
  auto b = tape.constant(Tensor::zeros({2, 3}));
  CHECK_THROWS_WITH(tape.matmul(a, b), Catch::Matchers::ContainsSubstring("[2x3]"));
}

TEST_CASE("softmax cross entropy values") {
  SECTION("uniform logits give ln C") {
    Tape tape;
    auto logits = tape.constant(Tensor::zeros({1, 10}));
    auto loss = tape.softmax_cross_entropy(logits, {3});
    CHECK(loss->value.data[0] == Catch::Approx(std::log(10.0)).epsilon(1e-6));
  }
  SECTION("saturated logit on the true class") {
    Tape tape;
    Tensor t = Tensor::zeros({1, 10});
    t.data[4] = 50.0f;
    auto loss = tape.softmax_cross_entropy(tape.constant(t), {4});
    CHECK(loss->value.data[0] < 1e-9f);
  }
  SECTION("out-of-range label") {
    Tape tape;
    auto logits = tape.constant(Tensor::zeros({1, 10}));
    CHECK_THROWS_AS(tape.softmax_cross_entropy(logits, {10}), std::out_of_range);
  }
  SECTION("stays finite for |logit| <= 80") {
    Tape tape;
    Tensor t = Tensor::zeros({2, 3});
    t.data = {80, -80, 0, -80, 80, 12};
    auto loss = tape.softmax_cross_entropy(tape.constant(t), {1, 0});
    CHECK(std::isfinite(loss->value.data[0]));
  }
}

TEST_CASE("softmax cross entropy gradient equals softmax minus one-hot") {
  Rng rng(7);
  Tensor logits = Tensor::zeros({4, 6});
  rng.fill_normal(logits.data);
  std::vector<int> labels = {0, 3, 5, 2};

  Tape tape;
  auto l = tape.leaf(logits, true);
  tape.backward(tape.softmax_cross_entropy(l, labels));

  auto fd = testing::finite_difference(
      [&](const std::vector<Tensor>& leaves) {
        Tape t2;
        return t2.softmax_cross_entropy(t2.leaf(leaves[0]), labels)->value.data[0];
      },
      {logits}, 0);
  CHECK(testing::grads_close(l->grad, fd[0]));
}

TEST_CASE("elementwise suite definitions") {
  Tape tape;
  auto r = tape.relu(tape.constant(Tensor({1, 3}, {-1, 0, 2})));
  CHECK(r->value.data == std::vector<float>{0, 0, 2});

  auto m = tape.leaf(Tensor({1, 3}, {1, 2, 3}), true);
  tape.backward(tape.mean(m));
  for (float g : m->grad) CHECK(g == Catch::Approx(1.0f / 3.0f));
}

TEST_CASE("exp-log round trip on positives") {
  Rng rng(11);
  Tape tape;
  Tensor t = Tensor::zeros({1, 64});
  rng.fill_uniform(t.data, 0.01f, 20.0f);
  auto back = tape.exp(tape.log(tape.constant(t)));
  for (std::size_t i = 0; i < t.size(); ++i)
    CHECK(back->value.data[i] == Catch::Approx(t.data[i]).epsilon(1e-6));
}

TEST_CASE("3-layer MLP gradients match central finite differences") {
  Rng rng(37);  // seed chosen so no ReLU pre-activation sits on the kink
  std::vector<Tensor> leaves;
  leaves.push_back(Tensor::zeros({2, 5}));   // x
  leaves.push_back(Tensor::zeros({5, 7}));   // w1
  leaves.push_back(Tensor::zeros({1, 7}));   // b1
  leaves.push_back(Tensor::zeros({7, 6}));   // w2
  leaves.push_back(Tensor::zeros({1, 6}));   // b2
  leaves.push_back(Tensor::zeros({6, 3}));   // w3
  rng.fill_normal(leaves[0].data);
  // fan-in scaled weights keep activations O(1) so float central differences stay clean
  for (std::size_t i = 1; i < leaves.size(); ++i)
    rng.fill_normal(leaves[i].data, 0.0f, 1.0f / std::sqrt(static_cast<float>(leaves[i].rows())));

  auto forward = [](Tape& tape, const std::vector<Tensor>& vals, bool req,
                    std::vector<autograd::Ref>* refs_out) {
    std::vector<autograd::Ref> refs;
    for (const auto& v : vals) refs.push_back(tape.leaf(v, req));
    auto h1 = tape.relu(tape.add(tape.matmul(refs[0], refs[1]), refs[2]));
    auto h2 = tape.relu(tape.add(tape.matmul(h1, refs[3]), refs[4]));
    auto out = tape.matmul(h2, refs[5]);
    if (refs_out) *refs_out = refs;
    return tape.mean(tape.square(out));
  };

  Tape tape;
  std::vector<autograd::Ref> refs;
  tape.backward(forward(tape, leaves, true, &refs));

  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto fd = testing::finite_difference(
        [&](const std::vector<Tensor>& vals) {
          Tape t2;
          return forward(t2, vals, false, nullptr)->value.data[0];
        },
        leaves, li);
    INFO("leaf " << li);
    CHECK(testing::grads_close(refs[li]->reached() ? refs[li]->grad : std::vector<float>(leaves[li].size(), 0.0f),
                               fd[0]));
  }
}

TEST_CASE("random composite graphs match the finite-difference oracle") {
  Rng rng(1234);
  int checked = 0;
  for (int g = 0; g < 20; ++g) {
    auto [prog, leaves] = testing::well_conditioned_graph(rng);
    auto analytic = prog.grads(leaves);
    for (std::size_t li = 0; li < leaves.size(); ++li) {
      auto fd = testing::finite_difference(
          [&](const std::vector<Tensor>& vals) { return prog.eval(vals); }, leaves, li);
      INFO("graph " << g << " leaf " << li);
      CHECK(testing::grads_close(analytic[li], fd[0]));
      ++checked;
    }
  }
  CHECK(checked > 20);
}

TEST_CASE("backward of a sum of losses equals sum of backwards") {
  Rng rng(5);
  Tensor xv = Tensor::zeros({3, 3});
  rng.fill_normal(xv.data);

  auto one_loss = [&](int which, bool both) {
    Tape tape;
    auto x = tape.leaf(xv, true);
    auto l1 = tape.mean(tape.square(x));
    auto l2 = tape.sum(tape.relu(x));
    if (both)
      tape.backward(tape.add(l1, l2));
    else
      tape.backward(which == 0 ? l1 : l2);
    return x->grad;
  };

  auto g1 = one_loss(0, false);
  auto g2 = one_loss(1, false);
  auto gsum = one_loss(0, true);
  for (std::size_t i = 0; i < gsum.size(); ++i)
    CHECK(gsum[i] == Catch::Approx(g1[i] + g2[i]).margin(1e-6));
}

TEST_CASE("identical seeds give bit-identical gradients") {
  auto run = [] {
    Rng rng(99);
    auto prog = testing::random_graph(rng);
    auto leaves = testing::random_graph_inputs(prog, rng);
    return prog.grads(leaves);
  };
  CHECK(run() == run());
}

TEST_CASE("backward contract") {
  SECTION("non-scalar loss is rejected") {
    Tape tape;
    auto x = tape.leaf(Tensor::zeros({2, 2}), true);
    CHECK_THROWS_AS(tape.backward(tape.square(x)), contract_error);
  }
  SECTION("tape is consumable once") {
    Tape tape;
    auto x = tape.leaf(Tensor::scalar(1.0f), true);
    auto l = tape.square(x);
    tape.backward(l);
    CHECK_THROWS_AS(tape.backward(l), contract_error);
  }
  SECTION("unreached leaf reports no gradient") {
    Tape tape;
    auto x = tape.leaf(Tensor::scalar(2.0f), true);
    auto unused = tape.leaf(Tensor::scalar(4.0f), true);
    tape.backward(tape.square(x));
    CHECK(x->reached());
    CHECK_FALSE(unused->reached());
  }
}

TEST_CASE("reshape and slice backward route gradients") {
  Rng rng(17);
  Tensor xv = Tensor::zeros({2, 6});
  rng.fill_normal(xv.data);
  auto forward = [](Tape& tape, const std::vector<Tensor>& vals, bool req) {
    auto x = tape.leaf(vals[0], req);
    auto left = tape.slice_cols(x, 0, 3);
    auto right = tape.slice_cols(x, 3, 6);
    auto joined = tape.concat_cols(tape.square(left), right);
    return std::make_pair(tape.mean(tape.reshape(joined, {4, 3})), x);
  };
  Tape tape;
  auto [loss, x] = forward(tape, {xv}, true);
  tape.backward(loss);
  auto fd = testing::finite_difference(
      [&](const std::vector<Tensor>& vals) {
        Tape t2;
        return forward(t2, vals, false).first->value.data[0];
      },
      {xv}, 0);
  CHECK(testing::grads_close(x->grad, fd[0]));
}

TEST_CASE("avg_pool2x2 forward and backward") {
  Tape tape;
  auto x = tape.leaf(Tensor({1, 16}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16}), true);
  auto p = tape.avg_pool2x2(x, 4, 4);
  CHECK(p->value.data == std::vector<float>{3.5f, 5.5f, 11.5f, 13.5f});
  tape.backward(tape.sum(p));
  for (float g : x->grad) CHECK(g == Catch::Approx(0.25f));
}

TEST_CASE("conv2d matches finite differences on a tiny case") {
  Rng rng(31);
  Tensor x = Tensor::zeros({2, 2 * 5 * 5});
  Tensor w = Tensor::zeros({3, 2 * 3 * 3});
  Tensor b = Tensor::zeros({1, 3});
  rng.fill_normal(x.data);
  rng.fill_normal(w.data);
  rng.fill_normal(b.data);
  std::vector<Tensor> leaves = {x, w, b};

  auto forward = [](Tape& tape, const std::vector<Tensor>& vals, bool req,
                    std::vector<autograd::Ref>* refs_out) {
    std::vector<autograd::Ref> refs;
    for (const auto& v : vals) refs.push_back(tape.leaf(v, req));
    if (refs_out) *refs_out = refs;
    return tape.mean(tape.square(tape.conv2d(refs[0], refs[1], refs[2], 2, 5, 5, 3, 3, 1)));
  };

  Tape tape;
  std::vector<autograd::Ref> refs;
  tape.backward(forward(tape, leaves, true, &refs));
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto fd = testing::finite_difference(
        [&](const std::vector<Tensor>& vals) {
          Tape t2;
          return forward(t2, vals, false, nullptr)->value.data[0];
        },
        leaves, li);
    INFO("conv leaf " << li);
    // float32 finite differences on the conv reduction carry ~0.3% noise,
    // so this check runs with a wider tolerance than the default.
    CHECK(testing::grads_close(refs[li]->grad, fd[0], 5e-3f, 5e-3f));
  }
}
