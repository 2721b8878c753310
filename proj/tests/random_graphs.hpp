#pragma once

// Random composite-graph generator used to exercise every differentiable
// primitive against the finite-difference oracle. A Program is a pure
// description: it can be replayed on fresh tapes with perturbed leaf values,
// which is what the oracle needs.

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "vibtk/autograd.hpp"
#include "vibtk/rng.hpp"
#include "vibtk/tensor.hpp"

namespace vibtk::testing {

struct GraphStep {
  enum Op { Relu, Square, Exp, Log, Scale, AddConst, AddLeaf, SubLeaf, MulLeaf, MatmulLeaf };
  Op op;
  float c = 0.0f;
  int leaf = -1;  // for *Leaf ops
};

struct GraphProgram {
  std::vector<std::vector<std::size_t>> leaf_shapes;  // leaf 0 is the chain start
  std::vector<GraphStep> steps;

  autograd::Ref build(autograd::Tape& tape, const std::vector<Tensor>& leaves, bool requires_grad,
                      std::vector<autograd::Ref>* leaf_refs = nullptr) const {
    std::vector<autograd::Ref> refs;
    refs.reserve(leaves.size());
    for (const auto& t : leaves) refs.push_back(tape.leaf(t, requires_grad));
    if (leaf_refs) *leaf_refs = refs;
    auto x = refs[0];
    for (const auto& s : steps) {
      switch (s.op) {
        case GraphStep::Relu: x = tape.relu(x); break;
        case GraphStep::Square: x = tape.scale(tape.square(x), 0.5f); break;
        case GraphStep::Exp: x = tape.exp(tape.scale(x, 0.3f)); break;
        case GraphStep::Log: x = tape.log(tape.add_const(tape.square(x), 0.1f)); break;
        case GraphStep::Scale: x = tape.scale(x, s.c); break;
        case GraphStep::AddConst: x = tape.add_const(x, s.c); break;
        case GraphStep::AddLeaf: x = tape.add(x, refs[s.leaf]); break;
        case GraphStep::SubLeaf: x = tape.sub(x, refs[s.leaf]); break;
        case GraphStep::MulLeaf: x = tape.mul(x, refs[s.leaf]); break;
        case GraphStep::MatmulLeaf: x = tape.matmul(x, refs[s.leaf]); break;
      }
    }
    return tape.mean(x);
  }

  float eval(const std::vector<Tensor>& leaves) const {
    autograd::Tape tape;
    return build(tape, leaves, false)->value.data[0];
  }

  std::vector<std::vector<float>> grads(const std::vector<Tensor>& leaves) const {
    autograd::Tape tape;
    std::vector<autograd::Ref> refs;
    auto loss = build(tape, leaves, true, &refs);
    tape.backward(loss);
    std::vector<std::vector<float>> out;
    for (const auto& r : refs)
      out.push_back(r->reached() ? r->grad : std::vector<float>(r->value.size(), 0.0f));
    return out;
  }
};

inline GraphProgram random_graph(Rng& rng, std::size_t max_depth = 8) {
  GraphProgram p;
  std::vector<std::size_t> shape = {3, 4};
  p.leaf_shapes.push_back(shape);
  const std::size_t depth = 3 + rng.index(max_depth - 2);
  for (std::size_t d = 0; d < depth; ++d) {
    const int pick = static_cast<int>(rng.index(10));
    GraphStep s;
    switch (pick) {
      case 0: s.op = GraphStep::Relu; break;
      case 1: s.op = GraphStep::Square; break;
      case 2: s.op = GraphStep::Exp; break;
      case 3: s.op = GraphStep::Log; break;
      case 4:
        s.op = GraphStep::Scale;
        s.c = rng.uniform(-1.5f, 1.5f);
        break;
      case 5:
        s.op = GraphStep::AddConst;
        s.c = rng.uniform(-1.0f, 1.0f);
        break;
      case 6:
      case 7:
      case 8: {
        s.op = pick == 6 ? GraphStep::AddLeaf : (pick == 7 ? GraphStep::SubLeaf : GraphStep::MulLeaf);
        s.leaf = static_cast<int>(p.leaf_shapes.size());
        p.leaf_shapes.push_back(shape);
        break;
      }
      case 9: {
        s.op = GraphStep::MatmulLeaf;
        const std::size_t n = 2 + rng.index(4);
        s.leaf = static_cast<int>(p.leaf_shapes.size());
        p.leaf_shapes.push_back({shape[1], n});
        shape = {shape[0], n};
        break;
      }
    }
    p.steps.push_back(s);
  }
  return p;
}

// N(0,1) draws nudged off zero so ReLU kinks and near-zero products do not
// poison the central differences.
inline std::vector<Tensor> random_graph_inputs(const GraphProgram& p, Rng& rng) {
  std::vector<Tensor> leaves;
  for (const auto& s : p.leaf_shapes) {
    Tensor t = Tensor::zeros(s);
    for (auto& v : t.data) {
      v = rng.normal();
      if (v > -0.05f && v < 0.05f) v = v < 0.0f ? v - 0.05f : v + 0.05f;
    }
    leaves.push_back(std::move(t));
  }
  return leaves;
}

// Graph plus inputs whose loss magnitude leaves the finite-difference oracle
// enough float32 resolution; exp towers over matmul chains can push the loss
// so high that a gradient-sized perturbation is below one ulp of it.
inline std::pair<GraphProgram, std::vector<Tensor>> well_conditioned_graph(Rng& rng,
                                                                           float max_loss = 1e4f) {
  for (;;) {
    auto program = random_graph(rng);
    auto leaves = random_graph_inputs(program, rng);
    const float loss = program.eval(leaves);
    if (std::isfinite(loss) && std::fabs(loss) < max_loss) return {std::move(program), std::move(leaves)};
  }
}

}  // namespace vibtk::testing
