#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "vibtk/errors.hpp"
#include "vibtk/tensor.hpp"

namespace vibtk::autograd {

// Arguments are clamped to this band before exponentiation; log inputs are
// floored at kLogFloor.
inline constexpr float kExpClamp = 80.0f;
inline constexpr float kLogFloor = 1e-12f;

struct Node;
using Ref = std::shared_ptr<Node>;

/// One recorded value in a define-by-run graph.
struct Node {
  Tensor value;
  std::vector<float> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  bool is_leaf = false;
  std::function<void()> backprop;  // accumulates into input grads

  bool reached() const { return !grad.empty(); }

  std::vector<float>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0f);
    return grad;
  }
};

using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

/// Records primitive applications in creation order; replayed in reverse by
/// backward(). One tape serves exactly one forward/backward pass.
class Tape {
 public:
  Ref leaf(Tensor t, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = requires_grad;
    n->is_leaf = true;
    order_.push_back(n);
    return n;
  }

  Ref constant(Tensor t) { return leaf(std::move(t), false); }

  // ---- elementwise / reduction primitives ----

  Ref add(Ref a, Ref b) {
    if (same_shape(a->value, b->value)) {
      return binary(a, b, [](float x, float y) { return x + y; },
                    [](Node& o, Node& x, Node& y) {
                      if (x.requires_grad) axpy(x.ensure_grad(), o.grad, 1.0f);
                      if (y.requires_grad) axpy(y.ensure_grad(), o.grad, 1.0f);
                    });
    }
    // row broadcast: b is [1 x n] or [n], added to every row of a
    if (b->value.rows() == 1 && a->value.cols() == b->value.size()) {
      Tensor out = a->value;
      const std::size_t r = a->value.rows(), c = a->value.cols();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] += b->value.data[j];
      return record(std::move(out), {a, b}, [a, b, r, c](Node& o) {
        if (a->requires_grad) axpy(a->ensure_grad(), o.grad, 1.0f);
        if (b->requires_grad) {
          auto& g = b->ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j];
        }
      });
    }
    throw shape_error("add: incompatible shapes " + a->value.shape_str() + " vs " + b->value.shape_str());
  }

  Ref sub(Ref a, Ref b) {
    require_same_shape("sub", a, b);
    return binary(a, b, [](float x, float y) { return x - y; },
                  [](Node& o, Node& x, Node& y) {
                    if (x.requires_grad) axpy(x.ensure_grad(), o.grad, 1.0f);
                    if (y.requires_grad) axpy(y.ensure_grad(), o.grad, -1.0f);
                  });
  }

  Ref mul(Ref a, Ref b) {
    require_same_shape("mul", a, b);
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b->value.data[i];
    return record(std::move(out), {a, b}, [a, b](Node& o) {
      if (a->requires_grad) {
        auto& g = a->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * b->value.data[i];
      }
      if (b->requires_grad) {
        auto& g = b->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * a->value.data[i];
      }
    });
  }

  Ref relu(Ref a) {
    Tensor out = a->value;
    for (auto& v : out.data) v = v > 0.0f ? v : 0.0f;
    return record(std::move(out), {a}, [a](Node& o) {
      if (!a->requires_grad) return;
      auto& g = a->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (a->value.data[i] > 0.0f) g[i] += o.grad[i];  // gradient at exactly 0 is 0
    });
  }

  Ref exp(Ref a) {
    Tensor out = a->value;
    for (auto& v : out.data) v = std::exp(std::clamp(v, -kExpClamp, kExpClamp));
    Tensor saved = out;
    return record(std::move(out), {a}, [a, saved](Node& o) {
      if (!a->requires_grad) return;
      auto& g = a->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const float x = a->value.data[i];
        if (x > -kExpClamp && x < kExpClamp) g[i] += o.grad[i] * saved.data[i];
      }
    });
  }

  Ref log(Ref a) {
    Tensor out = a->value;
    for (auto& v : out.data) v = std::log(std::max(v, kLogFloor));
    return record(std::move(out), {a}, [a](Node& o) {
      if (!a->requires_grad) return;
      auto& g = a->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const float x = a->value.data[i];
        if (x >= kLogFloor) g[i] += o.grad[i] / x;
      }
    });
  }

  Ref square(Ref a) {
    Tensor out = a->value;
    for (auto& v : out.data) v *= v;
    return record(std::move(out), {a}, [a](Node& o) {
      if (!a->requires_grad) return;
      auto& g = a->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * 2.0f * a->value.data[i];
    });
  }

  Ref scale(Ref a, float c) {
    Tensor out = a->value;
    for (auto& v : out.data) v *= c;
    return record(std::move(out), {a}, [a, c](Node& o) {
      if (a->requires_grad) axpy(a->ensure_grad(), o.grad, c);
    });
  }

  Ref add_const(Ref a, float c) {
    Tensor out = a->value;
    for (auto& v : out.data) v += c;
    return record(std::move(out), {a}, [a](Node& o) {
      if (a->requires_grad) axpy(a->ensure_grad(), o.grad, 1.0f);
    });
  }

  Ref sum(Ref a) {
    float s = 0.0f;
    for (float v : a->value.data) s += v;
    return record(Tensor::scalar(s), {a}, [a](Node& o) {
      if (!a->requires_grad) return;
      auto& g = a->ensure_grad();
      for (auto& v : g) v += o.grad[0];
    });
  }

  Ref mean(Ref a) {
    const float inv = 1.0f / static_cast<float>(a->value.size());
    float s = 0.0f;
    for (float v : a->value.data) s += v;
    return record(Tensor::scalar(s * inv), {a}, [a, inv](Node& o) {
      if (!a->requires_grad) return;
      auto& g = a->ensure_grad();
      for (auto& v : g) v += o.grad[0] * inv;
    });
  }

  // ---- shape primitives ----

  Ref reshape(Ref a, std::vector<std::size_t> shape) {
    if (Tensor::numel(shape) != a->value.size())
      throw shape_error("reshape: cannot view " + a->value.shape_str() + " as " +
                        Tensor(shape, std::vector<float>(Tensor::numel(shape))).shape_str());
    Tensor out(std::move(shape), a->value.data);
    return record(std::move(out), {a}, [a](Node& o) {
      if (a->requires_grad) axpy(a->ensure_grad(), o.grad, 1.0f);
    });
  }

  Ref flatten(Ref a) { return reshape(a, {a->value.rows(), a->value.cols()}); }

  Ref concat_cols(Ref a, Ref b) {
    const std::size_t r = a->value.rows();
    if (b->value.rows() != r)
      throw shape_error("concat_cols: row mismatch " + a->value.shape_str() + " vs " + b->value.shape_str());
    const std::size_t ca = a->value.cols(), cb = b->value.cols();
    Tensor out = Tensor::zeros({r, ca + cb});
    for (std::size_t i = 0; i < r; ++i) {
      std::copy_n(&a->value.data[i * ca], ca, &out.data[i * (ca + cb)]);
      std::copy_n(&b->value.data[i * cb], cb, &out.data[i * (ca + cb) + ca]);
    }
    return record(std::move(out), {a, b}, [a, b, r, ca, cb](Node& o) {
      for (std::size_t i = 0; i < r; ++i) {
        if (a->requires_grad) {
          auto& g = a->ensure_grad();
          for (std::size_t j = 0; j < ca; ++j) g[i * ca + j] += o.grad[i * (ca + cb) + j];
        }
        if (b->requires_grad) {
          auto& g = b->ensure_grad();
          for (std::size_t j = 0; j < cb; ++j) g[i * cb + j] += o.grad[i * (ca + cb) + ca + j];
        }
      }
    });
  }

  Ref slice_cols(Ref a, std::size_t c0, std::size_t c1) {
    const std::size_t r = a->value.rows(), c = a->value.cols();
    if (c0 >= c1 || c1 > c) throw shape_error("slice_cols: bad range on " + a->value.shape_str());
    const std::size_t w = c1 - c0;
    Tensor out = Tensor::zeros({r, w});
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(&a->value.data[i * c + c0], w, &out.data[i * w]);
    return record(std::move(out), {a}, [a, r, c, c0, w](Node& o) {
      if (!a->requires_grad) return;
      auto& g = a->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) g[i * c + c0 + j] += o.grad[i * w + j];
    });
  }

  /// 2x2 average pooling over rows interpreted as h x w images.
  Ref avg_pool2x2(Ref a, std::size_t h, std::size_t w) {
    const std::size_t r = a->value.rows();
    if (a->value.cols() != h * w || h % 2 || w % 2)
      throw shape_error("avg_pool2x2: rows of " + a->value.shape_str() + " are not even " +
                        std::to_string(h) + "x" + std::to_string(w) + " images");
    const std::size_t oh = h / 2, ow = w / 2;
    Tensor out = Tensor::zeros({r, oh * ow});
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          const float* p = &a->value.data[i * h * w + 2 * y * w + 2 * x];
          out.data[i * oh * ow + y * ow + x] = 0.25f * (p[0] + p[1] + p[w] + p[w + 1]);
        }
    return record(std::move(out), {a}, [a, r, h, w, oh, ow](Node& o) {
      if (!a->requires_grad) return;
      auto& g = a->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t x = 0; x < ow; ++x) {
            const float go = 0.25f * o.grad[i * oh * ow + y * ow + x];
            float* p = &g[i * h * w + 2 * y * w + 2 * x];
            p[0] += go; p[1] += go; p[w] += go; p[w + 1] += go;
          }
    });
  }

  // ---- linear algebra ----

  Ref matmul(Ref a, Ref b) {
    const std::size_t m = a->value.rows(), ka = a->value.cols();
    const std::size_t kb = b->value.rows(), n = b->value.cols();
    if (ka != kb)
      throw shape_error("matmul: inner extents differ, " + a->value.shape_str() + " * " + b->value.shape_str());
    Tensor out = Tensor::zeros({m, n});
    CMap A(a->value.data.data(), m, ka), B(b->value.data.data(), kb, n);
    MMap(out.data.data(), m, n).noalias() = A * B;
    return record(std::move(out), {a, b}, [a, b, m, ka, n](Node& o) {
      CMap A(a->value.data.data(), m, ka), B(b->value.data.data(), ka, n);
      CMap G(o.grad.data(), m, n);
      if (a->requires_grad) MMap(a->ensure_grad().data(), m, ka).noalias() += G * B.transpose();
      if (b->requires_grad) MMap(b->ensure_grad().data(), ka, n).noalias() += A.transpose() * G;
    });
  }

  /// Direct convolution with zero padding k/2 (shape-preserving at stride 1).
  /// x: [b, c_in*h*w], weight: [c_out, c_in*k*k], bias: [c_out].
  Ref conv2d(Ref x, Ref weight, Ref bias, std::size_t c_in, std::size_t h, std::size_t w,
             std::size_t c_out, std::size_t k, std::size_t stride) {
    const std::size_t batch = x->value.rows();
    if (x->value.cols() != c_in * h * w)
      throw shape_error("conv2d: input " + x->value.shape_str() + " is not [b," + std::to_string(c_in * h * w) + "]");
    const std::size_t pad = k / 2;
    const std::size_t oh = (h + 2 * pad - k) / stride + 1;
    const std::size_t ow = (w + 2 * pad - k) / stride + 1;
    Tensor out = Tensor::zeros({batch, c_out * oh * ow});
    auto x_at = [&](const std::vector<float>& d, std::size_t bi, std::size_t ci, long yy, long xx) -> float {
      if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) return 0.0f;
      return d[bi * c_in * h * w + ci * h * w + yy * w + xx];
    };
    for (std::size_t bi = 0; bi < batch; ++bi)
      for (std::size_t co = 0; co < c_out; ++co)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            float acc = bias->value.data[co];
            for (std::size_t ci = 0; ci < c_in; ++ci)
              for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx)
                  acc += weight->value.data[co * c_in * k * k + ci * k * k + ky * k + kx] *
                         x_at(x->value.data, bi, ci,
                              static_cast<long>(oy * stride + ky) - static_cast<long>(pad),
                              static_cast<long>(ox * stride + kx) - static_cast<long>(pad));
            out.data[bi * c_out * oh * ow + co * oh * ow + oy * ow + ox] = acc;
          }
    return record(std::move(out), {x, weight, bias},
                  [x, weight, bias, batch, c_in, h, w, c_out, k, stride, pad, oh, ow](Node& o) {
      for (std::size_t bi = 0; bi < batch; ++bi)
        for (std::size_t co = 0; co < c_out; ++co)
          for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const float go = o.grad[bi * c_out * oh * ow + co * oh * ow + oy * ow + ox];
              if (bias->requires_grad) bias->ensure_grad()[co] += go;
              for (std::size_t ci = 0; ci < c_in; ++ci)
                for (std::size_t ky = 0; ky < k; ++ky)
                  for (std::size_t kx = 0; kx < k; ++kx) {
                    const long yy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                    const long xx = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                    if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
                    const std::size_t xi = bi * c_in * h * w + ci * h * w + yy * w + xx;
                    const std::size_t wi = co * c_in * k * k + ci * k * k + ky * k + kx;
                    if (weight->requires_grad) weight->ensure_grad()[wi] += go * x->value.data[xi];
                    if (x->requires_grad) x->ensure_grad()[xi] += go * weight->value.data[wi];
                  }
            }
    });
  }

  /// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
  Ref softmax_cross_entropy(Ref logits, const std::vector<int>& labels) {
    const std::size_t b = logits->value.rows(), c = logits->value.cols();
    if (labels.size() != b)
      throw shape_error("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                        std::to_string(b));
    Tensor probs = Tensor::zeros({b, c});
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      const int y = labels[i];
      if (y < 0 || static_cast<std::size_t>(y) >= c)
        throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) + " outside [0," +
                                std::to_string(c) + ")");
      const float* row = &logits->value.data[i * c];
      float mx = row[0];
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
      double z = 0.0;
      for (std::size_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(row[j] - mx));
      const double logz = std::log(z) + mx;
      loss += logz - row[y];
      for (std::size_t j = 0; j < c; ++j)
        probs.data[i * c + j] = static_cast<float>(std::exp(row[j] - logz));
    }
    Tensor out = Tensor::scalar(static_cast<float>(loss / b));
    auto probs_saved = std::make_shared<Tensor>(std::move(probs));
    return record(std::move(out), {logits}, [logits, labels, probs_saved, b, c](Node& o) {
      if (!logits->requires_grad) return;
      auto& g = logits->ensure_grad();
      const float s = o.grad[0] / static_cast<float>(b);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          float p = probs_saved->data[i * c + j];
          if (static_cast<std::size_t>(labels[i]) == j) p -= 1.0f;
          g[i * c + j] += s * p;
        }
    });
  }

  /// Weighted sum over the batch of -log softmax(logits)[label]: sum_i w_i*CE_i.
  /// Row weights fold mixed clean/adversarial batch weighting into one graph.
  Ref softmax_cross_entropy_weighted(Ref logits, const std::vector<int>& labels,
                                     const std::vector<float>& weights) {
    const std::size_t b = logits->value.rows(), c = logits->value.cols();
    if (labels.size() != b || weights.size() != b)
      throw shape_error("softmax_cross_entropy_weighted: " + std::to_string(labels.size()) +
                        " labels / " + std::to_string(weights.size()) + " weights for batch " +
                        std::to_string(b));
    Tensor probs = Tensor::zeros({b, c});
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      const int y = labels[i];
      if (y < 0 || static_cast<std::size_t>(y) >= c)
        throw std::out_of_range("softmax_cross_entropy_weighted: label " + std::to_string(y) +
                                " outside [0," + std::to_string(c) + ")");
      const float* row = &logits->value.data[i * c];
      float mx = row[0];
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
      double z = 0.0;
      for (std::size_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(row[j] - mx));
      const double logz = std::log(z) + mx;
      loss += weights[i] * (logz - row[y]);
      for (std::size_t j = 0; j < c; ++j)
        probs.data[i * c + j] = static_cast<float>(std::exp(row[j] - logz));
    }
    Tensor out = Tensor::scalar(static_cast<float>(loss));
    auto probs_saved = std::make_shared<Tensor>(std::move(probs));
    return record(std::move(out), {logits}, [logits, labels, weights, probs_saved, b, c](Node& o) {
      if (!logits->requires_grad) return;
      auto& g = logits->ensure_grad();
      for (std::size_t i = 0; i < b; ++i) {
        const float s = o.grad[0] * weights[i];
        for (std::size_t j = 0; j < c; ++j) {
          float p = probs_saved->data[i * c + j];
          if (static_cast<std::size_t>(labels[i]) == j) p -= 1.0f;
          g[i * c + j] += s * p;
        }
      }
    });
  }

  /// Reverse pass from a scalar loss. One backward per tape.
  void backward(Ref loss) {
    if (!loss->value.is_scalar())
      throw contract_error("backward requires a scalar loss, got " + loss->value.shape_str());
    if (consumed_) throw contract_error("tape already consumed by a previous backward pass");
    consumed_ = true;
    loss->ensure_grad()[0] = 1.0f;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node& n = **it;
      if (n.backprop && n.reached() && n.requires_grad) n.backprop();
    }
  }

  std::size_t size() const { return order_.size(); }

 private:
  static void axpy(std::vector<float>& y, const std::vector<float>& x, float a) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
  }

  void require_same_shape(const char* op, const Ref& a, const Ref& b) {
    if (!same_shape(a->value, b->value))
      throw shape_error(std::string(op) + ": " + a->value.shape_str() + " vs " + b->value.shape_str());
  }

  Ref record(Tensor value, std::initializer_list<Ref> inputs, std::function<void(Node&)> bp) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    for (const auto& in : inputs) n->requires_grad = n->requires_grad || in->requires_grad;
    if (n->requires_grad) {
      Node* raw = n.get();
      n->backprop = [raw, bp = std::move(bp)]() { bp(*raw); };
    }
    order_.push_back(n);
    return n;
  }

  template <class F, class B>
  Ref binary(Ref a, Ref b, F f, B bp) {
    require_same_shape("elementwise", a, b);
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = f(a->value.data[i], b->value.data[i]);
    return record(std::move(out), {a, b}, [a, b, bp](Node& o) { bp(o, *a, *b); });
  }

  std::vector<Ref> order_;
  bool consumed_ = false;
};

}  // namespace vibtk::autograd
