#pragma once

// Reverse-mode differentiation over a linear tape. A Tape is single-owner:
// one training step records onto one tape on one thread.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "graftnet/kernels.hpp"
#include "graftnet/tensor.hpp"

namespace graftnet {

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

template <class T>
class Tape {
 public:
  const BasicTensor<T>& value(Var v) const { return node(v).value; }
  const BasicTensor<T>& grad(Var v) const { return node(v).grad; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

  /// A value that receives no gradient.
  Var constant(BasicTensor<T> value) {
    return push(std::move(value), false, nullptr);
  }

  /// A differentiable input whose gradient is kept on the tape.
  Var input(BasicTensor<T> value) {
    return push(std::move(value), true, nullptr);
  }

  /// Leaf bound to a parameter; gradient accumulates into param.grad only
  /// when the parameter is trainable.
  Var param(BasicParameter<T>& p) {
    const Var v = push(p.value, p.trainable, nullptr);
    if (p.trainable) {
      nodes_[v.id].backward = [this, v, &p] {
        const auto& g = nodes_[v.id].grad;
        for (std::size_t i = 0; i < g.numel(); ++i) p.grad[i] += g[i];
      };
    }
    return v;
  }

  /// Records an op. `backward` is called once during the reverse sweep if
  /// the result requires a gradient; it reads this node's gradient through
  /// grad_of(result) and accumulates into its inputs via accumulate().
  Var record(BasicTensor<T> value, bool requires_grad,
             std::function<void()> backward) {
    return push(std::move(value), requires_grad, std::move(backward));
  }

  void accumulate(Var v, const BasicTensor<T>& g) {
    auto& n = nodes_.at(v.id);
    if (!n.requires_grad) return;
    if (n.grad.empty()) n.grad = BasicTensor<T>(n.value.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) n.grad[i] += g[i];
  }

  const BasicTensor<T>& grad_of(Var v) const { return nodes_.at(v.id).grad; }

  void backward(Var loss) {
    if (nodes_.empty() || loss.id >= nodes_.size()) {
      throw Error(ErrorCode::kState, "backward called before forward");
    }
    auto& root = nodes_[loss.id];
    if (root.value.numel() != 1) {
      throw Error(ErrorCode::kShapeMismatch,
                  "backward expects a scalar loss, got " +
                      shape_str(root.value.shape()));
    }
    if (!root.requires_grad) return;
    root.grad = BasicTensor<T>(root.value.shape(), T{1});
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward();
    }
  }

 private:
  struct Node {
    BasicTensor<T> value;
    BasicTensor<T> grad;
    bool requires_grad = false;
    std::function<void()> backward;
  };

  const Node& node(Var v) const { return nodes_.at(v.id); }

  Var push(BasicTensor<T> value, bool requires_grad,
           std::function<void()> backward) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad,
                          std::move(backward)});
    return Var{nodes_.size() - 1};
  }

  // Nodes are addressed by index; the vector may reallocate while recording.
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable ops. Each forwards through the shared kernels.

template <class T>
Var conv2d(Tape<T>& tape, Var x, Var w, Var b, std::size_t stride,
           std::size_t padding) {
  auto y = kernels::conv2d_forward(tape.value(x), tape.value(w), tape.value(b),
                                   stride, padding);
  const bool need = tape.requires_grad(x) || tape.requires_grad(w) ||
                    tape.requires_grad(b);
  Var out{tape.size()};
  return tape.record(std::move(y), need, [&tape, x, w, b, stride, padding,
                                          out] {
    const bool need_dw = tape.requires_grad(w) || tape.requires_grad(b);
    auto g = kernels::conv2d_backward(
        tape.value(x), tape.value(w), tape.value(b), stride, padding,
        tape.grad_of(out), tape.requires_grad(x), need_dw);
    if (tape.requires_grad(x)) tape.accumulate(x, g.dx);
    tape.accumulate(w, g.dw);
    tape.accumulate(b, g.db);
  });
}

/// Batch norm. In train mode the batch statistics normalise and the running
/// statistics are updated (unless frozen); infer mode uses running stats.
template <class T>
Var batch_norm(Tape<T>& tape, Var x, BasicBatchNormState<T>& state, Mode mode) {
  const Var gamma = tape.param(state.gamma);
  const Var beta = tape.param(state.beta);
  const bool need = tape.requires_grad(x) || tape.requires_grad(gamma) ||
                    tape.requires_grad(beta);
  Var out{tape.size()};
  if (mode == Mode::kTrain) {
    auto cache = std::make_shared<kernels::BatchNormCache<T>>();
    auto y = kernels::batch_norm_train(tape.value(x), state, *cache);
    return tape.record(std::move(y), need, [&tape, x, gamma, beta, out, cache] {
      auto g = kernels::batch_norm_train_backward(tape.grad_of(out),
                                                  tape.value(gamma), *cache);
      tape.accumulate(x, g.dx);
      tape.accumulate(gamma, g.dgamma);
      tape.accumulate(beta, g.dbeta);
    });
  }
  auto y = kernels::batch_norm_infer(tape.value(x), state);
  return tape.record(std::move(y), need, [&tape, &state, x, gamma, beta, out] {
    auto g = kernels::batch_norm_infer_backward(tape.value(x), state,
                                                tape.grad_of(out));
    tape.accumulate(x, g.dx);
    tape.accumulate(gamma, g.dgamma);
    tape.accumulate(beta, g.dbeta);
  });
}

template <class T>
Var relu(Tape<T>& tape, Var x) {
  auto y = kernels::relu_forward(tape.value(x));
  Var out{tape.size()};
  return tape.record(std::move(y), tape.requires_grad(x), [&tape, x, out] {
    tape.accumulate(x, kernels::relu_backward(tape.value(x), tape.grad_of(out)));
  });
}

template <class T>
Var global_avg_pool(Tape<T>& tape, Var x) {
  auto y = kernels::global_avg_pool_forward(tape.value(x));
  Var out{tape.size()};
  return tape.record(std::move(y), tape.requires_grad(x), [&tape, x, out] {
    tape.accumulate(x, kernels::global_avg_pool_backward(
                           tape.value(x).shape(), tape.grad_of(out)));
  });
}

template <class T>
Var bilinear_pool(Tape<T>& tape, Var x) {
  auto cache = std::make_shared<kernels::BilinearCache<T>>();
  auto y = kernels::bilinear_pool_forward(tape.value(x), cache.get());
  Var out{tape.size()};
  return tape.record(std::move(y), tape.requires_grad(x),
                     [&tape, x, out, cache] {
                       tape.accumulate(x, kernels::bilinear_pool_backward(
                                              tape.value(x), *cache,
                                              tape.grad_of(out)));
                     });
}

template <class T>
Var dense(Tape<T>& tape, Var v, Var w, Var b) {
  auto y = kernels::dense_forward(tape.value(v), tape.value(w), tape.value(b));
  const bool need = tape.requires_grad(v) || tape.requires_grad(w) ||
                    tape.requires_grad(b);
  Var out{tape.size()};
  return tape.record(std::move(y), need, [&tape, v, w, b, out] {
    auto g = kernels::dense_backward(tape.value(v), tape.value(w),
                                     tape.grad_of(out));
    tape.accumulate(v, g.dv);
    tape.accumulate(w, g.dw);
    tape.accumulate(b, g.db);
  });
}

/// Mean softmax cross-entropy over the batch; produces a scalar node.
template <class T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::span<const int> labels,
                          BasicTensor<T>* probs_out = nullptr) {
  auto r = kernels::softmax_cross_entropy(tape.value(logits), labels);
  if (probs_out) *probs_out = r.probs;
  auto dlogits = std::make_shared<BasicTensor<T>>(std::move(r.dlogits));
  Var out{tape.size()};
  return tape.record(BasicTensor<T>({1}, std::vector<T>{r.loss}),
                     tape.requires_grad(logits), [&tape, logits, out, dlogits] {
                       const T g = tape.grad_of(out)[0];
                       BasicTensor<T> d = *dlogits;
                       for (std::size_t i = 0; i < d.numel(); ++i) d[i] *= g;
                       tape.accumulate(logits, d);
                     });
}

template <class T>
Var reshape(Tape<T>& tape, Var x, Shape shape) {
  auto y = tape.value(x).reshaped(std::move(shape));
  Var out{tape.size()};
  return tape.record(std::move(y), tape.requires_grad(x), [&tape, x, out] {
    tape.accumulate(x, tape.grad_of(out).reshaped(tape.value(x).shape()));
  });
}

template <class T>
Var sum(Tape<T>& tape, Var x) {
  T acc{0};
  for (T v : tape.value(x).data()) acc += v;
  Var out{tape.size()};
  return tape.record(BasicTensor<T>({1}, std::vector<T>{acc}),
                     tape.requires_grad(x), [&tape, x, out] {
                       tape.accumulate(x, BasicTensor<T>(tape.value(x).shape(),
                                                         tape.grad_of(out)[0]));
                     });
}

}  // namespace graftnet
