#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "pcnn/tensor.hpp"

namespace pcnn::nk {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Records the forward pass so backward() can replay it in reverse.
///
/// Nodes are appended in creation order, which is a topological order of the
/// computation graph; backward() walks ids in descending order and visits each
/// node once. A tape is single-threaded; separate tapes are independent.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var parameter(Tensor value) { return leaf(std::move(value), true); }

  /// Appends an op node. `fn` is dropped when no input needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);

  const Tensor& value(Var v) const;
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  /// Gradient of the last backward() target w.r.t. v; exactly zero for nodes
  /// that do not influence it.
  Tensor grad(Var v) const;
  /// Gradient accumulator for op authors, allocated on first use.
  Tensor& grad_buffer(std::size_t id);
  const Tensor& upstream(std::size_t id) const { return nodes_[id].grad; }

  /// Reverse-mode sweep from a scalar loss. Resets earlier gradients, so
  /// calling it twice yields the same result.
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t last_backward_visits() const noexcept { return visits_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool needs_grad = false;
  };
  std::deque<Node> nodes_;
  std::size_t visits_ = 0;
};

// ---------------------------------------------------------------------------
// Primitive ops. Every op records itself on the tape of its first argument.

/// y = x W + b over the last axis of x; W is [I, O], b is [O].
Var linear(Var x, Var weight, Var bias);
Var add(Var a, Var b);
/// x[B, S, D] + p[S, D], broadcast over the batch.
Var add_broadcast(Var x, Var p);
Var reshape(Var x, Shape shape);
/// Exact erf-based GELU.
Var gelu(Var x);
Var sigmoid(Var x);

enum class Mode { Train, Eval };

struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Batch normalization over the batch axis of x[B, F]. In train mode the
/// batch statistics are used and `stats` is updated (running variance uses
/// the unbiased estimate); in eval mode `stats` is read only.
Var batchnorm(Var x, Var gamma, Var beta, BatchNormStats& stats, Mode mode);

/// Scaled dot-product attention, multi-head, no projections.
/// q[B, Sq, D], k/v[B, Sk, D] -> [B, Sq, D]. If `weights` is non-null it
/// receives the softmax matrix with shape [B, heads, Sq, Sk].
Var attention(Var q, Var k, Var v, std::size_t heads, Tensor* weights = nullptr);

/// Row `index` of every batch item: x[B, S, D] -> [B, D].
Var take_token(Var x, std::size_t index);
/// x with token `index` replaced by t[B, D].
Var with_token(Var x, std::size_t index, Var t);
/// [cls ‖ x]: cls[D] broadcast over the batch, x[B, T, D] -> [B, 1+T, D].
Var prepend_token(Var cls, Var x);
/// Mean over the token axis: x[B, S, D] -> [B, D].
Var mean_tokens(Var x);
/// a[B, F1] ‖ b[B, F2] -> [B, F1+F2].
Var concat_features(Var a, Var b);
Var sum(Var x);

/// Mean binary cross-entropy on logits, stable for any magnitude.
/// o has B elements; labels are 0/1.
Var bce_with_logits(Var logits, const std::vector<double>& labels);

// ---------------------------------------------------------------------------
// Attention blocks built from the primitives above.

struct AttentionWeights {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Multi-head self-attention without residual: x[B, S, D] -> [B, S, D].
Var mhsa(Var x, const AttentionWeights& w, std::size_t heads,
         Tensor* weights = nullptr);

/// CLS-as-query token fusion with one parameter set for both directions.
/// z1's CLS = y1's CLS + Attn(query = y1 CLS, keys/values = all of y2);
/// z2 symmetric. Non-CLS tokens pass through.
std::pair<Var, Var> cross_attention(Var y1, Var y2, const AttentionWeights& w,
                                    std::size_t heads);

/// Plain helpers on values (no tape).
double gelu_value(double x);
double sigmoid_value(double x);
double bce_value(double logit, double label);

}  // namespace pcnn::nk
