#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "fpeft/tensor.hpp"

namespace fpeft::inline FPEFT_PRECISION_NS {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  bool valid() const { return tape != nullptr && id >= 0; }
};

/// Append-only record of a forward computation. Node ids are assigned in
/// creation order, so every node's inputs precede it and a reverse sweep is a
/// valid topological order for backpropagation.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value, bool requires_grad);
  // The referenced tensor must outlive the tape and stay unmodified.
  Var leaf_ref(const Tensor& value, bool requires_grad);

  // Records an op output. The node requires grad iff any input does; the
  // backward closure is dropped otherwise.
  Var record(Tensor value, std::vector<int> inputs, BackwardFn backward);

  const Tensor& value(int id) const;
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  // Null when the node received no gradient (or does not require one).
  const Tensor* grad(int id) const;
  const Tensor* grad(Var v) const { return grad(v.id); }
  // Zero-initialised on first access. Used by backward closures.
  Tensor& grad_buffer(int id);

  // Reverse sweep from a single-element loss. Throws ShapeError otherwise.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    std::vector<int> inputs;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;  // stable references across appends
};

// ---------------------------------------------------------------------------
// Differentiable operations. Binary element-wise ops accept identical shapes
// or an operand whose shape is a trailing suffix of the other's (bias-style
// broadcasting).

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double s);
Var add_scalar(Var x, double s);

// a[..., p, q] x b[..., q, r]; batch extents broadcast numpy-style.
Var matmul(Var a, Var b);
// x[..., in] * w[in, out] + b[out]. `b` may be invalid (no bias).
Var linear(Var x, Var w, Var b);

Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
// tanh approximation.
Var gelu(Var x);
Var softmax(Var x, int axis = -1);
Var log_softmax(Var x, int axis = -1);

// Multi-head scaled dot-product attention over q,k,v[..., L, C] without
// projections. `key_masked[j]` true excludes key j (logit set to -1e9).
// Throws ConfigError when C is not divisible by heads.
Var scaled_dot_attention(Var q, Var k, Var v, int heads, std::span<const std::uint8_t> key_masked);

Var reshape(Var x, Shape shape);
Var concat(std::span<const Var> parts, int axis);
Var slice(Var x, int axis, std::int64_t begin, std::int64_t end);
// Selects rows along axis -2; index -1 yields a zero row.
Var gather_rows(Var x, std::span<const std::int64_t> index);
// Mean over axis -2: [..., L, C] -> [..., C].
Var mean_rows(Var x);
// Max over axis -2 restricted to rows with keep[n*L + l] true: [n, L, C] -> [n, C].
Var masked_max_rows(Var x, std::span<const std::uint8_t> keep);

Var sum(Var x);
Var mean(Var x);
Var abs(Var x);
Var square(Var x);
// Element-wise Huber: 0.5 x^2 if |x| <= delta, else delta (|x| - delta/2).
Var huber(Var x, double delta);

}  // namespace fpeft
