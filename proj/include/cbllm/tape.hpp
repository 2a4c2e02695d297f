#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cbllm/tensor.hpp"

namespace cbllm {

// Handle to a node on a Tape. Only meaningful for the tape that created it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Define-by-run reverse-mode tape. Every op evaluates eagerly, records its
// inputs, and (when gradients are enabled) a closure that propagates the
// output gradient to them. Nodes are appended in creation order, which is a
// topological order, so backward is a single reverse sweep.
//
// All values are 2-D [rows x cols]; scalars are [1 x 1].
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Leaf bound to a parameter; backward accumulates into p.grad.
  Var param(Param& p);
  // Same value as v but no gradient flows back through it.
  Var detach(Var v);

  Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);
  Var add(Var a, Var b);
  Var add_row(Var a, Var row);  // row [1 x C] broadcast over a [R x C]
  Var mul(Var a, Var b);
  Var mul_row(Var a, Var row);
  Var scale(Var a, float s);
  Var relu(Var a);
  Var softmax(Var a);  // row-wise, max-subtracted
  Var log_softmax(Var a);
  Var log(Var a);
  Var layer_norm(Var a, float eps = 1e-5f);  // row-wise, no affine terms
  Var embedding(Var table, std::span<const int> ids);
  Var concat_cols(std::span<const Var> parts);
  Var slice_cols(Var a, std::size_t begin, std::size_t end);
  Var slice_rows(Var a, std::size_t begin, std::size_t end);
  Var gather_rows(Var a, std::span<const std::size_t> rows);
  Var sum(Var a);
  Var mean(Var a);
  // Mean cross-entropy of row-wise logits against class ids; entries < 0 are ignored.
  Var cross_entropy(Var logits, std::span<const int> targets);
  // Per-row cosine similarity, [R x 1]. Norms are floored at 1e-8.
  Var cosine_rows(Var a, Var b);
  // Multi-head causal self-attention over packed sequences. Rows of q/k/v are
  // positions; offsets[s]..offsets[s+1] delimits sequence s.
  Var causal_attention(Var q, Var k, Var v, std::span<const std::size_t> offsets, std::size_t heads);
  Var dropout(Var a, float rate, std::mt19937_64& rng);
  // alpha * |w|_1 + (1 - alpha) * 0.5 * |w|_2^2; subgradient of |0| is 0.
  Var elastic_net(Var w, float alpha);

  const Tensor& value(Var v) const;
  // Gradient of the last backward pass w.r.t. v; zeros if none reached it.
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

  // Seeds d(out) and sweeps the tape once. Parameter leaves add their gradient
  // into Param::grad. A tape supports exactly one backward pass.
  void backward(Var out, const Tensor& seed);
  void backward(Var scalar_out);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Param* param = nullptr;
    std::string op;
    std::function<void()> backward_fn;
  };

  Var push(std::string op, Tensor value, bool requires_grad);
  Node& node(Var v);
  const Node& node(Var v) const;
  Tensor& grad_ref(int id);
  bool any_grad(std::initializer_list<Var> vars) const;

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
  bool backward_done_ = false;
};

}  // namespace cbllm
