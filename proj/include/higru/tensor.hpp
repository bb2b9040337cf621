#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "higru/errors.hpp"

namespace higru {

class RngStream;

enum class Mode { kTrain, kEval };

struct TensorImpl;

// Backward rule of one graph node. Reads the node's output gradient and adds
// each parent's share into parent_grads[i]; entries are null for parents that
// do not need gradients. `self` gives access to the node's own value and its
// parents' values, so rules rarely capture anything beyond op-specific state
// (dropout masks, argmax indices, ...).
using BackwardFn = std::function<void(
    const TensorImpl& self, const std::vector<double>& out_grad,
    const std::vector<std::vector<double>*>& parent_grads)>;

struct GraphNode {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> parents;
  BackwardFn backward;
};

struct TensorImpl {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // persistent; empty until backward touches it
  bool requires_grad = false;
  std::unique_ptr<GraphNode> node;  // null for leaves
};

// Dense row-major array of 64-bit floats with an associated gradient slot.
// Value-semantics handle: copies alias the same storage, clone() detaches.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<std::size_t> shape, double value,
                     bool requires_grad = false);
  static Tensor from_data(std::vector<std::size_t> shape,
                          std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor uniform(std::vector<std::size_t> shape, double lo, double hi,
                        RngStream& rng, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }

  const std::vector<std::size_t>& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t rows() const;  // rank-2 only
  std::size_t cols() const;  // rank-2 only

  std::vector<double>& data();
  const std::vector<double>& data() const;

  bool has_grad() const;
  const std::vector<double>& grad() const;  // throws if absent
  void clear_grad();

  bool requires_grad() const;
  void set_requires_grad(bool flag);  // leaves only

  double value() const;  // single-element tensors
  double at(std::size_t i) const;
  double at(std::size_t r, std::size_t c) const;

  // Independent leaf copy of the current values (no graph, no grad).
  Tensor clone() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& ptr() const { return impl_; }

  static Tensor wrap(std::shared_ptr<TensorImpl> impl);

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// While alive, newly built ops record no graph (forward values only).
// Per thread; nesting is fine.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// Builds a graph node from precomputed output data. The backbone for every
// op below and for ops defined by other modules.
Tensor make_op(const char* op, std::vector<std::size_t> shape,
               std::vector<double> data, std::vector<Tensor> parents,
               BackwardFn backward);

// ---- ops -----------------------------------------------------------------

// a + b; b may also be a bias row ([n] or [1 x n] against a [m x n]).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);  // exact shapes
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, exact shapes
Tensor scale(const Tensor& x, double factor);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, std::vector<std::size_t> shape);
Tensor gather_rows(const Tensor& matrix, const std::vector<int>& ids);

// Softmax over the last axis with positions >= valid masked out: they get an
// additive -1e30 before normalization and exactly 0 weight after.
Tensor masked_softmax(const Tensor& scores, std::size_t valid);
Tensor softmax(const Tensor& x);  // full last axis

// Per-dimension max over the time axis of a [M x d] tensor -> [d]. Gradient
// flows to the first occurrence of each dimension's maximum.
Tensor max_over_time(const Tensor& seq);

// Inverted dropout: train mode zeroes elements with probability `rate` and
// scales survivors by 1/(1-rate); eval mode is the identity.
Tensor dropout(const Tensor& x, double rate, Mode mode, RngStream* rng);

Tensor sum(const Tensor& x);  // all elements -> scalar

// x [m x in] * W^T + b for W [out x in], b [out] -> [m x out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// ---- engine ----------------------------------------------------------------

// Reverse-mode accumulation from a scalar loss. Each reachable node is
// visited exactly once; repeated calls without clearing add up (use
// zero_grads between optimizer steps).
void backward(const Tensor& loss);

void zero_grads(const std::vector<Tensor>& tensors);

std::string shape_string(const std::vector<std::size_t>& shape);

}  // namespace higru
