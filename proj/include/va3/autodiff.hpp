#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "va3/tensor.hpp"

namespace va3::ad {

struct Node {
  Tensor value;
  Tensor grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this node's grad into its parents.
  std::function<void(Node&)> backward;

  Tensor& grad_buffer();  // allocates zeros on first use
};

/// Handle to a value on the computation tape.
///
/// Copies share the same node. Graphs are built eagerly by the free
/// functions below and released when the last handle goes away.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor value) { return Var(std::move(value), false); }
  static Var parameter(Tensor value) { return Var(std::move(value), true); }
  static Var scalar(double value) { return Var(Tensor::scalar(value)); }

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  std::size_t size() const { return node_->value.size(); }
  double item() const { return node_->value.item(); }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->has_grad; }
  // Zero-filled tensor of the value's shape when no gradient has arrived.
  Tensor grad() const;
  void zero_grad();

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Accumulates d(root)/d(x) into every reachable x with requires_grad.
// `root` must hold a single element.
void backward(const Var& root);

bool grad_enabled();

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Elementwise arithmetic with numpy-style broadcasting.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }

Var scale(const Var& x, double factor);
Var add_scalar(const Var& x, double offset);
inline Var operator-(const Var& x) { return scale(x, -1.0); }

Var exp(const Var& x);
Var log(const Var& x);
Var relu(const Var& x);
Var leaky_relu(const Var& x, double slope = 0.01);
Var sigmoid(const Var& x);

// 2-D matrix product [n,k] x [k,m].
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& x);
Var reshape(const Var& x, Shape shape);

Var sum(const Var& x);
Var sum(const Var& x, std::size_t axis, bool keepdim = false);
Var mean(const Var& x);
Var mean(const Var& x, std::size_t axis, bool keepdim = false);

Var softmax(const Var& x, std::size_t axis);
Var log_softmax(const Var& x, std::size_t axis);

Var concat(const std::vector<Var>& parts, std::size_t axis);
Var slice(const Var& x, std::size_t axis, std::size_t start, std::size_t length);
// Rows along axis 0, e.g. [n, ...] -> [indices.size(), ...].
Var index_select(const Var& x, std::span<const std::size_t> indices);
inline Var embedding(const Var& table, std::span<const std::size_t> ids) {
  return index_select(table, ids);
}

// Normalizes over the last axis, then applies per-feature gain and bias.
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);

Var dot(const Var& a, const Var& b);
Var euclidean_distance(const Var& a, const Var& b);
// Per-row distances of two [n, h] matrices -> [n].
Var row_distance(const Var& a, const Var& b);

// Mean cross entropy of softmax(logits) against class targets. `logits` is
// [k] with one target, or [n,k] with n targets.
Var softmax_cross_entropy(const Var& logits, std::span<const std::size_t> targets);

// Forward value `hard`, gradient routed unchanged into `soft`.
Var straight_through(Tensor hard, const Var& soft);
Var detach(const Var& x);

// Softmax within groups of a 1-D score vector; `segments[p]` < n_segments.
Var segment_softmax(const Var& scores, std::span<const std::size_t> segments,
                    std::size_t n_segments);
// Scatter-add of rows [P, ...] into [n_segments, ...].
Var segment_sum(const Var& values, std::span<const std::size_t> segments,
                std::size_t n_segments);

}  // namespace va3::ad
