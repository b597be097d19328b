#pragma once

// Minimal define-by-run reverse-mode automatic differentiation over dense,
// row-major double tensors. Every op records a closure that accumulates the
// upstream gradient into its inputs; backward() replays them in reverse
// topological order. Parameters are leaf variables that outlive the graph.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace flag::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  // Leaf without gradient tracking.
  static Var constant(Shape shape, std::vector<double> values);
  static Var constant(Shape shape, double fill = 0.0);
  static Var scalar(double v) { return constant(Shape{1}, v); }
  // Leaf that accumulates gradients.
  static Var parameter(Shape shape, std::vector<double> values);

  bool valid() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  double item() const;
  void zero_grad() { node_->grad.clear(); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// While alive, ops on this thread record no graph (inference only).
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

// Seeds d(root)/d(root) = 1 and propagates to every reachable leaf.
// `root` must hold a single element.
void backward(const Var& root);

// ---- elementwise with numpy-style broadcasting ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var add_scalar(const Var& a, double c);
Var mul_scalar(const Var& a, double c);
Var neg(const Var& a);

// ---- unary ----
Var square(const Var& a);
Var sqrt(const Var& a);
Var abs(const Var& a);
Var exp(const Var& a);
Var gelu(const Var& a);  // exact (erf) form
Var silu(const Var& a);

// ---- linear algebra ----
// a[..., k] x w[k, m] -> [..., m]
Var matmul(const Var& a, const Var& w);
// a[..., n, k] x b[..., k, m] -> [..., n, m], identical leading dims
Var bmm(const Var& a, const Var& b);
Var transpose_last2(const Var& a);
Var permute(const Var& a, const std::vector<std::size_t>& axes);
Var reshape(const Var& a, Shape shape);

// ---- reductions ----
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var sum_last(const Var& a);   // [..., n] -> [..., 1]
Var mean_last(const Var& a);  // [..., n] -> [..., 1]
Var mean_axis(const Var& a, std::size_t axis);  // drops the axis

// ---- normalization / attention primitives ----
Var softmax_last(const Var& a);
Var layer_norm_last(const Var& a, double eps);  // no affine parameters
// softmax(scale·Q_h K_hᵀ) V_h per head, heads laid out contiguously along the
// last axis. q: [..., Lq, D], k, v: [..., Lk, D] -> [..., Lq, D].
Var multihead_attention(const Var& q, const Var& k, const Var& v, std::size_t heads, double scale);

// ---- structural ----
Var concat_last(const std::vector<Var>& parts);
Var slice_last(const Var& a, std::size_t start, std::size_t len);
Var take_rows(const Var& a, const std::vector<std::size_t>& rows);  // gather along axis 0

// Convenience operators.
inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator*(const Var& a, double c) { return mul_scalar(a, c); }
inline Var operator*(double c, const Var& a) { return mul_scalar(a, c); }
inline Var operator+(const Var& a, double c) { return add_scalar(a, c); }

}  // namespace flag::ad
