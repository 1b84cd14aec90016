#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace casl {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

/// Raised when a computation produces or receives non-finite values.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily; same length as data once present
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  std::size_t size() const { return data.size(); }
  void ensure_grad();
};

}  // namespace detail

// Dense row-major tensor participating in a define-by-run reverse-mode
// differentiation graph. Handles share the underlying node; graphs are
// rebuilt every forward pass and confined to one worker thread.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->size(); }
  bool is_scalar() const { return size() == 1; }
  double value() const;

  std::span<const double> data() const { return node_->data; }
  // Mutable access; meant for leaves (parameters, observations) only.
  std::span<double> raw_data() { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const;
  std::span<double> raw_grad();
  void zero_grad();

  const char* op() const { return node_->op; }

  // Internal node accessor used by the op implementations.
  const std::shared_ptr<detail::TensorNode>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node)
      : node_(std::move(node)) {}
  std::shared_ptr<detail::TensorNode> node_;

  friend Tensor make_op_result(Shape shape, std::vector<double> data,
                               const char* op,
                               std::vector<Tensor> parents,
                               std::function<void(detail::TensorNode&)> bw);
};

// ---- elementwise primitives ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor scale_by(const Tensor& v, const Tensor& s);  // s scalar, differentiable

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);   // [r,k] x [k,c] -> [r,c]
Tensor matvec(const Tensor& w, const Tensor& x);   // [r,k] x [k]   -> [r]
Tensor affine(const Tensor& w, const Tensor& x, const Tensor& b);  // W x + b

// 3x3 cross-correlation, stride 2, zero padding chosen so the output extent
// is ceil(H/2) (shortfall padded at the bottom/right). Per-channel bias.
Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias);

// ---- shape ops ----
Tensor flatten(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts);          // 1-D
Tensor slice(const Tensor& v, std::size_t offset, std::size_t len);  // 1-D
Tensor pick(const Tensor& v, std::size_t index);          // 1-D -> scalar

// ---- reductions / distributions ----
Tensor sum(const Tensor& a);
Tensor softmax(const Tensor& v);       // 1-D, max-subtracted
Tensor log_sum_exp(const Tensor& v);   // 1-D -> scalar

// Numerically stable scalar sigmoid shared with non-graph code paths.
double sigmoid_scalar(double x);

// While alive, ops on the current thread record no graph (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {
bool grad_mode_enabled();
}

// Reverse accumulation from a scalar loss. Gradients are accumulated into
// every requires_grad node reachable from the loss, in reverse topological
// order (deterministic for a fixed graph construction order).
void backward(const Tensor& loss);

}  // namespace casl
