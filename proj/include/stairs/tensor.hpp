#pragma once

// Dense float64 tensors with tape-free reverse-mode autodiff.
//
// A Tensor is a cheap handle onto a shared graph node. Operations on tensors
// that require gradients record their parents and a backward closure; calling
// backward() on a scalar walks the recorded graph in reverse topological order
// and accumulates d(loss)/d(node) into every reachable node's grad buffer.
//
// Shapes are row-major. Most ops treat a tensor as a matrix whose column count
// is the last dimension and whose row count is the product of the rest.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace stairs {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";

  Node() = default;
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;
  // Releases long parent chains iteratively instead of recursively.
  ~Node();

  double* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad.data();
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t cols() const;
  std::size_t rows() const;

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  double item() const;
  double at(std::size_t flat) const { return node_->data.at(flat); }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient buffer; all zeros if nothing has been accumulated.
  std::vector<double> grad() const;
  std::span<double> mutable_grad() { return {node_->grad_buffer(), node_->data.size()}; }
  void zero_grad() { node_->grad.clear(); }

  // New leaf holding a copy of the values; no graph history.
  Tensor detach(bool requires_grad = false) const;
  // Copy values from another tensor of identical shape.
  void assign(const Tensor& other);

  const char* op_name() const { return node_->op; }
  const detail::Node* node() const { return node_.get(); }

  // Internal: used by op implementations.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Reverse pass from a scalar. Throws ShapeError for non-scalar losses.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Operations

Tensor matmul(const Tensor& a, const Tensor& b);          // [m,k] x [k,n]
Tensor bmm(const Tensor& a, const Tensor& b);             // [S,m,k] x [S,k,n]
Tensor bmm_nt(const Tensor& a, const Tensor& b);          // [S,m,k] x [S,n,k]^T

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_bias(const Tensor& x, const Tensor& bias);     // bias broadcast over rows
Tensor scale(const Tensor& x, double factor);
Tensor affine(const Tensor& x, double factor, double offset);  // factor*x + offset

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);

// Row softmax over the last dimension of softmax(x / temperature).
Tensor softmax(const Tensor& x, double temperature = 1.0);
// Row softmax over the last dimension of a [S,R,C] tensor restricted to the
// keys with key_mask[s*C + c] != 0; masked entries get exactly zero weight.
Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> key_mask,
                      double temperature = 1.0);

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index);
// out[r] = x[r, index[r]] as an [R,1] column.
Tensor pick(const Tensor& x, std::span<const std::size_t> index);
Tensor reshape(const Tensor& x, Shape shape);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_squares(const Tensor& x);
Tensor sum_rows(const Tensor& x);                         // [R,C] -> [R,1]

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

}  // namespace stairs
