#include "stairs/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace stairs {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<detail::Node>;

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                   shape_string(b));
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const std::string& why) {
  throw ShapeError(std::string(op) + ": " + why + " (got " + shape_string(a) + ")");
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

std::size_t lead_rows(const Shape& s) {
  if (s.empty()) return 1;
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
  return r;
}

bool records(std::initializer_list<const Tensor*> inputs) {
  if (!g_grad_enabled) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

bool records(const std::vector<Tensor>& inputs) {
  if (!g_grad_enabled) return false;
  for (const Tensor& t : inputs)
    if (t.requires_grad()) return true;
  return false;
}

// Builds the output node. When `track` is false the backward closure and
// parents are dropped so no graph is kept alive.
Tensor make_result(Shape shape, std::vector<double> data, const char* op, bool track,
                   std::vector<NodePtr> parents, std::function<void(detail::Node&)> backward_fn) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  if (track) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, const char* op, Fwd fwd, Deriv deriv) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  const bool track = records({&x});
  NodePtr px = x.node_ptr();
  return make_result(x.shape(), std::move(out), op, track, {px}, [px, deriv](detail::Node& self) {
    if (!px->requires_grad) return;
    double* g = px->grad_buffer();
    for (std::size_t i = 0; i < self.data.size(); ++i)
      g[i] += self.grad[i] * deriv(px->data[i], self.data[i]);
  });
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace detail {

Node::~Node() {
  backward_fn = nullptr;
  std::vector<std::shared_ptr<Node>> stack = std::move(parents);
  while (!stack.empty()) {
    std::shared_ptr<Node> p = std::move(stack.back());
    stack.pop_back();
    if (p.use_count() == 1) {
      p->backward_fn = nullptr;
      for (auto& q : p->parents) stack.push_back(std::move(q));
      p->parents.clear();
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape)
    if (d == 0) shape_fail("tensor", shape, "dimensions must be positive");
  if (shape_numel(shape) != values.size())
    throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                     shape_string(shape));
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

std::size_t Tensor::cols() const { return last_dim(node_->shape); }
std::size_t Tensor::rows() const { return lead_rows(node_->shape); }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor is not a scalar " + shape_string(shape()));
  return node_->data[0];
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(node_->data.size(), 0.0);
  return node_->grad;
}

Tensor Tensor::detach(bool requires_grad) const {
  return from(node_->shape, node_->data, requires_grad);
}

void Tensor::assign(const Tensor& other) {
  if (shape() != other.shape()) shape_fail("assign", shape(), other.shape());
  node_->data = other.node_->data;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_string(loss.shape()));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order without recursion depth
  // limits on long unrolled episodes.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  detail::Node* root = loss.node_ptr().get();
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward_fn && !node->grad.empty()) {
      node->backward_fn(*node);
      // Interior gradients are consumed; only leaves keep theirs.
      std::vector<double>().swap(node->grad);
    }
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(0)) shape_fail("matmul", a.shape(), b.shape());
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  NodePtr pa = a.node_ptr(), pb = b.node_ptr();
  return make_result({m, n}, std::move(out), "matmul", records({&a, &b}), {pa, pb},
                     [pa, pb, m, k, n](detail::Node& self) {
                       ConstMap g(self.grad.data(), m, n);
                       if (pa->requires_grad)
                         MutMap(pa->grad_buffer(), m, k).noalias() += g * ConstMap(pb->data.data(), k, n).transpose();
                       if (pb->requires_grad)
                         MutMap(pb->grad_buffer(), k, n).noalias() += ConstMap(pa->data.data(), m, k).transpose() * g;
                     });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.dim() != 3 || b.dim() != 3 || a.size(0) != b.size(0) || a.size(2) != b.size(1))
    shape_fail("bmm", a.shape(), b.shape());
  const std::size_t s = a.size(0), m = a.size(1), k = a.size(2), n = b.size(2);
  std::vector<double> out(s * m * n);
  for (std::size_t i = 0; i < s; ++i)
    MutMap(out.data() + i * m * n, m, n).noalias() =
        ConstMap(a.data().data() + i * m * k, m, k) * ConstMap(b.data().data() + i * k * n, k, n);
  NodePtr pa = a.node_ptr(), pb = b.node_ptr();
  return make_result({s, m, n}, std::move(out), "bmm", records({&a, &b}), {pa, pb},
                     [pa, pb, s, m, k, n](detail::Node& self) {
                       for (std::size_t i = 0; i < s; ++i) {
                         ConstMap g(self.grad.data() + i * m * n, m, n);
                         if (pa->requires_grad)
                           MutMap(pa->grad_buffer() + i * m * k, m, k).noalias() +=
                               g * ConstMap(pb->data.data() + i * k * n, k, n).transpose();
                         if (pb->requires_grad)
                           MutMap(pb->grad_buffer() + i * k * n, k, n).noalias() +=
                               ConstMap(pa->data.data() + i * m * k, m, k).transpose() * g;
                       }
                     });
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
  if (a.dim() != 3 || b.dim() != 3 || a.size(0) != b.size(0) || a.size(2) != b.size(2))
    shape_fail("bmm_nt", a.shape(), b.shape());
  const std::size_t s = a.size(0), m = a.size(1), k = a.size(2), n = b.size(1);
  std::vector<double> out(s * m * n);
  for (std::size_t i = 0; i < s; ++i)
    MutMap(out.data() + i * m * n, m, n).noalias() =
        ConstMap(a.data().data() + i * m * k, m, k) * ConstMap(b.data().data() + i * n * k, n, k).transpose();
  NodePtr pa = a.node_ptr(), pb = b.node_ptr();
  return make_result({s, m, n}, std::move(out), "bmm_nt", records({&a, &b}), {pa, pb},
                     [pa, pb, s, m, k, n](detail::Node& self) {
                       for (std::size_t i = 0; i < s; ++i) {
                         ConstMap g(self.grad.data() + i * m * n, m, n);
                         if (pa->requires_grad)
                           MutMap(pa->grad_buffer() + i * m * k, m, k).noalias() +=
                               g * ConstMap(pb->data.data() + i * n * k, n, k);
                         if (pb->requires_grad)
                           MutMap(pb->grad_buffer() + i * n * k, n, k).noalias() +=
                               g.transpose() * ConstMap(pa->data.data() + i * m * k, m, k);
                       }
                     });
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  NodePtr pa = a.node_ptr(), pb = b.node_ptr();
  return make_result(a.shape(), std::move(out), "add", records({&a, &b}), {pa, pb}, [pa, pb](detail::Node& self) {
    for (auto* p : {pa.get(), pb.get()}) {
      if (!p->requires_grad) continue;
      double* g = p->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  NodePtr pa = a.node_ptr(), pb = b.node_ptr();
  return make_result(a.shape(), std::move(out), "sub", records({&a, &b}), {pa, pb}, [pa, pb](detail::Node& self) {
    if (pa->requires_grad) {
      double* g = pa->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      double* g = pb->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  NodePtr pa = a.node_ptr(), pb = b.node_ptr();
  return make_result(a.shape(), std::move(out), "mul", records({&a, &b}), {pa, pb}, [pa, pb](detail::Node& self) {
    if (pa->requires_grad) {
      double* g = pa->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pb->data[i];
    }
    if (pb->requires_grad) {
      double* g = pb->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pa->data[i];
    }
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t c = x.cols();
  if (bias.numel() != c) shape_fail("add_bias", x.shape(), bias.shape());
  const std::size_t r = x.rows();
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto bd = bias.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += bd[j];
  NodePtr px = x.node_ptr(), pb = bias.node_ptr();
  return make_result(x.shape(), std::move(out), "add_bias", records({&x, &bias}), {px, pb},
                     [px, pb, r, c](detail::Node& self) {
                       if (px->requires_grad) {
                         double* g = px->grad_buffer();
                         for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                       }
                       if (pb->requires_grad) {
                         double* g = pb->grad_buffer();
                         for (std::size_t i = 0; i < r; ++i)
                           for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
                       }
                     });
}

Tensor scale(const Tensor& x, double factor) { return affine(x, factor, 0.0); }

Tensor affine(const Tensor& x, double factor, double offset) {
  return unary(
      x, "affine", [factor, offset](double v) { return factor * v + offset; },
      [factor](double, double) { return factor; });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

// ---------------------------------------------------------------------------
// Softmax

namespace {

Tensor softmax_impl(const Tensor& x, const std::uint8_t* mask, std::size_t rows_per_group, double temperature,
                    const char* op) {
  if (!(temperature > 0.0)) throw std::invalid_argument(std::string(op) + ": temperature must be positive");
  const std::size_t c = x.cols(), r = x.rows();
  const auto in = x.data();
  std::vector<double> out(in.size(), 0.0);
  const double inv_t = 1.0 / temperature;
  for (std::size_t i = 0; i < r; ++i) {
    const std::uint8_t* m = mask ? mask + (i / rows_per_group) * c : nullptr;
    const double* row = in.data() + i * c;
    double* o = out.data() + i * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (!m || m[j]) mx = std::max(mx, row[j] * inv_t);
    if (mx == -std::numeric_limits<double>::infinity())
      throw std::invalid_argument(std::string(op) + ": row " + std::to_string(i) + " has no unmasked entries");
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (m && !m[j]) continue;
      o[j] = std::exp(row[j] * inv_t - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < c; ++j) o[j] /= total;
  }
  NodePtr px = x.node_ptr();
  return make_result(x.shape(), std::move(out), op, records({&x}), {px}, [px, r, c, inv_t](detail::Node& self) {
    if (!px->requires_grad) return;
    double* g = px->grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = self.data.data() + i * c;
      const double* gy = self.grad.data() + i * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += y[j] * (gy[j] - dot) * inv_t;
    }
  });
}

}  // namespace

Tensor softmax(const Tensor& x, double temperature) { return softmax_impl(x, nullptr, 1, temperature, "softmax"); }

Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> key_mask, double temperature) {
  if (x.dim() != 3) shape_fail("masked_softmax", x.shape(), "expected [S,R,C]");
  const std::size_t s = x.size(0), r = x.size(1), c = x.size(2);
  if (key_mask.size() != s * c)
    throw ShapeError("masked_softmax: mask length " + std::to_string(key_mask.size()) + " for scores " +
                     shape_string(x.shape()));
  return softmax_impl(x, key_mask.data(), r, temperature, "masked_softmax");
}

// ---------------------------------------------------------------------------
// Structural

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t c = parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) shape_fail("concat_rows", parts.front().shape(), p.shape());
    total += p.rows();
  }
  std::vector<double> out;
  out.reserve(total * c);
  std::vector<NodePtr> parents;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    parents.push_back(p.node_ptr());
  }
  return make_result({total, c}, std::move(out), "concat_rows", records(parts), parents,
                     [parents](detail::Node& self) {
                       std::size_t off = 0;
                       for (const auto& p : parents) {
                         if (p->requires_grad) {
                           double* g = p->grad_buffer();
                           for (std::size_t i = 0; i < p->data.size(); ++i) g[i] += self.grad[off + i];
                         }
                         off += p->data.size();
                       }
                     });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t r = parts.front().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) shape_fail("concat_cols", parts.front().shape(), p.shape());
    total += p.cols();
  }
  std::vector<double> out(r * total);
  std::vector<NodePtr> parents;
  std::vector<std::size_t> widths;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(p.data().data() + i * c, c, out.data() + i * total + off);
    off += c;
    parents.push_back(p.node_ptr());
    widths.push_back(c);
  }
  return make_result({r, total}, std::move(out), "concat_cols", records(parts), parents,
                     [parents, widths, r, total](detail::Node& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < parents.size(); ++k) {
                         const std::size_t c = widths[k];
                         if (parents[k]->requires_grad) {
                           double* g = parents[k]->grad_buffer();
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i * total + off + j];
                         }
                         off += c;
                       }
                     });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t r = x.rows(), c = x.cols();
  if (begin >= end || end > r)
    shape_fail("slice_rows", x.shape(), "bad range [" + std::to_string(begin) + "," + std::to_string(end) + ")");
  std::vector<double> out(x.data().begin() + begin * c, x.data().begin() + end * c);
  NodePtr px = x.node_ptr();
  return make_result({end - begin, c}, std::move(out), "slice_rows", records({&x}), {px},
                     [px, begin, c](detail::Node& self) {
                       if (!px->requires_grad) return;
                       double* g = px->grad_buffer() + begin * c;
                       for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                     });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t r = x.rows(), c = x.cols();
  if (begin >= end || end > c)
    shape_fail("slice_cols", x.shape(), "bad range [" + std::to_string(begin) + "," + std::to_string(end) + ")");
  const std::size_t w = end - begin;
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i) std::copy_n(x.data().data() + i * c + begin, w, out.data() + i * w);
  NodePtr px = x.node_ptr();
  return make_result({r, w}, std::move(out), "slice_cols", records({&x}), {px},
                     [px, r, c, w, begin](detail::Node& self) {
                       if (!px->requires_grad) return;
                       double* g = px->grad_buffer();
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < w; ++j) g[i * c + begin + j] += self.grad[i * w + j];
                     });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  const std::size_t r = x.rows(), c = x.cols();
  if (index.empty()) shape_fail("gather_rows", x.shape(), "empty index");
  std::vector<double> out(index.size() * c);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= r) shape_fail("gather_rows", x.shape(), "row index " + std::to_string(index[i]) + " out of range");
    std::copy_n(x.data().data() + index[i] * c, c, out.data() + i * c);
  }
  NodePtr px = x.node_ptr();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result({idx.size(), c}, std::move(out), "gather_rows", records({&x}), {px},
                     [px, idx, c](detail::Node& self) {
                       if (!px->requires_grad) return;
                       double* g = px->grad_buffer();
                       for (std::size_t i = 0; i < idx.size(); ++i)
                         for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += self.grad[i * c + j];
                     });
}

Tensor pick(const Tensor& x, std::span<const std::size_t> index) {
  const std::size_t r = x.rows(), c = x.cols();
  if (index.size() != r) shape_fail("pick", x.shape(), "index length " + std::to_string(index.size()));
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (index[i] >= c) shape_fail("pick", x.shape(), "column index " + std::to_string(index[i]) + " out of range");
    out[i] = x.data()[i * c + index[i]];
  }
  NodePtr px = x.node_ptr();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result({r, 1}, std::move(out), "pick", records({&x}), {px}, [px, idx, c](detail::Node& self) {
    if (!px->requires_grad) return;
    double* g = px->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) g[i * c + idx[i]] += self.grad[i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) shape_fail("reshape", x.shape(), shape);
  std::vector<double> out(x.data().begin(), x.data().end());
  NodePtr px = x.node_ptr();
  return make_result(std::move(shape), std::move(out), "reshape", records({&x}), {px}, [px](detail::Node& self) {
    if (!px->requires_grad) return;
    double* g = px->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  NodePtr px = x.node_ptr();
  return make_result({1}, {total}, "sum", records({&x}), {px}, [px](detail::Node& self) {
    if (!px->requires_grad) return;
    double* g = px->grad_buffer();
    for (std::size_t i = 0; i < px->data.size(); ++i) g[i] += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum_squares(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v * v;
  NodePtr px = x.node_ptr();
  return make_result({1}, {total}, "sum_squares", records({&x}), {px}, [px](detail::Node& self) {
    if (!px->requires_grad) return;
    double* g = px->grad_buffer();
    for (std::size_t i = 0; i < px->data.size(); ++i) g[i] += 2.0 * px->data[i] * self.grad[0];
  });
}

Tensor sum_rows(const Tensor& x) {
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += x.data()[i * c + j];
  Shape shape = x.shape();
  if (shape.empty()) shape = {1};
  shape.back() = 1;
  NodePtr px = x.node_ptr();
  return make_result(std::move(shape), std::move(out), "sum_rows", records({&x}), {px},
                     [px, r, c](detail::Node& self) {
                       if (!px->requires_grad) return;
                       double* g = px->grad_buffer();
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i];
                     });
}

// ---------------------------------------------------------------------------
// Normalization

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gain.numel() != c) shape_fail("layer_norm", x.shape(), gain.shape());
  if (bias.numel() != c) shape_fail("layer_norm", x.shape(), bias.shape());
  const auto in = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  std::vector<double> out(in.size());
  auto normed = std::make_shared<std::vector<double>>(in.size());
  auto inv_std = std::make_shared<std::vector<double>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = in.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = inv;
    for (std::size_t j = 0; j < c; ++j) {
      const double xh = (row[j] - mu) * inv;
      (*normed)[i * c + j] = xh;
      out[i * c + j] = gd[j] * xh + bd[j];
    }
  }
  NodePtr px = x.node_ptr(), pg = gain.node_ptr(), pb = bias.node_ptr();
  return make_result(x.shape(), std::move(out), "layer_norm", records({&x, &gain, &bias}), {px, pg, pb},
                     [px, pg, pb, normed, inv_std, r, c](detail::Node& self) {
                       const double* gy = self.grad.data();
                       if (pg->requires_grad) {
                         double* g = pg->grad_buffer();
                         for (std::size_t i = 0; i < r; ++i)
                           for (std::size_t j = 0; j < c; ++j) g[j] += gy[i * c + j] * (*normed)[i * c + j];
                       }
                       if (pb->requires_grad) {
                         double* g = pb->grad_buffer();
                         for (std::size_t i = 0; i < r; ++i)
                           for (std::size_t j = 0; j < c; ++j) g[j] += gy[i * c + j];
                       }
                       if (px->requires_grad) {
                         double* g = px->grad_buffer();
                         const double n = static_cast<double>(c);
                         for (std::size_t i = 0; i < r; ++i) {
                           double s1 = 0.0, s2 = 0.0;
                           for (std::size_t j = 0; j < c; ++j) {
                             const double dxh = gy[i * c + j] * pg->data[j];
                             s1 += dxh;
                             s2 += dxh * (*normed)[i * c + j];
                           }
                           const double inv = (*inv_std)[i];
                           for (std::size_t j = 0; j < c; ++j) {
                             const double dxh = gy[i * c + j] * pg->data[j];
                             g[i * c + j] += inv / n * (n * dxh - s1 - (*normed)[i * c + j] * s2);
                           }
                         }
                       }
                     });
}

}  // namespace stairs
