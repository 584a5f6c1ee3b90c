#pragma once

// Parameter registry, initializers, the GRU cell and the Adam optimizer.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "stairs/rng.hpp"
#include "stairs/tensor.hpp"

namespace stairs {

struct NamedParameter {
  std::string name;
  Tensor value;
};

// Ordered set of trainable leaves addressed by dotted names. Model structs
// hold Tensor handles that alias the entries registered here.
class ParamSet {
 public:
  Tensor add(std::string name, Tensor value);
  Tensor get(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::vector<NamedParameter>& entries() { return entries_; }
  const std::vector<NamedParameter>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t numel() const;

  void zero_grad();
  // Copies values by name; both sets must hold the same names and shapes.
  void copy_from(const ParamSet& other);
  bool same_values(const ParamSet& other) const;

 private:
  std::vector<NamedParameter> entries_;
};

// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) leaf with requires_grad set.
Tensor uniform_param(Shape shape, std::size_t fan_in, Rng& rng);

// x [R,in] . w [in,out] + b [out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// ---------------------------------------------------------------------------
// GRU

struct GruParams {
  Tensor w_xz, w_hz, b_z;  // update gate
  Tensor w_xr, w_hr, b_r;  // reset gate
  Tensor w_xn, w_hn, b_n;  // candidate

  static GruParams create(std::size_t dim, Rng& rng, ParamSet& registry, const std::string& prefix);
};

// Batched standard GRU over rows of h_prev and x (both [S,d]):
//   z = sigmoid(x Wxz + h Whz + bz)
//   r = sigmoid(x Wxr + h Whr + br)
//   n = tanh(x Wxn + (r*h) Whn + bn)
//   h' = (1 - z) * h + z * n
Tensor gru_cell(const Tensor& h_prev, const Tensor& x, const GruParams& p);

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m, v;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double learning_rate = 5e-4;
};

// Bias-corrected Adam update using each parameter's accumulated gradient.
// Throws std::runtime_error naming the parameter on a non-finite gradient.
void adam_step(std::vector<NamedParameter>& params, AdamState& state);

// Scales gradients so their global L2 norm is at most max_norm; returns the
// norm before scaling. max_norm <= 0 disables clipping.
double clip_grad_norm(std::vector<NamedParameter>& params, double max_norm);

}  // namespace stairs
