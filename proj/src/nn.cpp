#include "stairs/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace stairs {

Tensor ParamSet::add(std::string name, Tensor value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  entries_.push_back({std::move(name), value});
  return value;
}

Tensor ParamSet::get(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e.value;
  throw std::out_of_range("unknown parameter: " + std::string(name));
}

bool ParamSet::contains(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

std::size_t ParamSet::numel() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

void ParamSet::copy_from(const ParamSet& other) {
  if (other.size() != size()) throw std::invalid_argument("copy_from: parameter count mismatch");
  for (auto& e : entries_) e.value.assign(other.get(e.name));
}

bool ParamSet::same_values(const ParamSet& other) const {
  if (other.size() != size()) return false;
  for (const auto& e : entries_) {
    if (!other.contains(e.name)) return false;
    const Tensor o = other.get(e.name);
    if (o.shape() != e.value.shape()) return false;
    for (std::size_t i = 0; i < o.numel(); ++i)
      if (o.data()[i] != e.value.data()[i]) return false;
  }
  return true;
}

Tensor uniform_param(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(values), true);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_bias(matmul(x, w), b); }

GruParams GruParams::create(std::size_t dim, Rng& rng, ParamSet& registry, const std::string& prefix) {
  GruParams p;
  auto mat = [&](const char* name) { return registry.add(prefix + name, uniform_param({dim, dim}, dim, rng)); };
  auto vec = [&](const char* name) { return registry.add(prefix + name, uniform_param({dim}, dim, rng)); };
  p.w_xz = mat("w_xz");
  p.w_hz = mat("w_hz");
  p.b_z = vec("b_z");
  p.w_xr = mat("w_xr");
  p.w_hr = mat("w_hr");
  p.b_r = vec("b_r");
  p.w_xn = mat("w_xn");
  p.w_hn = mat("w_hn");
  p.b_n = vec("b_n");
  return p;
}

Tensor gru_cell(const Tensor& h_prev, const Tensor& x, const GruParams& p) {
  if (h_prev.shape() != x.shape() || h_prev.dim() != 2)
    throw ShapeError("gru_cell: dimension mismatch " + shape_string(h_prev.shape()) + " vs " +
                     shape_string(x.shape()));
  if (p.w_hz.size(0) != h_prev.size(1))
    throw ShapeError("gru_cell: state width " + std::to_string(h_prev.size(1)) + " does not match cell width " +
                     std::to_string(p.w_hz.size(0)));
  const Tensor z = sigmoid(add_bias(add(matmul(x, p.w_xz), matmul(h_prev, p.w_hz)), p.b_z));
  const Tensor r = sigmoid(add_bias(add(matmul(x, p.w_xr), matmul(h_prev, p.w_hr)), p.b_r));
  const Tensor n = tanh(add_bias(add(matmul(x, p.w_xn), matmul(mul(r, h_prev), p.w_hn)), p.b_n));
  return add(mul(affine(z, -1.0, 1.0), h_prev), mul(z, n));
}

void adam_step(std::vector<NamedParameter>& params, AdamState& state) {
  if (!(state.learning_rate > 0.0)) throw std::invalid_argument("adam: learning rate must be positive");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.value.numel(), 0.0);
      state.v.emplace_back(p.value.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam: state does not match parameter list");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (state.m[k].size() != params[k].value.numel())
      throw std::invalid_argument("adam: moment shape mismatch for " + params[k].name);
    if (!params[k].value.has_grad()) continue;
    for (double g : params[k].value.mutable_grad())
      if (!std::isfinite(g)) throw std::runtime_error("adam: non-finite gradient in parameter " + params[k].name);
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& param = params[k].value;
    if (!param.has_grad()) continue;
    auto g = param.mutable_grad();
    auto w = param.mutable_data();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      w[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
  }
}

double clip_grad_norm(std::vector<NamedParameter>& params, double max_norm) {
  double total = 0.0;
  for (auto& p : params)
    if (p.value.has_grad())
      for (double g : p.value.mutable_grad()) total += g * g;
  const double norm = std::sqrt(total);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / (norm + 1e-12);
    for (auto& p : params)
      if (p.value.has_grad())
        for (double& g : p.value.mutable_grad()) g *= factor;
  }
  return norm;
}

}  // namespace stairs
