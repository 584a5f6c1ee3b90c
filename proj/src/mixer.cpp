#include "stairs/mixer.hpp"

#include <cmath>
#include <stdexcept>

namespace stairs {

void MixerConfig::validate() const {
  if (heads == 0 || embed_dim == 0 || key_dim == 0 || agent_dim == 0 || state_dim == 0)
    throw std::invalid_argument("MixerConfig: all sizes must be positive");
}

QattenMixer QattenMixer::create(const MixerConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  QattenMixer m;
  m.cfg_ = cfg;
  Rng rng(seed);
  ParamSet& reg = m.params_;
  MixerParams& p = m.net_;
  p.w_state = reg.add("mixer.w_state", uniform_param({cfg.state_dim, cfg.embed_dim}, cfg.state_dim, rng));
  p.b_state = reg.add("mixer.b_state", Tensor::zeros({cfg.embed_dim}, true));
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const std::string prefix = "mixer.heads." + std::to_string(h) + ".";
    p.w_query.push_back(reg.add(prefix + "w_query", uniform_param({cfg.embed_dim, cfg.key_dim}, cfg.embed_dim, rng)));
    p.w_key.push_back(reg.add(prefix + "w_key", uniform_param({cfg.agent_dim, cfg.key_dim}, cfg.agent_dim, rng)));
  }
  p.w_v1 = reg.add("mixer.value.w1", uniform_param({cfg.embed_dim, cfg.embed_dim}, cfg.embed_dim, rng));
  p.b_v1 = reg.add("mixer.value.b1", Tensor::zeros({cfg.embed_dim}, true));
  p.w_v2 = reg.add("mixer.value.w2", uniform_param({cfg.embed_dim, 1}, cfg.embed_dim, rng));
  p.b_v2 = reg.add("mixer.value.b2", Tensor::zeros({1}, true));
  return m;
}

QattenMixer QattenMixer::clone() const {
  QattenMixer copy = create(cfg_, 0);
  copy.params_.copy_from(params_);
  return copy;
}

Tensor pool_state(const Tensor& units, std::size_t instances, const QattenMixer& mixer) {
  const auto& cfg = mixer.config();
  if (instances == 0 || units.rows() == 0 || units.rows() % instances != 0)
    throw std::invalid_argument("pool_state: empty state or unit count not divisible by instances");
  if (units.cols() != cfg.state_dim)
    throw ShapeError("pool_state: unit width " + std::to_string(units.cols()) + ", expected " +
                     std::to_string(cfg.state_dim));
  const std::size_t U = units.rows() / instances;
  const Tensor embedded =
      reshape(linear(units, mixer.net().w_state, mixer.net().b_state), {instances, U, cfg.embed_dim});
  const Tensor ones = Tensor::full({instances, 1, U}, 1.0 / static_cast<double>(U));
  return reshape(bmm(ones, embedded), {instances, cfg.embed_dim});
}

MixOutput mix(const Tensor& agent_qs, const Tensor& agent_keys, const Tensor& units, const QattenMixer& mixer) {
  const auto& cfg = mixer.config();
  const auto& p = mixer.net();
  if (agent_qs.dim() != 2) throw ShapeError("mix: agent_qs must be [B, N], got " + shape_string(agent_qs.shape()));
  const std::size_t B = agent_qs.size(0), N = agent_qs.size(1);
  if (N == 0) throw std::invalid_argument("mix: empty agent set");
  if (agent_keys.rows() != B * N || agent_keys.cols() != cfg.agent_dim)
    throw ShapeError("mix: agent_keys " + shape_string(agent_keys.shape()) + " for " + std::to_string(B) + " x " +
                     std::to_string(N) + " agents");

  MixOutput out;
  const Tensor pooled = pool_state(units, B, mixer);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.key_dim));
  Tensor total;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const Tensor query = reshape(matmul(pooled, p.w_query[h]), {B, 1, cfg.key_dim});
    const Tensor keys = reshape(matmul(agent_keys, p.w_key[h]), {B, N, cfg.key_dim});
    const Tensor logits = reshape(scale(bmm_nt(query, keys), inv_sqrt), {B, N});
    const Tensor lambda = softmax(logits);
    out.head_weights.push_back(lambda);
    const Tensor contrib = sum_rows(mul(lambda, agent_qs));
    total = total.defined() ? add(total, contrib) : contrib;
  }
  out.state_value = linear(relu(linear(pooled, p.w_v1, p.b_v1)), p.w_v2, p.b_v2);
  out.q_tot = add(total, out.state_value);
  return out;
}

double mix(const MixerInput& input, const QattenMixer& mixer) {
  const std::size_t N = input.agent_qs.size();
  if (N == 0) throw std::invalid_argument("mix: empty agent set");
  if (input.agent_keys.count() != N) throw std::invalid_argument("mix: one key vector per agent is required");
  if (input.state_units.count() == 0) throw std::invalid_argument("pool_state: empty state");
  const Tensor qs = Tensor::from({1, N}, input.agent_qs);
  const Tensor keys = Tensor::from({N, input.agent_keys.width}, input.agent_keys.values);
  const Tensor units = Tensor::from({input.state_units.count(), input.state_units.width}, input.state_units.values);
  return mix(qs, keys, units, mixer).q_tot.item();
}

std::vector<double> pool_state(const FeatureRows& units, const QattenMixer& mixer) {
  if (units.count() == 0) throw std::invalid_argument("pool_state: empty state");
  const Tensor t = Tensor::from({units.count(), units.width}, units.values);
  const Tensor pooled = pool_state(t, 1, mixer);
  return {pooled.data().begin(), pooled.data().end()};
}

}  // namespace stairs
