#pragma once

// Attention-based monotonic mixing of per-agent utilities into Q_tot.
//
//   Q_tot = sum_h sum_i lambda_{h,i} Q^i + V(s)
//   lambda_{h,:} = softmax_i( query_h(s) . key_h(agent_i) / sqrt(d_k) )
//
// query_h and V read a mean-pooled embedding of the state's unit set, so the
// mixer accepts any number of agents and units with the same parameters.

#include <cstdint>
#include <vector>

#include "stairs/entity.hpp"
#include "stairs/nn.hpp"

namespace stairs {

struct MixerConfig {
  std::size_t heads = 4;
  std::size_t embed_dim = 64;  // pooled state embedding
  std::size_t key_dim = 64;    // per head
  std::size_t agent_dim = 64;  // width of the agent key vectors (h^L)
  std::size_t state_dim = 6;   // width of one state unit

  void validate() const;
};

struct MixerParams {
  Tensor w_state, b_state;             // [state_dim, e], [e]
  std::vector<Tensor> w_query, w_key;  // per head: [e, dk], [agent_dim, dk]
  Tensor w_v1, b_v1, w_v2, b_v2;       // V(s): e -> e -> 1
};

class QattenMixer {
 public:
  static QattenMixer create(const MixerConfig& cfg, std::uint64_t seed);

  QattenMixer(QattenMixer&&) = default;
  QattenMixer& operator=(QattenMixer&&) = default;
  QattenMixer(const QattenMixer&) = delete;
  QattenMixer& operator=(const QattenMixer&) = delete;

  QattenMixer clone() const;

  const MixerConfig& config() const { return cfg_; }
  const MixerParams& net() const { return net_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  QattenMixer() = default;
  MixerConfig cfg_;
  ParamSet params_;
  MixerParams net_;
};

// units: [B*U, state_dim] -> [B, e], mean of embedded units per instance.
Tensor pool_state(const Tensor& units, std::size_t instances, const QattenMixer& mixer);

struct MixOutput {
  Tensor q_tot;                       // [B, 1]
  std::vector<Tensor> head_weights;   // per head [B, N]
  Tensor state_value;                 // [B, 1]
};

// agent_qs: [B, N]; agent_keys: [B*N, agent_dim]; units: [B*U, state_dim].
MixOutput mix(const Tensor& agent_qs, const Tensor& agent_keys, const Tensor& units, const QattenMixer& mixer);

// Single-instance form.
struct MixerInput {
  std::vector<double> agent_qs;
  FeatureRows agent_keys;
  FeatureRows state_units;
};

double mix(const MixerInput& input, const QattenMixer& mixer);
std::vector<double> pool_state(const FeatureRows& units, const QattenMixer& mixer);

}  // namespace stairs
