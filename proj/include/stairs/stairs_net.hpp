#pragma once

// The per-agent network: recursive spatial transformer over entity and
// history tokens, dual position-wise FFNs, the two-timescale history state
// and the per-agent Q head.

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stairs/entity.hpp"
#include "stairs/nn.hpp"

namespace stairs {

// Discrete actions: no-op, stop, four moves, then one attack per enemy.
inline constexpr std::size_t kFixedActions = 6;
enum FixedAction : std::size_t { kNoop = 0, kStop = 1, kNorth = 2, kSouth = 3, kEast = 4, kWest = 5 };
inline constexpr std::size_t attack_action(std::size_t enemy) { return kFixedActions + enemy; }
inline constexpr std::size_t action_count(std::size_t n_enemies) { return kFixedActions + n_enemies; }

struct StairsConfig {
  std::size_t dim = 64;
  std::size_t attn_dim = 64;
  std::size_t heads = 1;
  std::size_t ffn_dim = 256;
  std::size_t layers = 2;
  std::vector<std::size_t> recursion{2, 1};
  std::size_t high_interval = 3;  // T_H
  double attn_temperature = 1.0;
  double dropout = 0.1;           // p_drop

  bool spatial_recursion = true;
  bool high_history = true;
  bool dual_ffn = true;
  bool token_dropout = true;
  // When set, the literal "t mod T_H == 0" update at t = 0 is skipped.
  bool skip_initial_high_update = false;

  FeatureLayout layout{4, 4, 4};

  void validate() const;
  // Recursion counts in effect: all ones when spatial recursion is ablated.
  std::vector<std::size_t> effective_recursion() const;
  double effective_dropout() const { return token_dropout ? dropout : 0.0; }
  bool high_update_due(std::size_t t) const;
};

// Named variants: full, wo_spatial, wo_temporal, wo_dropout, wo_st, wo_std,
// wo_gru, wo_tfl. Throws std::invalid_argument for an unknown name.
StairsConfig with_ablation(StairsConfig cfg, std::string_view variant);
std::vector<std::string> ablation_names();

struct FfnParams {
  Tensor norm_gain, norm_bias;
  Tensor w_up, b_up;      // [d, d_ff], [d_ff]
  Tensor w_down, b_down;  // [d_ff, d], [d]
};

struct LayerParams {
  Tensor norm_gain, norm_bias;
  Tensor w_q, w_k, w_v;  // [d, d_attn]
  Tensor w_proj;         // [d_attn, d]
  FfnParams ffn_obs;
  FfnParams ffn_his;     // undefined tensors when dual_ffn is off
};

struct QHeadParams {
  Tensor norm_gain, norm_bias;
  Tensor w_fixed, b_fixed;    // [d, 6], [6]
  Tensor w_attack, b_attack;  // [d, 1], [1]
};

struct StairsParams {
  EmbeddingParams embed;
  std::vector<LayerParams> layers;
  Tensor out_gain, out_bias;  // final norm of the pre-norm stack
  GruParams gru;  // undefined tensors when high_history is off
  QHeadParams head;
};

// Owns the parameter registry and typed views onto it.
class StairsModel {
 public:
  static StairsModel create(const StairsConfig& cfg, std::uint64_t seed);

  StairsModel(StairsModel&&) = default;
  StairsModel& operator=(StairsModel&&) = default;
  StairsModel(const StairsModel&) = delete;
  StairsModel& operator=(const StairsModel&) = delete;

  // Fresh parameters with identical values.
  StairsModel clone() const;

  const StairsConfig& config() const { return cfg_; }
  const StairsParams& net() const { return net_; }
  StairsParams& net() { return net_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  StairsModel() = default;
  StairsConfig cfg_;
  ParamSet params_;
  StairsParams net_;
};

// Token layout shared by every sequence of a batch, plus the optional key
// mask produced by token dropout (1 = token present).
struct SequenceLayout {
  std::size_t seqs = 1;
  std::vector<TokenLabel> labels;
  std::vector<std::uint8_t> key_mask;  // empty, or seqs * length entries

  std::size_t length() const { return labels.size(); }
  std::optional<std::size_t> position(TokenKind kind, std::uint32_t index = 0) const;
  bool present(std::size_t seq, std::size_t pos) const {
    return key_mask.empty() || key_mask[seq * length() + pos] != 0;
  }
};

// Hooks into the forward pass for logging and analysis.
class ForwardObserver {
 public:
  virtual ~ForwardObserver() = default;
  // scores: [S,T,T] = Q K^T / sqrt(d_k) before temperature; weights: softmax.
  virtual void attention(std::size_t /*layer*/, std::size_t /*rstep*/, std::size_t /*head*/,
                         const Tensor& /*scores*/, const Tensor& /*weights*/) {}
  // hidden: post-activation FFN units for the routed rows; rows[i] is the
  // flat (seq * T + pos) index of hidden row i.
  virtual void ffn_hidden(std::size_t /*layer*/, std::size_t /*rstep*/, bool /*history_ffn*/,
                          std::span<const std::size_t> /*rows*/, const Tensor& /*hidden*/) {}
};

// One transformer block f(x; theta_l) on x [S*T, d]: pre-norm attention with a
// residual, then per-token-type FFN with a residual.
Tensor block_forward(const Tensor& x, const SequenceLayout& layout, const LayerParams& layer, const StairsConfig& cfg,
                     ForwardObserver* observer = nullptr, std::size_t layer_index = 0, std::size_t rstep = 0);

// Single-sequence convenience returning the attention matrix too.
std::pair<Tensor, Tensor> block_forward(const Tensor& x, const std::vector<TokenLabel>& labels,
                                        const LayerParams& layer, const StairsConfig& cfg);

struct AttentionMatrix {
  std::size_t layer = 0;
  std::size_t rstep = 0;
  std::size_t head = 0;
  Tensor scores;   // [S,T,T]
  Tensor weights;  // [S,T,T], row-stochastic
};

struct SpatialOutput {
  Tensor z_sp;  // [S*T, d]
  std::vector<AttentionMatrix> attention;
};

// z^0 = tokens; for each layer l, z^l_{j+1} = f(z^l_j + z^{l-1}; theta_l) with
// z^l_0 = 0, run for the layer's recursion count; z_sp = LayerNorm(z^M).
// Without the final norm the LH row read back into the next step roughly
// doubles every step, since each extra recursion step re-adds the residual.
SpatialOutput spatial_forward(const Tensor& tokens, const SequenceLayout& layout, const StairsParams& net,
                              const StairsConfig& cfg, ForwardObserver* observer = nullptr);
SpatialOutput spatial_forward(const TokenSequence& seq, const StairsParams& net, const StairsConfig& cfg);

// Recurrent history for S agents. Both rows start at zero.
struct HistoryState {
  Tensor low;   // [S, d]
  Tensor high;  // [S, d]
  std::size_t t = 0;

  static HistoryState zeros(std::size_t seqs, std::size_t dim);
};

// h_low <- z_sp at the LH row; h_high <- GRU(h_high, h_low) when the interval
// condition holds for state.t, else unchanged; t advances by one.
HistoryState temporal_update(const HistoryState& state, const Tensor& z_sp, const SequenceLayout& layout,
                             const GruParams& gru, const StairsConfig& cfg);

// Q [S, 6 + K_e]. Fixed actions read the Own row, attack-j reads enemy row j.
// Unavailable actions (mask 0) and attacks on absent enemy tokens are -1e9.
Tensor q_head(const Tensor& z_sp, const SequenceLayout& layout, const QHeadParams& head, std::size_t n_enemies,
              std::span<const std::uint8_t> avail_mask);

inline constexpr double kMaskedQ = -1e9;

struct AgentStepOutput {
  Tensor q;
  HistoryState next;
  SpatialOutput spatial;
};

// Batched step: embed -> assemble -> spatial -> Q head + temporal update.
// `keep` is an optional token-dropout key mask of S * T entries.
AgentStepOutput agent_step(const StairsModel& model, const ObservationBatch& obs, const HistoryState& state,
                           std::span<const std::uint8_t> avail_mask, std::span<const std::uint8_t> keep = {},
                           ForwardObserver* observer = nullptr);

// Single-agent step. A dropout mask, if given, removes tokens from the
// sequence before the spatial module.
AgentStepOutput agent_forward(const StairsModel& model, const EntityObservation& obs, const HistoryState& state,
                              std::span<const std::uint8_t> avail_mask,
                              const std::vector<std::uint8_t>* dropout_keep = nullptr);

// Argmax over available actions; ties resolve to the lowest index.
std::size_t greedy_action(std::span<const double> q, std::span<const std::uint8_t> avail);

}  // namespace stairs
