#include "stairs/stairs_net.hpp"

#include <cmath>
#include <stdexcept>

#include "stairs/token_dropout.hpp"

namespace stairs {

// ---------------------------------------------------------------------------
// Config

void StairsConfig::validate() const {
  auto fail = [](const std::string& why) { throw std::invalid_argument("StairsConfig: " + why); };
  if (dim == 0 || attn_dim == 0 || ffn_dim == 0) fail("dimensions must be positive");
  if (heads == 0 || attn_dim % heads != 0) fail("attn_dim must be divisible by heads");
  if (layers < 1) fail("at least one layer is required");
  if (recursion.size() != layers) fail("recursion needs one count per layer");
  for (auto n : recursion)
    if (n < 1) fail("recursion counts must be >= 1");
  if (high_interval < 1) fail("high_interval must be >= 1");
  if (!(attn_temperature > 0.0)) fail("attn_temperature must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (layout.own_dim == 0 || layout.other_dim == 0 || layout.entity_dim == 0) fail("feature widths must be positive");
}

std::vector<std::size_t> StairsConfig::effective_recursion() const {
  if (spatial_recursion) return recursion;
  return std::vector<std::size_t>(layers, 1);
}

bool StairsConfig::high_update_due(std::size_t t) const {
  if (skip_initial_high_update && t == 0) return false;
  return t % high_interval == 0;
}

StairsConfig with_ablation(StairsConfig cfg, std::string_view variant) {
  if (variant == "full") return cfg;
  if (variant == "wo_spatial") {
    cfg.spatial_recursion = false;
  } else if (variant == "wo_temporal") {
    cfg.high_history = false;
    cfg.dual_ffn = false;
  } else if (variant == "wo_dropout") {
    cfg.token_dropout = false;
  } else if (variant == "wo_st") {
    cfg.spatial_recursion = false;
    cfg.high_history = false;
    cfg.dual_ffn = false;
  } else if (variant == "wo_std") {
    cfg.spatial_recursion = false;
    cfg.high_history = false;
    cfg.dual_ffn = false;
    cfg.token_dropout = false;
  } else if (variant == "wo_gru") {
    cfg.high_history = false;
  } else if (variant == "wo_tfl") {
    cfg.dual_ffn = false;
  } else {
    throw std::invalid_argument("unknown ablation variant: " + std::string(variant));
  }
  return cfg;
}

std::vector<std::string> ablation_names() {
  return {"full", "wo_spatial", "wo_temporal", "wo_dropout", "wo_st", "wo_std", "wo_gru", "wo_tfl"};
}

// ---------------------------------------------------------------------------
// Model

namespace {

FfnParams make_ffn(const StairsConfig& cfg, Rng& rng, ParamSet& reg, const std::string& prefix) {
  FfnParams f;
  f.norm_gain = reg.add(prefix + "norm_gain", Tensor::full({cfg.dim}, 1.0, true));
  f.norm_bias = reg.add(prefix + "norm_bias", Tensor::zeros({cfg.dim}, true));
  f.w_up = reg.add(prefix + "w_up", uniform_param({cfg.dim, cfg.ffn_dim}, cfg.dim, rng));
  f.b_up = reg.add(prefix + "b_up", Tensor::zeros({cfg.ffn_dim}, true));
  f.w_down = reg.add(prefix + "w_down", uniform_param({cfg.ffn_dim, cfg.dim}, cfg.ffn_dim, rng));
  f.b_down = reg.add(prefix + "b_down", Tensor::zeros({cfg.dim}, true));
  return f;
}

}  // namespace

StairsModel StairsModel::create(const StairsConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  StairsModel m;
  m.cfg_ = cfg;
  Rng rng(seed);
  ParamSet& reg = m.params_;
  StairsParams& net = m.net_;
  net.embed = EmbeddingParams::create(cfg.layout, cfg.dim, rng, reg, "embed.");
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    LayerParams layer;
    layer.norm_gain = reg.add(p + "attn.norm_gain", Tensor::full({cfg.dim}, 1.0, true));
    layer.norm_bias = reg.add(p + "attn.norm_bias", Tensor::zeros({cfg.dim}, true));
    layer.w_q = reg.add(p + "attn.w_q", uniform_param({cfg.dim, cfg.attn_dim}, cfg.dim, rng));
    layer.w_k = reg.add(p + "attn.w_k", uniform_param({cfg.dim, cfg.attn_dim}, cfg.dim, rng));
    layer.w_v = reg.add(p + "attn.w_v", uniform_param({cfg.dim, cfg.attn_dim}, cfg.dim, rng));
    layer.w_proj = reg.add(p + "attn.w_proj", uniform_param({cfg.attn_dim, cfg.dim}, cfg.attn_dim, rng));
    layer.ffn_obs = make_ffn(cfg, rng, reg, p + "ffn_obs.");
    if (cfg.dual_ffn) layer.ffn_his = make_ffn(cfg, rng, reg, p + "ffn_his.");
    net.layers.push_back(std::move(layer));
  }
  net.out_gain = reg.add("spatial.norm_gain", Tensor::full({cfg.dim}, 1.0, true));
  net.out_bias = reg.add("spatial.norm_bias", Tensor::zeros({cfg.dim}, true));
  if (cfg.high_history) net.gru = GruParams::create(cfg.dim, rng, reg, "gru.");
  net.head.norm_gain = reg.add("head.norm_gain", Tensor::full({cfg.dim}, 1.0, true));
  net.head.norm_bias = reg.add("head.norm_bias", Tensor::zeros({cfg.dim}, true));
  net.head.w_fixed = reg.add("head.w_fixed", uniform_param({cfg.dim, kFixedActions}, cfg.dim, rng));
  net.head.b_fixed = reg.add("head.b_fixed", Tensor::zeros({kFixedActions}, true));
  net.head.w_attack = reg.add("head.w_attack", uniform_param({cfg.dim, 1}, cfg.dim, rng));
  net.head.b_attack = reg.add("head.b_attack", Tensor::zeros({1}, true));
  return m;
}

StairsModel StairsModel::clone() const {
  StairsModel copy = create(cfg_, 0);
  copy.params_.copy_from(params_);
  return copy;
}

std::optional<std::size_t> SequenceLayout::position(TokenKind kind, std::uint32_t index) const {
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i].kind == kind && labels[i].index == index) return i;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Blocks

namespace {

Tensor ffn_forward(const Tensor& x, const FfnParams& p, ForwardObserver* observer, std::size_t layer,
                   std::size_t rstep, bool history_ffn, std::span<const std::size_t> rows) {
  const Tensor hidden = relu(linear(layer_norm(x, p.norm_gain, p.norm_bias), p.w_up, p.b_up));
  if (observer) observer->ffn_hidden(layer, rstep, history_ffn, rows, hidden);
  return linear(hidden, p.w_down, p.b_down);
}

}  // namespace

Tensor block_forward(const Tensor& x, const SequenceLayout& layout, const LayerParams& layer, const StairsConfig& cfg,
                     ForwardObserver* observer, std::size_t layer_index, std::size_t rstep) {
  const std::size_t S = layout.seqs, T = layout.length(), d = cfg.dim;
  if (x.rows() != S * T || x.cols() != d)
    throw ShapeError("block_forward: input " + shape_string(x.shape()) + " for " + std::to_string(S) + " x " +
                     std::to_string(T) + " tokens of width " + std::to_string(d));
  if (!layout.key_mask.empty() && layout.key_mask.size() != S * T)
    throw ShapeError("block_forward: key mask length " + std::to_string(layout.key_mask.size()));

  // Attention sub-block.
  const Tensor normed = layer_norm(x, layer.norm_gain, layer.norm_bias);
  const Tensor q = matmul(normed, layer.w_q);
  const Tensor k = matmul(normed, layer.w_k);
  const Tensor v = matmul(normed, layer.w_v);
  const std::size_t dk = cfg.attn_dim / cfg.heads;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Tensor> head_out;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    auto split = [&](const Tensor& m) {
      const Tensor cols = cfg.heads == 1 ? m : slice_cols(m, h * dk, (h + 1) * dk);
      return reshape(cols, {S, T, dk});
    };
    const Tensor scores = scale(bmm_nt(split(q), split(k)), inv_sqrt_dk);
    const Tensor weights = layout.key_mask.empty() ? softmax(scores, cfg.attn_temperature)
                                                   : masked_softmax(scores, layout.key_mask, cfg.attn_temperature);
    if (observer) observer->attention(layer_index, rstep, h, scores, weights);
    head_out.push_back(reshape(bmm(weights, split(v)), {S * T, dk}));
  }
  const Tensor attn = cfg.heads == 1 ? head_out.front() : concat_cols(head_out);
  const Tensor mid = add(x, matmul(attn, layer.w_proj));

  // FFN sub-block: observation rows and history rows are routed separately,
  // through disjoint FFNs when dual_ffn is on and the shared FFN otherwise.
  std::vector<std::size_t> obs_rows, his_rows;
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t i = 0; i < T; ++i) (layout.labels[i].is_history() ? his_rows : obs_rows).push_back(s * T + i);
  const FfnParams& his_ffn = cfg.dual_ffn ? layer.ffn_his : layer.ffn_obs;
  std::vector<Tensor> outs;
  outs.push_back(ffn_forward(gather_rows(mid, obs_rows), layer.ffn_obs, observer, layer_index, rstep, false, obs_rows));
  if (!his_rows.empty())
    outs.push_back(ffn_forward(gather_rows(mid, his_rows), his_ffn, observer, layer_index, rstep, cfg.dual_ffn, his_rows));
  std::vector<std::size_t> inverse(S * T);
  for (std::size_t i = 0; i < obs_rows.size(); ++i) inverse[obs_rows[i]] = i;
  for (std::size_t i = 0; i < his_rows.size(); ++i) inverse[his_rows[i]] = obs_rows.size() + i;
  const Tensor ffn_out = gather_rows(outs.size() == 1 ? outs.front() : concat_rows(outs), inverse);
  return add(mid, ffn_out);
}

std::pair<Tensor, Tensor> block_forward(const Tensor& x, const std::vector<TokenLabel>& labels,
                                        const LayerParams& layer, const StairsConfig& cfg) {
  struct Capture : ForwardObserver {
    Tensor weights;
    void attention(std::size_t, std::size_t, std::size_t head, const Tensor&, const Tensor& w) override {
      if (head == 0) weights = w;
    }
  } capture;
  SequenceLayout layout{1, labels, {}};
  Tensor out = block_forward(x, layout, layer, cfg, &capture);
  const std::size_t T = labels.size();
  return {out, reshape(capture.weights, {T, T})};
}

// ---------------------------------------------------------------------------
// Spatial module

namespace {

class AttentionCollector : public ForwardObserver {
 public:
  AttentionCollector(std::vector<AttentionMatrix>& out, ForwardObserver* next) : out_(out), next_(next) {}
  void attention(std::size_t layer, std::size_t rstep, std::size_t head, const Tensor& scores,
                 const Tensor& weights) override {
    out_.push_back({layer, rstep, head, scores, weights});
    if (next_) next_->attention(layer, rstep, head, scores, weights);
  }
  void ffn_hidden(std::size_t layer, std::size_t rstep, bool history_ffn, std::span<const std::size_t> rows,
                  const Tensor& hidden) override {
    if (next_) next_->ffn_hidden(layer, rstep, history_ffn, rows, hidden);
  }

 private:
  std::vector<AttentionMatrix>& out_;
  ForwardObserver* next_;
};

}  // namespace

SpatialOutput spatial_forward(const Tensor& tokens, const SequenceLayout& layout, const StairsParams& net,
                              const StairsConfig& cfg, ForwardObserver* observer) {
  if (net.layers.size() != cfg.layers) throw std::invalid_argument("spatial_forward: layer count mismatch");
  SpatialOutput out;
  AttentionCollector collector(out.attention, observer);
  const auto steps = cfg.effective_recursion();
  Tensor prev = tokens;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    Tensor z;
    for (std::size_t j = 0; j < steps[l]; ++j) {
      // z^l_0 is zero, so the first step consumes z^{l-1} unchanged.
      const Tensor input = j == 0 ? prev : add(z, prev);
      z = block_forward(input, layout, net.layers[l], cfg, &collector, l, j);
    }
    prev = z;
  }
  out.z_sp = layer_norm(prev, net.out_gain, net.out_bias);
  return out;
}

SpatialOutput spatial_forward(const TokenSequence& seq, const StairsParams& net, const StairsConfig& cfg) {
  SequenceLayout layout{1, seq.labels, {}};
  return spatial_forward(seq.tokens, layout, net, cfg);
}

// ---------------------------------------------------------------------------
// Temporal module

HistoryState HistoryState::zeros(std::size_t seqs, std::size_t dim) {
  return {Tensor::zeros({seqs, dim}), Tensor::zeros({seqs, dim}), 0};
}

HistoryState temporal_update(const HistoryState& state, const Tensor& z_sp, const SequenceLayout& layout,
                             const GruParams& gru, const StairsConfig& cfg) {
  const auto lh = layout.position(TokenKind::LowHistory);
  if (!lh) throw std::invalid_argument("temporal_update: sequence has no LH token");
  const std::size_t S = layout.seqs, T = layout.length();
  std::vector<std::size_t> rows(S);
  for (std::size_t s = 0; s < S; ++s) rows[s] = s * T + *lh;
  HistoryState next;
  next.low = gather_rows(z_sp, rows);
  next.high = (cfg.high_history && cfg.high_update_due(state.t)) ? gru_cell(state.high, next.low, gru) : state.high;
  next.t = state.t + 1;
  return next;
}

// ---------------------------------------------------------------------------
// Q head

Tensor q_head(const Tensor& z_sp, const SequenceLayout& layout, const QHeadParams& head, std::size_t n_enemies,
              std::span<const std::uint8_t> avail_mask) {
  const std::size_t S = layout.seqs, T = layout.length(), A = action_count(n_enemies);
  if (avail_mask.size() != S * A)
    throw std::invalid_argument("q_head: availability mask has " + std::to_string(avail_mask.size()) +
                                " entries, expected " + std::to_string(S * A));
  const auto own = layout.position(TokenKind::Own);
  if (!own) throw std::invalid_argument("q_head: sequence has no Own token");

  std::vector<std::size_t> own_rows(S);
  for (std::size_t s = 0; s < S; ++s) own_rows[s] = s * T + *own;
  const Tensor fixed =
      linear(layer_norm(gather_rows(z_sp, own_rows), head.norm_gain, head.norm_bias), head.w_fixed, head.b_fixed);

  std::vector<std::optional<std::size_t>> enemy_pos(n_enemies);
  std::vector<std::size_t> present;
  for (std::size_t j = 0; j < n_enemies; ++j) {
    enemy_pos[j] = layout.position(TokenKind::Enemy, static_cast<std::uint32_t>(j + 1));
    if (enemy_pos[j]) present.push_back(j);
  }

  std::vector<Tensor> columns{fixed};
  if (!present.empty()) {
    std::vector<std::size_t> rows;
    rows.reserve(S * present.size());
    for (std::size_t s = 0; s < S; ++s)
      for (auto j : present) rows.push_back(s * T + *enemy_pos[j]);
    const Tensor attack = reshape(
        linear(layer_norm(gather_rows(z_sp, rows), head.norm_gain, head.norm_bias), head.w_attack, head.b_attack),
        {S, present.size()});
    if (present.size() == n_enemies) {
      columns.push_back(attack);
    } else {
      std::size_t next = 0;
      for (std::size_t j = 0; j < n_enemies; ++j) {
        if (enemy_pos[j]) {
          columns.push_back(slice_cols(attack, next, next + 1));
          ++next;
        } else {
          columns.push_back(Tensor::zeros({S, 1}));
        }
      }
    }
  } else if (n_enemies > 0) {
    columns.push_back(Tensor::zeros({S, n_enemies}));
  }
  const Tensor q = columns.size() == 1 ? columns.front() : concat_cols(columns);

  std::vector<double> keep(S * A, 1.0), offset(S * A, 0.0);
  bool any_masked = false;
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t a = 0; a < A; ++a) {
      bool ok = avail_mask[s * A + a] != 0;
      if (a >= kFixedActions) {
        const auto& pos = enemy_pos[a - kFixedActions];
        ok = ok && pos && layout.present(s, *pos);
      }
      if (!ok) {
        keep[s * A + a] = 0.0;
        offset[s * A + a] = kMaskedQ;
        any_masked = true;
      }
    }
  }
  if (!any_masked) return q;
  return add(mul(q, Tensor::from({S, A}, std::move(keep))), Tensor::from({S, A}, std::move(offset)));
}

// ---------------------------------------------------------------------------
// Agent step

AgentStepOutput agent_step(const StairsModel& model, const ObservationBatch& obs, const HistoryState& state,
                           std::span<const std::uint8_t> avail_mask, std::span<const std::uint8_t> keep,
                           ForwardObserver* observer) {
  const StairsConfig& cfg = model.config();
  const StairsParams& net = model.net();
  SequenceLayout layout{obs.seqs, sequence_labels(obs.n_allies, obs.n_enemies, cfg.high_history), {}};
  if (!keep.empty()) {
    if (keep.size() != obs.seqs * layout.length())
      throw std::invalid_argument("agent_step: dropout mask length " + std::to_string(keep.size()));
    layout.key_mask.assign(keep.begin(), keep.end());
  }
  const Tensor tokens = assemble_batch(obs, net.embed, state.low, cfg.high_history ? state.high : Tensor());
  AgentStepOutput out;
  out.spatial = spatial_forward(tokens, layout, net, cfg, observer);
  out.q = q_head(out.spatial.z_sp, layout, net.head, obs.n_enemies, avail_mask);
  out.next = temporal_update(state, out.spatial.z_sp, layout, net.gru, cfg);
  return out;
}

AgentStepOutput agent_forward(const StairsModel& model, const EntityObservation& obs, const HistoryState& state,
                              std::span<const std::uint8_t> avail_mask, const std::vector<std::uint8_t>* dropout_keep) {
  const StairsConfig& cfg = model.config();
  const StairsParams& net = model.net();
  const std::size_t Ka = obs.other_agents.count(), Ke = obs.env_entities.count();
  const Tensor entities = embed_entities(obs, net.embed);
  TokenSequence seq = assemble_sequence(entities, Ka, Ke, state.low, cfg.high_history ? state.high : Tensor());
  if (dropout_keep) {
    DropoutMask mask;
    mask.keep = *dropout_keep;
    seq = apply_mask(seq, mask);
  }
  SequenceLayout layout{1, seq.labels, {}};
  AgentStepOutput out;
  out.spatial = spatial_forward(seq.tokens, layout, net, cfg);
  out.q = q_head(out.spatial.z_sp, layout, net.head, Ke, avail_mask);
  out.next = temporal_update(state, out.spatial.z_sp, layout, net.gru, cfg);
  return out;
}

std::size_t greedy_action(std::span<const double> q, std::span<const std::uint8_t> avail) {
  if (q.size() != avail.size()) throw std::invalid_argument("greedy_action: mask length mismatch");
  std::optional<std::size_t> best;
  for (std::size_t a = 0; a < q.size(); ++a)
    if (avail[a] && (!best || q[a] > q[*best])) best = a;
  if (!best) throw std::invalid_argument("greedy_action: no available action");
  return *best;
}

}  // namespace stairs
