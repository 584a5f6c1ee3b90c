#include "stairs/entity.hpp"

#include <stdexcept>

namespace stairs {

std::string TokenLabel::str() const {
  switch (kind) {
    case TokenKind::Own: return "Own";
    case TokenKind::Ally: return "A" + std::to_string(index);
    case TokenKind::Enemy: return "E" + std::to_string(index);
    case TokenKind::LowHistory: return "LH";
    case TokenKind::HighHistory: return "HH";
  }
  return "?";
}

std::vector<TokenLabel> sequence_labels(std::size_t n_allies, std::size_t n_enemies, bool with_high_history) {
  std::vector<TokenLabel> labels;
  labels.push_back({TokenKind::Own, 0});
  for (std::size_t j = 0; j < n_allies; ++j) labels.push_back({TokenKind::Ally, static_cast<std::uint32_t>(j + 1)});
  for (std::size_t j = 0; j < n_enemies; ++j) labels.push_back({TokenKind::Enemy, static_cast<std::uint32_t>(j + 1)});
  labels.push_back({TokenKind::LowHistory, 0});
  if (with_high_history) labels.push_back({TokenKind::HighHistory, 0});
  return labels;
}

void FeatureRows::push(std::span<const double> v) {
  if (v.size() != width)
    throw std::invalid_argument("feature row of width " + std::to_string(v.size()) + ", expected " +
                                std::to_string(width));
  values.insert(values.end(), v.begin(), v.end());
}

EmbeddingParams EmbeddingParams::create(const FeatureLayout& layout, std::size_t dim, Rng& rng, ParamSet& registry,
                                        const std::string& prefix) {
  EmbeddingParams p;
  p.w_own = registry.add(prefix + "w_own", uniform_param({layout.own_dim, dim}, layout.own_dim, rng));
  p.b_own = registry.add(prefix + "b_own", Tensor::zeros({dim}, true));
  p.w_oa = registry.add(prefix + "w_oa", uniform_param({layout.other_dim, dim}, layout.other_dim, rng));
  p.b_oa = registry.add(prefix + "b_oa", Tensor::zeros({dim}, true));
  p.w_en = registry.add(prefix + "w_en", uniform_param({layout.entity_dim, dim}, layout.entity_dim, rng));
  p.b_en = registry.add(prefix + "b_en", Tensor::zeros({dim}, true));
  return p;
}

FeatureLayout EmbeddingParams::layout() const { return {w_own.size(0), w_oa.size(0), w_en.size(0)}; }

namespace {

void check_group(const char* group, std::size_t got, std::size_t want) {
  if (got != want)
    throw std::invalid_argument(std::string("embed_entities: ") + group + " features have length " +
                                std::to_string(got) + ", expected " + std::to_string(want));
}

}  // namespace

Tensor embed_entities(const EntityObservation& obs, const EmbeddingParams& params) {
  const FeatureLayout layout = params.layout();
  check_group("own", obs.own.size(), layout.own_dim);
  std::vector<Tensor> parts;
  parts.push_back(linear(Tensor::from({1, layout.own_dim}, obs.own), params.w_own, params.b_own));
  if (obs.other_agents.count() > 0) {
    check_group("other-agent", obs.other_agents.width, layout.other_dim);
    parts.push_back(linear(Tensor::from({obs.other_agents.count(), layout.other_dim}, obs.other_agents.values),
                           params.w_oa, params.b_oa));
  }
  if (obs.env_entities.count() > 0) {
    check_group("environment-entity", obs.env_entities.width, layout.entity_dim);
    parts.push_back(linear(Tensor::from({obs.env_entities.count(), layout.entity_dim}, obs.env_entities.values),
                           params.w_en, params.b_en));
  }
  return concat_rows(parts);
}

TokenSequence assemble_sequence(const Tensor& entity_tokens, std::size_t n_allies, std::size_t n_enemies,
                                const Tensor& h_low, const Tensor& h_high) {
  const std::size_t d = entity_tokens.cols();
  if (entity_tokens.rows() != 1 + n_allies + n_enemies)
    throw ShapeError("assemble_sequence: " + std::to_string(entity_tokens.rows()) + " entity rows for K_a=" +
                     std::to_string(n_allies) + ", K_e=" + std::to_string(n_enemies));
  if (h_low.numel() != d) throw ShapeError("assemble_sequence: h_low width " + shape_string(h_low.shape()));
  std::vector<Tensor> parts{entity_tokens, reshape(h_low, {1, d})};
  if (h_high.defined()) {
    if (h_high.numel() != d) throw ShapeError("assemble_sequence: h_high width " + shape_string(h_high.shape()));
    parts.push_back(reshape(h_high, {1, d}));
  }
  return {concat_rows(parts), sequence_labels(n_allies, n_enemies, h_high.defined())};
}

ObservationBatch::ObservationBatch(std::size_t seqs_, std::size_t n_allies_, std::size_t n_enemies_,
                                   FeatureLayout layout_)
    : seqs(seqs_),
      n_allies(n_allies_),
      n_enemies(n_enemies_),
      layout(layout_),
      own(seqs_ * layout_.own_dim, 0.0),
      allies(seqs_ * n_allies_ * layout_.other_dim, 0.0),
      enemies(seqs_ * n_enemies_ * layout_.entity_dim, 0.0) {}

void ObservationBatch::set(std::size_t s, const EntityObservation& obs) {
  if (s >= seqs) throw std::out_of_range("ObservationBatch::set: slot out of range");
  check_group("own", obs.own.size(), layout.own_dim);
  if (obs.other_agents.count() != n_allies || obs.env_entities.count() != n_enemies)
    throw std::invalid_argument("ObservationBatch::set: entity counts do not match the batch layout");
  if (n_allies) check_group("other-agent", obs.other_agents.width, layout.other_dim);
  if (n_enemies) check_group("environment-entity", obs.env_entities.width, layout.entity_dim);
  std::copy(obs.own.begin(), obs.own.end(), own.begin() + s * layout.own_dim);
  std::copy(obs.other_agents.values.begin(), obs.other_agents.values.end(),
            allies.begin() + s * n_allies * layout.other_dim);
  std::copy(obs.env_entities.values.begin(), obs.env_entities.values.end(),
            enemies.begin() + s * n_enemies * layout.entity_dim);
}

Tensor assemble_batch(const ObservationBatch& batch, const EmbeddingParams& params, const Tensor& h_low,
                      const Tensor& h_high) {
  const std::size_t S = batch.seqs, Ka = batch.n_allies, Ke = batch.n_enemies;
  const std::size_t d = params.dim();
  if (params.layout() != batch.layout) throw ShapeError("assemble_batch: feature layout does not match embedding");
  if (h_low.rows() != S || h_low.cols() != d) throw ShapeError("assemble_batch: h_low " + shape_string(h_low.shape()));
  const bool with_high = h_high.defined();
  if (with_high && (h_high.rows() != S || h_high.cols() != d))
    throw ShapeError("assemble_batch: h_high " + shape_string(h_high.shape()));

  // Stack every group, then one gather interleaves them per sequence.
  std::vector<Tensor> parts;
  parts.push_back(linear(Tensor::from({S, batch.layout.own_dim}, batch.own), params.w_own, params.b_own));
  if (Ka) parts.push_back(linear(Tensor::from({S * Ka, batch.layout.other_dim}, batch.allies), params.w_oa, params.b_oa));
  if (Ke) parts.push_back(linear(Tensor::from({S * Ke, batch.layout.entity_dim}, batch.enemies), params.w_en, params.b_en));
  parts.push_back(h_low);
  if (with_high) parts.push_back(h_high);
  const Tensor stacked = concat_rows(parts);

  const std::size_t own_off = 0, ally_off = S, enemy_off = S + S * Ka, low_off = S + S * (Ka + Ke);
  const std::size_t high_off = low_off + S;
  const std::size_t len = Ka + Ke + (with_high ? 3 : 2);
  std::vector<std::size_t> index;
  index.reserve(S * len);
  for (std::size_t s = 0; s < S; ++s) {
    index.push_back(own_off + s);
    for (std::size_t j = 0; j < Ka; ++j) index.push_back(ally_off + s * Ka + j);
    for (std::size_t j = 0; j < Ke; ++j) index.push_back(enemy_off + s * Ke + j);
    index.push_back(low_off + s);
    if (with_high) index.push_back(high_off + s);
  }
  return gather_rows(stacked, index);
}

}  // namespace stairs
