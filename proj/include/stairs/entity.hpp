#pragma once

// Entity decomposition of per-agent observations and the shared linear
// embeddings that turn each entity into a token.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "stairs/nn.hpp"

namespace stairs {

enum class TokenKind : std::uint8_t { Own, Ally, Enemy, LowHistory, HighHistory };

struct TokenLabel {
  TokenKind kind = TokenKind::Own;
  std::uint32_t index = 0;  // 1-based for Ally/Enemy, 0 otherwise

  bool is_history() const { return kind == TokenKind::LowHistory || kind == TokenKind::HighHistory; }
  std::string str() const;
  friend bool operator==(const TokenLabel&, const TokenLabel&) = default;
};

// [Own, A1..A_{n_allies}, E1..E_{n_enemies}, LH, (HH)]
std::vector<TokenLabel> sequence_labels(std::size_t n_allies, std::size_t n_enemies, bool with_high_history = true);

// A fixed-width list of feature vectors stored contiguously.
struct FeatureRows {
  std::size_t width = 0;
  std::vector<double> values;

  FeatureRows() = default;
  explicit FeatureRows(std::size_t w) : width(w) {}
  std::size_t count() const { return width == 0 ? 0 : values.size() / width; }
  std::span<const double> row(std::size_t i) const { return {values.data() + i * width, width}; }
  std::span<double> row(std::size_t i) { return {values.data() + i * width, width}; }
  void push(std::span<const double> v);
  friend bool operator==(const FeatureRows&, const FeatureRows&) = default;
};

struct EntityObservation {
  std::vector<double> own;
  FeatureRows other_agents;
  FeatureRows env_entities;

  friend bool operator==(const EntityObservation&, const EntityObservation&) = default;
};

struct FeatureLayout {
  std::size_t own_dim = 0;
  std::size_t other_dim = 0;
  std::size_t entity_dim = 0;

  friend bool operator==(const FeatureLayout&, const FeatureLayout&) = default;
};

struct EmbeddingParams {
  Tensor w_own, b_own;  // [own_dim, d], [d]
  Tensor w_oa, b_oa;    // [other_dim, d], [d]
  Tensor w_en, b_en;    // [entity_dim, d], [d]

  // Weights uniform in +-1/sqrt(fan_in), biases zero.
  static EmbeddingParams create(const FeatureLayout& layout, std::size_t dim, Rng& rng, ParamSet& registry,
                                const std::string& prefix);
  FeatureLayout layout() const;
  std::size_t dim() const { return b_own.numel(); }
};

// Rows: own, then the K_a other agents, then the K_e environment entities.
Tensor embed_entities(const EntityObservation& obs, const EmbeddingParams& params);

struct TokenSequence {
  Tensor tokens;  // [len, d]
  std::vector<TokenLabel> labels;

  std::size_t length() const { return labels.size(); }
};

// Appends the history rows after the entity rows. An undefined h_high leaves
// the HH token out of the sequence.
TokenSequence assemble_sequence(const Tensor& entity_tokens, std::size_t n_allies, std::size_t n_enemies,
                                const Tensor& h_low, const Tensor& h_high);

// S observations of one task laid out contiguously, for batched embedding.
struct ObservationBatch {
  std::size_t seqs = 0;
  std::size_t n_allies = 0;
  std::size_t n_enemies = 0;
  FeatureLayout layout;
  std::vector<double> own;      // [S, own_dim]
  std::vector<double> allies;   // [S, n_allies, other_dim]
  std::vector<double> enemies;  // [S, n_enemies, entity_dim]

  ObservationBatch() = default;
  ObservationBatch(std::size_t seqs, std::size_t n_allies, std::size_t n_enemies, FeatureLayout layout);
  // Copies one observation into slot s; throws on a count or width mismatch.
  void set(std::size_t s, const EntityObservation& obs);
};

// Embeds and interleaves a batch with its history tokens. Output is
// [S * len, d] with each sequence's rows in sequence_labels order.
Tensor assemble_batch(const ObservationBatch& batch, const EmbeddingParams& params, const Tensor& h_low,
                      const Tensor& h_high);

}  // namespace stairs
