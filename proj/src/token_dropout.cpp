#include "stairs/token_dropout.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

#include "stairs/stairs_net.hpp"

namespace stairs {

std::size_t DropoutMask::kept() const { return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), 1)); }

bool is_protected(const TokenLabel& label, std::optional<std::size_t> dataset_action) {
  switch (label.kind) {
    case TokenKind::Own:
    case TokenKind::LowHistory:
    case TokenKind::HighHistory:
      return true;
    case TokenKind::Enemy:
      return dataset_action && *dataset_action >= kFixedActions &&
             *dataset_action - kFixedActions + 1 == label.index;
    case TokenKind::Ally:
      return false;
  }
  return false;
}

DropoutMask sample_mask(std::span<const TokenLabel> labels, std::optional<std::size_t> dataset_action, double p_drop,
                        Rng& rng) {
  if (!(p_drop >= 0.0 && p_drop < 1.0))
    throw std::invalid_argument("sample_mask: p_drop must lie in [0, 1), got " + std::to_string(p_drop));
  DropoutMask mask;
  mask.p_drop = p_drop;
  mask.keep.resize(labels.size(), 1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (is_protected(labels[i], dataset_action)) continue;
    // One draw per droppable token keeps streams aligned across p values.
    if (rng.uniform() < p_drop) mask.keep[i] = 0;
  }
  return mask;
}

DropoutMask sample_mask(std::span<const TokenLabel> labels, std::optional<std::size_t> dataset_action, double p_drop,
                        std::uint64_t seed) {
  Rng rng(seed);
  DropoutMask mask = sample_mask(labels, dataset_action, p_drop, rng);
  mask.rng_seed = seed;
  return mask;
}

TokenSequence apply_mask(const TokenSequence& seq, const DropoutMask& mask) {
  if (mask.keep.size() != seq.length())
    throw std::invalid_argument("apply_mask: mask has " + std::to_string(mask.keep.size()) + " entries for " +
                                std::to_string(seq.length()) + " tokens");
  std::vector<std::size_t> rows;
  TokenSequence out;
  for (std::size_t i = 0; i < mask.keep.size(); ++i) {
    if (!mask.keep[i]) continue;
    rows.push_back(i);
    out.labels.push_back(seq.labels[i]);
  }
  if (rows.size() == seq.length()) return seq;
  out.tokens = gather_rows(seq.tokens, rows);
  return out;
}

std::vector<std::uint8_t> sample_batch_masks(std::span<const TokenLabel> labels,
                                             std::span<const std::size_t> dataset_actions, double p_drop,
                                             std::uint64_t seed, std::uint64_t step,
                                             std::size_t first_sequence) {
  std::vector<std::uint8_t> keep;
  keep.reserve(labels.size() * dataset_actions.size());
  for (std::size_t s = 0; s < dataset_actions.size(); ++s) {
    Rng rng(stream_seed(seed, step, first_sequence + s));
    const DropoutMask m = sample_mask(labels, dataset_actions[s], p_drop, rng);
    keep.insert(keep.end(), m.keep.begin(), m.keep.end());
  }
  return keep;
}

}  // namespace stairs
