#pragma once

// Training-time removal of entity tokens. Own, LH and HH are never dropped,
// nor is the enemy token targeted by the dataset action.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "stairs/entity.hpp"
#include "stairs/rng.hpp"

namespace stairs {

struct DropoutMask {
  std::vector<std::uint8_t> keep;  // one flag per token row
  double p_drop = 0.0;
  std::uint64_t rng_seed = 0;

  std::size_t kept() const;
};

// Whether the token is exempt from dropout given the dataset action.
bool is_protected(const TokenLabel& label, std::optional<std::size_t> dataset_action);

DropoutMask sample_mask(std::span<const TokenLabel> labels, std::optional<std::size_t> dataset_action, double p_drop,
                        Rng& rng);
// Same, drawing from a fresh stream seeded with `seed` (recorded in the mask).
DropoutMask sample_mask(std::span<const TokenLabel> labels, std::optional<std::size_t> dataset_action, double p_drop,
                        std::uint64_t seed);

// Kept rows in their original order, labels preserved.
TokenSequence apply_mask(const TokenSequence& seq, const DropoutMask& mask);

// Key masks for S sequences sharing `labels`; sequence s draws from the
// stream stream_seed(seed, step, first_sequence + s). Returns S * labels.size()
// flags.
std::vector<std::uint8_t> sample_batch_masks(std::span<const TokenLabel> labels,
                                             std::span<const std::size_t> dataset_actions, double p_drop,
                                             std::uint64_t seed, std::uint64_t step,
                                             std::size_t first_sequence = 0);

}  // namespace stairs
