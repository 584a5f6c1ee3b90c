#include <gtest/gtest.h>

#include <cmath>

#include "stairs/entity.hpp"
#include "stairs/nn.hpp"
#include "stairs/stairs_net.hpp"
#include "stairs/token_dropout.hpp"

using namespace stairs;

namespace {

EntityObservation obs_with(std::size_t allies, std::size_t enemies, double base) {
  EntityObservation o;
  o.own = {base, base + 1, base + 2, base + 3};
  o.other_agents = FeatureRows(4);
  o.env_entities = FeatureRows(4);
  for (std::size_t i = 0; i < allies * 4; ++i) o.other_agents.values.push_back(0.1 * static_cast<double>(i) - base);
  for (std::size_t i = 0; i < enemies * 4; ++i) o.env_entities.values.push_back(base * 0.5 - 0.2 * static_cast<double>(i));
  return o;
}

std::vector<std::string> names(const std::vector<TokenLabel>& labels) {
  std::vector<std::string> out;
  for (const auto& l : labels) out.push_back(l.str());
  return out;
}

}  // namespace

TEST(Entity, SequenceLabelOrder) {
  EXPECT_EQ(names(sequence_labels(2, 3)), (std::vector<std::string>{"Own", "A1", "A2", "E1", "E2", "E3", "LH", "HH"}));
  EXPECT_EQ(names(sequence_labels(0, 1, false)), (std::vector<std::string>{"Own", "E1", "LH"}));
}

TEST(Entity, EmbeddingIsPerGroupAffine) {
  Rng rng(1);
  ParamSet reg;
  const EmbeddingParams p = EmbeddingParams::create({4, 4, 4}, 5, rng, reg, "embed.");
  const auto obs = obs_with(2, 1, 0.3);
  const Tensor t = embed_entities(obs, p);
  ASSERT_EQ(t.shape(), (Shape{4, 5}));
  // Row 1 is the first ally through w_oa.
  for (std::size_t j = 0; j < 5; ++j) {
    double s = p.b_oa.at(j);
    for (std::size_t k = 0; k < 4; ++k) s += obs.other_agents.row(0)[k] * p.w_oa.at(k * 5 + j);
    EXPECT_NEAR(t.at(5 + j), s, 1e-14);
  }
  EXPECT_EQ(p.layout(), (FeatureLayout{4, 4, 4}));
  EXPECT_EQ(p.dim(), 5u);
}

TEST(Entity, AssembleSequenceAppendsHistory) {
  const Tensor ent = Tensor::full({3, 2}, 1.0);
  const Tensor low = Tensor::full({1, 2}, 2.0), high = Tensor::full({1, 2}, 3.0);
  const auto with = assemble_sequence(ent, 1, 1, low, high);
  EXPECT_EQ(with.length(), 5u);
  EXPECT_EQ(with.tokens.at(6), 2.0);
  EXPECT_EQ(with.tokens.at(8), 3.0);
  const auto without = assemble_sequence(ent, 1, 1, low, Tensor());
  EXPECT_EQ(names(without.labels), (std::vector<std::string>{"Own", "A1", "E1", "LH"}));
  EXPECT_ANY_THROW(assemble_sequence(ent, 2, 2, low, high));
}

TEST(Entity, BatchAssemblyMatchesSingleSequences) {
  Rng rng(2);
  ParamSet reg;
  const EmbeddingParams p = EmbeddingParams::create({4, 4, 4}, 3, rng, reg, "embed.");
  ObservationBatch batch(2, 1, 2, {4, 4, 4});
  const auto a = obs_with(1, 2, 0.1), b = obs_with(1, 2, -0.7);
  batch.set(0, a);
  batch.set(1, b);
  const Tensor low = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor high = Tensor::from({2, 3}, {7, 8, 9, 10, 11, 12});
  const Tensor all = assemble_batch(batch, p, low, high);
  ASSERT_EQ(all.shape(), (Shape{12, 3}));
  const auto one = assemble_sequence(embed_entities(b, p), 1, 2, slice_rows(low, 1, 2), slice_rows(high, 1, 2));
  for (std::size_t i = 0; i < 18; ++i) EXPECT_NEAR(all.at(18 + i), one.tokens.at(i), 1e-14);
}

TEST(Entity, BatchRejectsMismatchedObservation) {
  ObservationBatch batch(1, 2, 2, {4, 4, 4});
  EXPECT_THROW(batch.set(0, obs_with(1, 2, 0.0)), std::invalid_argument);
  EXPECT_THROW(batch.set(0, obs_with(2, 3, 0.0)), std::invalid_argument);
  EXPECT_THROW(batch.set(1, obs_with(2, 2, 0.0)), std::out_of_range);
  auto wide = obs_with(2, 2, 0.0);
  wide.own.push_back(1.0);
  EXPECT_THROW(batch.set(0, wide), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Token dropout

TEST(TokenDropout, ProtectionRules) {
  const auto labels = sequence_labels(2, 3);
  const std::optional<std::size_t> attack_e2 = attack_action(1);
  for (const auto& l : labels) {
    const bool expect = l.kind == TokenKind::Own || l.is_history() || (l.kind == TokenKind::Enemy && l.index == 2);
    EXPECT_EQ(is_protected(l, attack_e2), expect) << l.str();
  }
  // Movement actions protect no enemy.
  for (const auto& l : labels)
    if (l.kind == TokenKind::Enemy) EXPECT_FALSE(is_protected(l, std::optional<std::size_t>{3}));
}

TEST(TokenDropout, RateAndProtectionOverManyMasks) {
  const auto labels = sequence_labels(4, 5);
  const std::optional<std::size_t> act = attack_action(3);
  Rng rng(99);
  std::size_t droppable = 0, dropped = 0, protected_dropped = 0;
  for (int n = 0; n < 100000; ++n) {
    const auto m = sample_mask(labels, act, 0.1, rng);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (is_protected(labels[i], act)) {
        protected_dropped += m.keep[i] ? 0 : 1;
      } else {
        ++droppable;
        dropped += m.keep[i] ? 0 : 1;
      }
    }
  }
  const double rate = static_cast<double>(dropped) / static_cast<double>(droppable);
  EXPECT_GE(rate, 0.09);
  EXPECT_LE(rate, 0.11);
  EXPECT_EQ(protected_dropped, 0u);
}

TEST(TokenDropout, ZeroProbabilityKeepsEverything) {
  const auto labels = sequence_labels(3, 3);
  const auto m = sample_mask(labels, std::nullopt, 0.0, 5);
  EXPECT_EQ(m.kept(), labels.size());
  EXPECT_EQ(m.rng_seed, 5u);
  EXPECT_THROW(sample_mask(labels, std::nullopt, 1.0, 5), std::invalid_argument);
  EXPECT_THROW(sample_mask(labels, std::nullopt, -0.1, 5), std::invalid_argument);
}

TEST(TokenDropout, SeededMasksAreReproducible) {
  const auto labels = sequence_labels(6, 6);
  EXPECT_EQ(sample_mask(labels, std::nullopt, 0.4, 17).keep, sample_mask(labels, std::nullopt, 0.4, 17).keep);
  const std::vector<std::size_t> acts{0, attack_action(2), 4};
  const auto a = sample_batch_masks(labels, acts, 0.4, 3, 9);
  EXPECT_EQ(a, sample_batch_masks(labels, acts, 0.4, 3, 9));
  EXPECT_NE(a, sample_batch_masks(labels, acts, 0.4, 3, 10));
  ASSERT_EQ(a.size(), 3 * labels.size());
  EXPECT_EQ(a[labels.size() + 1 + 6 + 2], 1);  // E3 of sequence 1 is the attack target
}

TEST(TokenDropout, ApplyMaskKeepsOrderAndLabels) {
  const auto labels = sequence_labels(2, 2);
  TokenSequence seq;
  seq.labels = labels;
  std::vector<double> v(labels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  seq.tokens = Tensor::from({labels.size(), 1}, v);
  DropoutMask m;
  m.keep = {1, 0, 1, 1, 0, 1, 1};
  const auto out = apply_mask(seq, m);
  EXPECT_EQ(names(out.labels), (std::vector<std::string>{"Own", "A2", "E1", "LH", "HH"}));
  EXPECT_EQ(std::vector<double>(out.tokens.data().begin(), out.tokens.data().end()),
            (std::vector<double>{0, 2, 3, 5, 6}));
  m.keep.pop_back();
  EXPECT_THROW(apply_mask(seq, m), std::invalid_argument);
}
