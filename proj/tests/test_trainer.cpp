#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "stairs/trainer.hpp"

using namespace stairs;

namespace {

StairsConfig small_model() {
  StairsConfig c;
  c.dim = 16;
  c.attn_dim = 16;
  c.ffn_dim = 32;
  return c;
}

MixerConfig small_mixer() {
  MixerConfig c;
  c.heads = 2;
  c.embed_dim = 8;
  c.key_dim = 8;
  c.agent_dim = 16;
  return c;
}

TrainerConfig small_trainer(std::uint64_t seed = 0) {
  TrainerConfig t;
  t.batch_episodes = 2;
  t.total_steps = 4;
  t.seed = seed;
  return t;
}

// Two episodes of different lengths so the batch carries padding.
std::vector<Episode> two_episodes(const TaskSpec& task) {
  auto eps = generate_episodes(task, Quality::Medium, 6, 3);
  std::sort(eps.begin(), eps.end(), [](const Episode& a, const Episode& b) { return a.steps.size() < b.steps.size(); });
  return {eps.front(), eps.back()};
}

struct EpisodeTrace {
  std::vector<std::vector<double>> q;  // per t, N * A
  std::vector<FeatureRows> keys;       // per t, N rows of h^L
};

// Unbatched per-agent rollout of one episode.
EpisodeTrace trace(const StairsModel& model, const Episode& ep, bool mask_unavailable) {
  const std::size_t N = ep.steps.front().obs.size(), d = model.config().dim;
  std::vector<HistoryState> h(N, HistoryState::zeros(1, d));
  EpisodeTrace out;
  for (const auto& st : ep.steps) {
    std::vector<double> q;
    FeatureRows keys(d);
    for (std::size_t i = 0; i < N; ++i) {
      const std::vector<std::uint8_t> legal(st.avail[i].size(), 1);
      const AgentStepOutput o = agent_forward(model, st.obs[i], h[i], mask_unavailable ? st.avail[i] : legal);
      q.insert(q.end(), o.q.data().begin(), o.q.data().end());
      keys.push(o.next.low.data());
      h[i] = o.next;
    }
    out.q.push_back(std::move(q));
    out.keys.push_back(std::move(keys));
  }
  return out;
}

// y_t by brute-force search over legal joint actions of two agents.
std::vector<double> brute_force_targets(const Episode& ep, const StairsModel& model, const QattenMixer& mixer,
                                        double gamma) {
  const EpisodeTrace tr = trace(model, ep, true);
  const std::size_t A = ep.steps.front().avail.front().size();
  std::vector<double> y;
  for (std::size_t t = 0; t < ep.steps.size(); ++t) {
    const auto& st = ep.steps[t];
    if (st.terminal) {
      y.push_back(st.reward);
      continue;
    }
    const auto& next = ep.steps[t + 1];
    double best = -1e300;
    for (std::size_t a = 0; a < A; ++a)
      for (std::size_t b = 0; b < A; ++b) {
        if (!next.avail[0][a] || !next.avail[1][b]) continue;
        best = std::max(best, mix({{tr.q[t + 1][a], tr.q[t + 1][A + b]}, tr.keys[t + 1], next.state_units}, mixer));
      }
    y.push_back(st.reward + gamma * best);
  }
  return y;
}

}  // namespace

TEST(Trainer, BatchLayoutAndPadding) {
  const TaskSpec task = TaskSpec::parse("2v3");
  const auto eps = two_episodes(task);
  ASSERT_LT(eps[0].steps.size(), eps[1].steps.size());
  const Episode* ptrs[2] = {&eps[0], &eps[1]};
  const TrainingBatch b = make_batch(task, ptrs);
  EXPECT_EQ(b.steps, eps[1].steps.size());
  EXPECT_EQ(b.valid_steps(), eps[0].steps.size() + eps[1].steps.size());
  const std::size_t pad = eps[0].steps.size();
  EXPECT_EQ(b.valid[pad * 2], 0);
  EXPECT_EQ(b.valid[pad * 2 + 1], 1);
  EXPECT_EQ(b.actions[pad][0], kNoop);
  EXPECT_EQ(b.actions[0][3], eps[1].steps[0].actions[1]);
  EXPECT_EQ(b.reward[(pad - 1) * 2], eps[0].steps.back().reward);
  EXPECT_EQ(b.terminal[(pad - 1) * 2], 1);

  const Episode other = generate_episodes(TaskSpec::parse("3v3"), Quality::Expert, 1, 1)[0];
  const Episode* wrong[1] = {&other};
  EXPECT_THROW(make_batch(task, wrong), std::invalid_argument);
}

TEST(Trainer, TdTargetsMatchJointSearch) {
  const TaskSpec task = TaskSpec::parse("2v2");
  const auto eps = two_episodes(task);
  const StairsModel model = StairsModel::create(small_model(), 5);
  const QattenMixer mixer = QattenMixer::create(small_mixer(), 6);
  const Episode* ptrs[2] = {&eps[0], &eps[1]};
  const TrainingBatch batch = make_batch(task, ptrs);
  const auto y = compute_td_targets(batch, model, mixer, 0.99);
  for (std::size_t b = 0; b < 2; ++b) {
    const auto expect = brute_force_targets(eps[b], model, mixer, 0.99);
    for (std::size_t t = 0; t < batch.steps; ++t) {
      if (t < expect.size()) EXPECT_NEAR(y[t * 2 + b], expect[t], 1e-9) << "b " << b << " t " << t;
      else EXPECT_EQ(y[t * 2 + b], 0.0);
    }
  }
}

TEST(Trainer, TdTargetArithmeticWithConstantMixer) {
  // All weights zero except the mixer's value bias: Q_tot = 2 everywhere.
  const TaskSpec task = TaskSpec::parse("3v3");
  const auto eps = two_episodes(task);
  StairsModel model = StairsModel::create(small_model(), 1);
  QattenMixer mixer = QattenMixer::create(small_mixer(), 2);
  for (auto& p : model.params().entries())
    for (auto& v : p.value.mutable_data()) v = 0.0;
  for (auto& p : mixer.params().entries())
    for (auto& v : p.value.mutable_data()) v = 0.0;
  Tensor value_bias = mixer.net().b_v2;
  value_bias.mutable_data()[0] = 2.0;
  const Episode* ptrs[2] = {&eps[0], &eps[1]};
  const TrainingBatch batch = make_batch(task, ptrs);
  const auto y = compute_td_targets(batch, model, mixer, 0.99);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < eps[b].steps.size(); ++t) {
      const auto& st = eps[b].steps[t];
      EXPECT_NEAR(y[t * 2 + b], st.terminal ? st.reward : st.reward + 1.98, 1e-12);
    }
}

TEST(Trainer, UnterminatedEpisodeIsRejected) {
  const TaskSpec task = TaskSpec::parse("2v2");
  Episode ep = generate_episodes(task, Quality::Expert, 1, 2)[0];
  ep.steps.back().terminal = false;
  const Episode* ptrs[1] = {&ep};
  EXPECT_THROW(compute_td_targets(make_batch(task, ptrs), StairsModel::create(small_model(), 1),
                                  QattenMixer::create(small_mixer(), 1), 0.99),
               std::invalid_argument);
}

TEST(Trainer, LossMatchesUnbatchedComputation) {
  const TaskSpec task = TaskSpec::parse("2v3");
  const auto eps = two_episodes(task);
  const StairsModel model = StairsModel::create(small_model(), 7);
  const QattenMixer mixer = QattenMixer::create(small_mixer(), 8);
  const Episode* ptrs[2] = {&eps[0], &eps[1]};
  const TrainingBatch batch = make_batch(task, ptrs);
  std::vector<double> y(batch.steps * 2);
  Rng rng(3);
  for (auto& v : y) v = rng.uniform(-1.0, 3.0);

  double td = 0.0, bc = 0.0;
  std::size_t n = 0;
  for (std::size_t b = 0; b < 2; ++b) {
    const EpisodeTrace tr = trace(model, eps[b], false);
    const std::size_t A = action_count(3);
    for (std::size_t t = 0; t < eps[b].steps.size(); ++t) {
      const auto& acts = eps[b].steps[t].actions;
      const std::vector<double> qs{tr.q[t][acts[0]], tr.q[t][A + acts[1]]};
      const double q_tot = mix({qs, tr.keys[t], eps[b].steps[t].state_units}, mixer);
      td += (q_tot - y[t * 2 + b]) * (q_tot - y[t * 2 + b]);
      bc += qs[0] + qs[1];
      ++n;
    }
  }
  td /= static_cast<double>(n);
  bc /= static_cast<double>(2 * n);

  for (double lambda : {0.0, 0.7, 1.0}) {
    TrainerConfig cfg;
    cfg.lambda = lambda;
    const LossOutput out = compute_loss(batch, model, mixer, y, cfg, std::nullopt);
    EXPECT_NEAR(out.values.td, td, 1e-9);
    EXPECT_NEAR(out.values.bc, bc, 1e-9);
    EXPECT_NEAR(out.values.total, td - lambda * bc, 1e-9);
    if (lambda == 0.0) EXPECT_EQ(out.values.total, out.values.td);
  }
}

TEST(Trainer, BehaviorCloningTermRaisesDatasetActionValues) {
  const TaskSpec task = TaskSpec::parse("2v2");
  const auto eps = two_episodes(task);
  StairsModel model = StairsModel::create(small_model(), 9);
  const QattenMixer mixer = QattenMixer::create(small_mixer(), 10);
  const Episode* ptrs[2] = {&eps[0], &eps[1]};
  const TrainingBatch batch = make_batch(task, ptrs);
  TrainerConfig cfg;
  cfg.lambda = 1.0;
  // Targets equal to the current Q_tot leave only the BC gradient.
  std::vector<double> y(batch.steps * 2, 0.0);
  {
    const BatchRollout roll = rollout_batch(model, batch, std::nullopt, false);
    for (std::size_t t = 0; t < batch.steps; ++t) {
      const Tensor qa = reshape(pick(roll.q[t], batch.actions[t]), {2, 2});
      const MixOutput m = mix(qa, roll.keys[t], Tensor::from({8, kStateFeatures}, batch.units[t]), mixer);
      for (std::size_t b = 0; b < 2; ++b) y[t * 2 + b] = m.q_tot.at(b);
    }
  }
  const LossOutput before = compute_loss(batch, model, mixer, y, cfg, std::nullopt);
  EXPECT_NEAR(before.values.td, 0.0, 1e-20);
  backward(before.total);
  for (auto& p : model.params().entries()) {
    const auto g = p.value.grad();
    auto v = p.value.mutable_data();
    for (std::size_t i = 0; i < g.size(); ++i) v[i] -= 1e-3 * g[i];
  }
  const LossOutput after = compute_loss(batch, model, mixer, y, cfg, std::nullopt);
  EXPECT_GT(after.values.bc, before.values.bc);
}

TEST(Trainer, StepLeavesTargetNetworksWithoutGradients) {
  const Dataset ds = generate_dataset(TaskSet::named("2v2"), Quality::Expert, 4, 1);
  OfflineTrainer tr(ds, small_trainer(), small_model(), small_mixer());
  const StepMetrics m = tr.step();
  EXPECT_GT(m.grad_norm, 0.0);
  EXPECT_EQ(m.task, "2v2");
  for (const auto& p : tr.target_model().params().entries()) EXPECT_FALSE(p.value.has_grad()) << p.name;
  for (const auto& p : tr.target_mixer().params().entries()) EXPECT_FALSE(p.value.has_grad()) << p.name;
  EXPECT_FALSE(tr.model().params().same_values(tr.target_model().params()));
}

TEST(Trainer, TargetCopiesOnInterval) {
  const Dataset ds = generate_dataset(TaskSet::named("2v2"), Quality::Expert, 4, 1);
  TrainerConfig cfg = small_trainer();
  cfg.target_update_interval = 2;
  OfflineTrainer tr(ds, cfg, small_model(), small_mixer());
  EXPECT_TRUE(tr.model().params().same_values(tr.target_model().params()));
  tr.step();
  EXPECT_FALSE(tr.model().params().same_values(tr.target_model().params()));
  tr.step();
  EXPECT_TRUE(tr.model().params().same_values(tr.target_model().params()));
  EXPECT_TRUE(tr.mixer().params().same_values(tr.target_mixer().params()));
}

TEST(Trainer, SameSeedSameParameters) {
  const Dataset ds = generate_dataset(TaskSet::named("2v2,3v2"), Quality::Medium, 4, 1);
  OfflineTrainer a(ds, small_trainer(3), small_model(), small_mixer());
  OfflineTrainer b(ds, small_trainer(3), small_model(), small_mixer());
  OfflineTrainer c(ds, small_trainer(4), small_model(), small_mixer());
  train(a);
  train(b);
  train(c);
  EXPECT_TRUE(a.model().params().same_values(b.model().params()));
  EXPECT_TRUE(a.mixer().params().same_values(b.mixer().params()));
  EXPECT_FALSE(a.model().params().same_values(c.model().params()));
  EXPECT_EQ(a.batch_for_step(1).task.name, "3v2");
}

TEST(Trainer, MicroBatchesAccumulateToWholeBatch) {
  const Dataset ds = generate_dataset(TaskSet::named("3v2"), Quality::Medium, 8, 2);
  TrainerConfig cfg = small_trainer(5);
  cfg.batch_episodes = 5;
  cfg.micro_batch_episodes = 0;
  OfflineTrainer tr(ds, cfg, small_model(), small_mixer());
  const auto [te, picks] = tr.episodes_for_step(0);
  std::size_t n_valid = 0;
  for (const Episode* ep : picks) n_valid += ep->steps.size();

  auto grads = [&](const std::vector<std::pair<std::size_t, std::size_t>>& chunks, LossBreakdown& sum_values) {
    std::vector<Tensor> params;
    for (const auto& p : tr.model().params().entries()) params.push_back(p.value);
    for (const auto& p : tr.mixer().params().entries()) params.push_back(p.value);
    for (auto& p : params) p.zero_grad();
    for (const auto& [b0, b1] : chunks) {
      TrainingBatch b = make_batch(te->task, std::span(picks).subspan(b0, b1 - b0));
      b.first_sequence = b0 * b.agents();
      const auto y = compute_td_targets(b, tr.target_model(), tr.target_mixer(), cfg.gamma);
      const LossOutput l = compute_loss(b, tr.model(), tr.mixer(), y, cfg, 77, n_valid);
      sum_values.td += l.values.td;
      sum_values.bc += l.values.bc;
      backward(l.total);
    }
    std::vector<double> g;
    for (const auto& p : params) {
      const auto pg = p.grad();
      g.insert(g.end(), pg.begin(), pg.end());
    }
    return g;
  };
  LossBreakdown whole, split;
  const auto g_whole = grads({{0, 5}}, whole);
  const auto g_split = grads({{0, 2}, {2, 3}, {3, 5}}, split);
  EXPECT_NEAR(whole.td, split.td, 1e-10 * std::abs(whole.td));
  EXPECT_NEAR(whole.bc, split.bc, 1e-10 * std::abs(whole.bc) + 1e-12);
  ASSERT_EQ(g_whole.size(), g_split.size());
  double scale = 0.0;
  for (double v : g_whole) scale = std::max(scale, std::abs(v));
  ASSERT_GT(scale, 0.0);
  for (std::size_t i = 0; i < g_whole.size(); ++i) ASSERT_NEAR(g_whole[i], g_split[i], 1e-10 * scale) << i;

  // The trainer's own accumulation reports the same step.
  TrainerConfig chunked = cfg;
  chunked.micro_batch_episodes = 2;
  OfflineTrainer a(ds, cfg, small_model(), small_mixer()), b(ds, chunked, small_model(), small_mixer());
  const StepMetrics ma = a.step(), mb = b.step();
  EXPECT_NEAR(ma.loss.total, mb.loss.total, 1e-10 * std::abs(ma.loss.total));
  EXPECT_NEAR(ma.grad_norm, mb.grad_norm, 1e-10 * ma.grad_norm);
}

TEST(Trainer, TdLossFallsOnOneEpisode) {
  const Dataset ds = generate_dataset(TaskSet::named("2v2"), Quality::Expert, 1, 5);
  TrainerConfig cfg = small_trainer();
  cfg.batch_episodes = 1;
  cfg.lambda = 0.0;
  cfg.learning_rate = 2e-3;
  cfg.target_update_interval = 100000;
  cfg.total_steps = 150;
  StairsConfig model = small_model();
  model.token_dropout = false;
  OfflineTrainer tr(ds, cfg, model, small_mixer());
  std::vector<double> td;
  train(tr, [&](const StepMetrics& m, const OfflineTrainer&) { td.push_back(m.loss.td); });
  ASSERT_EQ(td.size(), 150u);
  EXPECT_LT(td.back(), 0.1 * td.front());
}

TEST(Trainer, RejectsMismatchedDatasets) {
  Dataset ds = generate_dataset(TaskSet::named("2v2"), Quality::Expert, 2, 1);
  StairsConfig model = small_model();
  model.layout.own_dim = 5;
  EXPECT_THROW(validate_dataset(ds, model), std::invalid_argument);
  ds.tasks[0].episodes.clear();
  EXPECT_THROW(validate_dataset(ds, small_model()), std::invalid_argument);
}

TEST(Trainer, AgentArchiveRoundTrip) {
  const Dataset ds = generate_dataset(TaskSet::named("2v2"), Quality::Expert, 2, 1);
  StairsConfig model = small_model();
  model.recursion = {3, 1};
  OfflineTrainer tr(ds, small_trainer(), model, small_mixer());
  tr.step();
  const auto path = std::filesystem::temp_directory_path() / "stairs_test_agent.ckpt";
  tr.save(path);
  const LoadedAgent back = load_agent(path);
  EXPECT_EQ(back.step, 1u);
  EXPECT_EQ(back.model.config().recursion, (std::vector<std::size_t>{3, 1}));
  EXPECT_TRUE(back.model.params().same_values(tr.model().params()));
  EXPECT_TRUE(back.mixer.params().same_values(tr.mixer().params()));
  std::filesystem::remove(path);
  EXPECT_ANY_THROW(load_agent(path));
}
