#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "json.hpp"
#include "support/oracles.hpp"
#include "stairs/diagnostics.hpp"
#include "stairs/trainer.hpp"

using namespace stairs;
using stairs::testing::check_attention;
using stairs::testing::dormant_two_pass;

namespace {

StairsConfig small_model() {
  StairsConfig c;
  c.dim = 16;
  c.attn_dim = 16;
  c.ffn_dim = 24;
  return c;
}

const Dataset& small_dataset() {
  static const Dataset ds = generate_dataset(TaskSet::named("2v2,3v4"), Quality::Medium, 3, 12);
  return ds;
}

std::size_t count_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

void expect_reports_match(const DormantReport& a, const DormantReport& b) {
  ASSERT_EQ(a.neurons.size(), b.neurons.size());
  std::map<std::tuple<std::string, std::size_t, std::string>, const NeuronScore*> index;
  for (const auto& n : b.neurons) index[{n.layer, n.neuron, n.token_type}] = &n;
  for (const auto& n : a.neurons) {
    const auto it = index.find({n.layer, n.neuron, n.token_type});
    ASSERT_NE(it, index.end()) << n.layer << " " << n.neuron << " " << n.token_type;
    EXPECT_NEAR(n.score, it->second->score, 1e-9);
    EXPECT_EQ(n.dormant, it->second->dormant);
  }
  EXPECT_NEAR(a.ratio, b.ratio, 1e-12);
  EXPECT_NEAR(a.ratio_obs, b.ratio_obs, 1e-12);
  EXPECT_NEAR(a.ratio_history, b.ratio_history, 1e-12);
}

}  // namespace

// ---------------------------------------------------------------------------
// Dormant neurons

TEST(Dormant, MatchesTwoPassRecomputation) {
  for (const char* variant : {"full", "wo_temporal", "wo_tfl"}) {
    const StairsModel model = StairsModel::create(with_ablation(small_model(), variant), 3);
    // A large tau so both flags occur.
    const DormantReport fast = dormant_ratio(model, small_dataset(), 0.9);
    expect_reports_match(fast, dormant_two_pass(model, small_dataset(), 0.9));
    EXPECT_GT(fast.ratio, 0.0) << variant;
    EXPECT_LT(fast.ratio, 1.0) << variant;
  }
}

TEST(Dormant, GroupsFollowTheFfnRouting) {
  const StairsModel dual = StairsModel::create(small_model(), 4);
  std::set<std::string> layers;
  for (const auto& n : dormant_ratio(dual, small_dataset(), 0.05).neurons) layers.insert(n.layer);
  EXPECT_EQ(layers, (std::set<std::string>{"0.ffn_his", "0.ffn_obs", "1.ffn_his", "1.ffn_obs"}));
  const StairsModel single = StairsModel::create(with_ablation(small_model(), "wo_tfl"), 4);
  const DormantReport r = dormant_ratio(single, small_dataset(), 0.05);
  layers.clear();
  for (const auto& n : r.neurons) layers.insert(n.layer);
  EXPECT_EQ(layers, (std::set<std::string>{"0.ffn_obs", "1.ffn_obs"}));
  // One shared FFN sees both token types.
  EXPECT_EQ(r.neurons.size(), 2u * 24u * 3u);
}

TEST(Dormant, ScoreArithmetic) {
  FfnActivationStats st;
  st.layer = "0.ffn_obs";
  st.units = 4;
  st.sum_obs = {0.0, 2.0, 4.0, 10.0};
  st.sum_history = {0.0, 0.0, 0.0, 0.0};
  st.rows_obs = 2;
  const DormantReport r = score_dormant({st}, 0.25);
  // Means 0, 1, 2, 5; layer mean 2.
  const double expect[4] = {0.0, 0.5, 1.0, 2.5};
  std::size_t k = 0;
  for (const auto& n : r.neurons) {
    if (n.token_type != "all") continue;
    EXPECT_DOUBLE_EQ(n.score, expect[k]);
    EXPECT_EQ(n.dormant, k == 0);
    ++k;
  }
  EXPECT_EQ(k, 4u);
  EXPECT_DOUBLE_EQ(r.ratio, 0.25);
  EXPECT_THROW(score_dormant({st}, 0.0), std::invalid_argument);
}

TEST(Dormant, EqualActivationsAreNeverDormant) {
  FfnActivationStats st;
  st.layer = "0.ffn_obs";
  st.units = 5;
  st.sum_obs.assign(5, 3.0);
  st.sum_history.assign(5, 1.0);
  st.rows_obs = 3;
  st.rows_history = 1;
  const DormantReport r = score_dormant({st}, 0.99);
  for (const auto& n : r.neurons) {
    EXPECT_DOUBLE_EQ(n.score, 1.0);
    EXPECT_FALSE(n.dormant);
  }
  st.sum_obs.assign(5, 0.0);
  st.sum_history.assign(5, 0.0);
  for (const auto& n : score_dormant({st}, 0.05).neurons) {
    EXPECT_EQ(n.score, 0.0);
    EXPECT_TRUE(n.dormant);
  }
}

TEST(Dormant, UnitPermutationPermutesScores) {
  FfnActivationStats a;
  a.layer = "1.ffn_his";
  a.units = 4;
  a.sum_obs = {1.0, 0.1, 7.0, 2.0};
  a.sum_history = {0.5, 0.0, 1.0, 3.0};
  a.rows_obs = 4;
  a.rows_history = 2;
  FfnActivationStats b = a;
  const std::size_t perm[4] = {2, 0, 3, 1};
  for (std::size_t i = 0; i < 4; ++i) {
    b.sum_obs[i] = a.sum_obs[perm[i]];
    b.sum_history[i] = a.sum_history[perm[i]];
  }
  const DormantReport ra = score_dormant({a}, 0.3), rb = score_dormant({b}, 0.3);
  ASSERT_EQ(ra.neurons.size(), rb.neurons.size());
  for (std::size_t k = 0; k < ra.neurons.size(); ++k) {
    const std::size_t base = k - k % 4;
    EXPECT_DOUBLE_EQ(rb.neurons[k].score, ra.neurons[base + perm[k % 4]].score);
  }
  EXPECT_DOUBLE_EQ(ra.ratio, rb.ratio);
}

TEST(Dormant, CsvAndJsonOutputs) {
  const StairsModel model = StairsModel::create(small_model(), 5);
  const DormantReport r = dormant_ratio(model, small_dataset(), 0.05, 1);
  const auto path = std::filesystem::temp_directory_path() / "stairs_test_dormant.csv";
  write_dormant_csv(path, r);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "layer,neuron,score,token_type,dormant_flag");
  EXPECT_EQ(count_lines(path), r.neurons.size() + 1);
  std::filesystem::remove(path);
  const auto j = nlohmann::json::parse(r.to_json());
  EXPECT_DOUBLE_EQ(j.at("dormant_ratio").get<double>(), r.ratio);
  EXPECT_TRUE(j.at("per_layer").contains("0.ffn_obs"));
}

// ---------------------------------------------------------------------------
// Attention export

TEST(Attention, RowsAreDistributionsMatchingScores) {
  StairsConfig cfg = small_model();
  cfg.attn_temperature = 0.5;
  cfg.heads = 2;
  const StairsModel model = StairsModel::create(cfg, 6);
  const auto recs = record_attention(model, TaskSpec::parse("3v3"), 8, 5);
  ASSERT_FALSE(recs.empty());
  const auto check = check_attention(recs);
  EXPECT_LE(check.max_row_sum_error, 1e-9);
  EXPECT_LE(check.max_recompute_error, 1e-9);
  for (const auto& r : recs) {
    EXPECT_EQ(r.temperature, 0.5);
    EXPECT_LT(r.head, 2u);
    EXPECT_EQ(r.labels.size(), 2u + 3u + 2u + 1u);
  }
  const auto mean = mean_attention(recs);
  EXPECT_LE(check_attention(mean).max_row_sum_error, 1e-9);
}

TEST(Attention, SamplesEveryFifthTimestep) {
  const StairsModel model = StairsModel::create(small_model(), 7);
  const TaskSpec task = TaskSpec::parse("2v2");
  const auto recs = record_attention(model, task, 3, 5);
  std::set<std::size_t> steps;
  for (const auto& r : recs) steps.insert(r.timestep);
  ASSERT_FALSE(steps.empty());
  for (std::size_t t : steps) EXPECT_EQ(t % 5, 0u);
  // Every sampled step before the episode ends appears.
  const Episode ep = rollout(task, greedy_policy(model), 3);
  for (std::size_t t = 0; t < ep.steps.size(); t += 5) EXPECT_TRUE(steps.count(t)) << t;
  // Per sampled step: alive agents x layers x recursion steps x heads.
  std::map<std::size_t, std::size_t> per_step;
  for (const auto& r : recs) ++per_step[r.timestep];
  EXPECT_EQ(per_step[0], 2u * 3u);
  EXPECT_THROW(record_attention(model, task, 3, 0), std::invalid_argument);
}

TEST(Attention, CsvLayouts) {
  const StairsModel model = StairsModel::create(small_model(), 8);
  const auto recs = record_attention(model, TaskSpec::parse("2v2"), 1, 5);
  const auto dir = std::filesystem::temp_directory_path();
  write_attention_csv(dir / "stairs_test_att.csv", recs);
  write_attention_scores_csv(dir / "stairs_test_scores.csv", recs);
  std::size_t cells = 0;
  for (const auto& r : recs) cells += r.size() * r.size();
  EXPECT_EQ(count_lines(dir / "stairs_test_att.csv"), cells + 1);
  EXPECT_EQ(count_lines(dir / "stairs_test_scores.csv"), cells + 1);
  std::ifstream in(dir / "stairs_test_att.csv");
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  EXPECT_EQ(header, "timestep,agent,layer,rstep,query_label,key_label,weight,head");
  EXPECT_EQ(first.rfind("0,0,0,0,Own,Own,", 0), 0u) << first;
  std::filesystem::remove(dir / "stairs_test_att.csv");
  std::filesystem::remove(dir / "stairs_test_scores.csv");
}

// ---------------------------------------------------------------------------
// Evaluation

TEST(Evaluation, DeterministicAcrossThreads) {
  const StairsModel model = StairsModel::create(small_model(), 9);
  TaskSet tasks = TaskSet::named("2v2");
  tasks.unseen.push_back(TaskSpec::parse("3v3"));
  const EvalReport a = evaluate_policy(model, tasks, 3, {0, 1}, 1);
  const EvalReport b = evaluate_policy(model, tasks, 3, {0, 1}, 3);
  EXPECT_EQ(a.to_json(), b.to_json());
  ASSERT_NE(a.find("3v3"), nullptr);
  EXPECT_FALSE(a.find("3v3")->seen);
  EXPECT_EQ(a.find("9v9"), nullptr);
}

TEST(Evaluation, StatisticsOverSeeds) {
  const JointPolicy expert = scripted_joint_policy({Quality::Expert, 0.0});
  const EvalReport r = evaluate_policy(expert, TaskSet::named("3v3"), 10, {0, 1, 2});
  const TaskEval& t = r.tasks.at(0);
  ASSERT_EQ(t.win_rate.size(), 3u);
  const double mean = std::accumulate(t.win_rate.begin(), t.win_rate.end(), 0.0) / 3.0;
  double var = 0.0;
  for (double w : t.win_rate) var += (w - mean) * (w - mean);
  EXPECT_NEAR(t.win_mean, mean, 1e-15);
  EXPECT_NEAR(t.win_std, std::sqrt(var / 3.0), 1e-15);
  EXPECT_NEAR(r.seen_win_mean, mean, 1e-15);
  EXPECT_GT(mean, evaluate_policy(scripted_joint_policy({Quality::Random, 0.0}), TaskSet::named("3v3"), 10, {0, 1, 2})
                      .seen_win_mean);
  EXPECT_THROW(evaluate_policy(expert, TaskSet::named("3v3"), 0, {0}), std::invalid_argument);
}

TEST(Evaluation, LeavesParametersUntouched) {
  const StairsModel model = StairsModel::create(small_model(), 10);
  const StairsModel before = model.clone();
  evaluate_policy(model, TaskSet::named("2v2,3v3"), 2, {0}, 2);
  dormant_ratio(model, small_dataset(), 0.05, 1);
  record_attention(model, TaskSpec::parse("2v2"), 0, 5);
  EXPECT_TRUE(model.params().same_values(before.params()));
}

TEST(Evaluation, CheckpointOverloadMatchesModel) {
  const Dataset& ds = small_dataset();
  TrainerConfig tc;
  tc.batch_episodes = 2;
  MixerConfig mc;
  mc.agent_dim = 16;
  OfflineTrainer tr(ds, tc, small_model(), mc);
  tr.step();
  const auto path = std::filesystem::temp_directory_path() / "stairs_test_eval.ckpt";
  tr.save(path);
  const TaskSet tasks = TaskSet::named("4v4");
  EXPECT_EQ(evaluate_policy(path, tasks, 2, {5}).to_json(), evaluate_policy(tr.model(), tasks, 2, {5}).to_json());
  std::filesystem::remove(path);
}
