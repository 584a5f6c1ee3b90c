#pragma once

// Greedy evaluation, attention export and dormant-neuron analysis.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "stairs/dataset.hpp"
#include "stairs/stairs_net.hpp"

namespace stairs {

// ---------------------------------------------------------------------------
// Evaluation

// Decentralized greedy controller: each agent runs the network on its own
// observation with its own history; histories reset when the episode does.
JointPolicy greedy_policy(const StairsModel& model);

struct TaskEval {
  std::string task;
  bool seen = true;
  std::vector<double> win_rate;  // per seed
  std::vector<double> mean_return;
  double win_mean = 0.0, win_std = 0.0;
  double return_mean = 0.0, return_std = 0.0;
};

struct EvalReport {
  std::size_t episodes = 0;  // per task and seed
  std::vector<std::uint64_t> seeds;
  std::vector<TaskEval> tasks;
  double seen_win_mean = 0.0;
  double unseen_win_mean = 0.0;

  const TaskEval* find(const std::string& task) const;
  std::string to_json() const;
};

// Episode e of task `task` under evaluation seed s uses stream
// (s, task shape, e); results are the same for any thread count.
EvalReport evaluate_policy(const JointPolicy& policy, const TaskSet& tasks, std::size_t episodes_per_task,
                           const std::vector<std::uint64_t>& seeds, std::size_t threads = 1);
EvalReport evaluate_policy(const StairsModel& model, const TaskSet& tasks, std::size_t episodes_per_task,
                           const std::vector<std::uint64_t>& seeds, std::size_t threads = 1);
EvalReport evaluate_policy(const std::filesystem::path& checkpoint, const TaskSet& tasks,
                           std::size_t episodes_per_task, const std::vector<std::uint64_t>& seeds,
                           std::size_t threads = 1);

// ---------------------------------------------------------------------------
// Attention export

struct AttentionRecord {
  std::size_t timestep = 0;
  std::size_t agent = 0;
  std::size_t layer = 0;
  std::size_t rstep = 0;
  std::size_t head = 0;
  double temperature = 1.0;
  std::vector<TokenLabel> labels;  // rows are queries, columns keys
  std::vector<double> scores;      // pre-softmax, before temperature
  std::vector<double> weights;     // row-stochastic

  std::size_t size() const { return labels.size(); }
};

// One greedy episode; every alive agent's matrices at t % sample_every == 0.
std::vector<AttentionRecord> record_attention(const StairsModel& model, const TaskSpec& task,
                                              std::uint64_t episode_seed, std::size_t sample_every = 5);

// Mean over layer, recursion step and head for each (timestep, agent).
std::vector<AttentionRecord> mean_attention(const std::vector<AttentionRecord>& records);

// timestep,agent,layer,rstep,query_label,key_label,weight,head
void write_attention_csv(const std::filesystem::path& path, const std::vector<AttentionRecord>& records);
// Same keys with the logged pre-softmax score and the temperature.
void write_attention_scores_csv(const std::filesystem::path& path, const std::vector<AttentionRecord>& records);

// ---------------------------------------------------------------------------
// Dormant neurons

struct NeuronScore {
  std::string layer;       // e.g. "0.ffn_obs"
  std::size_t neuron = 0;
  std::string token_type;  // all, obs or history
  double score = 0.0;
  bool dormant = false;
};

struct DormantReport {
  double tau = 0.05;
  std::vector<NeuronScore> neurons;
  double ratio = 0.0;          // over token_type == all
  double ratio_obs = 0.0;
  double ratio_history = 0.0;

  std::string to_json() const;
};

// Mean |activation| per hidden unit over every token routed to each FFN,
// normalized by the FFN's mean over units; score <= tau is dormant. An FFN
// whose mean over units is zero scores 0 for every unit.
DormantReport dormant_ratio(const StairsModel& model, const Dataset& dataset, double tau = 0.05,
                            std::size_t max_episodes_per_task = 0);

// The raw per-unit activation sums behind the report, for inspection.
struct FfnActivationStats {
  std::string layer;
  std::size_t units = 0;
  std::vector<double> sum_obs, sum_history;  // sum of |h| per unit
  std::size_t rows_obs = 0, rows_history = 0;
};

std::vector<FfnActivationStats> collect_ffn_activations(const StairsModel& model, const Dataset& dataset,
                                                        std::size_t max_episodes_per_task = 0);
DormantReport score_dormant(const std::vector<FfnActivationStats>& stats, double tau);

void write_dormant_csv(const std::filesystem::path& path, const DormantReport& report);

}  // namespace stairs
