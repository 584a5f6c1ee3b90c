#pragma once

// Offline training of the per-agent network and the mixer with a TD loss on
// Q_tot plus a behavior-cloning bonus on the dataset actions:
//
//   y_t   = r_t + gamma * (1 - terminal_t) * Q_tot_target(greedy legal a_{t+1})
//   loss  = mean_t (Q_tot(a_t) - y_t)^2  -  lambda * mean_{t,i} Q^i(a^i_t)

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <utility>
#include <span>
#include <string>
#include <vector>

#include "stairs/dataset.hpp"
#include "stairs/mixer.hpp"
#include "stairs/stairs_net.hpp"

namespace stairs {

struct TrainerConfig {
  double gamma = 0.99;
  double lambda = 1.0;
  std::size_t batch_episodes = 8;
  std::size_t micro_batch_episodes = 1;  // gradient accumulation chunk; 0 = whole batch
  std::size_t target_update_interval = 200;
  std::size_t total_steps = 30000;
  std::uint64_t seed = 0;
  double learning_rate = 5e-4;
  double grad_clip = 10.0;  // global L2 norm; 0 disables

  void validate() const;
};

struct LossBreakdown {
  double td = 0.0;
  double bc = 0.0;
  double total = 0.0;
};

// B same-task episodes unrolled from t = 0 and padded to the longest one.
// Agent-level arrays are laid out [t][b][i]; padded steps have valid = 0,
// zero observations, no-op-only masks and action 0.
struct TrainingBatch {
  TaskSpec task;
  std::size_t episodes = 0;
  std::size_t steps = 0;  // padded length
  std::vector<ObservationBatch> obs;            // per t, S = B * N sequences
  std::vector<std::vector<std::uint8_t>> avail; // per t, S * A
  std::vector<std::vector<std::size_t>> actions; // per t, S
  std::vector<std::vector<double>> units;       // per t, B * U * state_dim
  std::vector<double> reward;                   // [t][b]
  std::vector<std::uint8_t> terminal;           // [t][b]
  std::vector<std::uint8_t> valid;              // [t][b]
  std::size_t first_sequence = 0;  // dropout stream index of sequence 0

  std::size_t agents() const { return task.n_allies; }
  std::size_t units_per_instance() const { return task.n_allies + task.n_enemies; }
  std::size_t valid_steps() const;
};

TrainingBatch make_batch(const TaskSpec& task, std::span<const Episode* const> episodes);

// Per-agent Q rollout of a whole batch. `dropout_seed` set means fresh token
// dropout masks per (t, sequence); histories start at zero.
struct BatchRollout {
  std::vector<Tensor> q;     // per t [S, A]
  std::vector<Tensor> keys;  // per t [S, d], h^L after the step
};

BatchRollout rollout_batch(const StairsModel& model, const TrainingBatch& batch,
                           std::optional<std::uint64_t> dropout_seed, bool mask_unavailable);

// y for every [t][b]; zero at padded steps.
std::vector<double> compute_td_targets(const TrainingBatch& batch, const StairsModel& target_model,
                                       const QattenMixer& target_mixer, double gamma);

struct LossOutput {
  LossBreakdown values;
  Tensor total;  // scalar with graph back to the live parameters
};

// `norm_steps` is the valid step count the means divide by; 0 uses the
// batch's own. Chunks of one batch share the whole batch's count so their
// losses and gradients add up to the whole batch's.
LossOutput compute_loss(const TrainingBatch& batch, const StairsModel& model, const QattenMixer& mixer,
                        std::span<const double> targets, const TrainerConfig& cfg,
                        std::optional<std::uint64_t> dropout_seed, std::size_t norm_steps = 0);

struct StepMetrics {
  std::size_t step = 0;
  LossBreakdown loss;
  double grad_norm = 0.0;
  std::string task;
};

// Owns live/target networks, the optimizer and the batch schedule.
class OfflineTrainer {
 public:
  OfflineTrainer(const Dataset& dataset, const TrainerConfig& trainer, const StairsConfig& model,
                 const MixerConfig& mixer);

  // One optimizer step; throws std::runtime_error on a non-finite loss.
  StepMetrics step();
  std::size_t steps_done() const { return step_; }

  // The batch that step `k` trains on (task cycles round-robin).
  TrainingBatch batch_for_step(std::size_t k) const;
  std::pair<const TaskEpisodes*, std::vector<const Episode*>> episodes_for_step(std::size_t k) const;

  const StairsModel& model() const { return model_; }
  const QattenMixer& mixer() const { return mixer_; }
  const StairsModel& target_model() const { return target_model_; }
  const QattenMixer& target_mixer() const { return target_mixer_; }
  const TrainerConfig& config() const { return cfg_; }

  void save(const std::filesystem::path& path) const;

 private:
  const Dataset& data_;
  TrainerConfig cfg_;
  StairsModel model_, target_model_;
  QattenMixer mixer_, target_mixer_;
  std::vector<NamedParameter> live_;
  AdamState adam_;
  std::size_t step_ = 0;
};

// Rejects a dataset the model cannot consume (feature dims, empty tasks).
void validate_dataset(const Dataset& dataset, const StairsConfig& model);

using StepCallback = std::function<void(const StepMetrics&, const OfflineTrainer&)>;

// Runs total_steps steps, calling `on_step` after each one.
void train(OfflineTrainer& trainer, const StepCallback& on_step = {});

// Model + mixer archive with their configs in the metadata.
void save_agent(const std::filesystem::path& path, const StairsModel& model, const QattenMixer& mixer,
                const TrainerConfig& trainer, std::size_t step);

struct LoadedAgent {
  StairsModel model;
  QattenMixer mixer;
  std::size_t step = 0;
};

LoadedAgent load_agent(const std::filesystem::path& path);

}  // namespace stairs
