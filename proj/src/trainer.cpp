#include "stairs/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "stairs/checkpoint.hpp"
#include "stairs/config.hpp"
#include "stairs/token_dropout.hpp"

namespace stairs {

namespace {

constexpr std::uint64_t kModelInitStream = 101;
constexpr std::uint64_t kMixerInitStream = 102;
constexpr std::uint64_t kBatchStream = 201;
constexpr std::uint64_t kDropoutStream = 301;

}  // namespace

void TrainerConfig::validate() const {
  if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must lie in [0, 1)");
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
  if (batch_episodes == 0) throw std::invalid_argument("batch_episodes must be positive");
  if (target_update_interval == 0) throw std::invalid_argument("target_update_interval must be positive");
  if (total_steps == 0) throw std::invalid_argument("total_steps must be positive");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  if (!(grad_clip >= 0.0)) throw std::invalid_argument("grad_clip must be >= 0");
}

std::size_t TrainingBatch::valid_steps() const {
  std::size_t n = 0;
  for (auto v : valid) n += v;
  return n;
}

TrainingBatch make_batch(const TaskSpec& task, std::span<const Episode* const> episodes) {
  if (episodes.empty()) throw std::invalid_argument("make_batch: no episodes");
  const std::size_t B = episodes.size(), N = task.n_allies, M = task.n_enemies;
  const std::size_t A = action_count(M), U = N + M, S = B * N;
  TrainingBatch batch;
  batch.task = task;
  batch.episodes = B;
  for (const Episode* ep : episodes) {
    if (ep->task != task.name)
      throw std::invalid_argument("make_batch: episode of task '" + ep->task + "' in a " + task.name + " batch");
    if (ep->steps.empty()) throw std::invalid_argument("make_batch: empty episode");
    batch.steps = std::max(batch.steps, ep->steps.size());
  }
  const std::size_t T = batch.steps;
  batch.reward.assign(T * B, 0.0);
  batch.terminal.assign(T * B, 0);
  batch.valid.assign(T * B, 0);
  EntityObservation blank;
  blank.own.assign(kOwnFeatures, 0.0);
  blank.other_agents = FeatureRows(kEntityFeatures);
  blank.other_agents.values.assign((N - 1) * kEntityFeatures, 0.0);
  blank.env_entities = FeatureRows(kEntityFeatures);
  blank.env_entities.values.assign(M * kEntityFeatures, 0.0);

  for (std::size_t t = 0; t < T; ++t) {
    ObservationBatch obs(S, N - 1, M, task.layout());
    std::vector<std::uint8_t> avail(S * A, 0);
    std::vector<std::size_t> actions(S, kNoop);
    std::vector<double> units(B * U * kStateFeatures, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
      const Episode& ep = *episodes[b];
      if (t >= ep.steps.size()) {
        for (std::size_t i = 0; i < N; ++i) {
          obs.set(b * N + i, blank);
          avail[(b * N + i) * A + kNoop] = 1;
        }
        continue;
      }
      const EpisodeStep& st = ep.steps[t];
      if (st.obs.size() != N || st.state_units.count() != U)
        throw std::invalid_argument("make_batch: step shape does not match task " + task.name);
      for (std::size_t i = 0; i < N; ++i) {
        obs.set(b * N + i, st.obs[i]);
        if (st.avail[i].size() != A) throw std::invalid_argument("make_batch: avail mask width mismatch");
        std::copy(st.avail[i].begin(), st.avail[i].end(), avail.begin() + static_cast<std::ptrdiff_t>((b * N + i) * A));
        if (st.actions[i] >= A) throw std::invalid_argument("make_batch: action out of range");
        actions[b * N + i] = st.actions[i];
      }
      std::copy(st.state_units.values.begin(), st.state_units.values.end(),
                units.begin() + static_cast<std::ptrdiff_t>(b * U * kStateFeatures));
      batch.reward[t * B + b] = st.reward;
      batch.terminal[t * B + b] = st.terminal ? 1 : 0;
      batch.valid[t * B + b] = 1;
    }
    batch.obs.push_back(std::move(obs));
    batch.avail.push_back(std::move(avail));
    batch.actions.push_back(std::move(actions));
    batch.units.push_back(std::move(units));
  }
  return batch;
}

BatchRollout rollout_batch(const StairsModel& model, const TrainingBatch& batch,
                           std::optional<std::uint64_t> dropout_seed, bool mask_unavailable) {
  const StairsConfig& cfg = model.config();
  const std::size_t N = batch.agents(), M = batch.task.n_enemies;
  const std::size_t S = batch.episodes * N, A = action_count(M);
  const double p = cfg.effective_dropout();
  const auto labels = sequence_labels(N - 1, M, cfg.high_history);
  const std::vector<std::uint8_t> all_legal(S * A, 1);

  BatchRollout out;
  HistoryState state = HistoryState::zeros(S, cfg.dim);
  for (std::size_t t = 0; t < batch.steps; ++t) {
    std::vector<std::uint8_t> keep;
    if (dropout_seed && p > 0.0)
      keep = sample_batch_masks(labels, batch.actions[t], p, stream_seed(*dropout_seed, t), 0, batch.first_sequence);
    AgentStepOutput step =
        agent_step(model, batch.obs[t], state, mask_unavailable ? batch.avail[t] : all_legal, keep);
    out.q.push_back(step.q);
    out.keys.push_back(step.next.low);
    state = std::move(step.next);
  }
  return out;
}

std::vector<double> compute_td_targets(const TrainingBatch& batch, const StairsModel& target_model,
                                       const QattenMixer& target_mixer, double gamma) {
  NoGradGuard no_grad;
  const std::size_t B = batch.episodes, N = batch.agents(), T = batch.steps;
  const std::size_t A = action_count(batch.task.n_enemies), U = batch.units_per_instance();
  const BatchRollout roll = rollout_batch(target_model, batch, std::nullopt, true);

  // Greedy legal per-agent values mixed into max Q_tot at every step.
  std::vector<double> best(T * B, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const auto q = roll.q[t].data();
    std::vector<double> greedy(B * N);
    for (std::size_t s = 0; s < B * N; ++s) {
      const std::size_t a = greedy_action(q.subspan(s * A, A), std::span(batch.avail[t]).subspan(s * A, A));
      greedy[s] = q[s * A + a];
    }
    const Tensor units = Tensor::from({B * U, kStateFeatures}, batch.units[t]);
    const MixOutput mixed = mix(Tensor::from({B, N}, std::move(greedy)), roll.keys[t], units, target_mixer);
    for (std::size_t b = 0; b < B; ++b) best[t * B + b] = mixed.q_tot.data()[b];
  }

  std::vector<double> y(T * B, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t k = t * B + b;
      if (!batch.valid[k]) continue;
      y[k] = batch.reward[k];
      if (!batch.terminal[k]) {
        if (t + 1 >= T || !batch.valid[k + B])
          throw std::invalid_argument("compute_td_targets: episode ends without a terminal step");
        y[k] += gamma * best[k + B];
      }
    }
  }
  return y;
}

LossOutput compute_loss(const TrainingBatch& batch, const StairsModel& model, const QattenMixer& mixer,
                        std::span<const double> targets, const TrainerConfig& cfg,
                        std::optional<std::uint64_t> dropout_seed, std::size_t norm_steps) {
  const std::size_t B = batch.episodes, N = batch.agents(), T = batch.steps;
  const std::size_t U = batch.units_per_instance();
  if (targets.size() != T * B) throw std::invalid_argument("compute_loss: target count mismatch");
  const BatchRollout roll = rollout_batch(model, batch, dropout_seed, false);

  std::vector<Tensor> q_tot, chosen;
  for (std::size_t t = 0; t < T; ++t) {
    const Tensor qa = reshape(pick(roll.q[t], batch.actions[t]), {B, N});
    const Tensor units = Tensor::from({B * U, kStateFeatures}, batch.units[t]);
    q_tot.push_back(mix(qa, roll.keys[t], units, mixer).q_tot);
    chosen.push_back(qa);
  }
  const Tensor q_all = T == 1 ? q_tot.front() : concat_rows(q_tot);      // [T*B, 1]
  const Tensor chosen_all = T == 1 ? chosen.front() : concat_rows(chosen);  // [T*B, N]

  std::vector<double> w(T * B), w_agents(T * B * N);
  for (std::size_t k = 0; k < T * B; ++k) {
    w[k] = batch.valid[k];
    for (std::size_t i = 0; i < N; ++i) w_agents[k * N + i] = batch.valid[k];
  }
  const double n_valid = static_cast<double>(norm_steps ? norm_steps : batch.valid_steps());
  const Tensor diff = sub(q_all, Tensor::from({T * B, 1}, std::vector<double>(targets.begin(), targets.end())));
  const Tensor td = scale(sum(mul(mul(diff, diff), Tensor::from({T * B, 1}, std::move(w)))), 1.0 / n_valid);
  const Tensor bc = scale(sum(mul(chosen_all, Tensor::from({T * B, N}, std::move(w_agents)))),
                          1.0 / (n_valid * static_cast<double>(N)));

  LossOutput out;
  out.total = cfg.lambda == 0.0 ? td : sub(td, scale(bc, cfg.lambda));
  out.values.td = td.item();
  out.values.bc = bc.item();
  out.values.total = out.total.item();
  return out;
}

void validate_dataset(const Dataset& dataset, const StairsConfig& model) {
  if (dataset.tasks.empty()) throw std::invalid_argument("dataset has no tasks");
  if (dataset.manifest.layout != model.layout)
    throw std::invalid_argument("dataset feature dims do not match the model's embedding layout");
  if (dataset.manifest.state_dim != kStateFeatures)
    throw std::invalid_argument("dataset state unit width does not match the mixer");
  for (const auto& t : dataset.tasks)
    if (t.episodes.empty()) throw std::invalid_argument("dataset task " + t.task.name + " has no episodes");
}

OfflineTrainer::OfflineTrainer(const Dataset& dataset, const TrainerConfig& trainer, const StairsConfig& model,
                               const MixerConfig& mixer)
    : data_(dataset),
      cfg_(trainer),
      model_(StairsModel::create(model, stream_seed(trainer.seed, kModelInitStream))),
      target_model_(model_.clone()),
      mixer_(QattenMixer::create(mixer, stream_seed(trainer.seed, kMixerInitStream))),
      target_mixer_(mixer_.clone()) {
  cfg_.validate();
  validate_dataset(dataset, model);
  if (mixer.agent_dim != model.dim || mixer.state_dim != kStateFeatures)
    throw std::invalid_argument("mixer key/state widths do not match the model and environment");
  for (const auto& e : model_.params().entries()) live_.push_back(e);
  for (const auto& e : mixer_.params().entries()) live_.push_back(e);
  adam_.learning_rate = cfg_.learning_rate;
}

std::pair<const TaskEpisodes*, std::vector<const Episode*>> OfflineTrainer::episodes_for_step(std::size_t k) const {
  const TaskEpisodes& te = data_.tasks[k % data_.tasks.size()];
  Rng rng(stream_seed(cfg_.seed, kBatchStream, k));
  std::vector<const Episode*> picks;
  for (std::size_t b = 0; b < cfg_.batch_episodes; ++b) picks.push_back(&te.episodes[rng.index(te.episodes.size())]);
  return {&te, std::move(picks)};
}

TrainingBatch OfflineTrainer::batch_for_step(std::size_t k) const {
  const auto [te, picks] = episodes_for_step(k);
  return make_batch(te->task, picks);
}

StepMetrics OfflineTrainer::step() {
  const std::size_t k = step_;
  const auto [te, picks] = episodes_for_step(k);
  std::size_t n_valid = 0;
  for (const Episode* ep : picks) n_valid += ep->steps.size();
  const std::size_t chunk = cfg_.micro_batch_episodes ? std::min(cfg_.micro_batch_episodes, picks.size()) : picks.size();
  const std::uint64_t dropout_seed = stream_seed(cfg_.seed, kDropoutStream, k);

  // Chunks only bound peak graph memory; the summed loss and gradients are
  // those of the whole batch.
  StepMetrics m;
  m.step = k;
  m.task = te->task.name;
  for (auto& p : live_) p.value.zero_grad();
  for (std::size_t b0 = 0; b0 < picks.size(); b0 += chunk) {
    const std::size_t b1 = std::min(picks.size(), b0 + chunk);
    TrainingBatch batch = make_batch(te->task, std::span(picks).subspan(b0, b1 - b0));
    batch.first_sequence = b0 * batch.agents();
    const std::vector<double> y = compute_td_targets(batch, target_model_, target_mixer_, cfg_.gamma);
    LossOutput loss = compute_loss(batch, model_, mixer_, y, cfg_, dropout_seed, n_valid);
    m.loss.td += loss.values.td;
    m.loss.bc += loss.values.bc;
    m.loss.total += loss.values.total;
    backward(loss.total);
  }
  if (!std::isfinite(m.loss.total) || !std::isfinite(m.loss.td) || !std::isfinite(m.loss.bc)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << k << " (task " << m.task << "): td=" << m.loss.td << " bc=" << m.loss.bc
        << " total=" << m.loss.total;
    throw std::runtime_error(msg.str());
  }
  m.grad_norm = clip_grad_norm(live_, cfg_.grad_clip);
  adam_step(live_, adam_);
  ++step_;
  if (step_ % cfg_.target_update_interval == 0) {
    target_model_.params().copy_from(model_.params());
    target_mixer_.params().copy_from(mixer_.params());
  }
  return m;
}

void OfflineTrainer::save(const std::filesystem::path& path) const { save_agent(path, model_, mixer_, cfg_, step_); }

void train(OfflineTrainer& trainer, const StepCallback& on_step) {
  while (trainer.steps_done() < trainer.config().total_steps) {
    const StepMetrics m = trainer.step();
    if (on_step) on_step(m, trainer);
  }
}

void save_agent(const std::filesystem::path& path, const StairsModel& model, const QattenMixer& mixer,
                const TrainerConfig& trainer, std::size_t step) {
  ParamSet all;
  for (const auto& e : model.params().entries()) all.add(e.name, e.value);
  for (const auto& e : mixer.params().entries()) all.add(e.name, e.value);
  const nlohmann::json meta = {{"kind", "stairs-agent"},
                               {"model", to_json(model.config())},
                               {"mixer", to_json(mixer.config())},
                               {"trainer", to_json(trainer)},
                               {"step", step}};
  save_checkpoint(path, all, meta.dump());
}

LoadedAgent load_agent(const std::filesystem::path& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(ckpt.metadata);
  } catch (const nlohmann::json::exception&) {
    throw std::invalid_argument(path.string() + ": checkpoint metadata is not JSON");
  }
  if (!meta.is_object() || meta.value("kind", "") != "stairs-agent")
    throw std::invalid_argument(path.string() + ": not an agent checkpoint");
  LoadedAgent agent{StairsModel::create(stairs_config_from_json(meta.at("model")), 0),
                    QattenMixer::create(mixer_config_from_json(meta.at("mixer")), 0), meta.value("step", std::size_t{0})};
  ParamSet all;
  for (const auto& e : agent.model.params().entries()) all.add(e.name, e.value);
  for (const auto& e : agent.mixer.params().entries()) all.add(e.name, e.value);
  restore_parameters(ckpt, all);
  return agent;
}

}  // namespace stairs
