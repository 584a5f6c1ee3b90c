#include "stairs/diagnostics.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>
#include <thread>

#include "json.hpp"
#include "stairs/trainer.hpp"

namespace stairs {

using nlohmann::json;

namespace {

constexpr std::uint64_t kEvalStream = 0xE7A1;
constexpr std::size_t kAggregated = static_cast<std::size_t>(-1);

ObservationBatch batch_views(const std::vector<AgentView>& views, const TaskSpec& task, const FeatureLayout& layout,
                             std::vector<std::uint8_t>& avail) {
  ObservationBatch obs(views.size(), task.n_allies - 1, task.n_enemies, layout);
  avail.clear();
  for (std::size_t i = 0; i < views.size(); ++i) {
    obs.set(i, views[i].obs);
    avail.insert(avail.end(), views[i].avail.begin(), views[i].avail.end());
  }
  return obs;
}

std::vector<std::size_t> greedy_actions(const Tensor& q, std::span<const std::uint8_t> avail, std::size_t agents) {
  const std::size_t A = q.cols();
  std::vector<std::size_t> actions(agents);
  for (std::size_t i = 0; i < agents; ++i)
    actions[i] = greedy_action(q.data().subspan(i * A, A), avail.subspan(i * A, A));
  return actions;
}

void mean_std(const std::vector<double>& v, double& mean, double& stdev) {
  mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  stdev = std::sqrt(var / static_cast<double>(v.size()));
}

std::ofstream open_csv(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  return out;
}

std::string index_or_mean(std::size_t v) { return v == kAggregated ? "mean" : std::to_string(v); }

using PolicyFactory = std::function<JointPolicy()>;

EvalReport evaluate_with(const PolicyFactory& make_policy, const TaskSet& tasks, std::size_t episodes,
                         const std::vector<std::uint64_t>& seeds, std::size_t threads) {
  if (episodes == 0) throw std::invalid_argument("evaluate_policy: episodes_per_task must be positive");
  if (seeds.empty()) throw std::invalid_argument("evaluate_policy: no seeds");
  std::vector<std::pair<TaskSpec, bool>> all;
  for (const auto& t : tasks.seen) all.emplace_back(t, true);
  for (const auto& t : tasks.unseen) all.emplace_back(t, false);

  struct Job {
    std::size_t task, seed;
    double wins = 0.0, ret = 0.0;
  };
  std::vector<Job> jobs;
  for (std::size_t t = 0; t < all.size(); ++t)
    for (std::size_t s = 0; s < seeds.size(); ++s) jobs.push_back({t, s});

  auto run = [&](Job& job) {
    const TaskSpec& task = all[job.task].first;
    const JointPolicy policy = make_policy();
    for (std::size_t e = 0; e < episodes; ++e) {
      const Episode ep = rollout(task, policy, stream_seed(seeds[job.seed], kEvalStream,
                                                           (task.n_allies << 16) | task.n_enemies, e));
      job.wins += ep.won() ? 1.0 : 0.0;
      job.ret += ep.episode_return();
    }
    job.wins /= static_cast<double>(episodes);
    job.ret /= static_cast<double>(episodes);
  };
  threads = std::clamp<std::size_t>(threads, 1, jobs.size());
  if (threads == 1) {
    for (auto& j : jobs) run(j);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t w = 0; w < threads; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t k = w; k < jobs.size(); k += threads) run(jobs[k]);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  EvalReport report;
  report.episodes = episodes;
  report.seeds = seeds;
  double seen_sum = 0.0, unseen_sum = 0.0;
  std::size_t seen_n = 0, unseen_n = 0;
  for (std::size_t t = 0; t < all.size(); ++t) {
    TaskEval te;
    te.task = all[t].first.name;
    te.seen = all[t].second;
    for (const auto& j : jobs) {
      if (j.task != t) continue;
      te.win_rate.push_back(j.wins);
      te.mean_return.push_back(j.ret);
    }
    mean_std(te.win_rate, te.win_mean, te.win_std);
    mean_std(te.mean_return, te.return_mean, te.return_std);
    (te.seen ? seen_sum : unseen_sum) += te.win_mean;
    ++(te.seen ? seen_n : unseen_n);
    report.tasks.push_back(std::move(te));
  }
  report.seen_win_mean = seen_n ? seen_sum / static_cast<double>(seen_n) : 0.0;
  report.unseen_win_mean = unseen_n ? unseen_sum / static_cast<double>(unseen_n) : 0.0;
  return report;
}

}  // namespace

// ---------------------------------------------------------------------------
// Evaluation

JointPolicy greedy_policy(const StairsModel& model) {
  auto history = std::make_shared<HistoryState>();
  return [&model, history](const EnvState& state, const std::vector<AgentView>& views, Rng&) {
    NoGradGuard no_grad;
    const std::size_t n = views.size();
    if (state.t == 0 || !history->low.defined() || history->low.rows() != n)
      *history = HistoryState::zeros(n, model.config().dim);
    std::vector<std::uint8_t> avail;
    const ObservationBatch obs = batch_views(views, state.task, model.config().layout, avail);
    AgentStepOutput out = agent_step(model, obs, *history, avail);
    *history = std::move(out.next);
    return greedy_actions(out.q, avail, n);
  };
}

const TaskEval* EvalReport::find(const std::string& task) const {
  for (const auto& t : tasks)
    if (t.task == task) return &t;
  return nullptr;
}

std::string EvalReport::to_json() const {
  json j;
  j["episodes_per_task"] = episodes;
  j["seeds"] = seeds;
  j["seen_win_rate"] = seen_win_mean;
  j["unseen_win_rate"] = unseen_win_mean;
  json list = json::array();
  for (const auto& t : tasks)
    list.push_back({{"task", t.task},
                    {"split", t.seen ? "seen" : "unseen"},
                    {"win_rate", {{"mean", t.win_mean}, {"std", t.win_std}, {"per_seed", t.win_rate}}},
                    {"mean_return", {{"mean", t.return_mean}, {"std", t.return_std}, {"per_seed", t.mean_return}}}});
  j["tasks"] = list;
  return j.dump(2) + "\n";
}

EvalReport evaluate_policy(const JointPolicy& policy, const TaskSet& tasks, std::size_t episodes_per_task,
                           const std::vector<std::uint64_t>& seeds, std::size_t threads) {
  // A shared policy object may carry state, so it is only run on one thread.
  (void)threads;
  return evaluate_with([&] { return policy; }, tasks, episodes_per_task, seeds, 1);
}

EvalReport evaluate_policy(const StairsModel& model, const TaskSet& tasks, std::size_t episodes_per_task,
                           const std::vector<std::uint64_t>& seeds, std::size_t threads) {
  return evaluate_with([&] { return greedy_policy(model); }, tasks, episodes_per_task, seeds, threads);
}

EvalReport evaluate_policy(const std::filesystem::path& checkpoint, const TaskSet& tasks,
                           std::size_t episodes_per_task, const std::vector<std::uint64_t>& seeds,
                           std::size_t threads) {
  const LoadedAgent agent = load_agent(checkpoint);
  return evaluate_policy(agent.model, tasks, episodes_per_task, seeds, threads);
}

// ---------------------------------------------------------------------------
// Attention export

namespace {

class AttentionRecorder : public ForwardObserver {
 public:
  AttentionRecorder(std::vector<AttentionRecord>& out, std::vector<TokenLabel> labels, double temperature)
      : out_(out), labels_(std::move(labels)), temperature_(temperature) {}

  std::size_t timestep = 0;
  std::vector<bool> alive;

  void attention(std::size_t layer, std::size_t rstep, std::size_t head, const Tensor& scores,
                 const Tensor& weights) override {
    const std::size_t T = labels_.size();
    for (std::size_t s = 0; s < alive.size(); ++s) {
      if (!alive[s]) continue;
      AttentionRecord r{timestep, s, layer, rstep, head, temperature_, labels_, {}, {}};
      const auto sc = scores.data().subspan(s * T * T, T * T);
      const auto w = weights.data().subspan(s * T * T, T * T);
      r.scores.assign(sc.begin(), sc.end());
      r.weights.assign(w.begin(), w.end());
      out_.push_back(std::move(r));
    }
  }

 private:
  std::vector<AttentionRecord>& out_;
  std::vector<TokenLabel> labels_;
  double temperature_;
};

}  // namespace

std::vector<AttentionRecord> record_attention(const StairsModel& model, const TaskSpec& task,
                                              std::uint64_t episode_seed, std::size_t sample_every) {
  if (sample_every == 0) throw std::invalid_argument("record_attention: sample_every must be >= 1");
  NoGradGuard no_grad;
  const StairsConfig& cfg = model.config();
  std::vector<AttentionRecord> records;
  AttentionRecorder recorder(records, sequence_labels(task.n_allies - 1, task.n_enemies, cfg.high_history),
                             cfg.attn_temperature);
  // Same streams as rollout(), so the episode matches the evaluation rollout.
  Rng env_rng(stream_seed(episode_seed, 1));
  EnvState state = reset_env(task, env_rng);
  HistoryState history = HistoryState::zeros(task.n_allies, cfg.dim);
  while (!state.done()) {
    std::vector<AgentView> views;
    for (std::size_t i = 0; i < task.n_allies; ++i) views.push_back(observe(state, i));
    std::vector<std::uint8_t> avail;
    const ObservationBatch obs = batch_views(views, task, cfg.layout, avail);
    const bool sampled = state.t % sample_every == 0;
    recorder.timestep = state.t;
    recorder.alive.clear();
    for (const auto& u : state.allies) recorder.alive.push_back(u.alive);
    AgentStepOutput out = agent_step(model, obs, history, avail, {}, sampled ? &recorder : nullptr);
    history = std::move(out.next);
    const auto actions = greedy_actions(out.q, avail, task.n_allies);
    env_step(state, actions, env_rng);
  }
  return records;
}

std::vector<AttentionRecord> mean_attention(const std::vector<AttentionRecord>& records) {
  std::map<std::pair<std::size_t, std::size_t>, std::pair<AttentionRecord, std::size_t>> groups;
  for (const auto& r : records) {
    auto [it, fresh] = groups.try_emplace({r.timestep, r.agent}, r, 0);
    auto& [acc, n] = it->second;
    if (!fresh) {
      if (acc.labels != r.labels) throw std::invalid_argument("mean_attention: label mismatch within a group");
      for (std::size_t i = 0; i < acc.weights.size(); ++i) {
        acc.weights[i] += r.weights[i];
        acc.scores[i] += r.scores[i];
      }
    }
    ++n;
  }
  std::vector<AttentionRecord> out;
  for (auto& [key, value] : groups) {
    auto& [acc, n] = value;
    for (auto& w : acc.weights) w /= static_cast<double>(n);
    for (auto& s : acc.scores) s /= static_cast<double>(n);
    acc.layer = acc.rstep = acc.head = kAggregated;
    out.push_back(std::move(acc));
  }
  return out;
}

void write_attention_csv(const std::filesystem::path& path, const std::vector<AttentionRecord>& records) {
  std::ofstream out = open_csv(path);
  out << "timestep,agent,layer,rstep,query_label,key_label,weight,head\n";
  for (const auto& r : records) {
    const std::size_t T = r.size();
    for (std::size_t q = 0; q < T; ++q)
      for (std::size_t k = 0; k < T; ++k)
        out << r.timestep << ',' << r.agent << ',' << index_or_mean(r.layer) << ',' << index_or_mean(r.rstep) << ','
            << r.labels[q].str() << ',' << r.labels[k].str() << ',' << r.weights[q * T + k] << ','
            << index_or_mean(r.head) << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void write_attention_scores_csv(const std::filesystem::path& path, const std::vector<AttentionRecord>& records) {
  std::ofstream out = open_csv(path);
  out << "timestep,agent,layer,rstep,query_label,key_label,score,head,temperature\n";
  for (const auto& r : records) {
    const std::size_t T = r.size();
    for (std::size_t q = 0; q < T; ++q)
      for (std::size_t k = 0; k < T; ++k)
        out << r.timestep << ',' << r.agent << ',' << index_or_mean(r.layer) << ',' << index_or_mean(r.rstep) << ','
            << r.labels[q].str() << ',' << r.labels[k].str() << ',' << r.scores[q * T + k] << ','
            << index_or_mean(r.head) << ',' << r.temperature << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Dormant neurons

namespace {

class ActivationCollector : public ForwardObserver {
 public:
  ActivationCollector(std::map<std::string, FfnActivationStats>& stats, bool dual) : stats_(stats), dual_(dual) {}

  std::vector<TokenLabel> labels;

  void ffn_hidden(std::size_t layer, std::size_t, bool history_ffn, std::span<const std::size_t> rows,
                  const Tensor& hidden) override {
    const std::string name = std::to_string(layer) + (dual_ && history_ffn ? ".ffn_his" : ".ffn_obs");
    FfnActivationStats& st = stats_[name];
    const std::size_t H = hidden.cols(), T = labels.size();
    if (st.units == 0) {
      st.layer = name;
      st.units = H;
      st.sum_obs.assign(H, 0.0);
      st.sum_history.assign(H, 0.0);
    }
    const auto h = hidden.data();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const bool his = labels[rows[r] % T].is_history();
      auto& sum = his ? st.sum_history : st.sum_obs;
      ++(his ? st.rows_history : st.rows_obs);
      for (std::size_t i = 0; i < H; ++i) sum[i] += std::abs(h[r * H + i]);
    }
  }

 private:
  std::map<std::string, FfnActivationStats>& stats_;
  bool dual_;
};

void score_group(const std::string& layer, const std::string& type, const std::vector<double>& means, double tau,
                 std::vector<NeuronScore>& out) {
  double layer_mean = 0.0;
  for (double m : means) layer_mean += m;
  layer_mean /= static_cast<double>(means.size());
  for (std::size_t i = 0; i < means.size(); ++i) {
    const double s = layer_mean > 0.0 ? means[i] / layer_mean : 0.0;
    out.push_back({layer, i, type, s, s <= tau});
  }
}

}  // namespace

std::vector<FfnActivationStats> collect_ffn_activations(const StairsModel& model, const Dataset& dataset,
                                                        std::size_t max_episodes_per_task) {
  NoGradGuard no_grad;
  const StairsConfig& cfg = model.config();
  std::map<std::string, FfnActivationStats> stats;
  ActivationCollector collector(stats, cfg.dual_ffn);
  for (const auto& te : dataset.tasks) {
    const TaskSpec& task = te.task;
    collector.labels = sequence_labels(task.n_allies - 1, task.n_enemies, cfg.high_history);
    const std::size_t n = max_episodes_per_task ? std::min(max_episodes_per_task, te.episodes.size()) : te.episodes.size();
    for (std::size_t e = 0; e < n; ++e) {
      const Episode* ep = &te.episodes[e];
      const TrainingBatch batch = make_batch(task, std::span(&ep, 1));
      HistoryState state = HistoryState::zeros(task.n_allies, cfg.dim);
      for (std::size_t t = 0; t < batch.steps; ++t) {
        AgentStepOutput out = agent_step(model, batch.obs[t], state, batch.avail[t], {}, &collector);
        state = std::move(out.next);
      }
    }
  }
  std::vector<FfnActivationStats> out;
  for (auto& [name, st] : stats) out.push_back(std::move(st));
  return out;
}

DormantReport score_dormant(const std::vector<FfnActivationStats>& stats, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("dormant: tau must be positive");
  DormantReport report;
  report.tau = tau;
  for (const auto& st : stats) {
    const std::size_t H = st.units;
    const std::size_t rows_all = st.rows_obs + st.rows_history;
    if (rows_all == 0) continue;
    std::vector<double> all(H), obs(H), his(H);
    for (std::size_t i = 0; i < H; ++i) {
      all[i] = (st.sum_obs[i] + st.sum_history[i]) / static_cast<double>(rows_all);
      if (st.rows_obs) obs[i] = st.sum_obs[i] / static_cast<double>(st.rows_obs);
      if (st.rows_history) his[i] = st.sum_history[i] / static_cast<double>(st.rows_history);
    }
    score_group(st.layer, "all", all, tau, report.neurons);
    if (st.rows_obs) score_group(st.layer, "obs", obs, tau, report.neurons);
    if (st.rows_history) score_group(st.layer, "history", his, tau, report.neurons);
  }
  auto ratio = [&](const char* type) {
    std::size_t n = 0, d = 0;
    for (const auto& s : report.neurons) {
      if (s.token_type != type) continue;
      ++n;
      d += s.dormant ? 1 : 0;
    }
    return n ? static_cast<double>(d) / static_cast<double>(n) : 0.0;
  };
  report.ratio = ratio("all");
  report.ratio_obs = ratio("obs");
  report.ratio_history = ratio("history");
  return report;
}

DormantReport dormant_ratio(const StairsModel& model, const Dataset& dataset, double tau,
                            std::size_t max_episodes_per_task) {
  if (!(tau > 0.0)) throw std::invalid_argument("dormant: tau must be positive");
  if (dataset.total_episodes() == 0) throw std::invalid_argument("dormant: dataset is empty");
  return score_dormant(collect_ffn_activations(model, dataset, max_episodes_per_task), tau);
}

std::string DormantReport::to_json() const {
  json j = {{"tau", tau}, {"dormant_ratio", ratio}, {"dormant_ratio_obs", ratio_obs},
            {"dormant_ratio_history", ratio_history}};
  std::map<std::string, std::pair<std::size_t, std::size_t>> per_layer;
  for (const auto& s : neurons) {
    if (s.token_type != "all") continue;
    auto& [n, d] = per_layer[s.layer];
    ++n;
    d += s.dormant ? 1 : 0;
  }
  json layers = json::object();
  for (const auto& [name, nd] : per_layer)
    layers[name] = static_cast<double>(nd.second) / static_cast<double>(nd.first);
  j["per_layer"] = layers;
  return j.dump(2) + "\n";
}

void write_dormant_csv(const std::filesystem::path& path, const DormantReport& report) {
  std::ofstream out = open_csv(path);
  out << "layer,neuron,score,token_type,dormant_flag\n";
  for (const auto& s : report.neurons)
    out << s.layer << ',' << s.neuron << ',' << s.score << ',' << s.token_type << ',' << (s.dormant ? 1 : 0) << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace stairs
