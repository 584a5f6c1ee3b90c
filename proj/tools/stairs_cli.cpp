// stairs: dataset generation, training, evaluation and analysis.
//
// Exit codes: 0 success, 2 validation error, 3 runtime failure.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "stairs/config.hpp"
#include "stairs/dataset.hpp"
#include "stairs/diagnostics.hpp"
#include "stairs/trainer.hpp"

namespace fs = std::filesystem;
using namespace stairs;

namespace {

constexpr int kValidationError = 2;
constexpr int kRuntimeError = 3;

struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

std::size_t worker_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("STAIRS_THREADS"); env && *env) {
    char* end = nullptr;
    const unsigned long cap = std::strtoul(env, &end, 10);
    if (*end != '\0' || cap == 0) throw ValidationError("STAIRS_THREADS must be a positive integer");
    n = std::min<std::size_t>(n, cap);
  }
  return n;
}

bool ci_mode() {
  const char* ci = std::getenv("CI");
  return ci && *ci && std::string(ci) != "0" && std::string(ci) != "false";
}

void require_seed(const CLI::Option* opt) {
  if (ci_mode() && opt->count() == 0) throw ValidationError("--seed is required when CI is set");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part.empty()) continue;
    try {
      std::size_t used = 0;
      seeds.push_back(std::stoull(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw ValidationError("bad seed '" + part + "'");
    }
  }
  if (seeds.empty()) throw ValidationError("no seeds given");
  return seeds;
}

std::string config_key_listing() {
  std::ostringstream out;
  out << "Config keys (JSON, dotted path = nested object):\n";
  for (const auto& k : config_keys()) {
    out << "  " << k.key << " = " << k.default_value << "\n      " << k.help << "\n";
  }
  return out.str();
}

// Files written by gen-data; --force removes only these.
bool is_dataset_file(const fs::path& p) {
  const std::string name = p.filename().string();
  auto ends_with = [&](std::string_view s) { return name.size() >= s.size() && name.ends_with(s); };
  return name == "manifest.json" || ends_with(".jsonl") || ends_with(".jsonl.gz");
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string task_set = "marine-like";
  std::string quality;
  std::size_t episodes = 0;
  std::uint64_t seed = 0;
  std::string out;
  bool force = false;
  bool gzip = false;
};

int gen_data(const GenDataArgs& a) {
  if (a.episodes == 0) throw ValidationError("--episodes must be positive");
  const Quality quality = quality_from_string(a.quality);
  if (quality == Quality::Random) throw ValidationError("--quality must be expert, medium, medium-expert or medium-replay");
  const TaskSet tasks = TaskSet::named(a.task_set);
  const fs::path out(a.out);
  if (fs::exists(out)) {
    if (!fs::is_directory(out)) throw ValidationError(out.string() + " exists and is not a directory");
    if (!fs::is_empty(out) && !a.force) throw ValidationError(out.string() + " is not empty (use --force to overwrite)");
    for (const auto& entry : fs::directory_iterator(out))
      if (entry.is_regular_file() && is_dataset_file(entry.path())) fs::remove(entry.path());
  }
  const Dataset ds = generate_dataset(tasks, quality, a.episodes, a.seed, worker_threads());
  const DatasetManifest m = write_dataset(ds, out, a.gzip);
  for (const auto& t : m.tasks)
    std::cout << t.task.name << ": " << t.episodes << " episodes, win rate " << t.win_rate << ", mean return "
              << t.mean_return << " -> " << (out / t.file).string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t steps = 0;
  bool quiet = false;
};

void write_eval_rows(std::ostream& csv, std::size_t step, const EvalReport& r) {
  for (const auto& t : r.tasks)
    csv << step << ',' << t.task << ',' << (t.seen ? "seen" : "unseen") << ',' << t.win_mean << ',' << t.win_std
        << ',' << t.return_mean << ',' << t.return_std << '\n';
  csv.flush();
}

int train_cmd(const TrainArgs& a, const CLI::Option* seed_opt, const CLI::Option* steps_opt) {
  RunConfig cfg = a.config.empty() ? parse_run_config("{}") : parse_run_config(read_text(a.config));
  if (seed_opt->count()) cfg.seed = cfg.trainer.seed = a.seed;
  if (steps_opt->count()) {
    if (a.steps == 0) throw ValidationError("--steps must be positive");
    cfg.trainer.total_steps = a.steps;
  }
  if (!a.data.empty()) cfg.data = a.data;
  if (!a.out.empty()) cfg.out = a.out;
  if (cfg.data.empty()) throw ValidationError("no dataset given (--data or \"data\" in the config)");
  if (!fs::exists(fs::path(cfg.data) / "manifest.json"))
    throw ValidationError("no manifest.json under " + cfg.data);
  const TaskSet eval_tasks = TaskSet::named(cfg.task_set);

  const Dataset ds = read_dataset(cfg.data);
  validate_dataset(ds, cfg.model);
  for (const auto& t : eval_tasks.seen)
    if (!ds.manifest.find(t.name))
      throw ValidationError("task_set lists " + t.name + " as seen but the dataset has no such task");

  const fs::path out(cfg.out);
  fs::create_directories(out / "checkpoints");
  write_text(out / "config.json", to_json(cfg).dump(2) + "\n");

  std::ofstream metrics(out / "metrics.csv", std::ios::trunc);
  metrics.precision(17);
  metrics << "step,td,bc,total,grad_norm\n";
  std::ofstream eval_csv;
  if (cfg.eval.every > 0) {
    eval_csv.open(out / "eval.csv", std::ios::trunc);
    eval_csv.precision(17);
    eval_csv << "step,task,split,win_mean,win_std,return_mean,return_std\n";
  }
  const std::size_t threads = worker_threads();
  const auto t0 = std::chrono::steady_clock::now();

  OfflineTrainer trainer(ds, cfg.trainer, cfg.model, cfg.mixer);
  train(trainer, [&](const StepMetrics& m, const OfflineTrainer& tr) {
    metrics << m.step << ',' << m.loss.td << ',' << m.loss.bc << ',' << m.loss.total << ',' << m.grad_norm << '\n';
    if (m.step % 100 == 0) metrics.flush();
    if (!a.quiet && (m.step % 100 == 0 || m.step == cfg.trainer.total_steps)) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cerr << "step " << m.step << "/" << cfg.trainer.total_steps << " td " << m.loss.td << " bc " << m.loss.bc
                << " |g| " << m.grad_norm << " (" << secs << " s)\n";
    }
    if (cfg.checkpoint_every > 0 && m.step % cfg.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%08zu.ckpt", m.step);
      tr.save(out / "checkpoints" / name);
    }
    if (cfg.eval.every > 0 && m.step % cfg.eval.every == 0)
      write_eval_rows(eval_csv, m.step, evaluate_policy(tr.model(), eval_tasks, cfg.eval.episodes, cfg.eval.seeds, threads));
  });
  metrics.flush();
  trainer.save(out / "final.ckpt");
  if (cfg.eval.episodes > 0) {
    const EvalReport report = evaluate_policy(trainer.model(), eval_tasks, cfg.eval.episodes, cfg.eval.seeds, threads);
    write_text(out / "eval.json", report.to_json());
    std::cout << "seen win rate " << report.seen_win_mean << ", unseen win rate " << report.unseen_win_mean << "\n";
  }
  std::cout << "wrote " << (out / "final.ckpt").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string tasks = "marine-like";
  std::string unseen;
  std::size_t episodes = 32;
  std::string seeds = "0,1,2,3,4";
  std::string out;
};

int eval_cmd(const EvalArgs& a) {
  if (!fs::exists(a.checkpoint)) throw ValidationError("no checkpoint at " + a.checkpoint);
  if (a.episodes == 0) throw ValidationError("--episodes must be positive");
  TaskSet tasks = TaskSet::named(a.tasks);
  if (!a.unseen.empty()) {
    const TaskSet extra = TaskSet::named(a.unseen);
    tasks.unseen.insert(tasks.unseen.end(), extra.seen.begin(), extra.seen.end());
  }
  const EvalReport report = evaluate_policy(fs::path(a.checkpoint), tasks, a.episodes, parse_seeds(a.seeds), worker_threads());
  if (a.out.empty())
    std::cout << report.to_json();
  else
    write_text(a.out, report.to_json());
  return 0;
}

// ---------------------------------------------------------------------------

struct AnalyzeArgs {
  std::string mode;
  std::string checkpoint;
  std::string data;
  std::string out = ".";
  std::string task = "3v3";
  std::uint64_t episode_seed = 0;
  std::size_t sample_every = 5;
  double tau = 0.05;
  std::size_t max_episodes = 0;
};

int analyze_cmd(const AnalyzeArgs& a) {
  if (!fs::exists(a.checkpoint)) throw ValidationError("no checkpoint at " + a.checkpoint);
  const fs::path out(a.out);
  if (a.mode == "attention") {
    if (a.sample_every == 0) throw ValidationError("--sample-every must be >= 1");
    const TaskSpec task = TaskSpec::parse(a.task);
    const LoadedAgent agent = load_agent(a.checkpoint);
    const auto records = record_attention(agent.model, task, a.episode_seed, a.sample_every);
    write_attention_csv(out / "attention.csv", records);
    write_attention_scores_csv(out / "attention_scores.csv", records);
    write_attention_csv(out / "attention_mean.csv", mean_attention(records));
    std::cout << records.size() << " attention matrices -> " << (out / "attention.csv").string() << "\n";
    return 0;
  }
  if (a.data.empty()) throw ValidationError("analyze dormant needs --data");
  if (!(a.tau > 0.0)) throw ValidationError("--tau must be positive");
  const LoadedAgent agent = load_agent(a.checkpoint);
  const Dataset ds = read_dataset(a.data);
  validate_dataset(ds, agent.model.config());
  const DormantReport report = dormant_ratio(agent.model, ds, a.tau, a.max_episodes);
  write_dormant_csv(out / "dormant.csv", report);
  write_text(out / "dormant.json", report.to_json());
  std::cout << "dormant ratio " << report.ratio << " (obs " << report.ratio_obs << ", history "
            << report.ratio_history << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Offline multi-task multi-agent training on the skirmish suite"};
  app.require_subcommand(1);
  app.footer(config_key_listing());

  GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate an episode dataset with the scripted behavior policies");
  g->add_option("--task-set", gen.task_set, "marine-like or a comma list such as 3v3,5v5")->capture_default_str();
  g->add_option("--quality", gen.quality, "expert, medium, medium-expert or medium-replay")->required();
  g->add_option("--episodes", gen.episodes, "episodes per task")->required();
  auto* gen_seed = g->add_option("--seed", gen.seed, "generation seed")->capture_default_str();
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_flag("--force", gen.force, "overwrite an existing dataset directory");
  g->add_flag("--gzip", gen.gzip, "gzip the episode files");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train an agent offline from a dataset");
  t->add_option("--config", tr.config, "JSON run config (keys listed below)");
  t->add_option("--data", tr.data, "dataset directory (overrides the config)");
  t->add_option("--out", tr.out, "output directory (overrides the config)");
  auto* train_seed = t->add_option("--seed", tr.seed, "seed (overrides the config)");
  auto* train_steps = t->add_option("--steps", tr.steps, "optimizer steps (overrides trainer.total_steps)");
  t->add_flag("--quiet", tr.quiet, "no progress lines on stderr");
  t->footer(config_key_listing());

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Greedy evaluation of a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint, "agent checkpoint")->required();
  e->add_option("--tasks", ev.tasks, "marine-like or a comma list of tasks")->capture_default_str();
  e->add_option("--unseen", ev.unseen, "extra tasks reported as unseen, comma list");
  e->add_option("--episodes", ev.episodes, "episodes per task and seed")->capture_default_str();
  e->add_option("--seeds", ev.seeds, "comma list of evaluation seeds")->capture_default_str();
  e->add_option("--out", ev.out, "write the JSON report here instead of stdout");

  AnalyzeArgs an;
  auto* z = app.add_subcommand("analyze", "Attention export or dormant-neuron analysis");
  z->add_option("mode", an.mode, "attention or dormant")->required()->check(CLI::IsMember({"attention", "dormant"}));
  z->add_option("--checkpoint", an.checkpoint, "agent checkpoint")->required();
  z->add_option("--data", an.data, "dataset directory (dormant)");
  z->add_option("--out", an.out, "output directory")->capture_default_str();
  z->add_option("--task", an.task, "task for the attention episode")->capture_default_str();
  z->add_option("--episode-seed", an.episode_seed, "attention episode seed")->capture_default_str();
  z->add_option("--sample-every", an.sample_every, "attention sampling interval in steps")->capture_default_str();
  z->add_option("--tau", an.tau, "dormant threshold")->capture_default_str();
  z->add_option("--max-episodes", an.max_episodes, "episodes per task for dormant (0 = all)")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kValidationError;
  }

  try {
    if (*g) {
      require_seed(gen_seed);
      return gen_data(gen);
    }
    if (*t) {
      require_seed(train_seed);
      return train_cmd(tr, train_seed, train_steps);
    }
    if (*e) return eval_cmd(ev);
    if (*z) return analyze_cmd(an);
  } catch (const ValidationError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kValidationError;
  } catch (const std::invalid_argument& err) {
    // Config, task, quality and dataset validation all raise invalid_argument.
    std::cerr << "error: " << err.what() << "\n";
    return kValidationError;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kRuntimeError;
  }
  return 0;
}
