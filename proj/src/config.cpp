#include "stairs/config.hpp"

#include <map>
#include <set>

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seeds are read as size_t");

namespace stairs {

using nlohmann::json;

namespace {

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config section '" + display() + "' must be an object");
  }

  void get(const char* key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) fail(key, "a boolean");
      out = v->get<bool>();
    }
  }
  void get(const char* key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, std::size_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned()) fail(key, "a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* key, std::vector<std::size_t>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) fail(key, "an array of non-negative integers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number_unsigned()) fail(key, "an array of non-negative integers");
        out.push_back(e.get<std::size_t>());
      }
    }
  }
  const json* section(const char* key) { return take(key); }
  std::string child(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + (path_.empty() ? k : path_ + "." + k) + "'");
  }

 private:
  const json* take(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  [[noreturn]] void fail(const char* key, const char* expected) const {
    throw ConfigError("config key '" + child(key) + "' must be " + expected);
  }
  std::string display() const { return path_.empty() ? "<root>" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_model(Reader& r, StairsConfig& m) {
  r.get("dim", m.dim);
  r.get("attn_dim", m.attn_dim);
  r.get("heads", m.heads);
  r.get("ffn_dim", m.ffn_dim);
  r.get("layers", m.layers);
  r.get("recursion", m.recursion);
  r.get("high_interval", m.high_interval);
  r.get("attn_temperature", m.attn_temperature);
  r.get("dropout", m.dropout);
  r.get("skip_initial_high_update", m.skip_initial_high_update);
}

void read_flags(Reader& r, StairsConfig& m) {
  r.get("spatial_recursion", m.spatial_recursion);
  r.get("high_history", m.high_history);
  r.get("dual_ffn", m.dual_ffn);
  r.get("token_dropout", m.token_dropout);
}

void read_mixer(Reader& r, MixerConfig& m) {
  r.get("heads", m.heads);
  r.get("embed_dim", m.embed_dim);
  r.get("key_dim", m.key_dim);
}

void read_trainer(Reader& r, TrainerConfig& t) {
  r.get("gamma", t.gamma);
  r.get("lambda", t.lambda);
  r.get("batch_episodes", t.batch_episodes);
  r.get("micro_batch_episodes", t.micro_batch_episodes);
  r.get("target_update_interval", t.target_update_interval);
  r.get("total_steps", t.total_steps);
  r.get("learning_rate", t.learning_rate);
  r.get("grad_clip", t.grad_clip);
}

template <class F>
void with_section(Reader& parent, const char* key, F&& f) {
  if (const json* s = parent.section(key)) {
    Reader r(*s, parent.child(key));
    f(r);
    r.finish();
  }
}

json model_json(const StairsConfig& m) {
  return {{"dim", m.dim},
          {"attn_dim", m.attn_dim},
          {"heads", m.heads},
          {"ffn_dim", m.ffn_dim},
          {"layers", m.layers},
          {"recursion", m.recursion},
          {"high_interval", m.high_interval},
          {"attn_temperature", m.attn_temperature},
          {"dropout", m.dropout},
          {"skip_initial_high_update", m.skip_initial_high_update}};
}

json flags_json(const StairsConfig& m) {
  return {{"spatial_recursion", m.spatial_recursion},
          {"high_history", m.high_history},
          {"dual_ffn", m.dual_ffn},
          {"token_dropout", m.token_dropout}};
}

template <class F>
void wrap(const char* what, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string(what) + ": " + e.what());
  }
}

void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, std::string>>& out) {
  for (const auto& [k, v] : j.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) flatten(v, key, out);
    else out.emplace_back(key, v.dump());
  }
}

}  // namespace

json to_json(const StairsConfig& cfg) {
  json j = model_json(cfg);
  j["ablation"] = flags_json(cfg);
  j["layout"] = {cfg.layout.own_dim, cfg.layout.other_dim, cfg.layout.entity_dim};
  return j;
}

json to_json(const MixerConfig& cfg) {
  return {{"heads", cfg.heads},
          {"embed_dim", cfg.embed_dim},
          {"key_dim", cfg.key_dim},
          {"agent_dim", cfg.agent_dim},
          {"state_dim", cfg.state_dim}};
}

json to_json(const TrainerConfig& cfg) {
  return {{"gamma", cfg.gamma},
          {"lambda", cfg.lambda},
          {"batch_episodes", cfg.batch_episodes},
          {"micro_batch_episodes", cfg.micro_batch_episodes},
          {"target_update_interval", cfg.target_update_interval},
          {"total_steps", cfg.total_steps},
          {"learning_rate", cfg.learning_rate},
          {"grad_clip", cfg.grad_clip},
          {"seed", cfg.seed}};
}

StairsConfig stairs_config_from_json(const json& j) {
  StairsConfig cfg;
  Reader r(j, "model");
  read_model(r, cfg);
  with_section(r, "ablation", [&](Reader& s) { read_flags(s, cfg); });
  if (const json* l = r.section("layout")) {
    if (!l->is_array() || l->size() != 3) throw ConfigError("model.layout must be [own, other, entity]");
    cfg.layout = {(*l)[0].get<std::size_t>(), (*l)[1].get<std::size_t>(), (*l)[2].get<std::size_t>()};
  }
  r.finish();
  wrap("model", [&] { cfg.validate(); });
  return cfg;
}

MixerConfig mixer_config_from_json(const json& j) {
  MixerConfig cfg;
  Reader r(j, "mixer");
  read_mixer(r, cfg);
  r.get("agent_dim", cfg.agent_dim);
  r.get("state_dim", cfg.state_dim);
  r.finish();
  wrap("mixer", [&] { cfg.validate(); });
  return cfg;
}

TrainerConfig trainer_config_from_json(const json& j) {
  TrainerConfig cfg;
  Reader r(j, "trainer");
  read_trainer(r, cfg);
  r.get("seed", cfg.seed);
  r.finish();
  wrap("trainer", [&] { cfg.validate(); });
  return cfg;
}

RunConfig parse_run_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig cfg;
  Reader root(doc, "");
  root.get("seed", cfg.seed);
  root.get("data", cfg.data);
  root.get("task_set", cfg.task_set);
  root.get("out", cfg.out);
  root.get("variant", cfg.variant);
  root.get("checkpoint_every", cfg.checkpoint_every);
  with_section(root, "model", [&](Reader& s) { read_model(s, cfg.model); });
  wrap("variant", [&] { cfg.model = with_ablation(cfg.model, cfg.variant); });
  with_section(root, "ablation", [&](Reader& s) { read_flags(s, cfg.model); });
  with_section(root, "mixer", [&](Reader& s) { read_mixer(s, cfg.mixer); });
  with_section(root, "trainer", [&](Reader& s) { read_trainer(s, cfg.trainer); });
  with_section(root, "eval", [&](Reader& s) {
    s.get("episodes", cfg.eval.episodes);
    s.get("every", cfg.eval.every);
    std::vector<std::size_t> seeds;
    s.get("seeds", seeds);
    if (!seeds.empty()) cfg.eval.seeds.assign(seeds.begin(), seeds.end());
  });
  root.finish();

  cfg.trainer.seed = cfg.seed;
  cfg.mixer.agent_dim = cfg.model.dim;
  cfg.mixer.state_dim = kStateFeatures;
  wrap("model", [&] { cfg.model.validate(); });
  wrap("mixer", [&] { cfg.mixer.validate(); });
  wrap("trainer", [&] { cfg.trainer.validate(); });
  if (cfg.eval.episodes == 0) throw ConfigError("config key 'eval.episodes' must be positive");
  return cfg;
}

json to_json(const RunConfig& cfg) {
  json mixer = {{"heads", cfg.mixer.heads}, {"embed_dim", cfg.mixer.embed_dim}, {"key_dim", cfg.mixer.key_dim}};
  json trainer = to_json(cfg.trainer);
  trainer.erase("seed");
  return {{"seed", cfg.seed},
          {"data", cfg.data},
          {"task_set", cfg.task_set},
          {"out", cfg.out},
          {"variant", cfg.variant},
          {"checkpoint_every", cfg.checkpoint_every},
          {"model", model_json(cfg.model)},
          {"ablation", flags_json(cfg.model)},
          {"mixer", mixer},
          {"trainer", trainer},
          {"eval", {{"episodes", cfg.eval.episodes}, {"every", cfg.eval.every}, {"seeds", cfg.eval.seeds}}}};
}

std::vector<ConfigKey> config_keys() {
  static const std::map<std::string, std::string> help = {
      {"seed", "base seed for initialization, batching and dropout"},
      {"data", "dataset directory (manifest.json + task files)"},
      {"task_set", "task set used when evaluating (marine-like or a comma list like 3v3,5v5)"},
      {"out", "output directory for metrics and checkpoints"},
      {"variant", "named ablation: full, wo_spatial, wo_temporal, wo_dropout, wo_st, wo_std, wo_gru, wo_tfl"},
      {"checkpoint_every", "steps between intermediate checkpoints (0 = final only)"},
      {"model.dim", "token embedding width"},
      {"model.attn_dim", "attention key/query width"},
      {"model.heads", "attention heads"},
      {"model.ffn_dim", "FFN hidden width"},
      {"model.layers", "transformer layers"},
      {"model.recursion", "recursion count per layer"},
      {"model.high_interval", "steps between high-level history updates"},
      {"model.attn_temperature", "attention softmax temperature"},
      {"model.dropout", "token dropout probability"},
      {"model.skip_initial_high_update", "skip the high-level history update at t = 0"},
      {"ablation.spatial_recursion", "use the recursion counts (false = one pass per layer)"},
      {"ablation.high_history", "keep the high-level history token"},
      {"ablation.dual_ffn", "separate FFNs for observation and history tokens"},
      {"ablation.token_dropout", "apply token dropout in training"},
      {"mixer.heads", "mixer attention heads"},
      {"mixer.embed_dim", "pooled state embedding width"},
      {"mixer.key_dim", "mixer key width per head"},
      {"trainer.gamma", "discount"},
      {"trainer.lambda", "behavior-cloning coefficient"},
      {"trainer.batch_episodes", "episodes per batch"},
      {"trainer.micro_batch_episodes", "episodes per gradient-accumulation chunk (0 = whole batch)"},
      {"trainer.target_update_interval", "steps between hard target copies"},
      {"trainer.total_steps", "optimizer steps"},
      {"trainer.learning_rate", "Adam learning rate"},
      {"trainer.grad_clip", "global gradient norm clip (0 = off)"},
      {"eval.episodes", "evaluation episodes per task and seed"},
      {"eval.every", "steps between evaluations (0 = final only)"},
      {"eval.seeds", "evaluation seeds"},
  };
  std::vector<std::pair<std::string, std::string>> flat;
  flatten(to_json(RunConfig{}), "", flat);
  std::vector<ConfigKey> out;
  for (auto& [k, v] : flat) {
    auto it = help.find(k);
    out.push_back({k, v, it == help.end() ? "" : it->second});
  }
  return out;
}

}  // namespace stairs
