#include "stairs/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"

namespace stairs {

using nlohmann::json;

namespace {

constexpr std::uint64_t kTierExpert = 1;
constexpr std::uint64_t kTierMedium = 2;
constexpr std::uint64_t kTierReplay = 3;
constexpr std::uint64_t kTierRandom = 4;

json rows_json(const FeatureRows& rows) {
  json out = json::array();
  for (std::size_t i = 0; i < rows.count(); ++i) {
    const auto r = rows.row(i);
    out.push_back(std::vector<double>(r.begin(), r.end()));
  }
  return out;
}

FeatureRows rows_from(const json& j, std::size_t width, const char* what) {
  FeatureRows rows(width);
  for (const auto& r : j) {
    const auto v = r.get<std::vector<double>>();
    if (v.size() != width)
      throw std::invalid_argument(std::string("episode: ") + what + " row has " + std::to_string(v.size()) +
                                  " values, expected " + std::to_string(width));
    rows.push(v);
  }
  return rows;
}

std::string hex32(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof(buf), "%08x", v);
  return buf;
}

std::vector<Episode> run_parallel(std::size_t count, std::size_t threads,
                                  const std::function<Episode(std::size_t)>& make) {
  std::vector<Episode> out(count);
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(count, 1));
  if (threads == 1) {
    for (std::size_t k = 0; k < count; ++k) out[k] = make(k);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t k = w; k < count; k += threads) out[k] = make(k);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

std::string read_file(const std::filesystem::path& path, bool gzip) {
  if (!gzip) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::string out;
  char buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof(buf))) > 0) out.append(buf, static_cast<std::size_t>(n));
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw std::runtime_error("corrupt gzip stream in " + path.string());
  return out;
}

void write_file(const std::filesystem::path& path, const std::string& bytes, bool gzip) {
  if (!gzip) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
    return;
  }
  // Fixed header fields (no name, no mtime) keep compressed output reproducible.
  gzFile f = gzopen(path.string().c_str(), "wb9");
  if (!f) throw std::runtime_error("cannot write " + path.string());
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<unsigned>(std::min<std::size_t>(bytes.size() - off, 1 << 20));
    if (gzwrite(f, bytes.data() + off, chunk) != static_cast<int>(chunk)) {
      gzclose(f);
      throw std::runtime_error("write failed for " + path.string());
    }
    off += chunk;
  }
  if (gzclose(f) != Z_OK) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace

std::size_t DatasetManifest::total_episodes() const {
  std::size_t n = 0;
  for (const auto& t : tasks) n += t.episodes;
  return n;
}

const TaskFileInfo* DatasetManifest::find(std::string_view task) const {
  for (const auto& t : tasks)
    if (t.task.name == task) return &t;
  return nullptr;
}

std::string DatasetManifest::to_json() const {
  json j;
  j["format"] = kFormat;
  j["task_set"] = task_set;
  j["quality"] = to_string(quality);
  j["seed"] = seed;
  j["gzip"] = gzip;
  j["feature_dims"] = {{"own", layout.own_dim}, {"other", layout.other_dim}, {"entity", layout.entity_dim},
                       {"state", state_dim}};
  json list = json::array();
  json counts = json::object();
  for (const auto& t : tasks) {
    list.push_back({{"name", t.task.name},
                    {"n_allies", t.task.n_allies},
                    {"n_enemies", t.task.n_enemies},
                    {"map_size", t.task.map_size},
                    {"sight_range", t.task.sight_range},
                    {"attack_range", t.task.attack_range},
                    {"horizon", t.task.horizon},
                    {"file", t.file},
                    {"episodes", t.episodes},
                    {"crc32", hex32(t.crc32)},
                    {"bytes", t.bytes},
                    {"mean_return", t.mean_return},
                    {"win_rate", t.win_rate}});
    counts[t.task.name] = t.episodes;
  }
  j["tasks"] = list;
  j["episode_counts"] = counts;
  return j.dump(2) + "\n";
}

DatasetManifest DatasetManifest::from_json(std::string_view text) {
  try {
    const json j = json::parse(text);
    if (j.at("format").get<std::string>() != kFormat)
      throw std::invalid_argument("manifest: unsupported format '" + j.at("format").get<std::string>() + "'");
    DatasetManifest m;
    m.task_set = j.at("task_set").get<std::string>();
    m.quality = quality_from_string(j.at("quality").get<std::string>());
    m.seed = j.at("seed").get<std::uint64_t>();
    m.gzip = j.at("gzip").get<bool>();
    const auto& dims = j.at("feature_dims");
    m.layout = {dims.at("own").get<std::size_t>(), dims.at("other").get<std::size_t>(),
                dims.at("entity").get<std::size_t>()};
    m.state_dim = dims.at("state").get<std::size_t>();
    for (const auto& t : j.at("tasks")) {
      TaskFileInfo info;
      info.task.name = t.at("name").get<std::string>();
      info.task.n_allies = t.at("n_allies").get<std::size_t>();
      info.task.n_enemies = t.at("n_enemies").get<std::size_t>();
      info.task.map_size = t.at("map_size").get<double>();
      info.task.sight_range = t.at("sight_range").get<double>();
      info.task.attack_range = t.at("attack_range").get<double>();
      info.task.horizon = t.at("horizon").get<std::size_t>();
      info.task.validate();
      info.file = t.at("file").get<std::string>();
      info.episodes = t.at("episodes").get<std::size_t>();
      info.crc32 = static_cast<std::uint32_t>(std::stoul(t.at("crc32").get<std::string>(), nullptr, 16));
      info.bytes = t.at("bytes").get<std::uint64_t>();
      info.mean_return = t.at("mean_return").get<double>();
      info.win_rate = t.at("win_rate").get<double>();
      m.tasks.push_back(std::move(info));
    }
    return m;
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("manifest: ") + e.what());
  }
}

const TaskEpisodes& Dataset::task(std::string_view name) const {
  for (const auto& t : tasks)
    if (t.task.name == name) return t;
  throw std::invalid_argument("dataset has no task '" + std::string(name) + "'");
}

std::size_t Dataset::total_episodes() const {
  std::size_t n = 0;
  for (const auto& t : tasks) n += t.episodes.size();
  return n;
}

double replay_epsilon(std::size_t episode, std::size_t count) {
  if (count <= 1) return 1.0;
  const double frac = static_cast<double>(episode) / static_cast<double>(count - 1);
  return 1.0 - 0.7 * frac;
}

std::vector<Episode> generate_episodes(const TaskSpec& task, Quality quality, std::size_t count, std::uint64_t seed,
                                       std::size_t threads) {
  task.validate();
  auto seed_for = [&](std::uint64_t tier, std::size_t k) {
    return stream_seed(seed, (task.n_allies << 16) | task.n_enemies, tier, k);
  };
  switch (quality) {
    case Quality::Expert:
    case Quality::Medium:
    case Quality::Random: {
      const std::uint64_t tier =
          quality == Quality::Expert ? kTierExpert : quality == Quality::Medium ? kTierMedium : kTierRandom;
      const JointPolicy policy = scripted_joint_policy({quality, 0.3});
      return run_parallel(count, threads, [&](std::size_t k) { return rollout(task, policy, seed_for(tier, k)); });
    }
    case Quality::MediumExpert: {
      auto out = generate_episodes(task, Quality::Expert, count, seed, threads);
      auto medium = generate_episodes(task, Quality::Medium, count, seed, threads);
      out.insert(out.end(), std::make_move_iterator(medium.begin()), std::make_move_iterator(medium.end()));
      return out;
    }
    case Quality::MediumReplay:
      return run_parallel(count, threads, [&](std::size_t k) {
        const JointPolicy policy = scripted_joint_policy({Quality::Medium, replay_epsilon(k, count)});
        return rollout(task, policy, seed_for(kTierReplay, k));
      });
  }
  throw std::invalid_argument("generate_episodes: unknown quality");
}

Dataset generate_dataset(const TaskSet& task_set, Quality quality, std::size_t episodes_per_task, std::uint64_t seed,
                         std::size_t threads) {
  if (episodes_per_task == 0) throw std::invalid_argument("episodes per task must be positive");
  if (quality == Quality::Random) throw std::invalid_argument("random is a policy, not a dataset quality");
  Dataset ds;
  ds.manifest.task_set = task_set.name;
  ds.manifest.quality = quality;
  ds.manifest.seed = seed;
  for (const auto& task : task_set.seen) {
    TaskEpisodes te{task, generate_episodes(task, quality, episodes_per_task, seed, threads)};
    TaskFileInfo info;
    info.task = task;
    info.file = task.name + ".jsonl";
    info.episodes = te.episodes.size();
    double ret = 0.0, wins = 0.0;
    for (const auto& ep : te.episodes) {
      ret += ep.episode_return();
      wins += ep.won() ? 1.0 : 0.0;
    }
    info.mean_return = ret / static_cast<double>(info.episodes);
    info.win_rate = wins / static_cast<double>(info.episodes);
    ds.manifest.tasks.push_back(info);
    ds.tasks.push_back(std::move(te));
  }
  return ds;
}

std::string encode_episode(const Episode& episode) {
  json steps = json::array();
  for (const auto& s : episode.steps) {
    json obs = json::array();
    for (const auto& o : s.obs) obs.push_back(json::array({o.own, rows_json(o.other_agents), rows_json(o.env_entities)}));
    json avail = json::array();
    for (const auto& a : s.avail) avail.push_back(std::vector<int>(a.begin(), a.end()));
    steps.push_back({{"obs", std::move(obs)},
                     {"avail", std::move(avail)},
                     {"actions", s.actions},
                     {"reward", s.reward},
                     {"terminal", s.terminal},
                     {"state_units", rows_json(s.state_units)}});
  }
  json j = {{"task", episode.task}, {"steps", std::move(steps)}, {"outcome", to_string(episode.outcome)}};
  return j.dump();
}

Episode decode_episode(std::string_view line) {
  try {
    const json j = json::parse(line);
    Episode ep;
    ep.task = j.at("task").get<std::string>();
    ep.outcome = outcome_from_string(j.at("outcome").get<std::string>());
    for (const auto& sj : j.at("steps")) {
      EpisodeStep s;
      for (const auto& oj : sj.at("obs")) {
        if (!oj.is_array() || oj.size() != 3) throw std::invalid_argument("episode: obs entry needs 3 groups");
        EntityObservation o;
        o.own = oj[0].get<std::vector<double>>();
        o.other_agents = rows_from(oj[1], kEntityFeatures, "ally");
        o.env_entities = rows_from(oj[2], kEntityFeatures, "enemy");
        s.obs.push_back(std::move(o));
      }
      for (const auto& aj : sj.at("avail")) {
        const auto v = aj.get<std::vector<int>>();
        s.avail.emplace_back(v.begin(), v.end());
      }
      s.actions = sj.at("actions").get<std::vector<std::size_t>>();
      s.reward = sj.at("reward").get<double>();
      s.terminal = sj.at("terminal").get<bool>();
      s.state_units = rows_from(sj.at("state_units"), kStateFeatures, "state unit");
      if (s.avail.size() != s.obs.size() || s.actions.size() != s.obs.size())
        throw std::invalid_argument("episode: per-agent fields disagree on agent count");
      ep.steps.push_back(std::move(s));
    }
    return ep;
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("episode: ") + e.what());
  }
}

std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + off), chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

DatasetManifest write_dataset(const Dataset& dataset, const std::filesystem::path& dir, bool gzip) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
  DatasetManifest manifest = dataset.manifest;
  manifest.gzip = gzip;
  if (manifest.tasks.size() != dataset.tasks.size())
    throw std::invalid_argument("write_dataset: manifest and task data disagree");
  for (std::size_t i = 0; i < dataset.tasks.size(); ++i) {
    std::string text;
    for (const auto& ep : dataset.tasks[i].episodes) {
      text += encode_episode(ep);
      text += '\n';
    }
    TaskFileInfo& info = manifest.tasks[i];
    info.file = dataset.tasks[i].task.name + (gzip ? ".jsonl.gz" : ".jsonl");
    info.episodes = dataset.tasks[i].episodes.size();
    info.crc32 = crc32_of(text);
    info.bytes = text.size();
    write_file(dir / info.file, text, gzip);
  }
  write_file(dir / "manifest.json", manifest.to_json(), false);
  return manifest;
}

DatasetManifest read_manifest(const std::filesystem::path& dir) {
  return DatasetManifest::from_json(read_file(dir / "manifest.json", false));
}

Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.manifest = read_manifest(dir);
  if (ds.manifest.layout != FeatureLayout{kOwnFeatures, kEntityFeatures, kEntityFeatures} ||
      ds.manifest.state_dim != kStateFeatures)
    throw std::invalid_argument("dataset " + dir.string() + ": feature dims do not match this environment");
  for (const auto& info : ds.manifest.tasks) {
    const auto path = dir / info.file;
    const std::string text = read_file(path, ds.manifest.gzip);
    if (text.size() != info.bytes || crc32_of(text) != info.crc32)
      throw std::runtime_error("checksum mismatch in " + path.string());
    TaskEpisodes te{info.task, {}};
    std::size_t start = 0;
    while (start < text.size()) {
      auto end = text.find('\n', start);
      if (end == std::string::npos) end = text.size();
      if (end > start) {
        Episode ep = decode_episode(std::string_view(text).substr(start, end - start));
        if (ep.task != info.task.name)
          throw std::invalid_argument(path.string() + ": episode for task '" + ep.task + "'");
        te.episodes.push_back(std::move(ep));
      }
      start = end + 1;
    }
    if (te.episodes.size() != info.episodes)
      throw std::runtime_error(path.string() + ": " + std::to_string(te.episodes.size()) + " episodes, manifest says " +
                               std::to_string(info.episodes));
    ds.tasks.push_back(std::move(te));
  }
  return ds;
}

}  // namespace stairs
