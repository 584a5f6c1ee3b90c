#pragma once

// Offline episode datasets: generation from the scripted behavior policies
// and the on-disk layout (manifest.json plus one JSON-lines file per task).

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "stairs/skirmish.hpp"

namespace stairs {

struct TaskFileInfo {
  TaskSpec task;
  std::string file;
  std::size_t episodes = 0;
  std::uint32_t crc32 = 0;  // of the uncompressed bytes
  std::uint64_t bytes = 0;  // uncompressed size
  double mean_return = 0.0;
  double win_rate = 0.0;
};

struct DatasetManifest {
  static constexpr const char* kFormat = "stairs-skirmish-episodes/1";

  std::string task_set;
  Quality quality = Quality::Expert;
  std::uint64_t seed = 0;
  bool gzip = false;
  FeatureLayout layout{kOwnFeatures, kEntityFeatures, kEntityFeatures};
  std::size_t state_dim = kStateFeatures;
  std::vector<TaskFileInfo> tasks;

  std::size_t total_episodes() const;
  const TaskFileInfo* find(std::string_view task) const;
  std::string to_json() const;
  // Throws std::invalid_argument on missing fields or a format mismatch.
  static DatasetManifest from_json(std::string_view text);
};

struct TaskEpisodes {
  TaskSpec task;
  std::vector<Episode> episodes;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<TaskEpisodes> tasks;

  const TaskEpisodes& task(std::string_view name) const;
  std::size_t total_episodes() const;
};

// Per-episode exploration rate of the medium-replay generator: anneals
// linearly from 1.0 at the first episode to 0.3 at the last.
double replay_epsilon(std::size_t episode, std::size_t count);

// Episodes for one task. Episode k draws from a stream derived from
// (seed, task shape, policy tier, k), so medium-expert is exactly the union of
// the expert and medium sets produced under the same seed.
std::vector<Episode> generate_episodes(const TaskSpec& task, Quality quality, std::size_t count, std::uint64_t seed,
                                       std::size_t threads = 1);

// expert/medium/medium-replay hold `episodes_per_task` per seen task;
// medium-expert holds the expert and medium sets back to back.
Dataset generate_dataset(const TaskSet& task_set, Quality quality, std::size_t episodes_per_task, std::uint64_t seed,
                         std::size_t threads = 1);

std::string encode_episode(const Episode& episode);
Episode decode_episode(std::string_view line);

std::uint32_t crc32_of(std::string_view bytes);

// Writes manifest.json and <task>.jsonl[.gz]; fills checksums and sizes in the
// returned manifest. I/O failures throw std::runtime_error naming the path.
DatasetManifest write_dataset(const Dataset& dataset, const std::filesystem::path& dir, bool gzip = false);

// Reads and verifies checksums and counts against the manifest.
DatasetManifest read_manifest(const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace stairs
