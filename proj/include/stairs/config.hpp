#pragma once

// JSON run configuration with strict key checking.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "stairs/mixer.hpp"
#include "stairs/stairs_net.hpp"
#include "stairs/trainer.hpp"

namespace stairs {

// Thrown for malformed or unknown configuration; message names the key.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct EvalConfig {
  std::size_t episodes = 32;         // per task and seed
  std::size_t every = 0;             // steps between evaluations; 0 = only at the end
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string data;                  // dataset directory
  std::string task_set = "marine-like";
  std::string out = "runs/stairs";
  std::string variant = "full";
  std::size_t checkpoint_every = 0;  // 0 = final checkpoint only
  StairsConfig model;
  MixerConfig mixer;
  TrainerConfig trainer;
  EvalConfig eval;
};

// Parses a config document. Missing keys keep their defaults; unknown keys,
// wrong types and invalid values throw ConfigError. The "variant" ablation is
// applied first, then explicit "ablation" flags override it.
RunConfig parse_run_config(const std::string& text);
nlohmann::json to_json(const RunConfig& cfg);

nlohmann::json to_json(const StairsConfig& cfg);
nlohmann::json to_json(const MixerConfig& cfg);
nlohmann::json to_json(const TrainerConfig& cfg);
StairsConfig stairs_config_from_json(const nlohmann::json& j);
MixerConfig mixer_config_from_json(const nlohmann::json& j);
TrainerConfig trainer_config_from_json(const nlohmann::json& j);

struct ConfigKey {
  std::string key;
  std::string default_value;
  std::string help;
};

// Every accepted key in dotted form with its default, for --help.
std::vector<ConfigKey> config_keys();

}  // namespace stairs
