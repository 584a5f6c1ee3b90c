#pragma once

// A small cooperative-combat Dec-POMDP: N allies controlled by learners
// against M scripted enemies on a square 2D field. Units move in unit steps,
// attack within range when their cooldown allows, and share one team reward.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stairs/entity.hpp"
#include "stairs/rng.hpp"

namespace stairs {

struct TaskSpec {
  std::string name;
  std::size_t n_allies = 3;
  std::size_t n_enemies = 3;
  double map_size = 32.0;
  double sight_range = 9.0;
  double attack_range = 6.0;
  std::size_t horizon = 60;

  // "NvM" -> N allies against M enemies, other fields default.
  static TaskSpec parse(const std::string& name);
  void validate() const;
  FeatureLayout layout() const;
};

struct TaskSet {
  std::string name;
  std::vector<TaskSpec> seen;
  std::vector<TaskSpec> unseen;

  // "marine-like": seen {3v3, 5v5, 10v10}, unseen {4v4, 6v6, 7v7, 8v8, 12v12}.
  // Anything else is read as a comma-separated list of seen task names.
  static TaskSet named(const std::string& name);
};

// Unit combat constants shared by both sides.
struct CombatRules {
  double max_health = 10.0;
  double ally_damage = 2.0;
  double enemy_damage = 2.0;
  double enemy_accuracy = 0.75;  // chance that a scripted enemy attack lands
  int cooldown_steps = 1;  // steps without attacking after each attack
  double move_step = 1.0;
};

const CombatRules& combat_rules();

struct UnitState {
  double x = 0.0;
  double y = 0.0;
  double health = 0.0;
  int cooldown = 0;
  bool alive = false;
};

enum class Outcome { Ongoing, Win, Loss, Timeout };
std::string to_string(Outcome outcome);
Outcome outcome_from_string(const std::string& s);

struct EnvState {
  TaskSpec task;
  std::vector<UnitState> allies;
  std::vector<UnitState> enemies;
  std::size_t t = 0;
  Outcome outcome = Outcome::Ongoing;

  bool done() const { return outcome != Outcome::Ongoing; }
  double total_health() const;
};

struct StepResult {
  double reward = 0.0;
  bool terminal = false;
  Outcome outcome = Outcome::Ongoing;
};

inline constexpr std::size_t kOwnFeatures = 4;     // health, cooldown, x, y
inline constexpr std::size_t kEntityFeatures = 4;  // visible, rel_x, rel_y, health
inline constexpr std::size_t kStateFeatures = 6;   // alive, x, y, health, cooldown, is_ally

EnvState reset_env(const TaskSpec& task, Rng& rng);

// Applies the joint action, runs the scripted enemies, resolves damage
// simultaneously and returns the shared reward. Throws std::invalid_argument
// for an unavailable action.
StepResult env_step(EnvState& state, std::span<const std::size_t> joint_action, Rng& rng);

struct AgentView {
  EntityObservation obs;
  std::vector<std::uint8_t> avail;  // 6 + n_enemies flags
};

AgentView observe(const EnvState& state, std::size_t agent);

// Global state as a set of unit vectors: allies first, then enemies.
FeatureRows state_units(const EnvState& state);

// Per-step reward scale that makes a flawless win sum to exactly 20.
double reward_scale(const TaskSpec& task);

enum class Quality { Expert, Medium, MediumExpert, MediumReplay, Random };
std::string to_string(Quality q);
Quality quality_from_string(const std::string& s);

struct BehaviorPolicy {
  Quality quality = Quality::Expert;  // Expert, Medium or Random
  double epsilon = 0.3;               // random-action rate for Medium
};

std::size_t scripted_policy(const BehaviorPolicy& policy, const AgentView& view, const TaskSpec& task, Rng& rng);

struct EpisodeStep {
  std::vector<EntityObservation> obs;
  std::vector<std::vector<std::uint8_t>> avail;
  std::vector<std::size_t> actions;
  double reward = 0.0;
  bool terminal = false;
  FeatureRows state_units;

  friend bool operator==(const EpisodeStep&, const EpisodeStep&) = default;
};

struct Episode {
  std::string task;
  std::vector<EpisodeStep> steps;
  Outcome outcome = Outcome::Ongoing;

  double episode_return() const;
  bool won() const { return outcome == Outcome::Win; }
  friend bool operator==(const Episode&, const Episode&) = default;
};

// Chooses a joint action given every agent's view.
using JointPolicy = std::function<std::vector<std::size_t>(const EnvState&, const std::vector<AgentView>&, Rng&)>;

JointPolicy scripted_joint_policy(BehaviorPolicy policy);

// Runs one episode from reset with the given seed. Environment randomness and
// policy randomness use separate streams derived from the seed.
Episode rollout(const TaskSpec& task, const JointPolicy& policy, std::uint64_t seed);

}  // namespace stairs
