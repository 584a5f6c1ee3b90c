#include "stairs/skirmish.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "stairs/stairs_net.hpp"

namespace stairs {

namespace {

constexpr double kKillBonus = 5.0;
constexpr double kWinBonus = 20.0;
constexpr double kTargetReturn = 20.0;
constexpr double kRetreatHealth = 0.25;

double distance(const UnitState& a, const UnitState& b) { return std::hypot(b.x - a.x, b.y - a.y); }

std::size_t parse_count(const std::string& s, const std::string& name) {
  if (s.empty() || !std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; }))
    throw std::invalid_argument("task name '" + name + "' is not of the form NvM");
  return static_cast<std::size_t>(std::stoul(s));
}

// Unit step along the dominant axis of (dx, dy); ties go to the x axis.
std::size_t move_toward(double dx, double dy) {
  if (std::abs(dx) >= std::abs(dy)) return dx >= 0 ? kEast : kWest;
  return dy >= 0 ? kNorth : kSouth;
}

void apply_move(UnitState& u, std::size_t action, double step, double map_size) {
  switch (action) {
    case kNorth: u.y = std::min(map_size, u.y + step); break;
    case kSouth: u.y = std::max(0.0, u.y - step); break;
    case kEast: u.x = std::min(map_size, u.x + step); break;
    case kWest: u.x = std::max(0.0, u.x - step); break;
    default: break;
  }
}

bool move_possible(const UnitState& u, std::size_t action, double map_size) {
  switch (action) {
    case kNorth: return u.y < map_size;
    case kSouth: return u.y > 0.0;
    case kEast: return u.x < map_size;
    case kWest: return u.x > 0.0;
    default: return false;
  }
}

void spawn(std::vector<UnitState>& units, std::size_t n, double cx, double cy, Rng& rng, double map_size) {
  const double health = combat_rules().max_health;
  const double half_span = 0.5 * static_cast<double>(n) + 1.0;
  units.resize(n);
  for (auto& u : units) {
    u.x = std::clamp(cx + rng.uniform(-2.0, 2.0), 0.0, map_size);
    u.y = std::clamp(cy + rng.uniform(-half_span, half_span), 0.0, map_size);
    u.health = health;
    u.cooldown = 0;
    u.alive = true;
  }
}

std::size_t random_legal(std::span<const std::uint8_t> avail, Rng& rng) {
  std::size_t legal = 0;
  for (auto a : avail) legal += a ? 1 : 0;
  if (legal == 0) throw std::logic_error("no legal action available");
  std::size_t pick = rng.index(legal);
  for (std::size_t a = 0; a < avail.size(); ++a) {
    if (!avail[a]) continue;
    if (pick == 0) return a;
    --pick;
  }
  return 0;
}

struct VisibleEnemy {
  std::size_t index;
  double dx, dy, dist, health;
};

std::vector<VisibleEnemy> visible_enemies(const AgentView& view, double sight) {
  std::vector<VisibleEnemy> out;
  const FeatureRows& en = view.obs.env_entities;
  for (std::size_t j = 0; j < en.count(); ++j) {
    const auto r = en.row(j);
    if (r[0] <= 0.5) continue;
    const double dx = r[1] * sight, dy = r[2] * sight;
    out.push_back({j, dx, dy, std::hypot(dx, dy), r[3]});
  }
  return out;
}

// Attack `target` if possible, hold while cooling down in range, else close in.
std::size_t engage(const VisibleEnemy& target, const AgentView& view, const TaskSpec& task) {
  if (view.avail[attack_action(target.index)]) return attack_action(target.index);
  if (target.dist <= task.attack_range) return kStop;
  const std::size_t m = move_toward(target.dx, target.dy);
  return view.avail[m] ? m : kStop;
}

std::size_t advance(const AgentView& view) { return view.avail[kEast] ? kEast : kStop; }

const VisibleEnemy* weakest(const std::vector<VisibleEnemy>& enemies, const AgentView* attackable) {
  const VisibleEnemy* best = nullptr;
  for (const auto& e : enemies) {
    if (attackable && !attackable->avail[attack_action(e.index)]) continue;
    if (!best || e.health < best->health) best = &e;
  }
  return best;
}

std::size_t expert_action(const AgentView& view, const TaskSpec& task) {
  const auto enemies = visible_enemies(view, task.sight_range);
  if (enemies.empty()) return advance(view);
  const double own_health = view.obs.own[0];
  const auto nearest = *std::min_element(enemies.begin(), enemies.end(),
                                         [](const VisibleEnemy& a, const VisibleEnemy& b) { return a.dist < b.dist; });
  // Retreat only on cooldown steps so a ready attack is never given up.
  const bool cooling = view.obs.own[1] > 0.0;
  if (cooling && own_health < kRetreatHealth && nearest.dist <= task.attack_range) {
    const std::size_t m = move_toward(-nearest.dx, -nearest.dy);
    if (view.avail[m]) return m;
  }
  // Focus fire: the weakest enemy in reach, else the weakest one in sight.
  if (const VisibleEnemy* e = weakest(enemies, &view)) return attack_action(e->index);
  if (nearest.dist <= task.attack_range) return kStop;
  return engage(*weakest(enemies, nullptr), view, task);
}

std::size_t medium_action(const AgentView& view, const TaskSpec& task) {
  const auto enemies = visible_enemies(view, task.sight_range);
  if (enemies.empty()) return advance(view);
  auto target = enemies.front();
  for (const auto& e : enemies)
    if (e.dist < target.dist) target = e;
  return engage(target, view, task);
}

}  // namespace

TaskSpec TaskSpec::parse(const std::string& name) {
  const auto v = name.find('v');
  if (v == std::string::npos) throw std::invalid_argument("task name '" + name + "' is not of the form NvM");
  TaskSpec t;
  t.name = name;
  t.n_allies = parse_count(name.substr(0, v), name);
  t.n_enemies = parse_count(name.substr(v + 1), name);
  t.validate();
  return t;
}

void TaskSpec::validate() const {
  if (n_allies == 0 || n_enemies == 0) throw std::invalid_argument("task " + name + ": unit counts must be positive");
  if (horizon == 0 || horizon > 60) throw std::invalid_argument("task " + name + ": horizon must lie in [1, 60]");
  if (!(sight_range > 0.0) || !(attack_range > 0.0) || !(map_size > 0.0))
    throw std::invalid_argument("task " + name + ": ranges and map size must be positive");
}

FeatureLayout TaskSpec::layout() const { return {kOwnFeatures, kEntityFeatures, kEntityFeatures}; }

TaskSet TaskSet::named(const std::string& name) {
  TaskSet set;
  set.name = name;
  if (name == "marine-like") {
    for (const char* t : {"3v3", "5v5", "10v10"}) set.seen.push_back(TaskSpec::parse(t));
    for (const char* t : {"4v4", "6v6", "7v7", "8v8", "12v12"}) set.unseen.push_back(TaskSpec::parse(t));
    return set;
  }
  std::size_t start = 0;
  while (start <= name.size()) {
    const auto comma = name.find(',', start);
    const std::string part = name.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (!part.empty()) set.seen.push_back(TaskSpec::parse(part));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (set.seen.empty()) throw std::invalid_argument("empty task set '" + name + "'");
  return set;
}

const CombatRules& combat_rules() {
  static const CombatRules rules;
  return rules;
}

std::string to_string(Outcome outcome) {
  switch (outcome) {
    case Outcome::Ongoing: return "ongoing";
    case Outcome::Win: return "win";
    case Outcome::Loss: return "loss";
    case Outcome::Timeout: return "timeout";
  }
  return "ongoing";
}

Outcome outcome_from_string(const std::string& s) {
  if (s == "win") return Outcome::Win;
  if (s == "loss") return Outcome::Loss;
  if (s == "timeout") return Outcome::Timeout;
  if (s == "ongoing") return Outcome::Ongoing;
  throw std::invalid_argument("unknown outcome '" + s + "'");
}

double EnvState::total_health() const {
  double total = 0.0;
  for (const auto& u : allies) total += u.health;
  for (const auto& u : enemies) total += u.health;
  return total;
}

EnvState reset_env(const TaskSpec& task, Rng& rng) {
  task.validate();
  EnvState s;
  s.task = task;
  const double cy = 0.5 * task.map_size;
  spawn(s.allies, task.n_allies, 0.5 * task.map_size - 6.0, cy, rng, task.map_size);
  spawn(s.enemies, task.n_enemies, 0.5 * task.map_size + 6.0, cy, rng, task.map_size);
  return s;
}

double reward_scale(const TaskSpec& task) {
  const double m = static_cast<double>(task.n_enemies);
  return kTargetReturn / (m * combat_rules().max_health + kKillBonus * m + kWinBonus);
}

AgentView observe(const EnvState& state, std::size_t agent) {
  const TaskSpec& task = state.task;
  if (agent >= state.allies.size()) throw std::out_of_range("observe: agent index out of range");
  const CombatRules& rules = combat_rules();
  const UnitState& me = state.allies[agent];

  AgentView view;
  view.obs.own.assign(kOwnFeatures, 0.0);
  view.obs.other_agents = FeatureRows(kEntityFeatures);
  view.obs.env_entities = FeatureRows(kEntityFeatures);
  view.obs.other_agents.values.assign((task.n_allies - 1) * kEntityFeatures, 0.0);
  view.obs.env_entities.values.assign(task.n_enemies * kEntityFeatures, 0.0);
  view.avail.assign(action_count(task.n_enemies), 0);

  if (!me.alive) {
    view.avail[kNoop] = 1;
    return view;
  }
  view.obs.own = {me.health / rules.max_health,
                  static_cast<double>(me.cooldown) / static_cast<double>(std::max(rules.cooldown_steps, 1)),
                  me.x / task.map_size, me.y / task.map_size};

  auto fill = [&](std::span<double> row, const UnitState& other) {
    if (!other.alive || distance(me, other) > task.sight_range) return;
    row[0] = 1.0;
    row[1] = (other.x - me.x) / task.sight_range;
    row[2] = (other.y - me.y) / task.sight_range;
    row[3] = other.health / rules.max_health;
  };
  std::size_t k = 0;
  for (std::size_t j = 0; j < state.allies.size(); ++j) {
    if (j == agent) continue;
    fill(view.obs.other_agents.row(k++), state.allies[j]);
  }
  for (std::size_t j = 0; j < state.enemies.size(); ++j) fill(view.obs.env_entities.row(j), state.enemies[j]);

  view.avail[kNoop] = 1;
  view.avail[kStop] = 1;
  for (std::size_t a = kNorth; a <= kWest; ++a) view.avail[a] = move_possible(me, a, task.map_size) ? 1 : 0;
  if (me.cooldown == 0) {
    for (std::size_t j = 0; j < state.enemies.size(); ++j) {
      const UnitState& e = state.enemies[j];
      if (e.alive && distance(me, e) <= std::min(task.attack_range, task.sight_range))
        view.avail[attack_action(j)] = 1;
    }
  }
  return view;
}

FeatureRows state_units(const EnvState& state) {
  const CombatRules& rules = combat_rules();
  const double map = state.task.map_size;
  const double cd = static_cast<double>(std::max(rules.cooldown_steps, 1));
  FeatureRows rows(kStateFeatures);
  rows.values.reserve((state.allies.size() + state.enemies.size()) * kStateFeatures);
  auto push = [&](const UnitState& u, double is_ally) {
    const double v[kStateFeatures] = {u.alive ? 1.0 : 0.0, u.alive ? u.x / map : 0.0, u.alive ? u.y / map : 0.0,
                                      u.health / rules.max_health, static_cast<double>(u.cooldown) / cd, is_ally};
    rows.push(v);
  };
  for (const auto& u : state.allies) push(u, 1.0);
  for (const auto& u : state.enemies) push(u, 0.0);
  return rows;
}

StepResult env_step(EnvState& state, std::span<const std::size_t> joint_action, Rng& rng) {
  if (state.done()) throw std::logic_error("env_step: episode already finished");
  const TaskSpec& task = state.task;
  const CombatRules& rules = combat_rules();
  if (joint_action.size() != state.allies.size())
    throw std::invalid_argument("env_step: expected " + std::to_string(state.allies.size()) + " actions, got " +
                                std::to_string(joint_action.size()));
  for (std::size_t i = 0; i < joint_action.size(); ++i) {
    const AgentView v = observe(state, i);
    if (joint_action[i] >= v.avail.size() || !v.avail[joint_action[i]])
      throw std::invalid_argument("env_step: action " + std::to_string(joint_action[i]) + " unavailable for agent " +
                                  std::to_string(i));
  }

  // Enemy decisions read the pre-step state, like the allies'.
  std::vector<std::size_t> enemy_target(state.enemies.size(), SIZE_MAX);
  std::vector<std::size_t> enemy_move(state.enemies.size(), kStop);
  for (std::size_t e = 0; e < state.enemies.size(); ++e) {
    const UnitState& u = state.enemies[e];
    if (!u.alive) continue;
    std::size_t nearest = SIZE_MAX;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < state.allies.size(); ++a) {
      if (!state.allies[a].alive) continue;
      const double d = distance(u, state.allies[a]);
      if (d < best) best = d, nearest = a;
    }
    if (nearest == SIZE_MAX) continue;
    if (best <= task.attack_range) {
      if (u.cooldown == 0) enemy_target[e] = nearest;
    } else {
      enemy_move[e] = move_toward(state.allies[nearest].x - u.x, state.allies[nearest].y - u.y);
    }
  }

  std::vector<double> ally_damage(state.allies.size(), 0.0), enemy_damage(state.enemies.size(), 0.0);
  std::vector<bool> ally_attacked(state.allies.size(), false), enemy_attacked(state.enemies.size(), false);
  for (std::size_t i = 0; i < state.allies.size(); ++i) {
    const std::size_t a = joint_action[i];
    if (a >= kFixedActions) {
      enemy_damage[a - kFixedActions] += rules.ally_damage;
      ally_attacked[i] = true;
    }
  }
  for (std::size_t e = 0; e < state.enemies.size(); ++e) {
    if (enemy_target[e] == SIZE_MAX) continue;
    // One accuracy draw per attacking enemy, in index order.
    if (rng.uniform() < rules.enemy_accuracy) ally_damage[enemy_target[e]] += rules.enemy_damage;
    enemy_attacked[e] = true;
  }

  for (std::size_t i = 0; i < state.allies.size(); ++i)
    if (state.allies[i].alive) apply_move(state.allies[i], joint_action[i], rules.move_step, task.map_size);
  for (std::size_t e = 0; e < state.enemies.size(); ++e)
    if (state.enemies[e].alive) apply_move(state.enemies[e], enemy_move[e], rules.move_step, task.map_size);

  double dealt = 0.0;
  std::size_t kills = 0;
  auto resolve = [&](std::vector<UnitState>& units, const std::vector<double>& damage,
                     const std::vector<bool>& attacked, bool enemy_side) {
    for (std::size_t k = 0; k < units.size(); ++k) {
      UnitState& u = units[k];
      if (!u.alive) continue;
      const double taken = std::min(u.health, damage[k]);
      u.health -= taken;
      if (enemy_side) dealt += taken;
      if (u.health <= 0.0) {
        u.health = 0.0;
        u.alive = false;
        u.cooldown = 0;
        if (enemy_side) ++kills;
        continue;
      }
      u.cooldown = attacked[k] ? rules.cooldown_steps : std::max(0, u.cooldown - 1);
    }
  };
  resolve(state.enemies, enemy_damage, enemy_attacked, true);
  resolve(state.allies, ally_damage, ally_attacked, false);
  ++state.t;

  const bool enemies_dead = std::none_of(state.enemies.begin(), state.enemies.end(), [](const UnitState& u) { return u.alive; });
  const bool allies_dead = std::none_of(state.allies.begin(), state.allies.end(), [](const UnitState& u) { return u.alive; });
  if (enemies_dead && !allies_dead) state.outcome = Outcome::Win;
  else if (allies_dead) state.outcome = Outcome::Loss;
  else if (state.t >= task.horizon) state.outcome = Outcome::Timeout;

  StepResult r;
  const double raw = dealt + kKillBonus * static_cast<double>(kills) + (state.outcome == Outcome::Win ? kWinBonus : 0.0);
  r.reward = raw * reward_scale(task);
  r.terminal = state.done();
  r.outcome = state.outcome;
  return r;
}

std::string to_string(Quality q) {
  switch (q) {
    case Quality::Expert: return "expert";
    case Quality::Medium: return "medium";
    case Quality::MediumExpert: return "medium-expert";
    case Quality::MediumReplay: return "medium-replay";
    case Quality::Random: return "random";
  }
  return "expert";
}

Quality quality_from_string(const std::string& s) {
  if (s == "expert") return Quality::Expert;
  if (s == "medium") return Quality::Medium;
  if (s == "medium-expert") return Quality::MediumExpert;
  if (s == "medium-replay") return Quality::MediumReplay;
  if (s == "random") return Quality::Random;
  throw std::invalid_argument("unknown quality '" + s + "' (expected expert, medium, medium-expert, medium-replay)");
}

std::size_t scripted_policy(const BehaviorPolicy& policy, const AgentView& view, const TaskSpec& task, Rng& rng) {
  if (view.avail.size() != action_count(task.n_enemies))
    throw std::invalid_argument("scripted_policy: avail mask does not match task " + task.name);
  // Dead agents only have no-op.
  if (view.obs.own[0] <= 0.0) return kNoop;
  switch (policy.quality) {
    case Quality::Random:
      return random_legal(view.avail, rng);
    case Quality::Expert:
      return expert_action(view, task);
    case Quality::Medium: {
      // The draw is taken on every step so streams stay aligned.
      const bool explore = rng.uniform() < policy.epsilon;
      const std::size_t fallback = random_legal(view.avail, rng);
      return explore ? fallback : medium_action(view, task);
    }
    default:
      throw std::invalid_argument("scripted_policy: quality " + to_string(policy.quality) + " is not a policy");
  }
}

double Episode::episode_return() const {
  double total = 0.0;
  for (const auto& s : steps) total += s.reward;
  return total;
}

JointPolicy scripted_joint_policy(BehaviorPolicy policy) {
  return [policy](const EnvState& state, const std::vector<AgentView>& views, Rng& rng) {
    std::vector<std::size_t> actions(views.size());
    for (std::size_t i = 0; i < views.size(); ++i) actions[i] = scripted_policy(policy, views[i], state.task, rng);
    return actions;
  };
}

Episode rollout(const TaskSpec& task, const JointPolicy& policy, std::uint64_t seed) {
  Rng env_rng(stream_seed(seed, 1));
  Rng policy_rng(stream_seed(seed, 2));
  EnvState state = reset_env(task, env_rng);
  Episode ep;
  ep.task = task.name;
  while (!state.done()) {
    EpisodeStep step;
    std::vector<AgentView> views;
    views.reserve(task.n_allies);
    for (std::size_t i = 0; i < task.n_allies; ++i) views.push_back(observe(state, i));
    step.state_units = state_units(state);
    step.actions = policy(state, views, policy_rng);
    for (auto& v : views) {
      step.obs.push_back(std::move(v.obs));
      step.avail.push_back(std::move(v.avail));
    }
    const StepResult r = env_step(state, step.actions, env_rng);
    step.reward = r.reward;
    step.terminal = r.terminal;
    ep.steps.push_back(std::move(step));
  }
  ep.outcome = state.outcome;
  return ep;
}

}  // namespace stairs
