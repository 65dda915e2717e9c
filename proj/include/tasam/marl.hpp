#pragma once

// Multi-agent training loop: one actor per DU, one global critic, per-actor
// world replicas for rollouts, TD-variance gating and SAM/Adam branches.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tasam/env.hpp"
#include "tasam/nn.hpp"
#include "tasam/sac.hpp"
#include "tasam/sam.hpp"

namespace tasam::marl {

struct ConvergenceRule {
  bool enabled = false;
  int window = 50;
  double tolerance = 1e-3;
};

struct TrainConfig {
  int iterations = 1000;              // N_t
  int evaluations_per_actor = 10;     // N_e, episodes per actor per iteration
  int episode_length = 20;            // steps per episode
  int batch_size = 128;               // kappa
  double gamma = 0.99;
  double beta = 0.2;                  // entropy temperature
  double actor_learning_rate = 1e-4;
  double critic_learning_rate = 1e-4;
  std::vector<int> actor_hidden{300, 400, 400};
  std::vector<int> critic_hidden{300, 400, 400};
  std::size_t replay_capacity = 100000;
  double weight_decay = 0.0;          // > 0 only for the L2 baseline
  bool target_network = false;
  double polyak_tau = 0.005;
  bool parallel_rollouts = false;
  sam::SamPolicy sam;
  ConvergenceRule convergence;
  env::ScenarioConfig scenario;
  std::uint64_t seed = 1;

  int num_actors() const { return scenario.num_dus; }  // N_m, one per DU
  void validate() const;
};

// Run modes accepted on the command line: the four SAM modes plus "l2-reg".
inline constexpr double kL2Coefficient = 1e-4;
void apply_mode(TrainConfig& c, const std::string& mode);
std::string mode_name(const TrainConfig& c);

// Seeds both the run streams and the scenario layout.
void set_run_seed(TrainConfig& c, std::uint64_t seed);

nlohmann::json to_json(const sam::SamPolicy& p);
sam::SamPolicy sam_policy_from_json(const nlohmann::json& j, sam::SamPolicy base = {});
nlohmann::json to_json(const TrainConfig& c);
// Missing keys keep the values of `base`.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

struct IterationRecord {
  int iteration = 0;
  std::vector<double> actor_reward;      // mean episode return of each actor's DU
  double mean_reward = 0.0;              // averaged over actors
  std::vector<double> slice_qos;         // mean Q^l seen by the actors this iteration
  std::vector<double> td_variance;       // per actor, after this iteration's TD errors
  std::vector<int> gate_open;            // per actor: actor SAM gate decision
  std::vector<int> actor_sam;            // per actor: update was SAM-perturbed
  int critic_sam = 0;
  double rho_actor = 0.0;
  double rho_critic = 0.0;
  std::vector<double> actor_loss;
  double critic_loss = 0.0;
  int actor_updates = 0;
  int critic_updates = 0;
  double wall_clock_s = 0.0;             // not part of the deterministic record

  // Field-wise equality ignoring wall_clock_s.
  bool same_outcome(const IterationRecord& o) const;
};

struct RunMetrics {
  std::vector<IterationRecord> records;
  std::optional<int> converged_at;

  std::vector<double> mean_reward_trace() const;
  bool same_outcome(const RunMetrics& o) const;
  long gate_open_events() const;
  long sam_perturbations() const;
  // Fraction of iterations in which each actor's gate was open.
  std::vector<double> gate_open_frequency() const;
};

void write_metrics_csv(std::ostream& os, const RunMetrics& m);
std::string metrics_csv_header(int num_actors, int num_slices);

struct AgentState {
  sac::PolicyNet policy;
  nn::AdamState opt;
};

struct CriticState {
  sac::CriticNet critic;
  nn::AdamState opt;
  std::optional<sac::CriticNet> target;
};

struct TrainResult {
  std::vector<AgentState> actors;
  CriticState critic;
  RunMetrics metrics;
  std::vector<sac::ReplayBuffer> local_buffers;
  sac::ReplayBuffer global_buffer{1};
};

// Initial actors and critic, drawn from the run's init stream. Identical
// across modes for a given seed.
std::vector<AgentState> initial_actors(const TrainConfig& c);
CriticState initial_critic(const TrainConfig& c);

TrainResult train(const TrainConfig& c);

// Union of local buffers, merged by arrival sequence, keeping the newest
// `capacity` items. Inputs are not modified.
sac::ReplayBuffer aggregate_experiences(const std::vector<sac::ReplayBuffer>& locals, std::size_t capacity);

// Spread (max - min) of the last `window` mean rewards strictly below tolerance.
bool converged(const RunMetrics& m, int window, double tolerance);

struct EvalStats {
  bool empty = true;
  int episodes = 0;
  double mean_reward = 0.0;   // per-episode return of the global reward
  double std_reward = 0.0;
  std::vector<double> episode_rewards;
  std::vector<double> ue_throughput_bps;           // every UE, every step
  std::vector<std::vector<double>> slice_qos;      // [slice] samples over DUs and steps
  std::vector<double> qos_satisfaction;            // per slice, fraction with Q^l >= q_min
};

// Deterministic-action rollouts on a fresh world; no exploration noise.
EvalStats evaluate(const std::vector<sac::PolicyNet>& policies, const env::ScenarioConfig& scenario, int episodes,
                   int episode_length, std::uint64_t seed);

std::vector<sac::PolicyNet> policies_of(const std::vector<AgentState>& actors);

// Independent stream derivation: splitmix64 of (seed, stream, index).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0);

}  // namespace tasam::marl
