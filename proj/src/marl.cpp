#include "tasam/marl.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <future>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>
#include <type_traits>

#include "tasam/error.hpp"

namespace tasam::marl {

namespace {

// Stream ids for derive_seed.
enum Stream : std::uint64_t {
  kInitActors = 1,
  kInitCritic = 2,
  kRollout = 3,
  kWorld = 4,
  kTd = 5,
  kActorUpdate = 6,
  kCriticUpdate = 7,
  kEvalWorld = 8,
};

template <class T>
void get_key(const nlohmann::json& j, const char* key, T& field, const std::string& prefix) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(prefix + key + ": wrong type");
  }
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ stream) ^ (index * 0xd1b54a32d192ed03ULL));
}

void TrainConfig::validate() const {
  auto need = [](bool ok, const char* msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(iterations >= 1, "iterations: must be at least 1");
  need(evaluations_per_actor >= 1, "evaluations_per_actor: must be at least 1");
  need(episode_length >= 1, "episode_length: must be at least 1");
  need(batch_size >= 1, "batch_size: must be at least 1");
  need(gamma >= 0.0 && gamma <= 1.0, "gamma: must lie in [0,1]");
  need(beta >= 0.0 && std::isfinite(beta), "beta: must be finite and non-negative");
  need(actor_learning_rate > 0.0 && std::isfinite(actor_learning_rate), "actor_learning_rate: must be positive");
  need(critic_learning_rate > 0.0 && std::isfinite(critic_learning_rate), "critic_learning_rate: must be positive");
  for (int h : actor_hidden) need(h >= 1, "actor_hidden: layer sizes must be positive");
  for (int h : critic_hidden) need(h >= 1, "critic_hidden: layer sizes must be positive");
  need(replay_capacity >= 1, "replay_capacity: must be at least 1");
  need(weight_decay >= 0.0 && std::isfinite(weight_decay), "weight_decay: must be non-negative");
  need(polyak_tau >= 0.0 && polyak_tau <= 1.0, "polyak_tau: must lie in [0,1]");
  need(convergence.window >= 2, "convergence.window: must be at least 2");
  need(convergence.tolerance > 0.0, "convergence.tolerance: must be positive");
  sam.validate();
  scenario.validate();
}

void apply_mode(TrainConfig& c, const std::string& mode) {
  if (mode == "l2-reg") {
    c.sam.mode = sam::Mode::no_sam;
    c.weight_decay = kL2Coefficient;
    return;
  }
  c.sam.mode = sam::mode_from_string(mode);
  c.weight_decay = 0.0;
}

std::string mode_name(const TrainConfig& c) {
  if (c.sam.mode == sam::Mode::no_sam && c.weight_decay > 0.0) return "l2-reg";
  return sam::to_string(c.sam.mode);
}

void set_run_seed(TrainConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.scenario.seed = seed;
}

nlohmann::json to_json(const sam::SamPolicy& p) {
  return {{"rho_actor_start", p.rho_actor_start},
          {"rho_actor_end", p.rho_actor_end},
          {"rho_critic_start", p.rho_critic_start},
          {"rho_critic_end", p.rho_critic_end},
          {"schedule", sam::to_string(p.schedule)},
          {"gate_mode", sam::to_string(p.gate_mode)},
          {"gate_threshold", p.gate_threshold},
          {"gate_window", p.gate_window},
          {"mode", sam::to_string(p.mode)},
          {"selective", p.selective}};
}

sam::SamPolicy sam_policy_from_json(const nlohmann::json& j, sam::SamPolicy p) {
  if (!j.is_object()) throw ConfigError("sam: expected an object");
  const std::string pre = "sam.";
  get_key(j, "rho_actor_start", p.rho_actor_start, pre);
  get_key(j, "rho_actor_end", p.rho_actor_end, pre);
  get_key(j, "rho_critic_start", p.rho_critic_start, pre);
  get_key(j, "rho_critic_end", p.rho_critic_end, pre);
  get_key(j, "gate_threshold", p.gate_threshold, pre);
  get_key(j, "gate_window", p.gate_window, pre);
  get_key(j, "selective", p.selective, pre);
  std::string s;
  if (j.contains("schedule")) {
    get_key(j, "schedule", s, pre);
    p.schedule = sam::schedule_from_string(s);
  }
  if (j.contains("gate_mode")) {
    get_key(j, "gate_mode", s, pre);
    p.gate_mode = sam::gate_mode_from_string(s);
  }
  if (j.contains("mode")) {
    get_key(j, "mode", s, pre);
    p.mode = sam::mode_from_string(s);
  }
  return p;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"seed", c.seed},
          {"iterations", c.iterations},
          {"evaluations_per_actor", c.evaluations_per_actor},
          {"episode_length", c.episode_length},
          {"batch_size", c.batch_size},
          {"gamma", c.gamma},
          {"beta", c.beta},
          {"actor_learning_rate", c.actor_learning_rate},
          {"critic_learning_rate", c.critic_learning_rate},
          {"actor_hidden", c.actor_hidden},
          {"critic_hidden", c.critic_hidden},
          {"replay_capacity", c.replay_capacity},
          {"weight_decay", c.weight_decay},
          {"target_network", c.target_network},
          {"polyak_tau", c.polyak_tau},
          {"parallel_rollouts", c.parallel_rollouts},
          {"convergence",
           {{"enabled", c.convergence.enabled},
            {"window", c.convergence.window},
            {"tolerance", c.convergence.tolerance}}},
          {"sam", to_json(c.sam)},
          {"scenario", env::to_json(c.scenario)}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  if (!j.is_object()) throw ConfigError("config: expected an object");
  static const char* known[] = {"seed", "iterations", "evaluations_per_actor", "episode_length", "batch_size",
                                "gamma", "beta", "actor_learning_rate", "critic_learning_rate", "actor_hidden",
                                "critic_hidden", "replay_capacity", "weight_decay", "target_network", "polyak_tau",
                                "parallel_rollouts", "convergence", "sam", "scenario", "mode", "preset"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return it.key() == k; }) ==
        std::end(known))
      throw ConfigError(it.key() + ": unknown key");
  }
  const std::string pre;
  get_key(j, "seed", c.seed, pre);
  get_key(j, "iterations", c.iterations, pre);
  get_key(j, "evaluations_per_actor", c.evaluations_per_actor, pre);
  get_key(j, "episode_length", c.episode_length, pre);
  get_key(j, "batch_size", c.batch_size, pre);
  get_key(j, "gamma", c.gamma, pre);
  get_key(j, "beta", c.beta, pre);
  get_key(j, "actor_learning_rate", c.actor_learning_rate, pre);
  get_key(j, "critic_learning_rate", c.critic_learning_rate, pre);
  get_key(j, "actor_hidden", c.actor_hidden, pre);
  get_key(j, "critic_hidden", c.critic_hidden, pre);
  get_key(j, "replay_capacity", c.replay_capacity, pre);
  get_key(j, "weight_decay", c.weight_decay, pre);
  get_key(j, "target_network", c.target_network, pre);
  get_key(j, "polyak_tau", c.polyak_tau, pre);
  get_key(j, "parallel_rollouts", c.parallel_rollouts, pre);
  if (j.contains("convergence")) {
    const auto& cj = j.at("convergence");
    get_key(cj, "enabled", c.convergence.enabled, "convergence.");
    get_key(cj, "window", c.convergence.window, "convergence.");
    get_key(cj, "tolerance", c.convergence.tolerance, "convergence.");
  }
  if (j.contains("sam")) c.sam = sam_policy_from_json(j.at("sam"), c.sam);
  if (j.contains("scenario")) c.scenario = env::scenario_from_json(j.at("scenario"), c.scenario);
  if (j.contains("mode")) {
    std::string m;
    get_key(j, "mode", m, pre);
    apply_mode(c, m);
  }
  return c;
}

bool IterationRecord::same_outcome(const IterationRecord& o) const {
  return iteration == o.iteration && actor_reward == o.actor_reward && mean_reward == o.mean_reward &&
         slice_qos == o.slice_qos && td_variance == o.td_variance && gate_open == o.gate_open &&
         actor_sam == o.actor_sam && critic_sam == o.critic_sam && rho_actor == o.rho_actor &&
         rho_critic == o.rho_critic && actor_loss == o.actor_loss && critic_loss == o.critic_loss &&
         actor_updates == o.actor_updates && critic_updates == o.critic_updates;
}

std::vector<double> RunMetrics::mean_reward_trace() const {
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.mean_reward);
  return out;
}

bool RunMetrics::same_outcome(const RunMetrics& o) const {
  if (records.size() != o.records.size() || converged_at != o.converged_at) return false;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (!records[i].same_outcome(o.records[i])) return false;
  return true;
}

long RunMetrics::gate_open_events() const {
  long n = 0;
  for (const auto& r : records) n += std::accumulate(r.gate_open.begin(), r.gate_open.end(), 0L);
  return n;
}

long RunMetrics::sam_perturbations() const {
  long n = 0;
  for (const auto& r : records) n += std::accumulate(r.actor_sam.begin(), r.actor_sam.end(), 0L) + r.critic_sam;
  return n;
}

std::vector<double> RunMetrics::gate_open_frequency() const {
  if (records.empty()) return {};
  std::vector<double> f(records.front().gate_open.size(), 0.0);
  for (const auto& r : records)
    for (std::size_t i = 0; i < f.size(); ++i) f[i] += r.gate_open[i];
  for (double& x : f) x /= static_cast<double>(records.size());
  return f;
}

std::string metrics_csv_header(int num_actors, int num_slices) {
  std::ostringstream os;
  os << "iteration,mean_reward";
  for (int i = 0; i < num_actors; ++i) os << ",reward_a" << i;
  for (int l = 0; l < num_slices; ++l) os << ",qos_s" << l;
  for (int i = 0; i < num_actors; ++i) os << ",td_var_a" << i;
  for (int i = 0; i < num_actors; ++i) os << ",gate_a" << i;
  for (int i = 0; i < num_actors; ++i) os << ",sam_a" << i;
  os << ",critic_sam,rho_actor,rho_critic";
  for (int i = 0; i < num_actors; ++i) os << ",actor_loss_a" << i;
  os << ",critic_loss";
  return os.str();
}

void write_metrics_csv(std::ostream& os, const RunMetrics& m) {
  const int A = m.records.empty() ? 0 : static_cast<int>(m.records.front().actor_reward.size());
  const int L = m.records.empty() ? 0 : static_cast<int>(m.records.front().slice_qos.size());
  os << metrics_csv_header(A, L) << '\n';
  os << std::setprecision(17);
  for (const auto& r : m.records) {
    os << r.iteration << ',' << r.mean_reward;
    for (double v : r.actor_reward) os << ',' << v;
    for (double v : r.slice_qos) os << ',' << v;
    for (double v : r.td_variance) os << ',' << v;
    for (int v : r.gate_open) os << ',' << v;
    for (int v : r.actor_sam) os << ',' << v;
    os << ',' << r.critic_sam << ',' << r.rho_actor << ',' << r.rho_critic;
    for (double v : r.actor_loss) os << ',' << v;
    os << ',' << r.critic_loss << '\n';
  }
}

std::vector<AgentState> initial_actors(const TrainConfig& c) {
  std::mt19937_64 rng(derive_seed(c.seed, kInitActors));
  std::vector<AgentState> out;
  for (int i = 0; i < c.num_actors(); ++i) {
    auto p = sac::make_policy(c.scenario.state_dim(), c.scenario.action_dim(), c.actor_hidden, rng);
    auto opt = nn::make_adam_state(p.trunk, c.actor_learning_rate);
    out.push_back({std::move(p), std::move(opt)});
  }
  return out;
}

CriticState initial_critic(const TrainConfig& c) {
  std::mt19937_64 rng(derive_seed(c.seed, kInitCritic));
  CriticState cs;
  cs.critic = sac::make_critic(c.scenario.state_dim(), c.scenario.action_dim(), c.critic_hidden, rng);
  cs.opt = nn::make_adam_state(cs.critic.net, c.critic_learning_rate);
  if (c.target_network) cs.target = cs.critic;
  return cs;
}

std::vector<sac::PolicyNet> policies_of(const std::vector<AgentState>& actors) {
  std::vector<sac::PolicyNet> out;
  out.reserve(actors.size());
  for (const auto& a : actors) out.push_back(a.policy);
  return out;
}

sac::ReplayBuffer aggregate_experiences(const std::vector<sac::ReplayBuffer>& locals, std::size_t capacity) {
  std::vector<sac::Transition> all;
  for (const auto& b : locals) {
    auto items = b.contents();
    all.insert(all.end(), std::make_move_iterator(items.begin()), std::make_move_iterator(items.end()));
  }
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.seq < b.seq; });
  sac::ReplayBuffer out(capacity);
  for (auto& t : all) out.push(std::move(t));
  return out;
}

bool converged(const RunMetrics& m, int window, double tolerance) {
  if (window < 2) throw ConfigError("converged: window must be at least 2");
  if (static_cast<int>(m.records.size()) < window) return false;
  auto first = m.records.end() - window;
  auto [lo, hi] = std::minmax_element(first, m.records.end(), [](const auto& a, const auto& b) {
    return a.mean_reward < b.mean_reward;
  });
  return hi->mean_reward - lo->mean_reward < tolerance;
}

namespace {

struct Rollout {
  sac::Batch fresh;
  double return_sum = 0.0;
  std::vector<double> qos_sum;
  int qos_count = 0;
};

// Actor `self` collects N_e episodes on its own replica; every DU acts with
// its current stochastic policy, only the own DU's transitions are kept.
Rollout collect(env::World& world, std::mt19937_64& rng, const std::vector<sac::PolicyNet>& policies, int self,
                int episodes, int horizon) {
  Rollout out;
  const int M = world.config().num_dus;
  const int L = world.config().slice_count();
  out.qos_sum.assign(static_cast<std::size_t>(L), 0.0);
  const double scale = world.count_scale();
  std::vector<Eigen::VectorXd> feats(static_cast<std::size_t>(M));
  std::vector<Eigen::VectorXd> actions(static_cast<std::size_t>(M));
  for (int e = 0; e < episodes; ++e) {
    for (int h = 0; h < horizon; ++h) {
      for (int m = 0; m < M; ++m) {
        feats[static_cast<std::size_t>(m)] = env::features(world.observe(m), scale);
        actions[static_cast<std::size_t>(m)] =
            sac::sample_action(policies[static_cast<std::size_t>(m)], feats[static_cast<std::size_t>(m)], rng).action;
      }
      env::StepResult res = world.step(actions);
      const auto s = static_cast<std::size_t>(self);
      sac::Transition t;
      t.s = feats[s];
      t.a = actions[s];
      t.s_next = env::features(res.next_states[s], scale);
      t.r = res.du_rewards[s];
      t.done = h == horizon - 1;
      t.agent = self;
      out.fresh.push_back(std::move(t));
      out.return_sum += res.du_rewards[s];
      for (int l = 0; l < L; ++l) out.qos_sum[static_cast<std::size_t>(l)] += res.slice_qos[s][static_cast<std::size_t>(l)];
      ++out.qos_count;
    }
  }
  return out;
}

std::string where(int t, int actor) {
  std::ostringstream os;
  os << "iteration " << t;
  if (actor >= 0) os << ", actor " << actor;
  return os.str();
}

}  // namespace

TrainResult train(const TrainConfig& c) {
  c.validate();
  const int M = c.num_actors();
  const int L = c.scenario.slice_count();
  const int A = c.scenario.action_dim();
  const long horizon = std::max<long>(c.iterations - 1, 1);

  TrainResult R;
  R.actors = initial_actors(c);
  R.critic = initial_critic(c);
  R.local_buffers.assign(static_cast<std::size_t>(M), sac::ReplayBuffer(c.replay_capacity));
  R.global_buffer = sac::ReplayBuffer(c.replay_capacity);

  std::vector<env::World> worlds;
  std::vector<std::mt19937_64> rollout_rng, td_rng, update_rng;
  std::vector<sam::TdStats> td_stats;
  for (int i = 0; i < M; ++i) {
    const auto ui = static_cast<std::uint64_t>(i);
    worlds.push_back(env::World::create(c.scenario, derive_seed(c.seed, kWorld, ui)));
    rollout_rng.emplace_back(derive_seed(c.seed, kRollout, ui));
    td_rng.emplace_back(derive_seed(c.seed, kTd, ui));
    update_rng.emplace_back(derive_seed(c.seed, kActorUpdate, ui));
    td_stats.emplace_back(static_cast<std::size_t>(c.sam.gate_window));
  }
  std::mt19937_64 critic_rng(derive_seed(c.seed, kCriticUpdate));
  std::int64_t next_seq = 0;

  for (int t = 0; t < c.iterations; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    IterationRecord rec;
    rec.iteration = t;
    rec.rho_actor = sam::rho_at(c.sam, sam::Component::actor, t, horizon);
    rec.rho_critic = sam::rho_at(c.sam, sam::Component::critic, t, horizon);

    // (i) rollouts against read-only snapshots.
    const std::vector<sac::PolicyNet> snapshot = policies_of(R.actors);
    std::vector<Rollout> rollouts(static_cast<std::size_t>(M));
    auto run_actor = [&](int i) {
      try {
        return collect(worlds[static_cast<std::size_t>(i)], rollout_rng[static_cast<std::size_t>(i)], snapshot, i,
                       c.evaluations_per_actor, c.episode_length);
      } catch (const ProtocolError& e) {
        throw ProtocolError(where(t, i) + ": " + e.what());
      }
    };
    if (c.parallel_rollouts && M > 1) {
      std::vector<std::future<Rollout>> futs;
      for (int i = 0; i < M; ++i) futs.push_back(std::async(std::launch::async, run_actor, i));
      for (int i = 0; i < M; ++i) rollouts[static_cast<std::size_t>(i)] = futs[static_cast<std::size_t>(i)].get();
    } else {
      for (int i = 0; i < M; ++i) rollouts[static_cast<std::size_t>(i)] = run_actor(i);
    }

    rec.slice_qos.assign(static_cast<std::size_t>(L), 0.0);
    int qos_count = 0;
    for (int i = 0; i < M; ++i) {
      auto& ro = rollouts[static_cast<std::size_t>(i)];
      for (auto& tr : ro.fresh) tr.seq = next_seq++;
      rec.actor_reward.push_back(ro.return_sum / c.evaluations_per_actor);
      for (int l = 0; l < L; ++l) rec.slice_qos[static_cast<std::size_t>(l)] += ro.qos_sum[static_cast<std::size_t>(l)];
      qos_count += ro.qos_count;
    }
    for (double& q : rec.slice_qos) q /= std::max(qos_count, 1);
    rec.mean_reward = std::accumulate(rec.actor_reward.begin(), rec.actor_reward.end(), 0.0) / M;

    // (ii) TD errors on fresh transitions, then the gate at one sync point.
    const sac::CriticNet critic_snapshot = R.critic.critic;
    for (int i = 0; i < M; ++i) {
      const auto s = static_cast<std::size_t>(i);
      auto deltas = sac::td_errors(rollouts[s].fresh, snapshot[s], critic_snapshot, c.beta, c.gamma, td_rng[s]);
      for (double d : deltas) td_stats[s].record(d);
      rec.td_variance.push_back(td_stats[s].variance());
    }
    for (int i = 0; i < M; ++i) {
      const auto s = static_cast<std::size_t>(i);
      bool open = c.sam.actor_uses_sam() && (!c.sam.selective || sam::gate_open(td_stats[s], c.sam, rec.td_variance));
      rec.gate_open.push_back(open ? 1 : 0);
    }

    // Actor updates, each from its own buffer.
    for (int i = 0; i < M; ++i) {
      const auto s = static_cast<std::size_t>(i);
      for (const auto& tr : rollouts[s].fresh) R.local_buffers[s].push(tr);
      const std::size_t kappa = std::min<std::size_t>(static_cast<std::size_t>(c.batch_size), R.local_buffers[s].size());
      sac::Batch batch = *R.local_buffers[s].sample(kappa, update_rng[s]);
      const Eigen::MatrixXd states = sac::stack_states(batch);
      std::normal_distribution<double> nd(0.0, 1.0);
      Eigen::MatrixXd noise(A, static_cast<Eigen::Index>(kappa));
      for (Eigen::Index j = 0; j < noise.cols(); ++j)
        for (Eigen::Index d = 0; d < A; ++d) noise(d, j) = nd(update_rng[s]);
      auto loss = [&](const nn::MlpParams& p) {
        sac::PolicyNet net{p, A};
        nn::LossGrad lg = sac::policy_loss_and_grad(states, noise, net, critic_snapshot, c.beta);
        if (c.weight_decay > 0.0) {
          nn::add_weight_decay(lg.grads, p, c.weight_decay);
          lg.loss += 0.5 * c.weight_decay * nn::flatten(p).squaredNorm();
        }
        return lg;
      };
      try {
        auto& agent = R.actors[s];
        sam::SamStepResult step = rec.gate_open[s] ? sam::sam_step(agent.policy.trunk, loss, rec.rho_actor, agent.opt)
                                                   : sam::adam_only_step(agent.policy.trunk, loss, agent.opt);
        agent.policy.trunk = std::move(step.params);
        agent.opt = std::move(step.state);
        rec.actor_sam.push_back(step.perturbed ? 1 : 0);
        rec.actor_loss.push_back(step.loss);
      } catch (const NumericError& e) {
        throw NumericError(where(t, i) + ": " + e.what());
      }
      ++rec.actor_updates;
    }

    // (iii) global critic from the pooled experiences.
    for (const auto& ro : rollouts)
      for (const auto& tr : ro.fresh) R.global_buffer.push(tr);
    {
      const std::size_t kappa = std::min<std::size_t>(static_cast<std::size_t>(c.batch_size), R.global_buffer.size());
      sac::Batch batch = *R.global_buffer.sample(kappa, critic_rng);
      const std::vector<sac::PolicyNet> current = policies_of(R.actors);
      const sac::CriticNet& boot = R.critic.target ? *R.critic.target : critic_snapshot;
      const Eigen::VectorXd y = sac::critic_target(batch, current, boot, c.beta, c.gamma, critic_rng);
      auto loss = [&](const nn::MlpParams& p) {
        sac::CriticNet net{p, critic_snapshot.state_dim, critic_snapshot.action_dim};
        nn::LossGrad lg = sac::critic_loss_and_grad(batch, net, y);
        if (c.weight_decay > 0.0) {
          nn::add_weight_decay(lg.grads, p, c.weight_decay);
          lg.loss += 0.5 * c.weight_decay * nn::flatten(p).squaredNorm();
        }
        return lg;
      };
      try {
        sam::SamStepResult step = c.sam.critic_uses_sam()
                                      ? sam::sam_step(R.critic.critic.net, loss, rec.rho_critic, R.critic.opt)
                                      : sam::adam_only_step(R.critic.critic.net, loss, R.critic.opt);
        R.critic.critic.net = std::move(step.params);
        R.critic.opt = std::move(step.state);
        rec.critic_sam = step.perturbed ? 1 : 0;
        rec.critic_loss = step.loss;
      } catch (const NumericError& e) {
        throw NumericError(where(t, -1) + ", critic: " + e.what());
      }
      if (R.critic.target) sac::polyak_update(*R.critic.target, R.critic.critic, c.polyak_tau);
      ++rec.critic_updates;
    }

    rec.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    R.metrics.records.push_back(std::move(rec));
    if (c.convergence.enabled && converged(R.metrics, c.convergence.window, c.convergence.tolerance)) {
      R.metrics.converged_at = t;
      break;
    }
  }
  return R;
}

EvalStats evaluate(const std::vector<sac::PolicyNet>& policies, const env::ScenarioConfig& scenario, int episodes,
                   int episode_length, std::uint64_t seed) {
  EvalStats st;
  if (episodes <= 0) return st;
  if (static_cast<int>(policies.size()) != scenario.num_dus)
    throw ConfigError("evaluate: need one policy per DU");
  if (episode_length < 1) throw ConfigError("evaluate: episode_length must be at least 1");
  env::World world = env::World::create(scenario, derive_seed(seed, kEvalWorld));
  const int M = scenario.num_dus;
  const int L = scenario.slice_count();
  st.slice_qos.assign(static_cast<std::size_t>(L), {});
  const double scale = world.count_scale();
  std::vector<Eigen::VectorXd> actions(static_cast<std::size_t>(M));
  for (int e = 0; e < episodes; ++e) {
    double ret = 0.0;
    for (int h = 0; h < episode_length; ++h) {
      for (int m = 0; m < M; ++m)
        actions[static_cast<std::size_t>(m)] =
            sac::deterministic_action(policies[static_cast<std::size_t>(m)], env::features(world.observe(m), scale));
      env::StepResult res = world.step(actions);
      ret += res.global_reward;
      st.ue_throughput_bps.insert(st.ue_throughput_bps.end(), res.ue_rates_bps.begin(), res.ue_rates_bps.end());
      for (int m = 0; m < M; ++m)
        for (int l = 0; l < L; ++l)
          st.slice_qos[static_cast<std::size_t>(l)].push_back(res.slice_qos[static_cast<std::size_t>(m)][static_cast<std::size_t>(l)]);
    }
    st.episode_rewards.push_back(ret);
  }
  st.empty = false;
  st.episodes = episodes;
  const double n = static_cast<double>(episodes);
  st.mean_reward = std::accumulate(st.episode_rewards.begin(), st.episode_rewards.end(), 0.0) / n;
  double ss = 0.0;
  for (double r : st.episode_rewards) ss += (r - st.mean_reward) * (r - st.mean_reward);
  st.std_reward = episodes > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  for (int l = 0; l < L; ++l) {
    const auto& q = st.slice_qos[static_cast<std::size_t>(l)];
    const double qmin = scenario.slices[static_cast<std::size_t>(l)].q_min;
    const auto ok = std::count_if(q.begin(), q.end(), [&](double v) { return v >= qmin; });
    st.qos_satisfaction.push_back(q.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(q.size()));
  }
  return st;
}

}  // namespace tasam::marl
