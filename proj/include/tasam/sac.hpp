#pragma once

// Soft actor-critic pieces: sigmoid-squashed Gaussian policy, single
// Q critic, entropy-regularized targets, reparameterized policy gradient,
// TD errors and the replay buffer.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "tasam/nn.hpp"

namespace tasam::sac {

inline constexpr double kLogStdMin = -20.0;
inline constexpr double kLogStdMax = 2.0;
// Pre-squash values are clipped here so that sigmoid stays strictly inside (0,1).
inline constexpr double kPreSquashClip = 30.0;

struct PolicyNet {
  nn::MlpParams trunk;  // state -> [mean (A), log-stddev (A)]
  int action_dim = 0;

  int state_dim() const { return trunk.input_size(); }
};

struct CriticNet {
  nn::MlpParams net;  // [state, action] -> Q
  int state_dim = 0;
  int action_dim = 0;
};

PolicyNet make_policy(int state_dim, int action_dim, const std::vector<int>& hidden, std::mt19937_64& rng);
CriticNet make_critic(int state_dim, int action_dim, const std::vector<int>& hidden, std::mt19937_64& rng);

struct GaussianHead {
  Eigen::MatrixXd mean;     // A x n
  Eigen::MatrixXd log_std;  // A x n, clamped
  Eigen::MatrixXd raw_log_std;
};

GaussianHead policy_head(const PolicyNet& policy, const Eigen::MatrixXd& states);

struct ActionSample {
  Eigen::VectorXd action;  // in (0,1)^A
  double log_prob = 0.0;
};

// a = sigmoid(mean + std * noise) with the change-of-variables log density.
ActionSample action_from_noise(const PolicyNet& policy, const Eigen::VectorXd& state, const Eigen::VectorXd& noise);
ActionSample sample_action(const PolicyNet& policy, const Eigen::VectorXd& state, std::mt19937_64& rng);

// Log density of an arbitrary action in (0,1)^A under the policy.
double log_prob_of(const PolicyNet& policy, const Eigen::VectorXd& state, const Eigen::VectorXd& action);

// sigmoid(mean), no sampling.
Eigen::VectorXd deterministic_action(const PolicyNet& policy, const Eigen::VectorXd& state);

double q_value(const CriticNet& critic, const Eigen::VectorXd& state, const Eigen::VectorXd& action);

struct Transition {
  Eigen::VectorXd s;       // encoded NetworkState
  Eigen::VectorXd a;
  Eigen::VectorXd s_next;
  double r = 0.0;
  bool done = false;
  int agent = 0;           // DU that produced it
  std::int64_t seq = 0;    // arrival order, used when merging buffers
};

using Batch = std::vector<Transition>;

// y = r + gamma * (1 - done) * Q(s', a') - beta * log pi(a | s), with a'
// freshly sampled from the owning agent's policy at s'.
Eigen::VectorXd critic_target(const Batch& batch, std::span<const PolicyNet> policies,
                              const CriticNet& bootstrap_critic, double beta, double gamma, std::mt19937_64& rng);

// Same formula with the bootstrap value and log-probabilities supplied.
double target_from_values(double r, double q_next, double log_prob, double beta, double gamma, bool done);

// Mean squared error against detached targets.
nn::LossGrad critic_loss_and_grad(const Batch& batch, const CriticNet& critic, const Eigen::VectorXd& targets);

// Mean of beta * log pi(a|s) - Q(s,a) under a = sigmoid(mean + std * noise)
// with `noise` (A x n) held fixed.
nn::LossGrad policy_loss_and_grad(const Eigen::MatrixXd& states, const Eigen::MatrixXd& noise,
                                  const PolicyNet& policy, const CriticNet& critic, double beta);

Eigen::MatrixXd stack_states(const Batch& batch);

double td_from_values(double r, double v_s, double v_next, double gamma, bool done);

// delta = r + gamma * V(s') - V(s) with V(x) = Q(x, a~) - beta * log pi(a~|x).
double td_error(const Transition& t, const PolicyNet& policy, const CriticNet& critic, double beta, double gamma,
                std::mt19937_64& rng);

// Batched td_error; equal to calling td_error on each element in order.
std::vector<double> td_errors(const Batch& batch, const PolicyNet& policy, const CriticNet& critic, double beta,
                              double gamma, std::mt19937_64& rng);

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 100000);

  void push(Transition t);
  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return items_.empty(); }

  // Uniform without replacement; nullopt when fewer than n items are stored.
  std::optional<Batch> sample(std::size_t n, std::mt19937_64& rng) const;

  // Oldest first.
  const Transition& at(std::size_t i) const;
  std::vector<Transition> contents() const;

 private:
  std::size_t capacity_;
  std::vector<Transition> items_;  // ring storage
  std::size_t head_ = 0;           // index of the oldest item once full
};

// Soft copy target <- (1 - tau) * target + tau * source.
void polyak_update(CriticNet& target, const CriticNet& source, double tau);

}  // namespace tasam::sac
