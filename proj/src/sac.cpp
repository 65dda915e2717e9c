#include "tasam/sac.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "tasam/error.hpp"

namespace tasam::sac {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * log(2 pi)

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// log(a (1 - a)) for a = sigmoid(u), computed from u.
double log_squash_jacobian(double u) { return -softplus(-u) - softplus(u); }

Eigen::VectorXd standard_normal(int n, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = nd(rng);
  return v;
}

void check_state(const PolicyNet& policy, const Eigen::VectorXd& s) {
  if (s.size() != policy.state_dim()) {
    std::ostringstream os;
    os << "policy state size " << s.size() << " != " << policy.state_dim();
    throw ConfigError(os.str());
  }
}

Eigen::MatrixXd critic_inputs(const Eigen::MatrixXd& states, const Eigen::MatrixXd& actions) {
  Eigen::MatrixXd x(states.rows() + actions.rows(), states.cols());
  x.topRows(states.rows()) = states;
  x.bottomRows(actions.rows()) = actions;
  return x;
}

Eigen::VectorXd q_batch(const CriticNet& critic, const Eigen::MatrixXd& states, const Eigen::MatrixXd& actions) {
  return nn::forward_batch(critic.net, critic_inputs(states, actions)).output().row(0).transpose();
}

struct SampledBatch {
  Eigen::MatrixXd actions;
  Eigen::VectorXd log_probs;
};

// Columns of `noise` pair with columns of `states`.
SampledBatch actions_from_noise(const PolicyNet& policy, const Eigen::MatrixXd& states, const Eigen::MatrixXd& noise) {
  GaussianHead h = policy_head(policy, states);
  const Eigen::Index A = policy.action_dim;
  SampledBatch out{Eigen::MatrixXd(A, states.cols()), Eigen::VectorXd::Zero(states.cols())};
  for (Eigen::Index j = 0; j < states.cols(); ++j) {
    double lp = 0.0;
    for (Eigen::Index d = 0; d < A; ++d) {
      double xi = noise(d, j);
      double u = std::clamp(h.mean(d, j) + std::exp(h.log_std(d, j)) * xi, -kPreSquashClip, kPreSquashClip);
      out.actions(d, j) = sigmoid(u);
      lp += -0.5 * xi * xi - h.log_std(d, j) - kHalfLog2Pi - log_squash_jacobian(u);
    }
    out.log_probs(j) = lp;
  }
  return out;
}

Eigen::VectorXd log_probs_of(const PolicyNet& policy, const Eigen::MatrixXd& states, const Eigen::MatrixXd& actions) {
  GaussianHead h = policy_head(policy, states);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(states.cols());
  for (Eigen::Index j = 0; j < states.cols(); ++j) {
    double lp = 0.0;
    for (Eigen::Index d = 0; d < policy.action_dim; ++d) {
      double a = actions(d, j);
      double u = std::log(a) - std::log1p(-a);
      double z = (u - h.mean(d, j)) * std::exp(-h.log_std(d, j));
      lp += -0.5 * z * z - h.log_std(d, j) - kHalfLog2Pi - log_squash_jacobian(u);
    }
    out(j) = lp;
  }
  return out;
}

}  // namespace

PolicyNet make_policy(int state_dim, int action_dim, const std::vector<int>& hidden, std::mt19937_64& rng) {
  if (state_dim < 1 || action_dim < 1) throw ConfigError("policy dimensions must be positive");
  std::vector<int> sizes{state_dim};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(2 * action_dim);
  return PolicyNet{nn::make_mlp(sizes, nn::Activation::tanh, nn::Activation::identity, rng), action_dim};
}

CriticNet make_critic(int state_dim, int action_dim, const std::vector<int>& hidden, std::mt19937_64& rng) {
  if (state_dim < 1 || action_dim < 1) throw ConfigError("critic dimensions must be positive");
  std::vector<int> sizes{state_dim + action_dim};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(1);
  return CriticNet{nn::make_mlp(sizes, nn::Activation::tanh, nn::Activation::identity, rng), state_dim, action_dim};
}

GaussianHead policy_head(const PolicyNet& policy, const Eigen::MatrixXd& states) {
  if (states.rows() != policy.state_dim()) throw ConfigError("policy state size mismatch");
  nn::Tape tape = nn::forward_batch(policy.trunk, states);
  const Eigen::Index A = policy.action_dim;
  GaussianHead h;
  h.mean = tape.output().topRows(A);
  h.raw_log_std = tape.output().bottomRows(A);
  h.log_std = h.raw_log_std.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  return h;
}

ActionSample action_from_noise(const PolicyNet& policy, const Eigen::VectorXd& state, const Eigen::VectorXd& noise) {
  check_state(policy, state);
  if (noise.size() != policy.action_dim) throw ConfigError("noise size must equal the action size");
  SampledBatch b = actions_from_noise(policy, state, noise);
  return ActionSample{b.actions.col(0), b.log_probs(0)};
}

ActionSample sample_action(const PolicyNet& policy, const Eigen::VectorXd& state, std::mt19937_64& rng) {
  return action_from_noise(policy, state, standard_normal(policy.action_dim, rng));
}

double log_prob_of(const PolicyNet& policy, const Eigen::VectorXd& state, const Eigen::VectorXd& action) {
  check_state(policy, state);
  if (action.size() != policy.action_dim) throw ConfigError("action size mismatch");
  for (Eigen::Index d = 0; d < action.size(); ++d)
    if (!(action(d) > 0.0 && action(d) < 1.0)) throw ConfigError("action entries must lie in (0,1)");
  return log_probs_of(policy, state, action)(0);
}

Eigen::VectorXd deterministic_action(const PolicyNet& policy, const Eigen::VectorXd& state) {
  check_state(policy, state);
  GaussianHead h = policy_head(policy, state);
  Eigen::VectorXd a(policy.action_dim);
  for (Eigen::Index d = 0; d < a.size(); ++d) a(d) = sigmoid(std::clamp(h.mean(d, 0), -kPreSquashClip, kPreSquashClip));
  return a;
}

double q_value(const CriticNet& critic, const Eigen::VectorXd& state, const Eigen::VectorXd& action) {
  if (state.size() != critic.state_dim || action.size() != critic.action_dim)
    throw ConfigError("critic input size mismatch");
  Eigen::VectorXd x(state.size() + action.size());
  x << state, action;
  return nn::forward(critic.net, x)(0);
}

Eigen::MatrixXd stack_states(const Batch& batch) {
  if (batch.empty()) return {};
  Eigen::MatrixXd m(batch.front().s.size(), static_cast<Eigen::Index>(batch.size()));
  for (std::size_t j = 0; j < batch.size(); ++j) m.col(static_cast<Eigen::Index>(j)) = batch[j].s;
  return m;
}

namespace {

Eigen::MatrixXd stack(const Batch& batch, Eigen::VectorXd Transition::*field) {
  Eigen::MatrixXd m((batch.front().*field).size(), static_cast<Eigen::Index>(batch.size()));
  for (std::size_t j = 0; j < batch.size(); ++j) m.col(static_cast<Eigen::Index>(j)) = batch[j].*field;
  return m;
}

}  // namespace

double target_from_values(double r, double q_next, double log_prob, double beta, double gamma, bool done) {
  return r + (done ? 0.0 : gamma * q_next) - beta * log_prob;
}

Eigen::VectorXd critic_target(const Batch& batch, std::span<const PolicyNet> policies,
                              const CriticNet& bootstrap_critic, double beta, double gamma, std::mt19937_64& rng) {
  const auto n = static_cast<Eigen::Index>(batch.size());
  Eigen::VectorXd y(n);
  if (n == 0) return y;
  const int A = bootstrap_critic.action_dim;
  // Noise drawn in batch order so that rng use is independent of agent grouping.
  Eigen::MatrixXd noise(A, n);
  for (Eigen::Index j = 0; j < n; ++j) noise.col(j) = standard_normal(A, rng);

  Eigen::MatrixXd s_next = stack(batch, &Transition::s_next);
  Eigen::MatrixXd s = stack(batch, &Transition::s);
  Eigen::MatrixXd a = stack(batch, &Transition::a);
  Eigen::MatrixXd a_next(A, n);
  Eigen::VectorXd logp(n);

  for (std::size_t agent = 0; agent < policies.size(); ++agent) {
    std::vector<Eigen::Index> cols;
    for (Eigen::Index j = 0; j < n; ++j)
      if (batch[static_cast<std::size_t>(j)].agent == static_cast<int>(agent)) cols.push_back(j);
    if (cols.empty()) continue;
    const auto m = static_cast<Eigen::Index>(cols.size());
    Eigen::MatrixXd sn(s_next.rows(), m), sc(s.rows(), m), ac(A, m), nz(A, m);
    for (Eigen::Index c = 0; c < m; ++c) {
      sn.col(c) = s_next.col(cols[c]);
      sc.col(c) = s.col(cols[c]);
      ac.col(c) = a.col(cols[c]);
      nz.col(c) = noise.col(cols[c]);
    }
    SampledBatch nxt = actions_from_noise(policies[agent], sn, nz);
    Eigen::VectorXd lp = log_probs_of(policies[agent], sc, ac);
    for (Eigen::Index c = 0; c < m; ++c) {
      a_next.col(cols[c]) = nxt.actions.col(c);
      logp(cols[c]) = lp(c);
    }
  }
  for (Eigen::Index j = 0; j < n; ++j) {
    int agent = batch[static_cast<std::size_t>(j)].agent;
    if (agent < 0 || agent >= static_cast<int>(policies.size())) {
      std::ostringstream os;
      os << "transition agent " << agent << " has no policy";
      throw ConfigError(os.str());
    }
  }
  Eigen::VectorXd q_next = q_batch(bootstrap_critic, s_next, a_next);
  for (Eigen::Index j = 0; j < n; ++j) {
    const Transition& t = batch[static_cast<std::size_t>(j)];
    y(j) = target_from_values(t.r, q_next(j), logp(j), beta, gamma, t.done);
  }
  return y;
}

nn::LossGrad critic_loss_and_grad(const Batch& batch, const CriticNet& critic, const Eigen::VectorXd& targets) {
  if (static_cast<Eigen::Index>(batch.size()) != targets.size()) throw ConfigError("target count mismatch");
  if (batch.empty()) return {0.0, critic.net.zeros_like()};
  const double n = static_cast<double>(batch.size());
  Eigen::MatrixXd x = critic_inputs(stack(batch, &Transition::s), stack(batch, &Transition::a));
  nn::Tape tape = nn::forward_batch(critic.net, x);
  Eigen::RowVectorXd err = tape.output().row(0) - targets.transpose();
  nn::LossGrad out;
  out.loss = err.squaredNorm() / n;
  Eigen::MatrixXd upstream = (2.0 / n) * err;
  out.grads = nn::backward_batch(critic.net, tape, upstream).grads;
  return out;
}

nn::LossGrad policy_loss_and_grad(const Eigen::MatrixXd& states, const Eigen::MatrixXd& noise,
                                  const PolicyNet& policy, const CriticNet& critic, double beta) {
  const Eigen::Index n = states.cols();
  const Eigen::Index A = policy.action_dim;
  if (noise.rows() != A || noise.cols() != n) throw ConfigError("noise shape must be action_dim x batch");
  if (n == 0) return {0.0, policy.trunk.zeros_like()};

  nn::Tape ptape = nn::forward_batch(policy.trunk, states);
  const Eigen::MatrixXd& out = ptape.output();
  Eigen::MatrixXd mean = out.topRows(A);
  Eigen::MatrixXd raw_ls = out.bottomRows(A);

  Eigen::MatrixXd a(A, n), std_xi(A, n), u_pass(A, n), ls_pass(A, n);
  double logp_sum = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index d = 0; d < A; ++d) {
      double ls = std::clamp(raw_ls(d, j), kLogStdMin, kLogStdMax);
      ls_pass(d, j) = (raw_ls(d, j) >= kLogStdMin && raw_ls(d, j) <= kLogStdMax) ? 1.0 : 0.0;
      double sd = std::exp(ls);
      double xi = noise(d, j);
      double u_raw = mean(d, j) + sd * xi;
      double u = std::clamp(u_raw, -kPreSquashClip, kPreSquashClip);
      u_pass(d, j) = (u_raw >= -kPreSquashClip && u_raw <= kPreSquashClip) ? 1.0 : 0.0;
      a(d, j) = sigmoid(u);
      std_xi(d, j) = sd * xi;
      logp_sum += -0.5 * xi * xi - ls - kHalfLog2Pi - log_squash_jacobian(u);
    }
  }

  nn::Tape ctape = nn::forward_batch(critic.net, critic_inputs(states, a));
  Eigen::MatrixXd ones = Eigen::MatrixXd::Ones(1, n);
  Eigen::MatrixXd dq_da = nn::backward_batch(critic.net, ctape, ones).input_grad.bottomRows(A);

  const double inv_n = 1.0 / static_cast<double>(n);
  nn::LossGrad res;
  res.loss = inv_n * (beta * logp_sum - ctape.output().sum());

  // Through u:  d(-Q)/du = -dQ/da a(1-a),  d(beta logpi)/du = beta (2a - 1).
  Eigen::ArrayXXd dl_du =
      inv_n * u_pass.array() * (-dq_da.array() * a.array() * (1.0 - a.array()) + beta * (2.0 * a.array() - 1.0));
  Eigen::MatrixXd upstream(2 * A, n);
  upstream.topRows(A) = dl_du.matrix();
  upstream.bottomRows(A) = (ls_pass.array() * (dl_du * std_xi.array() - beta * inv_n)).matrix();
  res.grads = nn::backward_batch(policy.trunk, ptape, upstream).grads;
  return res;
}

double td_from_values(double r, double v_s, double v_next, double gamma, bool done) {
  return r + (done ? 0.0 : gamma * v_next) - v_s;
}

double td_error(const Transition& t, const PolicyNet& policy, const CriticNet& critic, double beta, double gamma,
                std::mt19937_64& rng) {
  ActionSample here = sample_action(policy, t.s, rng);
  ActionSample next = sample_action(policy, t.s_next, rng);
  double v_s = q_value(critic, t.s, here.action) - beta * here.log_prob;
  double v_next = q_value(critic, t.s_next, next.action) - beta * next.log_prob;
  return td_from_values(t.r, v_s, v_next, gamma, t.done);
}

std::vector<double> td_errors(const Batch& batch, const PolicyNet& policy, const CriticNet& critic, double beta,
                              double gamma, std::mt19937_64& rng) {
  std::vector<double> out;
  out.reserve(batch.size());
  if (batch.empty()) return out;
  const auto n = static_cast<Eigen::Index>(batch.size());
  const int A = policy.action_dim;
  // Same draw order as repeated td_error calls: noise for s, then for s'.
  Eigen::MatrixXd nz_s(A, n), nz_n(A, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    nz_s.col(j) = standard_normal(A, rng);
    nz_n.col(j) = standard_normal(A, rng);
  }
  Eigen::MatrixXd s = stack(batch, &Transition::s);
  Eigen::MatrixXd sn = stack(batch, &Transition::s_next);
  SampledBatch here = actions_from_noise(policy, s, nz_s);
  SampledBatch next = actions_from_noise(policy, sn, nz_n);
  Eigen::VectorXd q_s = q_batch(critic, s, here.actions);
  Eigen::VectorXd q_n = q_batch(critic, sn, next.actions);
  for (Eigen::Index j = 0; j < n; ++j) {
    const Transition& t = batch[static_cast<std::size_t>(j)];
    out.push_back(td_from_values(t.r, q_s(j) - beta * here.log_probs(j), q_n(j) - beta * next.log_probs(j), gamma,
                                 t.done));
  }
  return out;
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ConfigError("replay capacity must be positive");
}

void ReplayBuffer::push(Transition t) {
  if (items_.size() < capacity_) {
    items_.push_back(std::move(t));
    return;
  }
  items_[head_] = std::move(t);
  head_ = (head_ + 1) % capacity_;
}

const Transition& ReplayBuffer::at(std::size_t i) const {
  if (i >= items_.size()) throw ConfigError("replay index out of range");
  return items_[(head_ + i) % items_.size()];
}

std::vector<Transition> ReplayBuffer::contents() const {
  std::vector<Transition> out;
  out.reserve(items_.size());
  for (std::size_t i = 0; i < items_.size(); ++i) out.push_back(at(i));
  return out;
}

std::optional<Batch> ReplayBuffer::sample(std::size_t n, std::mt19937_64& rng) const {
  if (n == 0 || items_.size() < n) return std::nullopt;
  std::vector<std::size_t> idx(items_.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Batch out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
    out.push_back(at(idx[i]));
  }
  return out;
}

void polyak_update(CriticNet& target, const CriticNet& source, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("polyak tau must lie in [0,1]");
  for (std::size_t l = 0; l < target.net.num_layers(); ++l) {
    target.net.weights[l] = (1.0 - tau) * target.net.weights[l] + tau * source.net.weights[l];
    target.net.biases[l] = (1.0 - tau) * target.net.biases[l] + tau * source.net.biases[l];
  }
}

}  // namespace tasam::sac
