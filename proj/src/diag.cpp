#include "tasam/diag.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <ostream>
#include <random>

#include "tasam/error.hpp"

namespace tasam::diag {

namespace {

GradFn flat_grad(const sam::LossAndGrad& f, const nn::MlpParams& shape) {
  return [f, shape](const Eigen::VectorXd& x) { return nn::flatten(f(nn::with_flat_params(shape, x)).grads); };
}

}  // namespace

Eigen::VectorXd hessian_vector_product(const GradFn& grad, const Eigen::VectorXd& x, const Eigen::VectorXd& v,
                                       double eps) {
  if (v.size() != x.size()) throw ConfigError("hvp: direction size mismatch");
  if (!(eps > 0.0)) throw ConfigError("hvp: eps must be positive");
  if (std::abs(v.norm() - 1.0) > 1e-8) throw ConfigError("hvp: direction must have unit norm");
  const double h = eps * std::max(x.norm(), 1.0);
  const Eigen::VectorXd gp = grad(x + h * v);
  const Eigen::VectorXd gm = grad(x - h * v);
  if (!gp.allFinite() || !gm.allFinite()) throw NumericError("hvp: non-finite gradient at a probe point");
  return (gp - gm) / (2.0 * h);
}

nn::GradientSet hessian_vector_product(const sam::LossAndGrad& loss_and_grad, const nn::MlpParams& params,
                                       const nn::GradientSet& v, double eps) {
  return nn::unflatten_like(
      params, hessian_vector_product(flat_grad(loss_and_grad, params), nn::flatten(params), nn::flatten(v), eps));
}

SharpnessReport max_eigenvalue(const GradFn& grad, const Eigen::VectorXd& x, int max_iters, double tol,
                               std::uint64_t seed, double eps) {
  if (max_iters < 1) throw ConfigError("max_eigenvalue: max_iters must be at least 1");
  if (x.size() == 0) throw ConfigError("max_eigenvalue: empty parameter vector");
  SharpnessReport rep;
  rep.probe_seed = seed;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::VectorXd v(x.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = nd(rng);
  v.normalize();
  for (int k = 1; k <= max_iters; ++k) {
    const Eigen::VectorXd w = hessian_vector_product(grad, x, v, eps);
    const double lambda = v.dot(w);
    rep.lambda_max = lambda;
    rep.residual = (w - lambda * v).norm();
    rep.iterations = k;
    const double wn = w.norm();
    if (rep.residual <= tol * std::abs(lambda) || wn == 0.0) {
      rep.converged = true;
      break;
    }
    v = w / wn;
  }
  return rep;
}

SharpnessReport max_eigenvalue(const sam::LossAndGrad& loss_and_grad, const nn::MlpParams& params, int max_iters,
                               double tol, std::uint64_t seed, double eps) {
  return max_eigenvalue(flat_grad(loss_and_grad, params), nn::flatten(params), max_iters, tol, seed, eps);
}

CdfSeries cdf(std::vector<double> samples) {
  if (samples.empty()) throw ConfigError("cdf: empty sample set");
  std::sort(samples.begin(), samples.end());
  CdfSeries s;
  const double n = static_cast<double>(samples.size());
  s.probabilities.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) s.probabilities.push_back(static_cast<double>(i + 1) / n);
  s.values = std::move(samples);
  return s;
}

void write_cdf_csv(std::ostream& os, const CdfSeries& s, const std::string& value_column) {
  os << value_column << ",probability\n" << std::setprecision(17);
  for (std::size_t i = 0; i < s.values.size(); ++i) os << s.values[i] << ',' << s.probabilities[i] << '\n';
}

sac::Batch make_probe_batch(const env::ScenarioConfig& scenario, const std::vector<int>& actor_hidden,
                            std::size_t size, std::uint64_t probe_seed, int episode_length) {
  if (episode_length < 1) throw ConfigError("probe: episode_length must be at least 1");
  std::mt19937_64 init(marl::derive_seed(probe_seed, 101));
  std::vector<sac::PolicyNet> policies;
  for (int m = 0; m < scenario.num_dus; ++m)
    policies.push_back(sac::make_policy(scenario.state_dim(), scenario.action_dim(), actor_hidden, init));
  env::World world = env::World::create(scenario, marl::derive_seed(probe_seed, 102));
  std::mt19937_64 rng(marl::derive_seed(probe_seed, 103));
  const int M = scenario.num_dus;
  const double scale = world.count_scale();
  sac::Batch out;
  out.reserve(size);
  std::vector<Eigen::VectorXd> feats(static_cast<std::size_t>(M)), actions(static_cast<std::size_t>(M));
  for (long step = 0; out.size() < size; ++step) {
    for (int m = 0; m < M; ++m) {
      const auto s = static_cast<std::size_t>(m);
      feats[s] = env::features(world.observe(m), scale);
      actions[s] = sac::sample_action(policies[s], feats[s], rng).action;
    }
    env::StepResult res = world.step(actions);
    for (int m = 0; m < M && out.size() < size; ++m) {
      const auto s = static_cast<std::size_t>(m);
      sac::Transition t;
      t.s = feats[s];
      t.a = actions[s];
      t.s_next = env::features(res.next_states[s], scale);
      t.r = res.du_rewards[s];
      t.done = (step % episode_length) == episode_length - 1;
      t.agent = m;
      t.seq = static_cast<std::int64_t>(out.size());
      out.push_back(std::move(t));
    }
  }
  return out;
}

SharpnessReport critic_sharpness(const sac::CriticNet& critic, const std::vector<sac::PolicyNet>& policies,
                                 const sac::Batch& probe, double beta, double gamma, std::uint64_t probe_seed,
                                 int max_iters, double tol) {
  std::mt19937_64 rng(marl::derive_seed(probe_seed, 104));
  const Eigen::VectorXd y = sac::critic_target(probe, policies, critic, beta, gamma, rng);
  const int S = critic.state_dim, A = critic.action_dim;
  sam::LossAndGrad loss = [&probe, y, S, A](const nn::MlpParams& p) {
    return sac::critic_loss_and_grad(probe, sac::CriticNet{p, S, A}, y);
  };
  return max_eigenvalue(loss, critic.net, max_iters, tol, probe_seed);
}

SharpnessReport actor_sharpness(const sac::PolicyNet& policy, const sac::CriticNet& critic, const sac::Batch& probe,
                                double beta, std::uint64_t probe_seed, int max_iters, double tol) {
  std::mt19937_64 rng(marl::derive_seed(probe_seed, 105));
  std::normal_distribution<double> nd(0.0, 1.0);
  const Eigen::MatrixXd states = sac::stack_states(probe);
  Eigen::MatrixXd noise(policy.action_dim, states.cols());
  for (Eigen::Index j = 0; j < noise.cols(); ++j)
    for (Eigen::Index d = 0; d < noise.rows(); ++d) noise(d, j) = nd(rng);
  const int A = policy.action_dim;
  sam::LossAndGrad loss = [states, noise, &critic, beta, A](const nn::MlpParams& p) {
    return sac::policy_loss_and_grad(states, noise, sac::PolicyNet{p, A}, critic, beta);
  };
  return max_eigenvalue(loss, policy.trunk, max_iters, tol, probe_seed);
}

void write_sharpness_csv_header(std::ostream& os) {
  os << "mode,seed,network,lambda_max,residual,iterations,converged,probe_seed\n";
}

void write_sharpness_csv_row(std::ostream& os, const std::string& mode, std::uint64_t seed, const std::string& network,
                             const SharpnessReport& r) {
  os << std::setprecision(17) << mode << ',' << seed << ',' << network << ',' << r.lambda_max << ',' << r.residual
     << ',' << r.iterations << ',' << (r.converged ? 1 : 0) << ',' << r.probe_seed << '\n';
}

std::vector<SweepRow> rho_sweep(const marl::TrainConfig& base, const std::vector<double>& rhos,
                                const std::vector<std::uint64_t>& seeds, const std::vector<std::string>& modes) {
  for (double r : rhos)
    if (!(r >= 0.0 && std::isfinite(r))) throw ConfigError("sweep: rho values must be finite and non-negative");
  auto best = [](const marl::RunMetrics& m) {
    auto tr = m.mean_reward_trace();
    return *std::max_element(tr.begin(), tr.end());
  };
  std::map<std::uint64_t, double> no_sam_cache;
  std::vector<SweepRow> rows;
  for (double rho : rhos) {
    for (const auto& mode : modes) {
      for (std::uint64_t seed : seeds) {
        marl::TrainConfig c = base;
        marl::set_run_seed(c, seed);
        marl::apply_mode(c, mode);
        c.sam.schedule = sam::Schedule::constant;
        c.sam.rho_actor_start = c.sam.rho_actor_end = rho;
        c.sam.rho_critic_start = c.sam.rho_critic_end = rho;
        double value;
        if (mode == "no-sam") {
          auto it = no_sam_cache.find(seed);
          if (it == no_sam_cache.end()) it = no_sam_cache.emplace(seed, best(marl::train(c).metrics)).first;
          value = it->second;
        } else {
          value = best(marl::train(c).metrics);
        }
        rows.push_back({rho, mode, seed, value});
      }
    }
  }
  return rows;
}

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "rho,mode,seed,max_cumulative_reward\n" << std::setprecision(17);
  for (const auto& r : rows) os << r.rho << ',' << r.mode << ',' << r.seed << ',' << r.max_cumulative_reward << '\n';
}

}  // namespace tasam::diag
