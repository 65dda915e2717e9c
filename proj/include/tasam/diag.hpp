#pragma once

// Loss-landscape sharpness (dominant Hessian eigenvalue by power iteration
// on finite-difference Hessian-vector products), empirical CDFs and the
// rho sweep.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tasam/marl.hpp"
#include "tasam/sac.hpp"
#include "tasam/sam.hpp"

namespace tasam::diag {

// Gradient of a scalar loss over a flat parameter vector.
using GradFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

inline constexpr double kDefaultHvpEps = 1e-4;

// (grad(x + h v) - grad(x - h v)) / 2h with h = eps * max(||x||, 1).
// v must have unit norm.
Eigen::VectorXd hessian_vector_product(const GradFn& grad, const Eigen::VectorXd& x, const Eigen::VectorXd& v,
                                       double eps = kDefaultHvpEps);

// Same on network parameters.
nn::GradientSet hessian_vector_product(const sam::LossAndGrad& loss_and_grad, const nn::MlpParams& params,
                                       const nn::GradientSet& v, double eps = kDefaultHvpEps);

struct SharpnessReport {
  double lambda_max = 0.0;
  int iterations = 0;
  double residual = 0.0;  // ||Hv - lambda v|| / ||v|| at termination
  bool converged = false;
  std::uint64_t probe_seed = 0;
};

// Power iteration from a seeded Gaussian start; stops when the residual is
// at most tol * |lambda| or after max_iters products.
SharpnessReport max_eigenvalue(const GradFn& grad, const Eigen::VectorXd& x, int max_iters = 100, double tol = 1e-4,
                               std::uint64_t seed = 0, double eps = kDefaultHvpEps);
SharpnessReport max_eigenvalue(const sam::LossAndGrad& loss_and_grad, const nn::MlpParams& params,
                               int max_iters = 100, double tol = 1e-4, std::uint64_t seed = 0,
                               double eps = kDefaultHvpEps);

struct CdfSeries {
  std::vector<double> values;         // sorted samples
  std::vector<double> probabilities;  // (i + 1) / n
};

// Throws ConfigError on an empty sample set.
CdfSeries cdf(std::vector<double> samples);
void write_cdf_csv(std::ostream& os, const CdfSeries& s, const std::string& value_column = "value");

// Frozen probe transitions for sharpness: stochastic rollouts of untrained
// policies drawn from `probe_seed`, collected over every DU.
sac::Batch make_probe_batch(const env::ScenarioConfig& scenario, const std::vector<int>& actor_hidden,
                            std::size_t size, std::uint64_t probe_seed, int episode_length = 20);

// Critic loss sharpness with targets computed from the given networks once and then held fixed.
SharpnessReport critic_sharpness(const sac::CriticNet& critic, const std::vector<sac::PolicyNet>& policies,
                                 const sac::Batch& probe, double beta, double gamma, std::uint64_t probe_seed,
                                 int max_iters = 100, double tol = 1e-4);

// Policy loss sharpness for one actor on the probe states with frozen noise.
SharpnessReport actor_sharpness(const sac::PolicyNet& policy, const sac::CriticNet& critic, const sac::Batch& probe,
                                double beta, std::uint64_t probe_seed, int max_iters = 100, double tol = 1e-4);

void write_sharpness_csv_header(std::ostream& os);
void write_sharpness_csv_row(std::ostream& os, const std::string& mode, std::uint64_t seed, const std::string& network,
                             const SharpnessReport& r);

struct SweepRow {
  double rho = 0.0;
  std::string mode;
  std::uint64_t seed = 0;
  double max_cumulative_reward = 0.0;

  bool operator==(const SweepRow&) const = default;
};

// Equal, constant rho for actor and critic. No-SAM runs are shared across rho
// values for a seed. Rows ordered by (rho, mode, seed).
std::vector<SweepRow> rho_sweep(const marl::TrainConfig& base, const std::vector<double>& rhos,
                                const std::vector<std::uint64_t>& seeds,
                                const std::vector<std::string>& modes = {"no-sam", "actor-sam", "critic-sam",
                                                                         "both-sam"});

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows);

}  // namespace tasam::diag
