#pragma once

// Sharpness-aware update wrapper around Adam, the perturbation-radius
// schedule, and the TD-error-variance gate that picks which actors get SAM.

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>

#include "tasam/nn.hpp"

namespace tasam::sam {

enum class Mode { no_sam, actor_sam, critic_sam, both_sam };
enum class Schedule { linear, constant };
enum class GateMode { absolute, relative_to_mean };
enum class Component { actor, critic };

std::string to_string(Mode m);
Mode mode_from_string(const std::string& s);  // "no-sam", "actor-sam", "critic-sam", "both-sam"
std::string to_string(Schedule s);
Schedule schedule_from_string(const std::string& s);
std::string to_string(GateMode g);
GateMode gate_mode_from_string(const std::string& s);

struct SamPolicy {
  double rho_actor_start = 0.5;
  double rho_actor_end = 0.01;
  double rho_critic_start = 0.5;
  double rho_critic_end = 0.01;
  Schedule schedule = Schedule::linear;
  GateMode gate_mode = GateMode::relative_to_mean;
  double gate_threshold = 0.0;  // used in absolute mode
  int gate_window = 100;
  Mode mode = Mode::both_sam;
  // false applies actor SAM every iteration regardless of TD variance.
  bool selective = true;

  bool actor_uses_sam() const { return mode == Mode::actor_sam || mode == Mode::both_sam; }
  bool critic_uses_sam() const { return mode == Mode::critic_sam || mode == Mode::both_sam; }

  // Throws ConfigError on broken invariants.
  void validate() const;
};

// Non-equal constant radii: rho_actor 0.05, rho_critic 0.01.
SamPolicy non_equal_rho_preset();

double rho_at(const SamPolicy& policy, Component component, long t, long horizon);

// theta + rho * g / ||g||; pass-through when rho == 0 or ||g|| == 0.
nn::MlpParams sam_perturb(const nn::MlpParams& params, const nn::GradientSet& grads, double rho);

using nn::LossGrad;

using LossAndGrad = std::function<LossGrad(const nn::MlpParams&)>;

struct SamStepResult {
  nn::MlpParams params;
  nn::AdamState state;
  double loss = 0.0;            // at the original point
  double adversarial_loss = 0.0;  // at theta_adv (== loss when not perturbed)
  bool perturbed = false;
};

// Gradient at theta_adv, Adam applied at the original theta. With rho == 0 the
// result is exactly adam_step on the gradient at theta.
SamStepResult sam_step(const nn::MlpParams& params, const LossAndGrad& loss_and_grad, double rho,
                       const nn::AdamState& base_state);

// Plain Adam through the same closure, for the non-SAM branch.
SamStepResult adam_only_step(const nn::MlpParams& params, const LossAndGrad& loss_and_grad,
                             const nn::AdamState& base_state);

class TdStats {
 public:
  explicit TdStats(std::size_t window = 100);

  void record(double delta);
  std::size_t count() const { return window_values_.size(); }
  std::size_t window() const { return window_; }
  // Sample variance (n - 1 denominator) of the stored window; 0 below two samples.
  double variance() const { return variance_; }
  const std::deque<double>& values() const { return window_values_; }

 private:
  void refresh();

  std::size_t window_;
  std::deque<double> window_values_;
  double variance_ = 0.0;
};

TdStats record_td_error(TdStats stats, double delta);

bool gate_open(const TdStats& stats, const SamPolicy& policy, std::span<const double> all_agent_variances);

}  // namespace tasam::sam
