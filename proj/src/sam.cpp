#include "tasam/sam.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tasam/error.hpp"

namespace tasam::sam {

std::string to_string(Mode m) {
  switch (m) {
    case Mode::no_sam:
      return "no-sam";
    case Mode::actor_sam:
      return "actor-sam";
    case Mode::critic_sam:
      return "critic-sam";
    case Mode::both_sam:
      return "both-sam";
  }
  return "no-sam";
}

Mode mode_from_string(const std::string& s) {
  if (s == "no-sam") return Mode::no_sam;
  if (s == "actor-sam") return Mode::actor_sam;
  if (s == "critic-sam") return Mode::critic_sam;
  if (s == "both-sam") return Mode::both_sam;
  throw ConfigError("sam.mode: unknown value '" + s + "'");
}

std::string to_string(Schedule s) { return s == Schedule::linear ? "linear" : "constant"; }

Schedule schedule_from_string(const std::string& s) {
  if (s == "linear") return Schedule::linear;
  if (s == "constant") return Schedule::constant;
  throw ConfigError("sam.schedule: unknown value '" + s + "'");
}

std::string to_string(GateMode g) { return g == GateMode::absolute ? "absolute" : "relative-to-mean"; }

GateMode gate_mode_from_string(const std::string& s) {
  if (s == "absolute") return GateMode::absolute;
  if (s == "relative-to-mean") return GateMode::relative_to_mean;
  throw ConfigError("sam.gate_mode: unknown value '" + s + "'");
}

void SamPolicy::validate() const {
  auto check = [](double start, double end, const char* key) {
    if (!(std::isfinite(start) && std::isfinite(end)) || end < 0.0 || start < end) {
      throw ConfigError(std::string("sam.") + key + ": need start >= end >= 0");
    }
  };
  check(rho_actor_start, rho_actor_end, "rho_actor");
  check(rho_critic_start, rho_critic_end, "rho_critic");
  if (gate_window < 2) throw ConfigError("sam.gate_window: must be at least 2");
  if (gate_mode == GateMode::absolute && !(gate_threshold > 0.0)) {
    throw ConfigError("sam.gate_threshold: must be positive in absolute mode");
  }
}

SamPolicy non_equal_rho_preset() {
  SamPolicy p;
  p.rho_actor_start = p.rho_actor_end = 0.05;
  p.rho_critic_start = p.rho_critic_end = 0.01;
  p.schedule = Schedule::constant;
  return p;
}

double rho_at(const SamPolicy& policy, Component component, long t, long horizon) {
  if (horizon < 1) throw ConfigError("rho_at: horizon must be >= 1");
  const bool actor = component == Component::actor;
  const double start = actor ? policy.rho_actor_start : policy.rho_critic_start;
  const double end = actor ? policy.rho_actor_end : policy.rho_critic_end;
  if (policy.schedule == Schedule::constant) return start;
  if (t <= 0) return start;
  if (t >= horizon) return end;
  const double f = static_cast<double>(t) / static_cast<double>(horizon);
  // Convex combination so both endpoints are reproduced exactly.
  return (1.0 - f) * start + f * end;
}

nn::MlpParams sam_perturb(const nn::MlpParams& params, const nn::GradientSet& grads, double rho) {
  if (rho < 0.0) throw ConfigError("sam_perturb: rho must be non-negative");
  const double norm = nn::grad_norm(grads);
  if (rho == 0.0 || norm == 0.0) return params;
  return nn::param_axpy(params, grads, rho / norm);
}

SamStepResult sam_step(const nn::MlpParams& params, const LossAndGrad& loss_and_grad, double rho,
                       const nn::AdamState& base_state) {
  LossGrad at_theta = loss_and_grad(params);
  if (!std::isfinite(at_theta.loss)) throw NumericError("sam_step: non-finite loss at theta");
  SamStepResult out;
  out.loss = at_theta.loss;
  out.adversarial_loss = at_theta.loss;
  const nn::GradientSet* update_grads = &at_theta.grads;
  LossGrad at_adv;
  if (rho > 0.0 && nn::grad_norm(at_theta.grads) > 0.0) {
    const nn::MlpParams adv = sam_perturb(params, at_theta.grads, rho);
    at_adv = loss_and_grad(adv);
    if (!std::isfinite(at_adv.loss)) throw NumericError("sam_step: non-finite loss at the perturbed point");
    out.adversarial_loss = at_adv.loss;
    out.perturbed = true;
    update_grads = &at_adv.grads;
  }
  out.params = params;
  out.state = base_state;
  nn::adam_step_inplace(out.params, *update_grads, out.state);
  return out;
}

SamStepResult adam_only_step(const nn::MlpParams& params, const LossAndGrad& loss_and_grad,
                             const nn::AdamState& base_state) {
  return sam_step(params, loss_and_grad, 0.0, base_state);
}

TdStats::TdStats(std::size_t window) : window_(window) {
  if (window < 2) throw ConfigError("TdStats: window must be at least 2");
}

void TdStats::record(double delta) {
  window_values_.push_back(delta);
  while (window_values_.size() > window_) window_values_.pop_front();
  refresh();
}

void TdStats::refresh() {
  const std::size_t n = window_values_.size();
  if (n < 2) {
    variance_ = 0.0;
    return;
  }
  const double mean = std::accumulate(window_values_.begin(), window_values_.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double d : window_values_) ss += (d - mean) * (d - mean);
  variance_ = ss / static_cast<double>(n - 1);
}

TdStats record_td_error(TdStats stats, double delta) {
  stats.record(delta);
  return stats;
}

bool gate_open(const TdStats& stats, const SamPolicy& policy, std::span<const double> all_agent_variances) {
  if (stats.count() < 2) return false;
  const double v = stats.variance();
  if (policy.gate_mode == GateMode::absolute) return v >= policy.gate_threshold;
  if (all_agent_variances.empty()) return true;
  const double mean = std::accumulate(all_agent_variances.begin(), all_agent_variances.end(), 0.0) /
                      static_cast<double>(all_agent_variances.size());
  // Inclusive boundary; the slack absorbs rounding in the mean so an agent
  // sitting exactly at the cross-agent mean is not closed by one ulp.
  return v >= mean - 1e-12 * std::abs(mean);
}

}  // namespace tasam::sam
