#pragma once

// Downlink O-RAN slicing world: DU layout, UE mobility and traffic,
// Rayleigh-faded SINR rates with inter-cell interference, per-slice KPIs,
// slice QoS, the reward, and the action codec.

#include <array>
#include <cstdint>
#include <deque>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace tasam::env {

// KPI slots, in this order everywhere: latency, mean throughput,
// service availability, user-density support.
inline constexpr int kNumKpis = 4;
using KpiVector = std::array<double, kNumKpis>;

struct SliceSpec {
  std::string name;
  KpiVector kpi_weights{};     // omega, non-negative, sums to 1
  double priority_weight = 1;  // w_l, feeds the sigmoid sensitivity
  double latency_ref_s = 0.01;  // latency goodness is 1 / (1 + l_d / latency_ref_s)
  double rate_ref_bps = 1e6;    // throughput KPI is reported relative to this
  double demand_bps = 1e6;      // per-UE demand threshold lambda_i
  double q_min = 0.0;           // minimum slice QoS, in QoS units
  double traffic_load_bps = 1e6;  // mean offered load per UE
  double packet_bits = 1000;

  void validate() const;
};

// eMBB, mMTC, URLLC with the default weights, references and floors.
std::vector<SliceSpec> default_slices();

// The QoS value a slice scores when its primary KPI sits exactly at its
// reference and every other KPI contributes nothing.
double default_q_min(const SliceSpec& s, int primary_kpi);

struct ScenarioConfig {
  int num_dus = 6;
  int total_ues = 200;
  int rbs_per_du = 100;
  double rb_bandwidth_hz = 200e3;
  double total_bandwidth_hz = 20e6;
  double subcarrier_spacing_hz = 15e3;
  double tx_power_dbm = 56.0;     // total DU power, split equally over RBs; -inf switches it off
  double noise_psd_dbm_hz = -173.0;
  double path_loss_exponent = 3.0;
  double inter_site_distance_m = 500.0;
  double cell_radius_m = 250.0;
  double speed_min_mps = 10.0;
  double speed_max_mps = 20.0;
  double epoch_s = 0.01;          // duration of one decision epoch
  int kpi_window = 5;             // steps in the service-availability window
  double zeta = 1.0;
  double latency_rate_floor_bps = 1e3;
  std::vector<double> du_load_weights;  // empty = uniform
  std::vector<SliceSpec> slices = default_slices();
  std::uint64_t seed = 1;

  int slice_count() const { return static_cast<int>(slices.size()); }
  int action_dim() const { return 2 * rbs_per_du; }
  int state_dim() const { return 2 * slice_count() + action_dim(); }

  void validate() const;
};

nlohmann::json to_json(const ScenarioConfig& c);
// Keys absent from `j` keep the value in `base`; slice entries overlay base slices by index.
ScenarioConfig scenario_from_json(const nlohmann::json& j, ScenarioConfig base = {});

struct DuSite {
  int id = 0;
  Eigen::Vector2d position = Eigen::Vector2d::Zero();
  double radius = 250.0;
};

struct UeState {
  int id = 0;
  int du_id = 0;
  int slice_id = 0;
  Eigen::Vector2d position = Eigen::Vector2d::Zero();
  double direction = 0.0;  // radians
  double speed = 10.0;
  double last_heading_offset = 0.0;
  double backlog_bits = 0.0;
  double demand_bps = 0.0;
  double last_rate_bps = 0.0;
  double last_latency_s = 0.0;
  std::deque<double> rate_history;  // most recent last
};

// Slice-to-RB and UE-to-RB assignment of one DU.
struct DecodedAction {
  int num_slices = 0;
  std::vector<int> roster;   // UE ids of this DU, ascending; row order of e
  std::vector<int> rb_slice;  // owning slice per RB
  std::vector<int> rb_ue;     // served UE id per RB, -1 when unassigned

  int num_rbs() const { return static_cast<int>(rb_slice.size()); }
  Eigen::MatrixXi slice_matrix() const;  // b: |L| x K
  Eigen::MatrixXi ue_matrix() const;     // e: N_u x K
  std::vector<int> rbs_per_slice() const;
  bool transmits_on(int rb) const { return rb_ue[static_cast<std::size_t>(rb)] >= 0; }
};

// Per-slice rosters of one DU, each sorted by UE id.
struct DuRoster {
  std::vector<int> all;
  std::vector<std::vector<int>> by_slice;
};

DuRoster make_roster(const std::vector<UeState>& ues, int du_id, int num_slices);

// Throws ProtocolError on a wrong length or an entry outside (0,1).
DecodedAction decode_action(std::span<const double> raw, const DuRoster& roster);
DecodedAction decode_action(const Eigen::VectorXd& raw, const DuRoster& roster);

// Raw vector that decodes to the given per-RB (slice, index-within-slice) choice.
Eigen::VectorXd encode_choice(const std::vector<int>& rb_slice, const std::vector<int>& slice_index,
                              const DuRoster& roster);

struct RadioParams {
  double rb_bandwidth_hz = 200e3;
  double rb_power_w = 0.0;
  double noise_power_w = 0.0;
  double path_loss_exponent = 3.0;
};

RadioParams radio_params(const ScenarioConfig& c);
double dbm_to_watt(double dbm);

// Rayleigh power gains |h|^2 for every (UE, DU, RB), unit-mean exponential.
struct ChannelDraw {
  int num_ues = 0;
  int num_dus = 0;
  int num_rbs = 0;
  std::vector<double> gain;

  ChannelDraw() = default;
  ChannelDraw(int ues, int dus, int rbs, double fill = 1.0)
      : num_ues(ues), num_dus(dus), num_rbs(rbs),
        gain(static_cast<std::size_t>(ues) * dus * rbs, fill) {}
  double& at(int ue, int du, int rb) {
    return gain[(static_cast<std::size_t>(ue) * num_dus + du) * num_rbs + rb];
  }
  double at(int ue, int du, int rb) const {
    return gain[(static_cast<std::size_t>(ue) * num_dus + du) * num_rbs + rb];
  }
};

ChannelDraw draw_channel(int num_ues, int num_dus, int num_rbs, std::mt19937_64& rng);

// Distance with the 1 m clamp.
double link_distance(const Eigen::Vector2d& a, const Eigen::Vector2d& b);

// Achievable downlink rate (bits/s) of one UE given every DU's allocation.
double compute_rate(const UeState& ue, std::span<const DecodedAction> all_du_allocs,
                    const ChannelDraw& channel, std::span<const DuSite> dus, const RadioParams& radio);

// Window inputs of one UE for KPI computation.
struct UeWindow {
  double latency_s = 0.0;
  double rate_bps = 0.0;
  double demand_bps = 0.0;
  std::vector<double> rate_history;  // includes the current step
};

// Raw KPIs: (max latency s, mean rate bps, availability, density support).
KpiVector compute_kpis(std::span<const UeWindow> slice_ues);

// KPI vector as weighted by slice_qos: latency mapped to goodness, rate
// divided by the slice reference.
KpiVector normalize_kpis(const KpiVector& raw, const SliceSpec& spec);

double slice_qos(const KpiVector& m, const SliceSpec& spec);

// alpha_l = w_l * |L| / sum_j w_j.
std::vector<double> sigmoid_sensitivities(std::span<const SliceSpec> specs);

struct RewardBreakdown {
  double sigmoid_term = 0.0;
  double resource_penalty = 0.0;  // <= 0
  double qos_penalty = 0.0;       // <= 0
  double total = 0.0;
};

// q: raw slice QoS; q_norm: min-max normalized QoS in [0,1]; rb_counts: RBs
// held by each slice; total_rbs: K_m.
RewardBreakdown compute_reward(std::span<const double> q, std::span<const double> q_norm,
                               std::span<const int> rb_counts, int total_rbs,
                               std::span<const SliceSpec> specs, std::span<const double> alpha, double zeta);

// Running min/max scaler of one (DU, slice) QoS trace.
struct MinMaxTracker {
  double min = 0.0;
  double max = 0.0;
  long count = 0;

  void observe(double q);
  double normalize(double q) const;  // clamped to [0,1]; 0 on a degenerate range
};

inline constexpr std::array<double, 7> kHeadingOffsets = {
    -std::numbers::pi / 3.0, -std::numbers::pi / 6.0, -std::numbers::pi / 12.0, 0.0, std::numbers::pi / 12.0, std::numbers::pi / 6.0, std::numbers::pi / 3.0};

// Moves one UE by speed * dt after turning by heading_offset; reflects off
// the service-area edge.
void move_ue(UeState& ue, const DuSite& site, double dt, double heading_offset);

// Samples one heading offset per UE (uniform over kHeadingOffsets) and moves it.
// Returns the offset index drawn for each UE.
std::vector<int> advance_mobility(std::vector<UeState>& ues, std::span<const DuSite> dus, double dt,
                                  std::mt19937_64& rng);

struct NetworkState {
  std::vector<double> slice_qos;    // Q^l
  std::vector<int> slice_ue_counts;  // N^l_u
  Eigen::VectorXd prev_action;      // a_{t-1}

  bool operator==(const NetworkState&) const = default;
};

// Network input: [Q^l..., N^l_u / count_scale..., a_{t-1}...].
Eigen::VectorXd features(const NetworkState& s, double count_scale);

struct DuTransition {
  NetworkState state;
  Eigen::VectorXd action;
  NetworkState next_state;
  double reward = 0.0;
};

struct StepResult {
  std::vector<NetworkState> next_states;  // per DU
  std::vector<double> du_rewards;
  std::vector<RewardBreakdown> du_breakdowns;
  double global_reward = 0.0;            // mean over DUs
  std::vector<std::vector<double>> slice_qos;  // [du][slice]
  std::vector<std::vector<KpiVector>> kpis;    // raw, [du][slice]
  std::vector<double> ue_rates_bps;      // indexed by UE id
  std::vector<DecodedAction> allocations;
  std::vector<DuTransition> transitions;  // per DU
  ChannelDraw channel;
  std::vector<double> arrivals_bits;     // indexed by UE id
};

// The full multi-DU world. Copyable; a copy continues with an identical
// random stream.
class World {
 public:
  static World create(const ScenarioConfig& config);
  // Layout from config.seed, dynamics from `dynamics_seed`.
  static World create(const ScenarioConfig& config, std::uint64_t dynamics_seed);

  const ScenarioConfig& config() const { return config_; }
  const std::vector<DuSite>& dus() const { return dus_; }
  const std::vector<UeState>& ues() const { return ues_; }
  std::vector<UeState>& mutable_ues() { return ues_; }
  const DuRoster& roster(int du) const { return rosters_[static_cast<std::size_t>(du)]; }
  const MinMaxTracker& tracker(int du, int slice) const;
  long step_index() const { return step_index_; }
  double count_scale() const;

  NetworkState observe(int du) const;
  std::vector<NetworkState> observe_all() const;

  StepResult step(const std::vector<Eigen::VectorXd>& raw_actions);

  bool operator==(const World& other) const;

 private:
  ScenarioConfig config_;
  RadioParams radio_;
  std::vector<double> alpha_;
  std::vector<DuSite> dus_;
  std::vector<UeState> ues_;
  std::vector<DuRoster> rosters_;
  std::vector<std::vector<MinMaxTracker>> trackers_;  // [du][slice]
  std::vector<std::vector<double>> last_qos_;         // [du][slice]
  std::vector<Eigen::VectorXd> prev_actions_;
  std::mt19937_64 rng_;
  long step_index_ = 0;
};

// DU centres on a ring with the configured inter-site distance.
std::vector<DuSite> layout_dus(const ScenarioConfig& c);

// UE count per DU from the load weights (largest remainder).
std::vector<int> ues_per_du(const ScenarioConfig& c);

}  // namespace tasam::env
