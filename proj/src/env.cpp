#include "tasam/env.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <type_traits>
#include <utility>

#include "tasam/error.hpp"

namespace tasam::env {

namespace {

constexpr int kLatency = 0;
constexpr int kThroughput = 1;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

void SliceSpec::validate() const {
  double sum = 0.0;
  for (double w : kpi_weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("slice " + name + ": kpi weights must be non-negative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("slice " + name + ": kpi weights must sum to 1");
  if (!(priority_weight > 0.0)) throw ConfigError("slice " + name + ": priority_weight must be positive");
  if (!(latency_ref_s > 0.0)) throw ConfigError("slice " + name + ": latency_ref_s must be positive");
  if (!(rate_ref_bps > 0.0)) throw ConfigError("slice " + name + ": rate_ref_bps must be positive");
  if (!(demand_bps >= 0.0)) throw ConfigError("slice " + name + ": demand_bps must be non-negative");
  if (!std::isfinite(q_min)) throw ConfigError("slice " + name + ": q_min must be finite");
  if (!(traffic_load_bps >= 0.0)) throw ConfigError("slice " + name + ": traffic_load_bps must be non-negative");
  if (!(packet_bits > 0.0)) throw ConfigError("slice " + name + ": packet_bits must be positive");
}

double default_q_min(const SliceSpec& s, int primary_kpi) {
  // Goodness at the reference point: latency l_ref -> 1/(1+1), rate ref -> 1.
  const double goodness_at_ref = primary_kpi == kLatency ? 0.5 : 1.0;
  return s.kpi_weights[static_cast<std::size_t>(primary_kpi)] * goodness_at_ref;
}

std::vector<SliceSpec> default_slices() {
  SliceSpec embb;
  embb.name = "eMBB";
  embb.kpi_weights = {0.05, 0.70, 0.15, 0.10};
  embb.priority_weight = 1.0;
  embb.latency_ref_s = 0.020;
  embb.rate_ref_bps = 10e6;  // 10 Mbps floor
  embb.demand_bps = 1e6;
  embb.traffic_load_bps = 2e6;
  embb.packet_bits = 12000;
  embb.q_min = default_q_min(embb, kThroughput);

  SliceSpec mmtc;
  mmtc.name = "mMTC";
  mmtc.kpi_weights = {0.05, 0.25, 0.20, 0.50};
  mmtc.priority_weight = 0.5;
  mmtc.latency_ref_s = 0.100;
  mmtc.rate_ref_bps = 50e6;  // 50 Mbps floor
  mmtc.demand_bps = 1e5;
  mmtc.traffic_load_bps = 5e4;
  mmtc.packet_bits = 800;
  mmtc.q_min = default_q_min(mmtc, kThroughput);

  SliceSpec urllc;
  urllc.name = "URLLC";
  urllc.kpi_weights = {0.70, 0.10, 0.15, 0.05};
  urllc.priority_weight = 2.0;
  urllc.latency_ref_s = 0.002;  // 2 ms floor
  urllc.rate_ref_bps = 1e6;
  urllc.demand_bps = 5e5;
  urllc.traffic_load_bps = 3e5;
  urllc.packet_bits = 256;
  urllc.q_min = default_q_min(urllc, kLatency);

  return {embb, mmtc, urllc};
}

void ScenarioConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) { throw ConfigError(key + ": " + why); };
  if (num_dus < 1) fail("scenario.num_dus", "must be >= 1");
  if (total_ues < 0) fail("scenario.total_ues", "must be >= 0");
  if (rbs_per_du < 1) fail("scenario.rbs_per_du", "must be >= 1");
  if (!(rb_bandwidth_hz > 0.0)) fail("scenario.rb_bandwidth_hz", "must be positive");
  if (!(total_bandwidth_hz > 0.0)) fail("scenario.total_bandwidth_hz", "must be positive");
  if (rbs_per_du * rb_bandwidth_hz > total_bandwidth_hz * (1.0 + 1e-12)) {
    fail("scenario.rbs_per_du", "K x B exceeds total_bandwidth_hz");
  }
  if (std::isnan(tx_power_dbm) || tx_power_dbm == std::numeric_limits<double>::infinity()) {
    fail("scenario.tx_power_dbm", "must be finite (or -inf to switch transmission off)");
  }
  if (!std::isfinite(noise_psd_dbm_hz)) fail("scenario.noise_psd_dbm_hz", "must be finite");
  if (!(path_loss_exponent > 0.0) || !std::isfinite(path_loss_exponent)) {
    fail("scenario.path_loss_exponent", "must be positive");
  }
  if (!(inter_site_distance_m > 0.0)) fail("scenario.inter_site_distance_m", "must be positive");
  if (!(cell_radius_m > 0.0)) fail("scenario.cell_radius_m", "must be positive");
  if (!(speed_min_mps >= 0.0) || speed_max_mps < speed_min_mps) fail("scenario.speed_min_mps", "need 0 <= min <= max");
  if (!(epoch_s > 0.0)) fail("scenario.epoch_s", "must be positive");
  if (kpi_window < 1) fail("scenario.kpi_window", "must be >= 1");
  if (!(zeta > 0.0)) fail("scenario.zeta", "must be positive");
  if (!(latency_rate_floor_bps > 0.0)) fail("scenario.latency_rate_floor_bps", "must be positive");
  if (!du_load_weights.empty()) {
    if (static_cast<int>(du_load_weights.size()) != num_dus) fail("scenario.du_load_weights", "need one weight per DU");
    double s = 0.0;
    for (double w : du_load_weights) {
      if (!(w >= 0.0)) fail("scenario.du_load_weights", "weights must be non-negative");
      s += w;
    }
    if (!(s > 0.0)) fail("scenario.du_load_weights", "weights must not all be zero");
  }
  if (slices.empty()) fail("scenario.slices", "need at least one slice");
  for (const auto& s : slices) s.validate();
}

nlohmann::json to_json(const ScenarioConfig& c) {
  nlohmann::json slices = nlohmann::json::array();
  for (const auto& s : c.slices) {
    slices.push_back({{"name", s.name},
                      {"kpi_weights", s.kpi_weights},
                      {"priority_weight", s.priority_weight},
                      {"latency_ref_s", s.latency_ref_s},
                      {"rate_ref_bps", s.rate_ref_bps},
                      {"demand_bps", s.demand_bps},
                      {"q_min", s.q_min},
                      {"traffic_load_bps", s.traffic_load_bps},
                      {"packet_bits", s.packet_bits}});
  }
  nlohmann::json j = {{"num_dus", c.num_dus},
                      {"total_ues", c.total_ues},
                      {"rbs_per_du", c.rbs_per_du},
                      {"rb_bandwidth_hz", c.rb_bandwidth_hz},
                      {"total_bandwidth_hz", c.total_bandwidth_hz},
                      {"subcarrier_spacing_hz", c.subcarrier_spacing_hz},
                      {"noise_psd_dbm_hz", c.noise_psd_dbm_hz},
                      {"path_loss_exponent", c.path_loss_exponent},
                      {"inter_site_distance_m", c.inter_site_distance_m},
                      {"cell_radius_m", c.cell_radius_m},
                      {"speed_min_mps", c.speed_min_mps},
                      {"speed_max_mps", c.speed_max_mps},
                      {"epoch_s", c.epoch_s},
                      {"kpi_window", c.kpi_window},
                      {"zeta", c.zeta},
                      {"latency_rate_floor_bps", c.latency_rate_floor_bps},
                      {"du_load_weights", c.du_load_weights},
                      {"slices", slices},
                      {"seed", c.seed}};
  // JSON has no -inf; "off" marks a switched-off transmitter.
  if (std::isinf(c.tx_power_dbm)) {
    j["tx_power_dbm"] = "off";
  } else {
    j["tx_power_dbm"] = c.tx_power_dbm;
  }
  return j;
}

ScenarioConfig scenario_from_json(const nlohmann::json& j, ScenarioConfig base) {
  if (!j.is_object()) throw ConfigError("scenario: expected an object");
  ScenarioConfig c = std::move(base);
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      field = j.at(key).get<std::decay_t<decltype(field)>>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(std::string("scenario.") + key + ": wrong type");
    }
  };
  get("num_dus", c.num_dus);
  get("total_ues", c.total_ues);
  get("rbs_per_du", c.rbs_per_du);
  get("rb_bandwidth_hz", c.rb_bandwidth_hz);
  get("total_bandwidth_hz", c.total_bandwidth_hz);
  get("subcarrier_spacing_hz", c.subcarrier_spacing_hz);
  if (j.contains("tx_power_dbm")) {
    const auto& p = j.at("tx_power_dbm");
    if (p.is_string()) {
      if (p.get<std::string>() != "off") throw ConfigError("scenario.tx_power_dbm: expected a number or \"off\"");
      c.tx_power_dbm = -std::numeric_limits<double>::infinity();
    } else {
      c.tx_power_dbm = p.get<double>();
    }
  }
  get("noise_psd_dbm_hz", c.noise_psd_dbm_hz);
  get("path_loss_exponent", c.path_loss_exponent);
  get("inter_site_distance_m", c.inter_site_distance_m);
  get("cell_radius_m", c.cell_radius_m);
  get("speed_min_mps", c.speed_min_mps);
  get("speed_max_mps", c.speed_max_mps);
  get("epoch_s", c.epoch_s);
  get("kpi_window", c.kpi_window);
  get("zeta", c.zeta);
  get("latency_rate_floor_bps", c.latency_rate_floor_bps);
  get("du_load_weights", c.du_load_weights);
  get("seed", c.seed);
  if (j.contains("slices")) {
    const auto defaults = c.slices.empty() ? default_slices() : c.slices;
    c.slices.clear();
    std::size_t idx = 0;
    for (const auto& sj : j.at("slices")) {
      SliceSpec s = idx < defaults.size() ? defaults[idx] : SliceSpec{};
      auto sget = [&](const char* key, auto& field) {
        if (!sj.contains(key)) return;
        try {
          field = sj.at(key).get<std::decay_t<decltype(field)>>();
        } catch (const nlohmann::json::exception&) {
          throw ConfigError("scenario.slices[" + std::to_string(idx) + "]." + key + ": wrong type");
        }
      };
      sget("name", s.name);
      sget("kpi_weights", s.kpi_weights);
      sget("priority_weight", s.priority_weight);
      sget("latency_ref_s", s.latency_ref_s);
      sget("rate_ref_bps", s.rate_ref_bps);
      sget("demand_bps", s.demand_bps);
      sget("q_min", s.q_min);
      sget("traffic_load_bps", s.traffic_load_bps);
      sget("packet_bits", s.packet_bits);
      c.slices.push_back(s);
      ++idx;
    }
  }
  return c;
}

Eigen::MatrixXi DecodedAction::slice_matrix() const {
  Eigen::MatrixXi b = Eigen::MatrixXi::Zero(num_slices, num_rbs());
  for (int k = 0; k < num_rbs(); ++k) b(rb_slice[static_cast<std::size_t>(k)], k) = 1;
  return b;
}

Eigen::MatrixXi DecodedAction::ue_matrix() const {
  Eigen::MatrixXi e = Eigen::MatrixXi::Zero(static_cast<int>(roster.size()), num_rbs());
  for (int k = 0; k < num_rbs(); ++k) {
    const int ue = rb_ue[static_cast<std::size_t>(k)];
    if (ue < 0) continue;
    const auto it = std::find(roster.begin(), roster.end(), ue);
    e(static_cast<int>(it - roster.begin()), k) = 1;
  }
  return e;
}

std::vector<int> DecodedAction::rbs_per_slice() const {
  std::vector<int> counts(static_cast<std::size_t>(num_slices), 0);
  for (int s : rb_slice) counts[static_cast<std::size_t>(s)] += 1;
  return counts;
}

DuRoster make_roster(const std::vector<UeState>& ues, int du_id, int num_slices) {
  DuRoster r;
  r.by_slice.assign(static_cast<std::size_t>(num_slices), {});
  for (const auto& ue : ues) {
    if (ue.du_id != du_id) continue;
    r.all.push_back(ue.id);
    r.by_slice[static_cast<std::size_t>(ue.slice_id)].push_back(ue.id);
  }
  std::sort(r.all.begin(), r.all.end());
  for (auto& s : r.by_slice) std::sort(s.begin(), s.end());
  return r;
}

DecodedAction decode_action(std::span<const double> raw, const DuRoster& roster) {
  const int num_slices = static_cast<int>(roster.by_slice.size());
  if (raw.size() % 2 != 0 || raw.empty()) {
    throw ProtocolError("decode_action: raw action length " + std::to_string(raw.size()) + " is not 2K");
  }
  const int K = static_cast<int>(raw.size() / 2);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (!(raw[i] > 0.0 && raw[i] < 1.0)) {
      std::ostringstream os;
      os << "decode_action: entry " << i << " = " << raw[i] << " is outside (0,1)";
      throw ProtocolError(os.str());
    }
  }
  DecodedAction d;
  d.num_slices = num_slices;
  d.roster = roster.all;
  d.rb_slice.resize(static_cast<std::size_t>(K));
  d.rb_ue.assign(static_cast<std::size_t>(K), -1);
  for (int k = 0; k < K; ++k) {
    const int l = std::min(static_cast<int>(std::floor(raw[static_cast<std::size_t>(k)] * num_slices)), num_slices - 1);
    d.rb_slice[static_cast<std::size_t>(k)] = l;
    const auto& members = roster.by_slice[static_cast<std::size_t>(l)];
    if (members.empty()) continue;
    const int n = static_cast<int>(members.size());
    const int j = std::min(static_cast<int>(std::floor(raw[static_cast<std::size_t>(K + k)] * n)), n - 1);
    d.rb_ue[static_cast<std::size_t>(k)] = members[static_cast<std::size_t>(j)];
  }
  return d;
}

DecodedAction decode_action(const Eigen::VectorXd& raw, const DuRoster& roster) {
  return decode_action(std::span<const double>(raw.data(), static_cast<std::size_t>(raw.size())), roster);
}

Eigen::VectorXd encode_choice(const std::vector<int>& rb_slice, const std::vector<int>& slice_index,
                              const DuRoster& roster) {
  const int K = static_cast<int>(rb_slice.size());
  const int L = static_cast<int>(roster.by_slice.size());
  Eigen::VectorXd raw(2 * K);
  for (int k = 0; k < K; ++k) {
    const int l = rb_slice[static_cast<std::size_t>(k)];
    raw(k) = (l + 0.5) / L;
    const int n = static_cast<int>(roster.by_slice[static_cast<std::size_t>(l)].size());
    raw(K + k) = n == 0 ? 0.5 : (slice_index[static_cast<std::size_t>(k)] + 0.5) / n;
  }
  return raw;
}

double dbm_to_watt(double dbm) { return std::pow(10.0, (dbm - 30.0) / 10.0); }

RadioParams radio_params(const ScenarioConfig& c) {
  RadioParams r;
  r.rb_bandwidth_hz = c.rb_bandwidth_hz;
  r.rb_power_w = std::isinf(c.tx_power_dbm) ? 0.0 : dbm_to_watt(c.tx_power_dbm - 10.0 * std::log10(c.rbs_per_du));
  r.noise_power_w = dbm_to_watt(c.noise_psd_dbm_hz + 10.0 * std::log10(c.rb_bandwidth_hz));
  r.path_loss_exponent = c.path_loss_exponent;
  return r;
}

ChannelDraw draw_channel(int num_ues, int num_dus, int num_rbs, std::mt19937_64& rng) {
  ChannelDraw ch(num_ues, num_dus, num_rbs, 0.0);
  std::exponential_distribution<double> rayleigh_power(1.0);
  for (double& g : ch.gain) g = rayleigh_power(rng);
  return ch;
}

double link_distance(const Eigen::Vector2d& a, const Eigen::Vector2d& b) { return std::max((a - b).norm(), 1.0); }

double compute_rate(const UeState& ue, std::span<const DecodedAction> all_du_allocs, const ChannelDraw& channel,
                    std::span<const DuSite> dus, const RadioParams& radio) {
  const auto& own = all_du_allocs[static_cast<std::size_t>(ue.du_id)];
  const double eta = radio.path_loss_exponent;
  double rate = 0.0;
  for (int k = 0; k < own.num_rbs(); ++k) {
    if (own.rb_ue[static_cast<std::size_t>(k)] != ue.id) continue;
    // e_{u,k} = 1 implies b_{l,k} = 1 for the UE's slice by construction.
    const double d_own = link_distance(ue.position, dus[static_cast<std::size_t>(ue.du_id)].position);
    const double signal = radio.rb_power_w * std::pow(d_own, -eta) * channel.at(ue.id, ue.du_id, k);
    double interference = 0.0;
    for (std::size_t m = 0; m < all_du_allocs.size(); ++m) {
      if (static_cast<int>(m) == ue.du_id || !all_du_allocs[m].transmits_on(k)) continue;
      const double d = link_distance(ue.position, dus[m].position);
      interference += radio.rb_power_w * std::pow(d, -eta) * channel.at(ue.id, static_cast<int>(m), k);
    }
    rate += radio.rb_bandwidth_hz * std::log2(1.0 + signal / (interference + radio.noise_power_w));
  }
  return rate;
}

KpiVector compute_kpis(std::span<const UeWindow> slice_ues) {
  if (slice_ues.empty()) return {0.0, 0.0, 1.0, 1.0};
  double max_latency = 0.0;
  double rate_sum = 0.0;
  double availability_sum = 0.0;
  double density_count = 0.0;
  for (const auto& u : slice_ues) {
    max_latency = std::max(max_latency, u.latency_s);
    rate_sum += u.rate_bps;
    if (!u.rate_history.empty()) {
      double met = 0.0;
      for (double c : u.rate_history) met += c >= u.demand_bps ? 1.0 : 0.0;
      availability_sum += met / static_cast<double>(u.rate_history.size());
    }
    density_count += u.rate_bps >= u.demand_bps ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(slice_ues.size());
  return {max_latency, rate_sum / n, availability_sum / n, density_count / n};
}

KpiVector normalize_kpis(const KpiVector& raw, const SliceSpec& spec) {
  return {1.0 / (1.0 + raw[0] / spec.latency_ref_s), raw[1] / spec.rate_ref_bps, raw[2], raw[3]};
}

double slice_qos(const KpiVector& m, const SliceSpec& spec) {
  double q = 0.0;
  for (int i = 0; i < kNumKpis; ++i) q += spec.kpi_weights[static_cast<std::size_t>(i)] * m[static_cast<std::size_t>(i)];
  return q;
}

std::vector<double> sigmoid_sensitivities(std::span<const SliceSpec> specs) {
  double sum = 0.0;
  for (const auto& s : specs) sum += s.priority_weight;
  std::vector<double> alpha;
  alpha.reserve(specs.size());
  for (const auto& s : specs) alpha.push_back(s.priority_weight * static_cast<double>(specs.size()) / sum);
  return alpha;
}

RewardBreakdown compute_reward(std::span<const double> q, std::span<const double> q_norm,
                               std::span<const int> rb_counts, int total_rbs, std::span<const SliceSpec> specs,
                               std::span<const double> alpha, double zeta) {
  RewardBreakdown r;
  int used = 0;
  double shortfall = 0.0;
  for (std::size_t l = 0; l < specs.size(); ++l) {
    r.sigmoid_term += sigmoid(alpha[l] * q_norm[l]);
    used += rb_counts[l];
    shortfall += std::max(0.0, specs[l].q_min - q[l]);
  }
  r.resource_penalty = -zeta * std::max(0, used - total_rbs);
  r.qos_penalty = -zeta * shortfall;
  r.total = r.sigmoid_term + r.resource_penalty + r.qos_penalty;
  return r;
}

void MinMaxTracker::observe(double q) {
  if (count == 0) {
    min = max = q;
  } else {
    min = std::min(min, q);
    max = std::max(max, q);
  }
  ++count;
}

double MinMaxTracker::normalize(double q) const {
  const double range = max - min;
  if (count == 0 || !(range > 0.0)) return 0.0;
  return std::clamp((q - min) / range, 0.0, 1.0);
}

void move_ue(UeState& ue, const DuSite& site, double dt, double heading_offset) {
  ue.last_heading_offset = heading_offset;
  ue.direction = std::remainder(ue.direction + heading_offset, 2.0 * std::numbers::pi);
  const Eigen::Vector2d step(std::cos(ue.direction), std::sin(ue.direction));
  Eigen::Vector2d p = ue.position + ue.speed * dt * step;
  Eigen::Vector2d rel = p - site.position;
  const double r = rel.norm();
  if (r > site.radius) {
    const Eigen::Vector2d n = rel / r;
    // Radial mirror about the boundary circle, velocity mirrored about the normal.
    const double inside = std::max(2.0 * site.radius - r, 0.0);
    p = site.position + inside * n;
    const Eigen::Vector2d v = step - 2.0 * step.dot(n) * n;
    ue.direction = std::atan2(v.y(), v.x());
    rel = p - site.position;
    if (rel.norm() > site.radius) p = site.position + rel * (site.radius / rel.norm());
  }
  ue.position = p;
}

std::vector<int> advance_mobility(std::vector<UeState>& ues, std::span<const DuSite> dus, double dt,
                                  std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, static_cast<int>(kHeadingOffsets.size()) - 1);
  std::vector<int> drawn;
  drawn.reserve(ues.size());
  for (auto& ue : ues) {
    const int idx = pick(rng);
    drawn.push_back(idx);
    move_ue(ue, dus[static_cast<std::size_t>(ue.du_id)], dt, kHeadingOffsets[static_cast<std::size_t>(idx)]);
  }
  return drawn;
}

Eigen::VectorXd features(const NetworkState& s, double count_scale) {
  const auto L = static_cast<Eigen::Index>(s.slice_qos.size());
  Eigen::VectorXd f(2 * L + s.prev_action.size());
  for (Eigen::Index l = 0; l < L; ++l) {
    f(l) = s.slice_qos[static_cast<std::size_t>(l)];
    f(L + l) = s.slice_ue_counts[static_cast<std::size_t>(l)] / count_scale;
  }
  f.tail(s.prev_action.size()) = s.prev_action;
  return f;
}

std::vector<DuSite> layout_dus(const ScenarioConfig& c) {
  std::vector<DuSite> dus;
  const double ring = c.num_dus == 1 ? 0.0 : c.inter_site_distance_m / (2.0 * std::sin(std::numbers::pi / c.num_dus));
  for (int m = 0; m < c.num_dus; ++m) {
    DuSite s;
    s.id = m;
    const double a = 2.0 * std::numbers::pi * m / c.num_dus;
    s.position = Eigen::Vector2d(ring * std::cos(a), ring * std::sin(a));
    s.radius = c.cell_radius_m;
    dus.push_back(s);
  }
  return dus;
}

std::vector<int> ues_per_du(const ScenarioConfig& c) {
  std::vector<double> w = c.du_load_weights.empty() ? std::vector<double>(static_cast<std::size_t>(c.num_dus), 1.0)
                                                    : c.du_load_weights;
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  std::vector<int> counts(w.size());
  std::vector<std::pair<double, int>> remainders;
  int assigned = 0;
  for (std::size_t m = 0; m < w.size(); ++m) {
    const double exact = c.total_ues * w[m] / total;
    counts[m] = static_cast<int>(std::floor(exact));
    assigned += counts[m];
    remainders.emplace_back(exact - counts[m], static_cast<int>(m));
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int i = 0; assigned < c.total_ues; ++i, ++assigned) {
    counts[static_cast<std::size_t>(remainders[static_cast<std::size_t>(i) % remainders.size()].second)] += 1;
  }
  return counts;
}

World World::create(const ScenarioConfig& config) { return create(config, config.seed ^ 0x9e3779b97f4a7c15ULL); }

World World::create(const ScenarioConfig& config, std::uint64_t dynamics_seed) {
  config.validate();
  World w;
  w.config_ = config;
  w.radio_ = radio_params(config);
  w.alpha_ = sigmoid_sensitivities(config.slices);
  w.dus_ = layout_dus(config);

  std::mt19937_64 layout_rng(config.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto counts = ues_per_du(config);
  const int L = config.slice_count();
  int next_id = 0;
  for (int m = 0; m < config.num_dus; ++m) {
    for (int j = 0; j < counts[static_cast<std::size_t>(m)]; ++j) {
      UeState ue;
      ue.id = next_id++;
      ue.du_id = m;
      ue.slice_id = j % L;
      const double r = config.cell_radius_m * std::sqrt(unit(layout_rng));
      const double a = 2.0 * std::numbers::pi * unit(layout_rng);
      ue.position = w.dus_[static_cast<std::size_t>(m)].position + Eigen::Vector2d(r * std::cos(a), r * std::sin(a));
      ue.direction = 2.0 * std::numbers::pi * unit(layout_rng);
      ue.speed = config.speed_min_mps + (config.speed_max_mps - config.speed_min_mps) * unit(layout_rng);
      ue.demand_bps = config.slices[static_cast<std::size_t>(ue.slice_id)].demand_bps;
      w.ues_.push_back(std::move(ue));
    }
  }
  for (int m = 0; m < config.num_dus; ++m) w.rosters_.push_back(make_roster(w.ues_, m, L));
  w.trackers_.assign(static_cast<std::size_t>(config.num_dus), std::vector<MinMaxTracker>(static_cast<std::size_t>(L)));
  w.last_qos_.assign(static_cast<std::size_t>(config.num_dus), std::vector<double>(static_cast<std::size_t>(L), 0.0));
  w.prev_actions_.assign(static_cast<std::size_t>(config.num_dus), Eigen::VectorXd::Constant(config.action_dim(), 0.5));
  w.rng_.seed(dynamics_seed);
  return w;
}

const MinMaxTracker& World::tracker(int du, int slice) const {
  return trackers_[static_cast<std::size_t>(du)][static_cast<std::size_t>(slice)];
}

double World::count_scale() const {
  return std::max(1.0, static_cast<double>(config_.total_ues) / config_.num_dus);
}

NetworkState World::observe(int du) const {
  NetworkState s;
  s.slice_qos = last_qos_[static_cast<std::size_t>(du)];
  const auto& r = rosters_[static_cast<std::size_t>(du)];
  for (const auto& members : r.by_slice) s.slice_ue_counts.push_back(static_cast<int>(members.size()));
  s.prev_action = prev_actions_[static_cast<std::size_t>(du)];
  return s;
}

std::vector<NetworkState> World::observe_all() const {
  std::vector<NetworkState> out;
  for (int m = 0; m < config_.num_dus; ++m) out.push_back(observe(m));
  return out;
}

StepResult World::step(const std::vector<Eigen::VectorXd>& raw_actions) {
  const int M = config_.num_dus;
  const int K = config_.rbs_per_du;
  const int L = config_.slice_count();
  if (static_cast<int>(raw_actions.size()) != M) {
    throw ProtocolError("step: expected one action per DU (" + std::to_string(M) + "), got " +
                        std::to_string(raw_actions.size()));
  }
  StepResult out;
  const std::vector<NetworkState> states = observe_all();
  for (int m = 0; m < M; ++m) {
    const auto& a = raw_actions[static_cast<std::size_t>(m)];
    if (a.size() != 2 * K) {
      throw ProtocolError("step: DU " + std::to_string(m) + " sent an action of length " + std::to_string(a.size()) +
                          ", expected " + std::to_string(2 * K));
    }
    try {
      out.allocations.push_back(decode_action(a, rosters_[static_cast<std::size_t>(m)]));
    } catch (const ProtocolError& e) {
      throw ProtocolError("step: DU " + std::to_string(m) + ": " + e.what());
    }
  }

  // Traffic arrivals first, then the channel realization; neither depends on the allocation.
  const int N = static_cast<int>(ues_.size());
  out.arrivals_bits.resize(static_cast<std::size_t>(N));
  for (int u = 0; u < N; ++u) {
    const auto& spec = config_.slices[static_cast<std::size_t>(ues_[static_cast<std::size_t>(u)].slice_id)];
    const double mean_packets = spec.traffic_load_bps * config_.epoch_s / spec.packet_bits;
    std::poisson_distribution<int> packets(mean_packets);
    out.arrivals_bits[static_cast<std::size_t>(u)] = mean_packets > 0.0 ? packets(rng_) * spec.packet_bits : 0.0;
  }
  out.channel = draw_channel(N, M, K, rng_);

  out.ue_rates_bps.resize(static_cast<std::size_t>(N));
  for (int u = 0; u < N; ++u) {
    out.ue_rates_bps[static_cast<std::size_t>(u)] =
        compute_rate(ues_[static_cast<std::size_t>(u)], out.allocations, out.channel, dus_, radio_);
  }

  for (int u = 0; u < N; ++u) {
    auto& ue = ues_[static_cast<std::size_t>(u)];
    const double c = out.ue_rates_bps[static_cast<std::size_t>(u)];
    ue.backlog_bits += out.arrivals_bits[static_cast<std::size_t>(u)];
    ue.last_latency_s = ue.backlog_bits / std::max(c, config_.latency_rate_floor_bps);
    ue.backlog_bits -= std::min(ue.backlog_bits, c * config_.epoch_s);
    ue.last_rate_bps = c;
    ue.rate_history.push_back(c);
    while (static_cast<int>(ue.rate_history.size()) > config_.kpi_window) ue.rate_history.pop_front();
  }

  out.slice_qos.assign(static_cast<std::size_t>(M), std::vector<double>(static_cast<std::size_t>(L), 0.0));
  out.kpis.assign(static_cast<std::size_t>(M), std::vector<KpiVector>(static_cast<std::size_t>(L)));
  for (int m = 0; m < M; ++m) {
    std::vector<double> q_norm(static_cast<std::size_t>(L));
    for (int l = 0; l < L; ++l) {
      std::vector<UeWindow> window;
      for (int id : rosters_[static_cast<std::size_t>(m)].by_slice[static_cast<std::size_t>(l)]) {
        const auto& ue = ues_[static_cast<std::size_t>(id)];
        window.push_back({ue.last_latency_s, ue.last_rate_bps, ue.demand_bps,
                          std::vector<double>(ue.rate_history.begin(), ue.rate_history.end())});
      }
      const auto& spec = config_.slices[static_cast<std::size_t>(l)];
      const KpiVector raw = compute_kpis(window);
      const double q = slice_qos(normalize_kpis(raw, spec), spec);
      auto& tracker = trackers_[static_cast<std::size_t>(m)][static_cast<std::size_t>(l)];
      tracker.observe(q);
      q_norm[static_cast<std::size_t>(l)] = tracker.normalize(q);
      out.kpis[static_cast<std::size_t>(m)][static_cast<std::size_t>(l)] = raw;
      out.slice_qos[static_cast<std::size_t>(m)][static_cast<std::size_t>(l)] = q;
    }
    const auto counts = out.allocations[static_cast<std::size_t>(m)].rbs_per_slice();
    const auto breakdown = compute_reward(out.slice_qos[static_cast<std::size_t>(m)], q_norm, counts, K,
                                          config_.slices, alpha_, config_.zeta);
    out.du_breakdowns.push_back(breakdown);
    out.du_rewards.push_back(breakdown.total);
  }
  out.global_reward = std::accumulate(out.du_rewards.begin(), out.du_rewards.end(), 0.0) / M;

  advance_mobility(ues_, dus_, config_.epoch_s, rng_);

  for (int m = 0; m < M; ++m) {
    last_qos_[static_cast<std::size_t>(m)] = out.slice_qos[static_cast<std::size_t>(m)];
    prev_actions_[static_cast<std::size_t>(m)] = raw_actions[static_cast<std::size_t>(m)];
  }
  ++step_index_;
  out.next_states = observe_all();
  for (int m = 0; m < M; ++m) {
    out.transitions.push_back({states[static_cast<std::size_t>(m)], raw_actions[static_cast<std::size_t>(m)],
                               out.next_states[static_cast<std::size_t>(m)], out.du_rewards[static_cast<std::size_t>(m)]});
  }
  return out;
}

bool World::operator==(const World& o) const {
  if (step_index_ != o.step_index_ || ues_.size() != o.ues_.size() || rng_ != o.rng_) return false;
  for (std::size_t i = 0; i < ues_.size(); ++i) {
    const auto& a = ues_[i];
    const auto& b = o.ues_[i];
    if (a.position != b.position || a.direction != b.direction || a.backlog_bits != b.backlog_bits ||
        a.rate_history != b.rate_history) {
      return false;
    }
  }
  return last_qos_ == o.last_qos_ && prev_actions_ == o.prev_actions_;
}

}  // namespace tasam::env
