#include "tasam/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "tasam/diag.hpp"
#include "tasam/error.hpp"

namespace tasam::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

marl::TrainConfig micro_preset() {
  marl::TrainConfig c;
  c.iterations = 50;
  c.evaluations_per_actor = 1;
  c.episode_length = 20;
  c.batch_size = 32;
  c.actor_hidden = c.critic_hidden = {16, 16};
  c.replay_capacity = 10000;
  auto& s = c.scenario;
  s.num_dus = 1;
  s.total_ues = 2;
  s.rbs_per_du = 3;
  s.slices.resize(2);
  return c;
}

marl::TrainConfig acceptance_preset() {
  marl::TrainConfig c;
  c.iterations = 200;
  c.evaluations_per_actor = 4;
  c.actor_hidden = c.critic_hidden = {64, 64, 64};
  auto& s = c.scenario;
  s.num_dus = 2;
  s.total_ues = 20;
  s.rbs_per_du = 10;
  return c;
}

marl::TrainConfig appendix_preset() {
  marl::TrainConfig c;
  auto& s = c.scenario;
  s.total_bandwidth_hz = 100e6;
  s.subcarrier_spacing_hz = 30e3;
  s.num_dus = 5;
  s.total_ues = 55;
  return c;
}

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

json read_json_file(const fs::path& p, const char* what) {
  std::ifstream in(p);
  if (!in) throw ConfigError(std::string(what) + ": cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string(what) + ": " + p.string() + " is not valid JSON (" + e.what() + ")");
  }
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw ConfigError("cannot write " + p.string());
  out << text;
}

template <class T>
T arg(const json& args, const char* key) {
  try {
    return args.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("argument ") + key + ": missing or wrong type");
  }
}

// Artifacts are staged in memory and flushed only after the command succeeded.
struct Staged {
  std::vector<std::pair<std::string, std::string>> files;
  void add(const std::string& name, const std::string& text) { files.emplace_back(name, text); }
};

std::string metrics_csv(const marl::RunMetrics& m) {
  std::ostringstream os;
  marl::write_metrics_csv(os, m);
  return os.str();
}

std::string cdf_csv(std::vector<double> samples, const std::string& column) {
  std::ostringstream os;
  if (samples.empty()) {
    os << column << ",probability\n";
    return os.str();
  }
  diag::write_cdf_csv(os, diag::cdf(std::move(samples)), column);
  return os.str();
}

std::string slice_file_name(const env::ScenarioConfig& s, int l) {
  std::string n = s.slices[static_cast<std::size_t>(l)].name;
  if (n.empty()) n = "slice" + std::to_string(l);
  std::replace_if(n.begin(), n.end(), [](char ch) { return !std::isalnum(static_cast<unsigned char>(ch)); }, '_');
  return n;
}

json eval_summary(const marl::EvalStats& st, const env::ScenarioConfig& s) {
  if (st.empty) return {{"empty", true}, {"episodes", 0}};
  json q = json::object();
  for (int l = 0; l < s.slice_count(); ++l) q[slice_file_name(s, l)] = st.qos_satisfaction[static_cast<std::size_t>(l)];
  return {{"empty", false},
          {"episodes", st.episodes},
          {"mean_reward", st.mean_reward},
          {"std_reward", st.std_reward},
          {"episode_rewards", st.episode_rewards},
          {"qos_satisfaction", q},
          {"throughput_samples", st.ue_throughput_bps.size()}};
}

void stage_eval(Staged& out, const marl::EvalStats& st, const env::ScenarioConfig& s) {
  out.add("eval_summary.json", eval_summary(st, s).dump(2) + "\n");
  if (st.empty) return;
  {
    std::ostringstream os;
    os << "sample,step,ue,throughput_bps\n" << std::setprecision(17);
    const std::size_t n = static_cast<std::size_t>(s.total_ues);
    for (std::size_t i = 0; i < st.ue_throughput_bps.size(); ++i)
      os << i << ',' << i / n << ',' << i % n << ',' << st.ue_throughput_bps[i] << '\n';
    out.add("throughput_samples.csv", os.str());
  }
  out.add("throughput_cdf.csv", cdf_csv(st.ue_throughput_bps, "throughput_bps"));
  for (int l = 0; l < s.slice_count(); ++l)
    out.add("qos_cdf_" + slice_file_name(s, l) + ".csv", cdf_csv(st.slice_qos[static_cast<std::size_t>(l)], "qos"));
}

marl::EvalStats run_eval(const std::vector<sac::PolicyNet>& policies, const marl::TrainConfig& c, int episodes,
                         std::uint64_t seed) {
  return marl::evaluate(policies, c.scenario, episodes, c.episode_length, seed);
}

void check_rhos(const std::vector<double>& rhos) {
  if (rhos.empty()) throw ConfigError("rhos: need at least one value");
  for (double r : rhos)
    if (!(r >= 0.0 && std::isfinite(r))) throw ConfigError("rhos: values must be finite and non-negative");
}

}  // namespace

std::vector<std::string> preset_names() { return {"paper-table1", "paper-appendix", "micro", "acceptance", "non-equal-rho"}; }

marl::TrainConfig preset(const std::string& name) {
  if (name == "paper-table1") return marl::TrainConfig{};
  if (name == "paper-appendix") return appendix_preset();
  if (name == "micro") return micro_preset();
  if (name == "acceptance") return acceptance_preset();
  if (name == "non-equal-rho") {
    marl::TrainConfig c;
    const auto mode = c.sam.mode;
    c.sam = sam::non_equal_rho_preset();
    c.sam.mode = mode;
    return c;
  }
  throw ConfigError("preset: unknown name '" + name + "'");
}

void apply_override(json& tree, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "': expected key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* node = &tree;
  std::stringstream ks(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ks, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& p = parts[i];
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        idx = std::stoul(p);
      } catch (const std::exception&) {
        throw ConfigError(key + ": '" + p + "' is not an index");
      }
      if (idx >= node->size()) throw ConfigError(key + ": index out of range");
      node = &(*node)[idx];
    } else if (node->is_object() && node->contains(p)) {
      node = &(*node)[p];
    } else {
      throw ConfigError(key + ": unknown key");
    }
  }
  *node = value;
}

marl::TrainConfig resolve_config(const ConfigRequest& req) {
  json file;
  if (req.config_file) file = read_json_file(*req.config_file, "config");
  if (req.config_file && !file.is_object()) throw ConfigError("config: top level must be an object");
  std::optional<std::string> preset_name = req.preset;
  if (!preset_name && file.is_object() && file.contains("preset")) {
    if (!file.at("preset").is_string()) throw ConfigError("preset: expected a string");
    preset_name = file.at("preset").get<std::string>();
  }
  marl::TrainConfig c = preset_name ? preset(*preset_name) : marl::TrainConfig{};
  if (file.is_object()) c = marl::train_config_from_json(file, c);
  if (!req.overrides.empty()) {
    json tree = marl::to_json(c);
    for (const auto& o : req.overrides) apply_override(tree, o);
    c = marl::train_config_from_json(tree, c);
  }
  if (req.seed) marl::set_run_seed(c, *req.seed);
  if (req.mode) marl::apply_mode(c, *req.mode);
  c.validate();
  return c;
}

json checkpoint_to_json(const marl::TrainConfig& c, const std::vector<marl::AgentState>& actors,
                        const marl::CriticState& critic) {
  json a = json::array();
  for (const auto& ag : actors)
    a.push_back({{"action_dim", ag.policy.action_dim},
                 {"policy", nn::to_json(ag.policy.trunk)},
                 {"optimizer", nn::to_json(ag.opt)}});
  json cr = {{"state_dim", critic.critic.state_dim},
             {"action_dim", critic.critic.action_dim},
             {"net", nn::to_json(critic.critic.net)},
             {"optimizer", nn::to_json(critic.opt)}};
  if (critic.target) cr["target"] = nn::to_json(critic.target->net);
  return {{"format", "tasam-checkpoint"},
          {"version", kCheckpointVersion},
          {"artifact_version", kArtifactVersion},
          {"config", marl::to_json(c)},
          {"actors", a},
          {"critic", cr}};
}

Checkpoint checkpoint_from_json(const json& j) {
  if (!j.is_object() || j.value("format", std::string{}) != "tasam-checkpoint")
    throw ConfigError("checkpoint: not a tasam checkpoint");
  if (!j.contains("version") || !j.at("version").is_number_integer() || j.at("version").get<int>() != kCheckpointVersion) {
    throw ConfigError("checkpoint: version " + (j.contains("version") ? j.at("version").dump() : std::string("missing")) +
                      " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  try {
    Checkpoint ck;
    ck.config = marl::train_config_from_json(j.at("config"));
    for (const auto& a : j.at("actors")) {
      marl::AgentState ag;
      ag.policy.trunk = nn::mlp_from_json(a.at("policy"));
      ag.policy.action_dim = a.at("action_dim").get<int>();
      ag.opt = nn::adam_from_json(a.at("optimizer"), ag.policy.trunk);
      ck.actors.push_back(std::move(ag));
    }
    const auto& cr = j.at("critic");
    ck.critic.critic.net = nn::mlp_from_json(cr.at("net"));
    ck.critic.critic.state_dim = cr.at("state_dim").get<int>();
    ck.critic.critic.action_dim = cr.at("action_dim").get<int>();
    ck.critic.opt = nn::adam_from_json(cr.at("optimizer"), ck.critic.critic.net);
    if (cr.contains("target"))
      ck.critic.target = sac::CriticNet{nn::mlp_from_json(cr.at("target")), ck.critic.critic.state_dim,
                                        ck.critic.critic.action_dim};
    if (static_cast<int>(ck.actors.size()) != ck.config.num_actors())
      throw ConfigError("checkpoint: actor count does not match the stored scenario");
    return ck;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("checkpoint: malformed bundle (") + e.what() + ")");
  }
}

void save_checkpoint(const fs::path& p, const json& bundle) { write_text(p, bundle.dump() + "\n"); }

Checkpoint load_checkpoint(const fs::path& p) { return checkpoint_from_json(read_json_file(p, "checkpoint")); }

json to_json(const Manifest& m) {
  return {{"artifact", kArtifactName},
          {"artifact_version", kArtifactVersion},
          {"manifest_version", kManifestVersion},
          {"command", m.command},
          {"args", m.args},
          {"outputs", m.outputs},
          {"started_at", m.started_at},
          {"finished_at", m.finished_at}};
}

Manifest manifest_from_json(const json& j) {
  if (!j.is_object() || j.value("artifact", std::string{}) != kArtifactName)
    throw ConfigError("manifest: not a tasam manifest");
  if (j.value("manifest_version", -1) != kManifestVersion)
    throw ConfigError("manifest: unsupported manifest_version");
  Manifest m;
  try {
    m.command = j.at("command").get<std::string>();
    m.args = j.at("args");
    m.outputs = j.value("outputs", std::vector<std::string>{});
    m.started_at = j.value("started_at", std::string{});
    m.finished_at = j.value("finished_at", std::string{});
  } catch (const json::exception& e) {
    throw ConfigError(std::string("manifest: malformed (") + e.what() + ")");
  }
  return m;
}

Manifest read_manifest(const fs::path& p) { return manifest_from_json(read_json_file(p, "manifest")); }

fs::path output_dir(const std::optional<fs::path>& explicit_dir, const std::string& leaf) {
  if (explicit_dir) return *explicit_dir;
  const char* root = std::getenv(kOutputRootEnv);
  return fs::path(root && *root ? root : "runs") / leaf;
}

std::vector<Variant> ablation_variants() {
  return {{"TA-SAM (full)", "both-sam", true, false},
          {"w/o Selective SAM", "both-sam", false, false},
          {"w/ Static rho", "both-sam", true, true},
          {"w/o SAM (Standard SAC MARL)", "no-sam", true, false},
          {"SAC + L2 Regularization", "l2-reg", true, false}};
}

marl::TrainConfig apply_variant(marl::TrainConfig c, const Variant& v) {
  marl::apply_mode(c, v.mode);
  c.sam.selective = v.selective;
  if (v.static_rho) {
    c.sam.schedule = sam::Schedule::constant;
    c.sam.rho_actor_start = c.sam.rho_actor_end = kStaticRho;
    c.sam.rho_critic_start = c.sam.rho_critic_end = kStaticRho;
  }
  return c;
}

double final_window_mean(const marl::RunMetrics& m, int window) {
  const auto tr = m.mean_reward_trace();
  if (tr.empty()) return 0.0;
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(std::max(window, 1)), tr.size());
  return std::accumulate(tr.end() - static_cast<std::ptrdiff_t>(n), tr.end(), 0.0) / static_cast<double>(n);
}

json resolve_args(const std::string& command, json args) {
  if (!args.is_object()) throw ConfigError("arguments: expected an object");
  auto config = [&]() {
    if (!args.contains("config")) throw ConfigError("arguments: missing config");
    marl::TrainConfig c = marl::train_config_from_json(args.at("config"));
    c.validate();
    args["config"] = marl::to_json(c);
    return c;
  };
  auto seeds = [&]() {
    auto s = args.value("seeds", std::vector<std::uint64_t>{1, 2, 3});
    if (s.empty()) throw ConfigError("seeds: need at least one seed");
    args["seeds"] = s;
    return s;
  };
  if (command == "train") {
    const auto c = config();
    const int ep = args.value("eval_episodes", c.evaluations_per_actor);
    if (ep < 0) throw ConfigError("eval_episodes: must be non-negative");
    args["eval_episodes"] = ep;
  } else if (command == "eval") {
    if (args.contains("checkpoint") && !args.at("checkpoint").is_null()) {
      const auto ck = load_checkpoint(arg<std::string>(args, "checkpoint"));
      args["config"] = marl::to_json(ck.config);
    } else {
      args["checkpoint"] = nullptr;
      config();
    }
    const int ep = args.value("episodes", 10);
    if (ep < 0) throw ConfigError("episodes: must be non-negative");
    args["episodes"] = ep;
    args["eval_seed"] = args.value("eval_seed", std::uint64_t{1});
  } else if (command == "ablate") {
    config();
    if (seeds().size() < 3) throw ConfigError("seeds: ablation needs at least 3 seeds");
    const int ep = args.value("eval_episodes", 4);
    if (ep < 1) throw ConfigError("eval_episodes: must be at least 1");
    args["eval_episodes"] = ep;
  } else if (command == "sweep") {
    config();
    seeds();
    auto rhos = args.value("rhos", std::vector<double>{0.01, 0.05, 0.1, 0.5});
    check_rhos(rhos);
    args["rhos"] = rhos;
    auto modes = args.value("modes", std::vector<std::string>{"no-sam", "actor-sam", "critic-sam", "both-sam"});
    for (const auto& m : modes) {
      marl::TrainConfig probe;
      marl::apply_mode(probe, m);
    }
    args["modes"] = modes;
  } else if (command == "diagnose") {
    const auto ck = load_checkpoint(arg<std::string>(args, "checkpoint"));
    args["config"] = marl::to_json(ck.config);
    args["probe_seed"] = args.value("probe_seed", std::uint64_t{777});
    const int size = args.value("probe_size", 512);
    const int iters = args.value("max_iters", 100);
    const double tol = args.value("tol", 1e-4);
    const int ep = args.value("episodes", 10);
    if (size < 1) throw ConfigError("probe_size: must be at least 1");
    if (iters < 1) throw ConfigError("max_iters: must be at least 1");
    if (!(tol > 0.0)) throw ConfigError("tol: must be positive");
    if (ep < 0) throw ConfigError("episodes: must be non-negative");
    args["probe_size"] = size;
    args["max_iters"] = iters;
    args["tol"] = tol;
    args["episodes"] = ep;
    args["mode_label"] = args.value("mode_label", marl::mode_name(ck.config));
  } else {
    throw ConfigError("unknown command '" + command + "'");
  }
  return args;
}

Manifest run_command(const std::string& command, const json& raw_args, const fs::path& out, std::ostream& log) {
  Manifest man;
  man.command = command;
  man.started_at = now_iso();
  const json args = resolve_args(command, raw_args);
  man.args = args;
  Staged staged;

  if (command == "train") {
    const marl::TrainConfig c = marl::train_config_from_json(args.at("config"));
    log << "train: mode " << marl::mode_name(c) << ", " << c.num_actors() << " actors, " << c.iterations
        << " iterations, seed " << c.seed << "\n";
    const marl::TrainResult r = marl::train(c);
    staged.add("metrics.csv", metrics_csv(r.metrics));
    staged.add("checkpoint.json", checkpoint_to_json(c, r.actors, r.critic).dump() + "\n");
    const int ep = args.at("eval_episodes").get<int>();
    stage_eval(staged, run_eval(marl::policies_of(r.actors), c, ep, c.seed), c.scenario);
    log << "train: final-window mean reward " << std::setprecision(10) << final_window_mean(r.metrics)
        << ", gate-open events " << r.metrics.gate_open_events() << ", SAM perturbations "
        << r.metrics.sam_perturbations() << "\n";
  } else if (command == "eval") {
    const marl::TrainConfig c = marl::train_config_from_json(args.at("config"));
    std::vector<sac::PolicyNet> policies;
    if (args.at("checkpoint").is_null()) {
      policies = marl::policies_of(marl::initial_actors(c));
    } else {
      policies = marl::policies_of(load_checkpoint(args.at("checkpoint").get<std::string>()).actors);
    }
    const auto st = run_eval(policies, c, args.at("episodes").get<int>(), args.at("eval_seed").get<std::uint64_t>());
    stage_eval(staged, st, c.scenario);
    if (st.empty)
      log << "eval: no episodes requested, empty statistics\n";
    else
      log << "eval: mean episode reward " << std::setprecision(10) << st.mean_reward << " (std " << st.std_reward
          << ")\n";
  } else if (command == "ablate") {
    const marl::TrainConfig base = marl::train_config_from_json(args.at("config"));
    const auto seeds = args.at("seeds").get<std::vector<std::uint64_t>>();
    const int ep = args.at("eval_episodes").get<int>();
    const int L = base.scenario.slice_count();
    std::ostringstream runs, table;
    runs << "variant,mode,seed,final_reward";
    table << "variant,mode,seeds,mean_reward,std_reward";
    for (int l = 0; l < L; ++l) {
      runs << ",qos_sat_" << slice_file_name(base.scenario, l);
      table << ",qos_sat_" << slice_file_name(base.scenario, l);
    }
    runs << "\n" << std::setprecision(17);
    table << "\n" << std::setprecision(17);
    for (const auto& v : ablation_variants()) {
      std::vector<double> scores;
      std::vector<double> sat(static_cast<std::size_t>(L), 0.0);
      for (auto seed : seeds) {
        marl::TrainConfig c = apply_variant(base, v);
        marl::set_run_seed(c, seed);
        const auto r = marl::train(c);
        const double score = final_window_mean(r.metrics);
        const auto st = run_eval(marl::policies_of(r.actors), c, ep, seed);
        scores.push_back(score);
        runs << '"' << v.name << "\"," << v.mode << ',' << seed << ',' << score;
        for (int l = 0; l < L; ++l) {
          runs << ',' << st.qos_satisfaction[static_cast<std::size_t>(l)];
          sat[static_cast<std::size_t>(l)] += st.qos_satisfaction[static_cast<std::size_t>(l)];
        }
        runs << "\n";
      }
      const double n = static_cast<double>(scores.size());
      const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / n;
      double ss = 0.0;
      for (double s : scores) ss += (s - mean) * (s - mean);
      const double sd = scores.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
      table << '"' << v.name << "\"," << v.mode << ',' << scores.size() << ',' << mean << ',' << sd;
      for (double s : sat) table << ',' << s / n;
      table << "\n";
      log << "ablate: " << v.name << " mean " << std::setprecision(8) << mean << " std " << sd << "\n";
    }
    staged.add("ablation.csv", table.str());
    staged.add("ablation_runs.csv", runs.str());
  } else if (command == "sweep") {
    const marl::TrainConfig base = marl::train_config_from_json(args.at("config"));
    const auto rows = diag::rho_sweep(base, args.at("rhos").get<std::vector<double>>(),
                                      args.at("seeds").get<std::vector<std::uint64_t>>(),
                                      args.at("modes").get<std::vector<std::string>>());
    std::ostringstream os;
    diag::write_sweep_csv(os, rows);
    staged.add("sweep.csv", os.str());
    log << "sweep: " << rows.size() << " rows\n";
  } else if (command == "diagnose") {
    const Checkpoint ck = load_checkpoint(args.at("checkpoint").get<std::string>());
    const auto& c = ck.config;
    const auto probe_seed = args.at("probe_seed").get<std::uint64_t>();
    const int iters = args.at("max_iters").get<int>();
    const double tol = args.at("tol").get<double>();
    const std::string label = args.at("mode_label").get<std::string>();
    const auto probe = diag::make_probe_batch(c.scenario, c.actor_hidden,
                                              static_cast<std::size_t>(args.at("probe_size").get<int>()), probe_seed,
                                              c.episode_length);
    const auto policies = marl::policies_of(ck.actors);
    std::ostringstream os;
    diag::write_sharpness_csv_header(os);
    const auto crit = diag::critic_sharpness(ck.critic.critic, policies, probe, c.beta, c.gamma, probe_seed, iters, tol);
    diag::write_sharpness_csv_row(os, label, c.seed, "critic", crit);
    for (std::size_t i = 0; i < policies.size(); ++i) {
      const auto rep = diag::actor_sharpness(policies[i], ck.critic.critic, probe, c.beta, probe_seed, iters, tol);
      diag::write_sharpness_csv_row(os, label, c.seed, "actor" + std::to_string(i), rep);
    }
    staged.add("sharpness.csv", os.str());
    stage_eval(staged, run_eval(policies, c, args.at("episodes").get<int>(), probe_seed), c.scenario);
    log << "diagnose: critic lambda_max " << std::setprecision(10) << crit.lambda_max << " (residual "
        << crit.residual << (crit.converged ? "" : ", not converged") << ")\n";
  }

  fs::create_directories(out);
  for (const auto& [name, text] : staged.files) {
    write_text(out / name, text);
    man.outputs.push_back(name);
  }
  man.outputs.push_back("manifest.json");
  man.finished_at = now_iso();
  write_text(out / "manifest.json", to_json(man).dump(2) + "\n");
  return man;
}

}  // namespace tasam::cli
