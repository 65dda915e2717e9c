// Command-line entry point: train, eval, ablate, sweep, diagnose.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tasam/cli.hpp"
#include "tasam/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tasam;

namespace {

struct ConfigFlags {
  std::string config_file;
  std::string preset;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string mode;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "JSON config file");
    app->add_option("--preset", preset, "paper-table1 | paper-appendix | micro | acceptance | non-equal-rho");
    app->add_option("--set", overrides, "dotted-key override, e.g. --set scenario.rbs_per_du=10")->take_all();
    app->add_option("--seed", seed, "run seed (also seeds the layout)");
    app->add_option("--mode", mode, "no-sam | actor-sam | critic-sam | both-sam | l2-reg");
  }

  json resolve() const {
    cli::ConfigRequest req;
    if (!config_file.empty()) req.config_file = config_file;
    if (!preset.empty()) req.preset = preset;
    req.overrides = overrides;
    req.seed = seed;
    if (!mode.empty()) req.mode = mode;
    return marl::to_json(cli::resolve_config(req));
  }
};

std::string default_leaf(const std::string& cmd, const json& args) {
  std::string leaf = cmd;
  if (args.contains("config")) {
    const auto& c = args.at("config");
    if (cmd == "train") leaf += "-" + c.at("sam").at("mode").get<std::string>() + (c.at("weight_decay").get<double>() > 0 ? "-l2" : "");
    leaf += "-seed" + std::to_string(c.at("seed").get<std::uint64_t>());
  }
  return leaf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TA-SAM multi-agent slicing simulator and trainer"};
  app.require_subcommand(1);
  std::string out_dir;
  std::string from_manifest;

  auto* train = app.add_subcommand("train", "train actors and the global critic");
  auto* eval = app.add_subcommand("eval", "deterministic evaluation of a checkpoint or of untrained policies");
  auto* ablate = app.add_subcommand("ablate", "run the ablation variants on shared seeds");
  auto* sweep = app.add_subcommand("sweep", "constant equal-rho sweep");
  auto* diagnose = app.add_subcommand("diagnose", "Hessian sharpness and CDF exports for a checkpoint");

  ConfigFlags tf, ef, af, sf;
  int train_eval_episodes = -1;
  tf.attach(train);
  train->add_option("--eval-episodes", train_eval_episodes, "deterministic evaluation episodes after training");

  ef.attach(eval);
  std::string eval_ckpt;
  int eval_episodes = 10;
  std::uint64_t eval_seed = 1;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint.json; omitted means untrained policies");
  eval->add_option("--episodes", eval_episodes, "episodes")->capture_default_str();
  eval->add_option("--eval-seed", eval_seed, "evaluation world seed")->capture_default_str();

  af.attach(ablate);
  std::vector<std::uint64_t> ablate_seeds{1, 2, 3};
  int ablate_eval = 4;
  ablate->add_option("--seeds", ablate_seeds, "seeds (at least 3)")->capture_default_str();
  ablate->add_option("--eval-episodes", ablate_eval, "evaluation episodes per run")->capture_default_str();

  sf.attach(sweep);
  std::vector<double> rhos{0.01, 0.05, 0.1, 0.5};
  std::vector<std::uint64_t> sweep_seeds{1, 2, 3};
  std::vector<std::string> sweep_modes{"no-sam", "actor-sam", "critic-sam", "both-sam"};
  sweep->add_option("--rhos", rhos, "rho values")->capture_default_str();
  sweep->add_option("--seeds", sweep_seeds, "seeds")->capture_default_str();
  sweep->add_option("--modes", sweep_modes, "modes")->capture_default_str();

  std::string diag_ckpt;
  std::uint64_t probe_seed = 777;
  int probe_size = 512, max_iters = 100, diag_episodes = 10;
  double tol = 1e-4;
  diagnose->add_option("--checkpoint", diag_ckpt, "checkpoint.json");
  diagnose->add_option("--probe-seed", probe_seed, "probe batch and power-iteration seed")->capture_default_str();
  diagnose->add_option("--probe-size", probe_size, "probe transitions")->capture_default_str();
  diagnose->add_option("--max-iters", max_iters, "power iterations")->capture_default_str();
  diagnose->add_option("--tol", tol, "relative residual tolerance")->capture_default_str();
  diagnose->add_option("--episodes", diag_episodes, "evaluation episodes for the CDFs")->capture_default_str();

  for (auto* sub : {train, eval, ablate, sweep, diagnose}) {
    sub->add_option("--out", out_dir, "output directory (default $TASAM_OUTPUT_ROOT/<run>)");
    sub->add_option("--from-manifest", from_manifest, "re-run the exact arguments recorded in a manifest");
  }

  CLI11_PARSE(app, argc, argv);
  CLI::App* sub = app.get_subcommands().front();
  const std::string cmd = sub->get_name();

  try {
    json args;
    if (!from_manifest.empty()) {
      const auto m = cli::read_manifest(from_manifest);
      if (m.command != cmd) throw ConfigError("manifest records command '" + m.command + "', not '" + cmd + "'");
      args = m.args;
    } else if (cmd == "train") {
      args = {{"config", tf.resolve()}};
      if (train_eval_episodes >= 0) args["eval_episodes"] = train_eval_episodes;
    } else if (cmd == "eval") {
      args = {{"episodes", eval_episodes}, {"eval_seed", eval_seed}};
      if (!eval_ckpt.empty()) args["checkpoint"] = fs::absolute(eval_ckpt).string();
      else args["config"] = ef.resolve();
    } else if (cmd == "ablate") {
      args = {{"config", af.resolve()}, {"seeds", ablate_seeds}, {"eval_episodes", ablate_eval}};
    } else if (cmd == "sweep") {
      args = {{"config", sf.resolve()}, {"rhos", rhos}, {"seeds", sweep_seeds}, {"modes", sweep_modes}};
    } else if (cmd == "diagnose") {
      if (diag_ckpt.empty()) throw ConfigError("diagnose: --checkpoint is required");
      args = {{"checkpoint", fs::absolute(diag_ckpt).string()}, {"probe_seed", probe_seed}, {"probe_size", probe_size},
              {"max_iters", max_iters}, {"tol", tol}, {"episodes", diag_episodes}};
    }
    args = cli::resolve_args(cmd, args);
    const fs::path out = cli::output_dir(out_dir.empty() ? std::nullopt : std::optional<fs::path>(out_dir),
                                         default_leaf(cmd, args));
    const auto man = cli::run_command(cmd, args, out, std::cout);
    std::cout << cmd << ": wrote " << man.outputs.size() << " files to " << out.string() << "\n";
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ProtocolError& e) {
    std::cerr << "protocol error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
