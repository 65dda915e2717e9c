#pragma once

// Operator surface: config resolution (presets, files, dotted overrides),
// run manifests, checkpoint bundles and the subcommand bodies.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tasam/marl.hpp"

namespace tasam::cli {

inline constexpr const char* kArtifactName = "tasam";
inline constexpr const char* kArtifactVersion = "1.0.0";
inline constexpr int kManifestVersion = 1;
inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kOutputRootEnv = "TASAM_OUTPUT_ROOT";

std::vector<std::string> preset_names();
// Throws ConfigError on an unknown name.
marl::TrainConfig preset(const std::string& name);

// "a.b.c=value"; the value is parsed as JSON, falling back to a plain string.
// The key must already exist in the resolved tree.
void apply_override(nlohmann::json& tree, const std::string& assignment);

struct ConfigRequest {
  std::optional<std::filesystem::path> config_file;
  std::optional<std::string> preset;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
};

// defaults -> preset (flag, else the file's "preset" key) -> file -> overrides
// -> seed -> mode, then validate.
marl::TrainConfig resolve_config(const ConfigRequest& req);

struct Checkpoint {
  marl::TrainConfig config;
  std::vector<marl::AgentState> actors;
  marl::CriticState critic;
};

nlohmann::json checkpoint_to_json(const marl::TrainConfig& c, const std::vector<marl::AgentState>& actors,
                                  const marl::CriticState& critic);
// Throws ConfigError on a format or version mismatch.
Checkpoint checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const std::filesystem::path& p, const nlohmann::json& bundle);
Checkpoint load_checkpoint(const std::filesystem::path& p);

struct Manifest {
  std::string command;
  nlohmann::json args;  // fully resolved arguments of the command
  std::vector<std::string> outputs;
  std::string started_at;
  std::string finished_at;
};

nlohmann::json to_json(const Manifest& m);
Manifest manifest_from_json(const nlohmann::json& j);
Manifest read_manifest(const std::filesystem::path& p);

// Output directory: explicit path, else $TASAM_OUTPUT_ROOT (default "runs") / leaf.
std::filesystem::path output_dir(const std::optional<std::filesystem::path>& explicit_dir, const std::string& leaf);

// Argument defaults and validation per command; returns the resolved args.
nlohmann::json resolve_args(const std::string& command, nlohmann::json args);

// Runs a command with resolved args, writes every artifact plus manifest.json
// under `out`. Nothing is written if the command fails before completion.
Manifest run_command(const std::string& command, const nlohmann::json& args, const std::filesystem::path& out,
                     std::ostream& log);

// Ablation variants by display name, applied to a base config.
struct Variant {
  std::string name;
  std::string mode;
  bool selective = true;
  bool static_rho = false;
};
std::vector<Variant> ablation_variants();
marl::TrainConfig apply_variant(marl::TrainConfig c, const Variant& v);

inline constexpr double kStaticRho = 0.05;
// Iterations averaged for the final cumulative-reward score.
inline constexpr int kFinalWindow = 50;
double final_window_mean(const marl::RunMetrics& m, int window = kFinalWindow);

}  // namespace tasam::cli
