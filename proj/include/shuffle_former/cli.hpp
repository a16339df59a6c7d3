#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "shuffle_former/model.hpp"

namespace shuffle_former {

// Exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 1;   // bad flags, config, shapes or files
inline constexpr int kExitCheck = 2;     // an internal check failed (FD/symbolic, divergence)

// Everything that determines a run. Echoed as '# run.<key>=<value>' lines into
// every artifact.
struct RunConfig {
  std::string subcommand;
  std::string variant;      // T, S, B, or empty when a config file is used
  std::string config_path;  // key=value ModelConfig file
  std::optional<ShuffleMode> shuffle;
  std::optional<NwcPosition> nwc;
  std::uint64_t seed = 0;
  std::int64_t resolution = 0;
  std::map<std::string, std::string> paths;
  std::map<std::string, std::string> extra;  // subcommand-specific flags

  std::string to_echo() const;
};

// Seed precedence: --seed flag, then SHUFFLE_FORMER_SEED, then `fallback`.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t fallback);

// Model config from --config, else --variant, with --shuffle/--nwc applied.
ModelConfig resolve_model_config(const RunConfig& run, const ModelConfig& fallback);

// Parses `args` (without the program name) and runs the subcommand.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace shuffle_former
