#pragma once

#include <cstdint>
#include <string>

#include "posefield/pipeline.hpp"

namespace posefield {

// Resolved command-line surface shared by every subcommand. Seed precedence:
// POSEFIELD_SEED environment variable, then --seed, then the config file.
struct CommandSpec {
  std::string subcommand;
  std::string config_path;  // "" = built-in defaults
  std::uint64_t seed = 0;
  std::string out_dir;
  int threads = 0;  // cap on parallel sections; 0 = all available cores
  bool deterministic = false;
};

// Scene directory round-trip: manifest.json plus 8-bit PPM frames and float32
// PFM depth maps (invalid depth pixels stored as 0).
void save_scene(const std::string& dir, const ScenePackage& scene);
ScenePackage load_scene(const std::string& dir);

// Aggregates an eval-mra run directory (stats.csv + graphs_eval.csv) into a
// one-row report.csv and report.md under out_dir. Throws when the metrics are
// missing; the before/after columns are copied verbatim from stats.csv.
void emit_report(const std::string& run_dir, const std::string& out_dir);

// Dispatch: 0 on success, 1 on runtime failure (diagnostic on stderr), 2 on
// argument errors (usage on stderr). A run_meta.json is written into --out
// before any subcommand runs.
int run_cli(int argc, const char* const* argv);

}  // namespace posefield
