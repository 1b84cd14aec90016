#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "casl/checkpoint.hpp"
#include "casl/envs.hpp"
#include "casl/network.hpp"
#include "casl/option_learner.hpp"

namespace casl {

// Flat key=value experiment description. Unknown keys are rejected; the
// canonical serialization (fixed key order) is what gets hashed and written
// to <out>/config.resolved.
struct ExperimentConfig {
  std::string env_id = "door_puzzle";
  std::string variant = "casl";
  AttentionMode attention_mode = AttentionMode::concatenated;
  LearnerConfig learner;
  std::size_t workers = 8;
  bool deterministic = false;
  std::size_t total_episodes = 0;
  std::uint64_t seed = 0;
  std::string init_checkpoint;
  std::string out_dir = "runs/out";
  std::size_t eval_period = 250;
  std::size_t eval_episodes = 30;
  std::size_t checkpoint_period = 0;  // 0: final checkpoint only
  std::size_t episode_cap = 200;
  std::size_t hidden_width = 128;
  std::size_t attention_dim = 32;
  std::size_t conv_channels = 32;
  std::size_t num_options = 4;

  static ExperimentConfig parse_file(const std::filesystem::path& path);
  static ExperimentConfig parse_text(const std::string& text);
  void apply_override(const std::string& key, const std::string& value);
  void validate() const;

  std::string canonical_text() const;
  std::string config_hash() const;  // 16 hex chars (FNV-1a 64)

  NetworkConfig network_config() const;
  bool feed_audio() const;
  std::size_t effective_workers() const {
    return deterministic ? 1 : workers;
  }
};

const std::vector<std::string>& known_variants();

struct CurvePoint {
  std::size_t episode = 0;
  std::size_t env_steps = 0;
  double mean_eval_return = 0.0;
  double mean_option_duration = 0.0;
  double mean_alpha_audio = 0.0;
};

struct RunArtifacts {
  std::filesystem::path out_dir;
  std::filesystem::path curve_path;
  std::filesystem::path final_checkpoint_path;
  std::filesystem::path resolved_config_path;
  std::vector<CurvePoint> curve;
};

struct EvalReport {
  std::size_t episodes = 0;
  double mean_return = 0.0;
  double stdev_return = 0.0;
  double mean_option_duration = 0.0;
  std::vector<double> mean_alpha;  // per modality, [video(, audio)] order
};

// Greedy rollouts: epsilon = 0 over options, option termination by beta
// threshold 0.5, argmax actions. Pure function of (network, env_id, seed).
EvalReport evaluate(const CaslNetwork& network, const std::string& env_id,
                    EnvConfig env_config, bool feed_audio, std::size_t episodes,
                    std::uint64_t seed, TrajectoryLog* sample_trajectory = nullptr,
                    const std::string& variant = "",
                    const std::string& config_hash = "");

// Asynchronous training to the episode budget with periodic greedy
// evaluation. Artifacts: config.resolved, curve.csv, checkpoints, sampled
// eval trajectories. Loads init_checkpoint into the store when set. Throws
// NumericError (after writing diagnostics and a final checkpoint) when a
// worker aborts on persistent non-finite losses.
RunArtifacts train(const ExperimentConfig& config);

std::vector<CurvePoint> read_curve(const std::filesystem::path& path,
                                   std::string* header_line = nullptr);

// Checkpoint metadata carried as ordinary named tensors (u16 chunks).
std::vector<CheckpointEntry> meta_entries(const std::string& config_hash,
                                          std::uint64_t seed);
std::optional<std::string> meta_config_hash(
    const std::vector<CheckpointEntry>& entries);

// Builds the variant network and loads non-meta entries from a checkpoint
// file; rejects shape mismatches listing the offending tensors.
CaslNetwork network_from_checkpoint(const ExperimentConfig& config,
                                    const std::filesystem::path& checkpoint);

}  // namespace casl
