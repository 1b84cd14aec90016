#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "casl/tensor.hpp"

namespace casl {

enum class Action { up = 0, down = 1, left = 2, right = 3, interact = 4 };
inline constexpr std::size_t kNumActions = 5;

inline constexpr std::size_t kGridSize = 8;
inline constexpr std::size_t kCellPixels = 4;
inline constexpr std::size_t kObsExtent = kGridSize * kCellPixels;  // 32

struct GridPos {
  int x = 0;
  int y = 0;
  bool operator==(const GridPos&) const = default;
};

inline int chebyshev(GridPos a, GridPos b) {
  return std::max(std::abs(a.x - b.x), std::abs(a.y - b.y));
}

// Per-timestep sensor bundle; both channels are always present, the audio
// spectrogram carries a low noise floor when no cue is audible.
struct MultimodalObservation {
  Tensor video;  // [1,32,32] grayscale in [0,1]
  Tensor audio;  // [1,32,32] spectrogram magnitude in [0,1]
};

struct StepResult {
  MultimodalObservation observation;
  double reward = 0.0;
  bool done = false;
};

struct EnvConfig {
  std::size_t episode_cap = 200;
};

class Environment {
 public:
  virtual ~Environment() = default;
  virtual MultimodalObservation reset(std::uint64_t seed) = 0;
  virtual StepResult step(Action action) = 0;
  virtual MultimodalObservation render_observation() const = 0;
  virtual std::string name() const = 0;
  virtual std::string state_summary() const = 0;
  virtual bool cue_audible() const = 0;
  virtual bool terminated() const = 0;
  virtual bool truncated() const = 0;
  virtual std::size_t steps_taken() const = 0;
};

// Sequential door puzzle: pick up the colored key (it disappears), then open
// the door of the matching color for +1; opening either door ends the game.
class DoorPuzzleEnv final : public Environment {
 public:
  explicit DoorPuzzleEnv(EnvConfig config = {}, bool randomize_key = false);

  MultimodalObservation reset(std::uint64_t seed) override;
  StepResult step(Action action) override;
  MultimodalObservation render_observation() const override;
  std::string name() const override;
  std::string state_summary() const override;
  bool cue_audible() const override;
  bool terminated() const override { return terminated_; }
  bool truncated() const override { return truncated_; }
  std::size_t steps_taken() const override { return steps_; }

  GridPos agent() const { return agent_; }
  GridPos key_position() const { return key_pos_; }
  int key_type() const { return key_type_; }
  bool key_held() const { return key_held_; }
  GridPos door_position(int type) const;

  static constexpr GridPos kAgentStart{3, 3};
  static constexpr GridPos kFixedKey{4, 6};
  static constexpr GridPos kDoor0{2, 0};
  static constexpr GridPos kDoor1{5, 0};

 private:
  EnvConfig config_;
  bool randomize_key_;
  std::uint64_t seed_ = 0;
  GridPos agent_{};
  GridPos key_pos_{};
  int key_type_ = 0;
  bool key_held_ = false;
  bool terminated_ = true;
  bool truncated_ = false;
  std::size_t steps_ = 0;
};

enum class OreType { gold = 0, iron = 1 };
enum class Tool { none = 0, pickaxe = 1, shovel = 2 };

// 2D mining task: fetch the right tool for the hidden ore type (audible only
// near the ore), then mine it. +10/-10 on tool match/mismatch, -1 step cost.
class MiningEnv final : public Environment {
 public:
  explicit MiningEnv(EnvConfig config = {});

  MultimodalObservation reset(std::uint64_t seed) override;
  StepResult step(Action action) override;
  MultimodalObservation render_observation() const override;
  std::string name() const override;
  std::string state_summary() const override;
  bool cue_audible() const override;
  bool terminated() const override { return terminated_; }
  bool truncated() const override { return truncated_; }
  std::size_t steps_taken() const override { return steps_; }

  GridPos agent() const { return agent_; }
  GridPos ore_position() const { return ore_pos_; }
  OreType ore_type() const { return ore_type_; }
  Tool tool_held() const { return tool_held_; }

  static constexpr GridPos kAgentStart{4, 4};
  static constexpr GridPos kOre{6, 6};
  static constexpr GridPos kPickaxe{6, 5};
  static constexpr GridPos kShovel{5, 6};

 private:
  EnvConfig config_;
  std::uint64_t seed_ = 0;
  GridPos agent_{};
  GridPos ore_pos_{};
  OreType ore_type_ = OreType::gold;
  Tool tool_held_ = Tool::none;
  bool terminated_ = true;
  bool truncated_ = false;
  std::size_t steps_ = 0;
};

std::unique_ptr<Environment> make_env(const std::string& env_id,
                                      EnvConfig config = {});
bool is_known_env(const std::string& env_id);

// ---- trajectory logs (JSON lines: header object, then one object per step) ----

struct TrajectoryHeader {
  std::string env_id;
  std::uint64_t seed = 0;
  std::string variant;
  std::string config_hash;
};

struct TrajectoryStep {
  int t = 0;
  std::string state;
  int action = 0;
  double reward = 0.0;
  bool done = false;
  int option = 0;
  std::vector<double> alpha;
  double f_mean = 0.0;
  double i_mean = 0.0;
};

struct TrajectoryLog {
  TrajectoryHeader header;
  std::vector<TrajectoryStep> steps;
};

void write_trajectory(const std::filesystem::path& path, const TrajectoryLog& log);
TrajectoryLog read_trajectory(const std::filesystem::path& path);

}  // namespace casl
