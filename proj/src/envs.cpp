#include "casl/envs.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

namespace casl {

namespace {

constexpr double kNoiseCeiling = 0.1;
constexpr double kAgentShade = 1.0;
constexpr double kType0Shade = 0.4;   // key/door color 0
constexpr double kType1Shade = 0.7;   // key/door color 1
constexpr double kOreShade = 0.5;     // shared by both ore types
constexpr double kPickaxeShade = 0.3;
constexpr double kShovelShade = 0.8;

// splitmix64; used to derive independent streams from (seed, counter)
std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t counter) {
  return mix64(seed ^ mix64(counter + 1));
}

void fill_cell(std::span<double> image, GridPos cell, double shade) {
  for (std::size_t dy = 0; dy < kCellPixels; ++dy)
    for (std::size_t dx = 0; dx < kCellPixels; ++dx)
      image[(cell.y * kCellPixels + dy) * kObsExtent + cell.x * kCellPixels + dx] =
          shade;
}

void fill_inner_cell(std::span<double> image, GridPos cell, double shade) {
  for (std::size_t dy = 1; dy + 1 < kCellPixels; ++dy)
    for (std::size_t dx = 1; dx + 1 < kCellPixels; ++dx)
      image[(cell.y * kCellPixels + dy) * kObsExtent + cell.x * kCellPixels + dx] =
          shade;
}

Tensor noise_floor(std::uint64_t seed, std::uint64_t step) {
  Tensor audio = Tensor::zeros({1, kObsExtent, kObsExtent});
  std::mt19937_64 rng(stream_seed(seed, step));
  std::uniform_real_distribution<double> dist(0.0, kNoiseCeiling);
  for (double& v : audio.raw_data()) v = dist(rng);
  return audio;
}

void paint_band(Tensor& audio, std::size_t row_begin, std::size_t row_end) {
  auto data = audio.raw_data();
  for (std::size_t r = row_begin; r <= row_end; ++r)
    for (std::size_t c = 0; c < kObsExtent; ++c)
      data[r * kObsExtent + c] = 1.0;
}

GridPos moved(GridPos p, Action a) {
  switch (a) {
    case Action::up: p.y -= 1; break;
    case Action::down: p.y += 1; break;
    case Action::left: p.x -= 1; break;
    case Action::right: p.x += 1; break;
    case Action::interact: break;
  }
  p.x = std::clamp(p.x, 0, static_cast<int>(kGridSize) - 1);
  p.y = std::clamp(p.y, 0, static_cast<int>(kGridSize) - 1);
  return p;
}

}  // namespace

// ---- door puzzle ----

DoorPuzzleEnv::DoorPuzzleEnv(EnvConfig config, bool randomize_key)
    : config_(config), randomize_key_(randomize_key) {}

GridPos DoorPuzzleEnv::door_position(int type) const {
  return type == 0 ? kDoor0 : kDoor1;
}

MultimodalObservation DoorPuzzleEnv::reset(std::uint64_t seed) {
  seed_ = seed;
  agent_ = kAgentStart;
  key_held_ = false;
  terminated_ = false;
  truncated_ = false;
  steps_ = 0;
  std::mt19937_64 rng(stream_seed(seed, 0));
  key_type_ = static_cast<int>(rng() & 1u);
  if (randomize_key_) {
    std::uniform_int_distribution<int> coord(0, static_cast<int>(kGridSize) - 1);
    do {
      key_pos_ = {coord(rng), coord(rng)};
    } while (key_pos_ == kDoor0 || key_pos_ == kDoor1 || key_pos_ == kAgentStart);
  } else {
    key_pos_ = kFixedKey;
  }
  return render_observation();
}

bool DoorPuzzleEnv::cue_audible() const {
  return !key_held_ && !terminated_ && chebyshev(agent_, key_pos_) <= 1;
}

StepResult DoorPuzzleEnv::step(Action action) {
  if (terminated_) throw std::logic_error("door_puzzle: step after terminal state");
  double reward = 0.0;
  if (action == Action::interact) {
    if (!key_held_ && agent_ == key_pos_) {
      key_held_ = true;  // key disappears
    } else if (key_held_ && (agent_ == kDoor0 || agent_ == kDoor1)) {
      const int door_type = agent_ == kDoor0 ? 0 : 1;
      reward = door_type == key_type_ ? 1.0 : 0.0;
      terminated_ = true;
    }
  } else {
    agent_ = moved(agent_, action);
  }
  ++steps_;
  if (!terminated_ && steps_ >= config_.episode_cap) {
    terminated_ = true;
    truncated_ = true;
  }
  return {render_observation(), reward, terminated_};
}

MultimodalObservation DoorPuzzleEnv::render_observation() const {
  MultimodalObservation obs;
  obs.video = Tensor::zeros({1, kObsExtent, kObsExtent});
  auto video = obs.video.raw_data();
  fill_cell(video, kDoor0, kType0Shade);
  fill_cell(video, kDoor1, kType1Shade);
  if (!key_held_) {
    fill_inner_cell(video, key_pos_, key_type_ == 0 ? kType0Shade : kType1Shade);
  }
  fill_cell(video, agent_, kAgentShade);

  obs.audio = noise_floor(seed_, steps_ + 1);
  if (cue_audible()) paint_band(obs.audio, 8, 11);
  return obs;
}

std::string DoorPuzzleEnv::name() const {
  return randomize_key_ ? "door_puzzle_random_key" : "door_puzzle";
}

std::string DoorPuzzleEnv::state_summary() const {
  std::ostringstream os;
  os << "agent=(" << agent_.x << ',' << agent_.y << ") key=(" << key_pos_.x << ','
     << key_pos_.y << ") type=" << key_type_ << " held=" << (key_held_ ? 1 : 0)
     << " done=" << (terminated_ ? 1 : 0);
  return os.str();
}

// ---- mining ----

MiningEnv::MiningEnv(EnvConfig config) : config_(config) {}

MultimodalObservation MiningEnv::reset(std::uint64_t seed) {
  seed_ = seed;
  agent_ = kAgentStart;
  ore_pos_ = kOre;
  tool_held_ = Tool::none;
  terminated_ = false;
  truncated_ = false;
  steps_ = 0;
  std::mt19937_64 rng(stream_seed(seed, 0));
  ore_type_ = (rng() & 1u) ? OreType::iron : OreType::gold;
  return render_observation();
}

bool MiningEnv::cue_audible() const {
  return !terminated_ && chebyshev(agent_, ore_pos_) <= 1;
}

StepResult MiningEnv::step(Action action) {
  if (terminated_) throw std::logic_error("mining: step after terminal state");
  double reward = -1.0;  // step cost applies on every step, terminal included
  if (action == Action::interact) {
    if (agent_ == kPickaxe && tool_held_ != Tool::pickaxe) {
      tool_held_ = Tool::pickaxe;
    } else if (agent_ == kShovel && tool_held_ != Tool::shovel) {
      tool_held_ = Tool::shovel;
    } else if (agent_ == ore_pos_ && tool_held_ != Tool::none) {
      const bool match = (ore_type_ == OreType::gold && tool_held_ == Tool::pickaxe) ||
                         (ore_type_ == OreType::iron && tool_held_ == Tool::shovel);
      reward += match ? 10.0 : -10.0;
      terminated_ = true;
    }
  } else {
    agent_ = moved(agent_, action);
  }
  ++steps_;
  if (!terminated_ && steps_ >= config_.episode_cap) {
    terminated_ = true;
    truncated_ = true;
  }
  return {render_observation(), reward, terminated_};
}

MultimodalObservation MiningEnv::render_observation() const {
  MultimodalObservation obs;
  obs.video = Tensor::zeros({1, kObsExtent, kObsExtent});
  auto video = obs.video.raw_data();
  fill_cell(video, ore_pos_, kOreShade);  // one shade for both ore types
  if (tool_held_ != Tool::pickaxe) fill_inner_cell(video, kPickaxe, kPickaxeShade);
  if (tool_held_ != Tool::shovel) fill_inner_cell(video, kShovel, kShovelShade);
  fill_cell(video, agent_, kAgentShade);

  obs.audio = noise_floor(seed_, steps_ + 1);
  if (cue_audible()) {
    if (ore_type_ == OreType::gold)
      paint_band(obs.audio, 4, 7);
    else
      paint_band(obs.audio, 20, 23);
  }
  return obs;
}

std::string MiningEnv::name() const { return "mining"; }

std::string MiningEnv::state_summary() const {
  std::ostringstream os;
  os << "agent=(" << agent_.x << ',' << agent_.y << ") ore=(" << ore_pos_.x << ','
     << ore_pos_.y << ") type=" << (ore_type_ == OreType::gold ? "gold" : "iron")
     << " tool=" << static_cast<int>(tool_held_)
     << " done=" << (terminated_ ? 1 : 0);
  return os.str();
}

// ---- factory ----

std::unique_ptr<Environment> make_env(const std::string& env_id, EnvConfig config) {
  if (env_id == "door_puzzle") return std::make_unique<DoorPuzzleEnv>(config, false);
  if (env_id == "door_puzzle_random_key")
    return std::make_unique<DoorPuzzleEnv>(config, true);
  if (env_id == "mining") return std::make_unique<MiningEnv>(config);
  throw std::invalid_argument("unknown environment '" + env_id + "'");
}

bool is_known_env(const std::string& env_id) {
  return env_id == "door_puzzle" || env_id == "door_puzzle_random_key" ||
         env_id == "mining";
}

// ---- trajectory logs ----

void write_trajectory(const std::filesystem::path& path, const TrajectoryLog& log) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for write");
  nlohmann::json header = {{"env", log.header.env_id},
                           {"seed", log.header.seed},
                           {"variant", log.header.variant},
                           {"config_hash", log.header.config_hash}};
  os << header.dump() << '\n';
  for (const TrajectoryStep& s : log.steps) {
    nlohmann::json row = {{"t", s.t},         {"state", s.state},
                          {"action", s.action}, {"reward", s.reward},
                          {"done", s.done},   {"option", s.option},
                          {"alpha", s.alpha}, {"f_mean", s.f_mean},
                          {"i_mean", s.i_mean}};
    os << row.dump() << '\n';
  }
}

TrajectoryLog read_trajectory(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open trajectory " + path.string());
  TrajectoryLog log;
  std::string line;
  if (!std::getline(is, line))
    throw std::runtime_error("empty trajectory " + path.string());
  nlohmann::json header = nlohmann::json::parse(line);
  log.header.env_id = header.at("env").get<std::string>();
  log.header.seed = header.at("seed").get<std::uint64_t>();
  log.header.variant = header.value("variant", "");
  log.header.config_hash = header.value("config_hash", "");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json row = nlohmann::json::parse(line);
    TrajectoryStep s;
    s.t = row.at("t").get<int>();
    s.state = row.value("state", "");
    s.action = row.at("action").get<int>();
    s.reward = row.at("reward").get<double>();
    s.done = row.at("done").get<bool>();
    s.option = row.at("option").get<int>();
    s.alpha = row.at("alpha").get<std::vector<double>>();
    s.f_mean = row.value("f_mean", 0.0);
    s.i_mean = row.value("i_mean", 0.0);
    log.steps.push_back(std::move(s));
  }
  return log;
}

}  // namespace casl
