#include "casl/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

namespace casl {

namespace {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (0x9e3779b97f4a7c15ull + b);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "': bad number '" +
                                value + "'");
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    unsigned long long v = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "': bad integer '" +
                                value + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true") return true;
  if (value == "0" || value == "false") return false;
  throw std::invalid_argument("config key '" + key + "': bad flag '" + value +
                              "'");
}

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::size_t argmax_lowest(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

double mean_span(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

}  // namespace

const std::vector<std::string>& known_variants() {
  static const std::vector<std::string> variants = {
      "casl",   "v_a_o_lstm", "v_o_lstm", "v_a_o_ff",
      "v_o_ff", "v_a_ff",     "v_ff"};
  return variants;
}

void ExperimentConfig::apply_override(const std::string& key,
                                      const std::string& value) {
  if (key == "env") env_id = value;
  else if (key == "variant") variant = value;
  else if (key == "attention_mode") {
    if (value == "concatenated") attention_mode = AttentionMode::concatenated;
    else if (value == "summed") attention_mode = AttentionMode::summed;
    else throw std::invalid_argument("config key 'attention_mode': unknown '" +
                                     value + "'");
  } else if (key == "gamma") learner.gamma = parse_double(key, value);
  else if (key == "deliberation_cost")
    learner.deliberation_cost = parse_double(key, value);
  else if (key == "epsilon_start") learner.epsilon_start = parse_double(key, value);
  else if (key == "epsilon_end") learner.epsilon_end = parse_double(key, value);
  else if (key == "epsilon_anneal_fraction")
    learner.epsilon_anneal_fraction = parse_double(key, value);
  else if (key == "n_steps") learner.n_steps = parse_u64(key, value);
  else if (key == "lambda_q") learner.lambda_q = parse_double(key, value);
  else if (key == "lambda_entropy_pi")
    learner.lambda_entropy_pi = parse_double(key, value);
  else if (key == "lambda_entropy_alpha")
    learner.lambda_entropy_alpha = parse_double(key, value);
  else if (key == "learning_rate") learner.learning_rate = parse_double(key, value);
  else if (key == "rmsprop_decay") learner.rmsprop_decay = parse_double(key, value);
  else if (key == "rmsprop_damping")
    learner.rmsprop_damping = parse_double(key, value);
  else if (key == "workers") workers = parse_u64(key, value);
  else if (key == "deterministic") deterministic = parse_bool(key, value);
  else if (key == "total_episodes") total_episodes = parse_u64(key, value);
  else if (key == "seed") seed = parse_u64(key, value);
  else if (key == "init_checkpoint") init_checkpoint = value;
  else if (key == "out_dir") out_dir = value;
  else if (key == "eval_period") eval_period = parse_u64(key, value);
  else if (key == "eval_episodes") eval_episodes = parse_u64(key, value);
  else if (key == "checkpoint_period") checkpoint_period = parse_u64(key, value);
  else if (key == "episode_cap") episode_cap = parse_u64(key, value);
  else if (key == "hidden_width") hidden_width = parse_u64(key, value);
  else if (key == "attention_dim") attention_dim = parse_u64(key, value);
  else if (key == "conv_channels") conv_channels = parse_u64(key, value);
  else if (key == "num_options") num_options = parse_u64(key, value);
  else throw std::invalid_argument("unknown config key '" + key + "'");
}

ExperimentConfig ExperimentConfig::parse_text(const std::string& text) {
  ExperimentConfig config;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    std::size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line without '=': " + stripped);
    config.apply_override(trim(stripped.substr(0, eq)),
                          trim(stripped.substr(eq + 1)));
  }
  return config;
}

ExperimentConfig ExperimentConfig::parse_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot open config " + path.string());
  std::ostringstream text;
  text << is.rdbuf();
  return parse_text(text.str());
}

void ExperimentConfig::validate() const {
  if (!is_known_env(env_id))
    throw std::invalid_argument("unknown environment '" + env_id + "'");
  const auto& variants = known_variants();
  if (std::find(variants.begin(), variants.end(), variant) == variants.end())
    throw std::invalid_argument("unknown variant '" + variant + "'");
  if (workers < 1) throw std::invalid_argument("workers must be >= 1");
  if (eval_episodes < 1) throw std::invalid_argument("eval_episodes must be >= 1");
  if (eval_period < 1) throw std::invalid_argument("eval_period must be >= 1");
  if (learner.n_steps < 1) throw std::invalid_argument("n_steps must be >= 1");
  if (learner.gamma < 0.0 || learner.gamma >= 1.0)
    throw std::invalid_argument("gamma must lie in [0,1)");
  if (learner.deliberation_cost < 0.0)
    throw std::invalid_argument("deliberation_cost must be >= 0");
  for (double eps : {learner.epsilon_start, learner.epsilon_end}) {
    if (eps < 0.0 || eps > 1.0)
      throw std::invalid_argument("epsilon values must lie in [0,1]");
  }
  if (episode_cap < 1) throw std::invalid_argument("episode_cap must be >= 1");
  if (num_options < 1) throw std::invalid_argument("num_options must be >= 1");
  if (hidden_width < 1 || attention_dim < 1 || conv_channels < 1)
    throw std::invalid_argument("network widths must be >= 1");
}

std::string ExperimentConfig::canonical_text() const {
  std::ostringstream os;
  os << "attention_dim=" << attention_dim << '\n';
  os << "attention_mode="
     << (attention_mode == AttentionMode::concatenated ? "concatenated"
                                                       : "summed")
     << '\n';
  os << "checkpoint_period=" << checkpoint_period << '\n';
  os << "conv_channels=" << conv_channels << '\n';
  os << "deliberation_cost=" << format_double(learner.deliberation_cost) << '\n';
  os << "deterministic=" << (deterministic ? 1 : 0) << '\n';
  os << "env=" << env_id << '\n';
  os << "episode_cap=" << episode_cap << '\n';
  os << "epsilon_anneal_fraction=" << format_double(learner.epsilon_anneal_fraction)
     << '\n';
  os << "epsilon_end=" << format_double(learner.epsilon_end) << '\n';
  os << "epsilon_start=" << format_double(learner.epsilon_start) << '\n';
  os << "eval_episodes=" << eval_episodes << '\n';
  os << "eval_period=" << eval_period << '\n';
  os << "gamma=" << format_double(learner.gamma) << '\n';
  os << "hidden_width=" << hidden_width << '\n';
  os << "init_checkpoint=" << init_checkpoint << '\n';
  os << "lambda_entropy_alpha=" << format_double(learner.lambda_entropy_alpha)
     << '\n';
  os << "lambda_entropy_pi=" << format_double(learner.lambda_entropy_pi) << '\n';
  os << "lambda_q=" << format_double(learner.lambda_q) << '\n';
  os << "learning_rate=" << format_double(learner.learning_rate) << '\n';
  os << "n_steps=" << learner.n_steps << '\n';
  os << "num_options=" << num_options << '\n';
  os << "out_dir=" << out_dir << '\n';
  os << "rmsprop_damping=" << format_double(learner.rmsprop_damping) << '\n';
  os << "rmsprop_decay=" << format_double(learner.rmsprop_decay) << '\n';
  os << "seed=" << seed << '\n';
  os << "total_episodes=" << total_episodes << '\n';
  os << "variant=" << variant << '\n';
  os << "workers=" << workers << '\n';
  return os.str();
}

std::string ExperimentConfig::config_hash() const {
  const std::string text = canonical_text();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

NetworkConfig ExperimentConfig::network_config() const {
  NetworkConfig net;
  net.input_extent = kObsExtent;
  net.conv_channels = conv_channels;
  net.num_modalities = feed_audio() ? 2 : 1;
  net.learned_attention = variant == "casl";
  net.attention_mode = attention_mode;
  net.recurrence = (variant == "casl" || variant == "v_a_o_lstm" ||
                    variant == "v_o_lstm")
                       ? RecurrenceKind::lstm
                       : RecurrenceKind::feedforward;
  net.hidden_width = hidden_width;
  net.attention_dim = attention_dim;
  net.num_options =
      (variant == "v_a_ff" || variant == "v_ff") ? 1 : num_options;
  net.num_actions = kNumActions;
  return net;
}

bool ExperimentConfig::feed_audio() const {
  return variant == "casl" || variant == "v_a_o_lstm" || variant == "v_a_o_ff" ||
         variant == "v_a_ff";
}

// ---- checkpoint metadata ----

namespace {

std::vector<float> u64_chunks(std::uint64_t v) {
  std::vector<float> chunks(4);
  for (int i = 0; i < 4; ++i)
    chunks[i] = static_cast<float>((v >> (16 * i)) & 0xffffull);
  return chunks;
}

std::uint64_t chunks_to_u64(const std::vector<float>& chunks) {
  std::uint64_t v = 0;
  for (int i = 0; i < 4 && i < static_cast<int>(chunks.size()); ++i)
    v |= (static_cast<std::uint64_t>(chunks[i]) & 0xffffull) << (16 * i);
  return v;
}

}  // namespace

std::vector<CheckpointEntry> meta_entries(const std::string& config_hash,
                                          std::uint64_t seed) {
  std::uint64_t hash_bits = std::stoull(config_hash, nullptr, 16);
  std::vector<CheckpointEntry> entries;
  entries.push_back({"meta.config_hash", {4}, u64_chunks(hash_bits)});
  entries.push_back({"meta.seed", {4}, u64_chunks(seed)});
  return entries;
}

std::optional<std::string> meta_config_hash(
    const std::vector<CheckpointEntry>& entries) {
  for (const CheckpointEntry& e : entries) {
    if (e.name == "meta.config_hash") {
      char buf[17];
      std::snprintf(buf, sizeof(buf), "%016llx",
                    static_cast<unsigned long long>(chunks_to_u64(e.values)));
      return std::string(buf);
    }
  }
  return std::nullopt;
}

CaslNetwork network_from_checkpoint(const ExperimentConfig& config,
                                    const std::filesystem::path& checkpoint) {
  CaslNetwork network(config.network_config(), 0);
  network.load_parameters(load_checkpoint(checkpoint));
  return network;
}

// ---- evaluation ----

EvalReport evaluate(const CaslNetwork& network, const std::string& env_id,
                    EnvConfig env_config, bool feed_audio, std::size_t episodes,
                    std::uint64_t seed, TrajectoryLog* sample_trajectory,
                    const std::string& variant,
                    const std::string& config_hash) {
  if (episodes < 1) throw std::invalid_argument("evaluate: episodes must be >= 1");
  auto env = make_env(env_id, env_config);
  NoGradGuard no_grad;

  std::vector<double> returns;
  returns.reserve(episodes);
  std::size_t total_steps = 0;
  std::size_t total_selections = 0;
  std::vector<double> alpha_accum(network.config().num_modalities, 0.0);

  for (std::size_t j = 0; j < episodes; ++j) {
    const std::uint64_t ep_seed = mix_seed(seed, j);
    MultimodalObservation obs = env->reset(ep_seed);
    CaslNetwork::State state = network.initial_state();
    bool have_option = false;
    std::size_t option = 0;
    double ep_return = 0.0;
    int t = 0;
    TrajectoryLog log;
    const bool record = sample_trajectory && j == 0;
    if (record) log.header = {env_id, ep_seed, variant, config_hash};

    while (true) {
      CaslNetwork::StepOutput out =
          network.observe(observation_tensors(obs, feed_audio), state);
      if (!have_option || out.beta[option].value() > 0.5) {
        option = argmax_lowest(out.q.data());
        have_option = true;
        ++total_selections;
      }
      const std::size_t action = argmax_lowest(out.pi_logits[option].data());
      std::string summary = record ? env->state_summary() : std::string();
      StepResult result = env->step(static_cast<Action>(action));
      ep_return += result.reward;
      ++total_steps;
      for (std::size_t m = 0; m < out.alpha.size(); ++m)
        alpha_accum[m] += out.alpha[m];
      if (record) {
        TrajectoryStep step;
        step.t = t;
        step.state = std::move(summary);
        step.action = static_cast<int>(action);
        step.reward = result.reward;
        step.done = result.done;
        step.option = static_cast<int>(option);
        step.alpha = out.alpha;
        step.f_mean = out.f_gate.defined() ? mean_span(out.f_gate.data()) : 0.0;
        step.i_mean = out.i_gate.defined() ? mean_span(out.i_gate.data()) : 0.0;
        log.steps.push_back(std::move(step));
      }
      state.h = out.h;
      if (out.c.defined()) state.c = out.c;
      obs = result.observation;
      ++t;
      if (result.done) break;
    }
    returns.push_back(ep_return);
    if (record) *sample_trajectory = std::move(log);
  }

  EvalReport report;
  report.episodes = episodes;
  report.mean_return = mean_span(returns);
  double var = 0.0;
  for (double r : returns) var += (r - report.mean_return) * (r - report.mean_return);
  report.stdev_return = std::sqrt(var / static_cast<double>(returns.size()));
  report.mean_option_duration =
      total_selections == 0 ? 0.0
                            : static_cast<double>(total_steps) /
                                  static_cast<double>(total_selections);
  report.mean_alpha = alpha_accum;
  for (double& a : report.mean_alpha)
    a /= static_cast<double>(std::max<std::size_t>(1, total_steps));
  return report;
}

// ---- training ----

namespace {

void append_curve_row(std::ofstream& os, const CurvePoint& p) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu,%zu,%.10g,%.10g,%.10g\n", p.episode,
                p.env_steps, p.mean_eval_return, p.mean_option_duration,
                p.mean_alpha_audio);
  os << buf;
  os.flush();
}

}  // namespace

RunArtifacts train(const ExperimentConfig& config) {
  config.validate();
  const std::filesystem::path out(config.out_dir);
  std::filesystem::create_directories(out);
  std::filesystem::create_directories(out / "trajectories");
  const std::string hash = config.config_hash();

  RunArtifacts artifacts;
  artifacts.out_dir = out;
  artifacts.curve_path = out / "curve.csv";
  artifacts.final_checkpoint_path = out / "checkpoint_final.ckpt";
  artifacts.resolved_config_path = out / "config.resolved";

  {
    std::ofstream os(artifacts.resolved_config_path, std::ios::trunc);
    os << "# config_hash=" << hash << " seed=" << config.seed << '\n'
       << config.canonical_text();
  }

  const NetworkConfig netcfg = config.network_config();
  CaslNetwork reference(netcfg, mix_seed(config.seed, 0x1217));
  SharedStore store(reference);
  if (!config.init_checkpoint.empty()) {
    store.load(load_checkpoint(config.init_checkpoint));
  }

  auto save_store = [&](const std::filesystem::path& path) {
    std::vector<CheckpointEntry> entries = meta_entries(hash, config.seed);
    for (CheckpointEntry& e : store.to_checkpoint())
      entries.push_back(std::move(e));
    save_checkpoint(path, entries);
  };
  save_store(out / "checkpoint_initial.ckpt");

  std::ofstream curve_file(artifacts.curve_path, std::ios::trunc);
  if (!curve_file)
    throw std::runtime_error("cannot open " + artifacts.curve_path.string());
  curve_file << "# config_hash=" << hash << " seed=" << config.seed << '\n';
  curve_file << "episode,env_steps,mean_eval_return,mean_option_duration,"
                "mean_alpha_audio\n";
  curve_file.flush();

  if (config.total_episodes == 0) {
    save_store(artifacts.final_checkpoint_path);
    return artifacts;
  }

  TrainShared shared;
  std::mutex coord_mutex;
  std::size_t episodes_done = 0;
  std::size_t next_eval = config.eval_period;
  std::size_t eval_index = 0;

  auto run_eval = [&](std::size_t boundary) {
    CaslNetwork eval_net(netcfg, 0);
    store.snapshot_into(eval_net);
    TrajectoryLog sample;
    EvalReport report = evaluate(
        eval_net, config.env_id, EnvConfig{config.episode_cap},
        config.feed_audio(), config.eval_episodes,
        mix_seed(config.seed, 0xe7a1000 + eval_index), &sample, config.variant,
        hash);
    ++eval_index;
    CurvePoint point;
    point.episode = boundary;
    point.env_steps = shared.env_steps.load(std::memory_order_relaxed);
    point.mean_eval_return = report.mean_return;
    point.mean_option_duration = report.mean_option_duration;
    point.mean_alpha_audio =
        report.mean_alpha.size() > 1 ? report.mean_alpha[1] : 0.0;
    artifacts.curve.push_back(point);
    append_curve_row(curve_file, point);
    write_trajectory(out / "trajectories" /
                         ("eval_" + std::to_string(boundary) + ".jsonl"),
                     sample);
    std::cout << "[train " << config.variant << '/' << config.env_id
              << "] episode " << boundary << " eval_return "
              << report.mean_return << " option_dur "
              << report.mean_option_duration << " alpha_audio "
              << point.mean_alpha_audio << std::endl;
    if (config.checkpoint_period > 0 && boundary > 0 &&
        boundary % config.checkpoint_period == 0 &&
        boundary != config.total_episodes) {
      save_store(out / ("checkpoint_ep" + std::to_string(boundary) + ".ckpt"));
    }
  };

  run_eval(0);  // pre-training evaluation (transfer jumpstart reads this row)

  const std::size_t worker_count = config.effective_workers();
  std::vector<std::unique_ptr<CaslNetwork>> nets;
  std::vector<std::unique_ptr<Environment>> envs;
  for (std::size_t w = 0; w < worker_count; ++w) {
    nets.push_back(std::make_unique<CaslNetwork>(netcfg, 0));
    envs.push_back(make_env(config.env_id, EnvConfig{config.episode_cap}));
  }

  std::string abort_reason;
  auto on_episode = [&](const EpisodeResult&) {
    std::scoped_lock lock(coord_mutex);
    ++episodes_done;
    while (next_eval <= episodes_done) {
      run_eval(next_eval);
      if (next_eval >= config.total_episodes) {
        next_eval = std::numeric_limits<std::size_t>::max();
        break;
      }
      next_eval = std::min(next_eval + config.eval_period,
                           config.total_episodes);
    }
  };

  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < worker_count; ++w) {
    threads.emplace_back([&, w]() {
      WorkerParams params;
      params.worker_id = w;
      params.seed = config.seed;
      params.total_episodes = config.total_episodes;
      params.feed_audio = config.feed_audio();
      try {
        run_worker(*nets[w], *envs[w], store, shared, config.learner, params,
                   on_episode);
      } catch (const NumericError& err) {
        std::scoped_lock lock(coord_mutex);
        if (abort_reason.empty()) abort_reason = err.what();
        shared.stop.store(true, std::memory_order_relaxed);
      }
    });
  }
  for (std::thread& t : threads) t.join();

  if (!abort_reason.empty()) {
    std::ofstream os(out / "abort_diagnostics.txt", std::ios::trunc);
    os << "# config_hash=" << hash << " seed=" << config.seed << '\n'
       << "reason=" << abort_reason << '\n'
       << "episodes_done=" << episodes_done << '\n'
       << "env_steps=" << shared.env_steps.load() << '\n'
       << "skipped_updates=" << store.skipped_updates() << '\n';
    save_store(artifacts.final_checkpoint_path);
    throw NumericError("training aborted: " + abort_reason +
                       " (diagnostics in " +
                       (out / "abort_diagnostics.txt").string() + ")");
  }

  // Cover the tail when the budget is not a multiple of the eval period.
  {
    std::scoped_lock lock(coord_mutex);
    if (artifacts.curve.empty() ||
        artifacts.curve.back().episode < config.total_episodes) {
      run_eval(config.total_episodes);
    }
  }

  save_store(artifacts.final_checkpoint_path);
  return artifacts;
}

std::vector<CurvePoint> read_curve(const std::filesystem::path& path,
                                   std::string* header_line) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open curve " + path.string());
  std::vector<CurvePoint> points;
  std::string line;
  bool saw_columns = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (header_line) *header_line = line;
      continue;
    }
    if (!saw_columns) {
      saw_columns = true;  // column names
      continue;
    }
    CurvePoint p;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    ss >> p.episode >> p.env_steps >> p.mean_eval_return >>
        p.mean_option_duration >> p.mean_alpha_audio;
    points.push_back(p);
  }
  return points;
}

}  // namespace casl
