#include "casl/option_learner.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace casl {

double option_utility(std::span<const double> q_row, std::size_t option,
                      double value_over, double beta, double deliberation_cost) {
  if (option >= q_row.size())
    throw std::invalid_argument("option_utility: option index out of range");
  if (beta < 0.0 || beta > 1.0)
    throw std::invalid_argument("option_utility: beta " + std::to_string(beta) +
                                " outside [0,1]");
  return (1.0 - beta) * q_row[option] + beta * (value_over - deliberation_cost);
}

double value_over_options(std::span<const double> q, double epsilon) {
  if (q.empty()) throw std::invalid_argument("value_over_options: empty Q");
  double best = q[0];
  double mean = 0.0;
  for (double v : q) {
    best = std::max(best, v);
    mean += v;
  }
  mean /= static_cast<double>(q.size());
  return (1.0 - epsilon) * best + epsilon * mean;
}

std::size_t select_option(std::span<const double> q, double epsilon,
                          std::mt19937_64& rng) {
  if (q.empty()) throw std::invalid_argument("select_option: empty Q");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (unit(rng) < epsilon) {
    std::uniform_int_distribution<std::size_t> pick_dist(0, q.size() - 1);
    return pick_dist(rng);
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < q.size(); ++i)
    if (q[i] > q[best]) best = i;
  return best;
}

std::vector<double> n_step_targets(std::span<const double> rewards, double gamma,
                                   bool terminal, double bootstrap) {
  std::vector<double> g(rewards.size());
  double running = terminal ? 0.0 : bootstrap;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    running = rewards[i] + gamma * running;
    g[i] = running;
  }
  return g;
}

double annealed_epsilon(const LearnerConfig& config, std::size_t episode,
                        std::size_t total_episodes) {
  const double anneal_span =
      config.epsilon_anneal_fraction * static_cast<double>(total_episodes);
  if (anneal_span <= 0.0) return config.epsilon_end;
  const double frac =
      std::min(1.0, static_cast<double>(episode) / anneal_span);
  return config.epsilon_start +
         frac * (config.epsilon_end - config.epsilon_start);
}

SegmentTargets compute_targets(const SegmentRecord& segment,
                               const LearnerConfig& config, double epsilon) {
  const std::size_t T = segment.length();
  if (segment.q_values.size() != T + (segment.terminal ? 0 : 1))
    throw std::invalid_argument("compute_targets: telemetry length mismatch");
  SegmentTargets targets;
  if (!segment.terminal) {
    const auto& q_next = segment.q_values[T];
    targets.bootstrap = option_utility(
        q_next, segment.options[T - 1], value_over_options(q_next, epsilon),
        segment.bootstrap_beta, config.deliberation_cost);
  }
  targets.returns = n_step_targets(segment.rewards, config.gamma,
                                   segment.terminal, targets.bootstrap);
  targets.advantages.resize(T);
  targets.termination_adv.assign(T, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    targets.advantages[t] =
        targets.returns[t] - segment.q_values[t][segment.options[t]];
    const bool nonterminal = !(segment.terminal && t + 1 == T);
    if (nonterminal) {
      const auto& q_next = segment.q_values[t + 1];
      targets.termination_adv[t] =
          q_next[segment.options[t]] - value_over_options(q_next, epsilon) +
          config.deliberation_cost;
    }
  }
  return targets;
}

Tensor entropy_from_logits(const Tensor& logits) {
  // H(softmax(v)) = lse(v) - sum_i p_i v_i, stable for saturated logits.
  return sub(log_sum_exp(logits), sum(hadamard(softmax(logits), logits)));
}

LossBreakdown unroll_and_loss(const CaslNetwork& network,
                              const SegmentRecord& segment,
                              const SegmentTargets& targets,
                              const LearnerConfig& config) {
  const std::size_t T = segment.length();
  if (T == 0) throw std::invalid_argument("unroll_and_loss: empty segment");

  std::vector<CaslNetwork::StepOutput> outputs;
  outputs.reserve(T + 1);
  CaslNetwork::State state{segment.h0, segment.c0};
  for (std::size_t t = 0; t < T; ++t) {
    outputs.push_back(network.observe(segment.observations[t], state));
    state.h = outputs.back().h;
    if (outputs.back().c.defined()) state.c = outputs.back().c;
  }
  if (!segment.terminal) {
    outputs.push_back(network.observe(segment.bootstrap_observation, state));
  }

  LossBreakdown breakdown;
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const std::size_t option = segment.options[t];
    const CaslNetwork::StepOutput& out = outputs[t];

    Tensor diff = sub(Tensor::scalar(targets.returns[t]), pick(out.q, option));
    Tensor critic = scale(hadamard(diff, diff), 0.5 * config.lambda_q);
    breakdown.critic += critic.value();
    total = add(total, critic);

    const Tensor& logits = out.pi_logits[option];
    Tensor log_prob =
        sub(pick(logits, segment.actions[t]), log_sum_exp(logits));
    Tensor policy = scale(log_prob, -targets.advantages[t]);
    breakdown.policy += policy.value();
    total = add(total, policy);

    const bool nonterminal = !(segment.terminal && t + 1 == T);
    if (nonterminal) {
      Tensor termination =
          scale(outputs[t + 1].beta[option], targets.termination_adv[t]);
      breakdown.termination += termination.value();
      total = add(total, termination);
    }

    Tensor pi_entropy =
        scale(entropy_from_logits(logits), -config.lambda_entropy_pi);
    breakdown.entropy_pi += pi_entropy.value();
    total = add(total, pi_entropy);

    if (out.alpha_scores.defined()) {
      Tensor alpha_entropy = scale(entropy_from_logits(out.alpha_scores),
                                   -config.lambda_entropy_alpha);
      breakdown.entropy_alpha += alpha_entropy.value();
      total = add(total, alpha_entropy);
    }
  }
  if (!std::isfinite(total.value())) {
    std::ostringstream os;
    os << "non-finite segment loss (critic=" << breakdown.critic
       << " policy=" << breakdown.policy
       << " termination=" << breakdown.termination
       << " entropy_pi=" << breakdown.entropy_pi
       << " entropy_alpha=" << breakdown.entropy_alpha << ")";
    throw NumericError(os.str());
  }
  breakdown.total = total;
  return breakdown;
}

// ---- shared store ----

SharedStore::SharedStore(const CaslNetwork& reference) {
  for (const auto& [name, tensor] : reference.parameters()) {
    auto slot = std::make_unique<Slot>();
    slot->name = name;
    slot->shape = tensor.shape();
    slot->value.assign(tensor.data().begin(), tensor.data().end());
    slot->accum.assign(tensor.size(), 0.0);
    index_.emplace(name, slots_.size());
    slots_.push_back(std::move(slot));
  }
}

void SharedStore::snapshot_into(CaslNetwork& dst) const {
  for (const auto& [name, tensor] : dst.parameters()) {
    auto it = index_.find(name);
    if (it == index_.end())
      throw std::invalid_argument("store has no parameter '" + name + "'");
    const Slot& slot = *slots_[it->second];
    Tensor t = tensor;
    std::scoped_lock lock(slot.mutex);
    std::copy(slot.value.begin(), slot.value.end(), t.raw_data().begin());
  }
}

std::size_t SharedStore::apply_gradients(
    const std::vector<std::pair<std::string, std::vector<double>>>& grads,
    const LearnerConfig& config) {
  std::size_t skipped = 0;
  for (const auto& [name, grad] : grads) {
    auto it = index_.find(name);
    if (it == index_.end())
      throw std::invalid_argument("store has no parameter '" + name + "'");
    Slot& slot = *slots_[it->second];
    if (grad.size() != slot.value.size())
      throw std::invalid_argument("gradient for '" + name + "' has length " +
                                  std::to_string(grad.size()) + ", expected " +
                                  std::to_string(slot.value.size()));
    bool finite = true;
    for (double g : grad) {
      if (!std::isfinite(g)) {
        finite = false;
        break;
      }
    }
    if (!finite) {
      ++skipped;
      skipped_.fetch_add(1, std::memory_order_relaxed);
      continue;
    }
    std::scoped_lock lock(slot.mutex);
    for (std::size_t i = 0; i < grad.size(); ++i) {
      const double g = grad[i];
      slot.accum[i] = config.rmsprop_decay * slot.accum[i] +
                      (1.0 - config.rmsprop_decay) * g * g;
      slot.value[i] -= config.learning_rate * g /
                       std::sqrt(slot.accum[i] + config.rmsprop_damping);
    }
  }
  return skipped;
}

std::vector<CheckpointEntry> SharedStore::to_checkpoint() const {
  std::vector<CheckpointEntry> entries;
  entries.reserve(slots_.size());
  for (const auto& slot : slots_) {
    CheckpointEntry e;
    e.name = slot->name;
    e.shape = slot->shape;
    std::scoped_lock lock(slot->mutex);
    e.values.reserve(slot->value.size());
    for (double v : slot->value) e.values.push_back(static_cast<float>(v));
    entries.push_back(std::move(e));
  }
  return entries;
}

void SharedStore::load(const std::vector<CheckpointEntry>& entries) {
  std::vector<std::string> problems;
  for (auto& slot : slots_) {
    const CheckpointEntry* found = nullptr;
    for (const CheckpointEntry& e : entries) {
      if (e.name == slot->name) {
        found = &e;
        break;
      }
    }
    if (!found) {
      problems.push_back(slot->name + " (missing)");
      continue;
    }
    if (found->shape != slot->shape) {
      problems.push_back(slot->name + " (checkpoint " +
                         shape_to_string(found->shape) + ", expected " +
                         shape_to_string(slot->shape) + ")");
      continue;
    }
    std::scoped_lock lock(slot->mutex);
    for (std::size_t i = 0; i < found->values.size(); ++i)
      slot->value[i] = static_cast<double>(found->values[i]);
    std::fill(slot->accum.begin(), slot->accum.end(), 0.0);
  }
  if (!problems.empty()) {
    std::ostringstream os;
    os << "checkpoint does not match store:";
    for (const std::string& p : problems) os << ' ' << p << ';';
    throw std::invalid_argument(os.str());
  }
}

// ---- rollout helpers ----

std::vector<double> softmax_values(std::span<const double> v) {
  double maxv = -std::numeric_limits<double>::infinity();
  for (double x : v) maxv = std::max(maxv, x);
  std::vector<double> p(v.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(v[i] - maxv);
    denom += p[i];
  }
  for (double& x : p) x /= denom;
  return p;
}

std::size_t sample_categorical(std::span<const double> probs,
                               std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double u = unit(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return probs.size() - 1;
}

std::vector<Tensor> observation_tensors(const MultimodalObservation& obs,
                                        bool feed_audio) {
  std::vector<Tensor> tensors;
  tensors.push_back(obs.video);
  if (feed_audio) tensors.push_back(obs.audio);
  return tensors;
}

// ---- worker loop ----

namespace {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (0x9e3779b97f4a7c15ull + b);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

void learn_segment(CaslNetwork& network, SharedStore& store,
                   SegmentRecord& segment, const LearnerConfig& config,
                   double epsilon) {
  SegmentTargets targets = compute_targets(segment, config, epsilon);
  network.zero_grads();
  LossBreakdown loss = unroll_and_loss(network, segment, targets, config);
  backward(loss.total);
  std::vector<std::pair<std::string, std::vector<double>>> grads;
  grads.reserve(network.parameters().size());
  for (const auto& [name, tensor] : network.parameters()) {
    if (tensor.has_grad()) {
      auto g = tensor.grad();
      grads.emplace_back(name, std::vector<double>(g.begin(), g.end()));
    } else {
      grads.emplace_back(name, std::vector<double>(tensor.size(), 0.0));
    }
  }
  store.apply_gradients(grads, config);
  store.snapshot_into(network);
}

}  // namespace

void run_worker(CaslNetwork& network, Environment& env, SharedStore& store,
                TrainShared& shared, const LearnerConfig& config,
                const WorkerParams& params,
                const std::function<void(const EpisodeResult&)>& on_episode) {
  std::mt19937_64 rng(mix_seed(params.seed, 0xb0b + params.worker_id));
  store.snapshot_into(network);
  int consecutive_bad = 0;

  while (!shared.stop.load(std::memory_order_relaxed)) {
    const std::size_t episode =
        shared.episodes_started.fetch_add(1, std::memory_order_relaxed);
    if (episode >= params.total_episodes) {
      shared.episodes_started.fetch_sub(1, std::memory_order_relaxed);
      break;
    }
    const double epsilon =
        annealed_epsilon(config, episode, params.total_episodes);

    MultimodalObservation obs = env.reset(mix_seed(params.seed, episode));
    CaslNetwork::State state = network.initial_state();
    std::size_t option = 0;
    bool need_option = true;
    double episode_return = 0.0;
    std::size_t episode_steps = 0;
    std::size_t option_selections = 0;
    std::vector<double> alpha_accum;

    SegmentRecord segment;
    auto reset_segment = [&](const CaslNetwork::State& entry) {
      segment = SegmentRecord{};
      segment.h0 = entry.h;
      segment.c0 = entry.c;
    };
    reset_segment(state);

    bool episode_done = false;
    while (!episode_done) {
      std::vector<Tensor> obs_tensors =
          observation_tensors(obs, params.feed_audio);
      CaslNetwork::StepOutput out;
      {
        NoGradGuard no_grad;
        out = network.observe(obs_tensors, state);
      }
      double beta_sample = 0.0;
      if (!need_option) {
        const double beta_val = out.beta[option].value();
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        beta_sample = unit(rng) < beta_val ? 1.0 : 0.0;
        if (beta_sample > 0.5) need_option = true;
      }
      if (need_option) {
        option = select_option(out.q.data(), epsilon, rng);
        ++option_selections;
        need_option = false;
      }
      std::vector<double> probs = softmax_values(out.pi_logits[option].data());
      const std::size_t action = sample_categorical(probs, rng);

      StepResult result = env.step(static_cast<Action>(action));
      episode_return += result.reward;
      ++episode_steps;
      shared.env_steps.fetch_add(1, std::memory_order_relaxed);
      if (alpha_accum.size() != out.alpha.size())
        alpha_accum.assign(out.alpha.size(), 0.0);
      for (std::size_t m = 0; m < out.alpha.size(); ++m)
        alpha_accum[m] += out.alpha[m];

      segment.observations.push_back(obs_tensors);
      segment.options.push_back(option);
      segment.actions.push_back(action);
      segment.rewards.push_back(result.reward);
      segment.beta_samples.push_back(beta_sample);
      std::vector<double> q_row(out.q.data().begin(), out.q.data().end());
      segment.q_values.push_back(std::move(q_row));

      CaslNetwork::State next_state{out.h,
                                    out.c.defined() ? out.c : state.c};
      episode_done = result.done;
      obs = result.observation;

      if (episode_done || segment.length() >= config.n_steps) {
        segment.terminal = episode_done;
        if (!episode_done) {
          segment.bootstrap_observation =
              observation_tensors(obs, params.feed_audio);
          NoGradGuard no_grad;
          CaslNetwork::StepOutput boot =
              network.observe(segment.bootstrap_observation, next_state);
          segment.q_values.emplace_back(boot.q.data().begin(),
                                        boot.q.data().end());
          segment.bootstrap_beta = boot.beta[option].value();
        }
        try {
          learn_segment(network, store, segment, config, epsilon);
          consecutive_bad = 0;
        } catch (const NumericError& err) {
          ++consecutive_bad;
          if (consecutive_bad >= 3) {
            shared.stop.store(true, std::memory_order_relaxed);
            throw NumericError(std::string(err.what()) +
                               " (3 consecutive segments, worker " +
                               std::to_string(params.worker_id) + ")");
          }
        }
        reset_segment(next_state);
      }
      state = next_state;
    }

    EpisodeResult episode_result;
    episode_result.episode_index = episode;
    episode_result.steps = episode_steps;
    episode_result.undiscounted_return = episode_return;
    episode_result.mean_option_duration =
        option_selections == 0
            ? 0.0
            : static_cast<double>(episode_steps) /
                  static_cast<double>(option_selections);
    episode_result.mean_alpha = alpha_accum;
    for (double& a : episode_result.mean_alpha)
      a /= static_cast<double>(std::max<std::size_t>(1, episode_steps));
    if (on_episode) on_episode(episode_result);
  }
}

}  // namespace casl
