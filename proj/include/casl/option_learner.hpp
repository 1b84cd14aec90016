#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <mutex>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "casl/checkpoint.hpp"
#include "casl/envs.hpp"
#include "casl/network.hpp"
#include "casl/tensor.hpp"

namespace casl {

struct LearnerConfig {
  double gamma = 0.99;
  double deliberation_cost = 0.02;
  double epsilon_start = 1.0;
  double epsilon_end = 0.05;
  double epsilon_anneal_fraction = 0.2;  // fraction of the episode budget
  std::size_t n_steps = 20;
  double lambda_q = 0.5;
  double lambda_entropy_pi = 0.01;
  double lambda_entropy_alpha = 0.005;
  double learning_rate = 1e-4;
  double rmsprop_decay = 0.99;
  double rmsprop_damping = 1e-6;
};

// ---- value recursions (plain numerics, shared by targets and tests) ----

// U(s', w) = (1 - beta) Q(w, s') + beta (V(s') - c)
double option_utility(std::span<const double> q_row, std::size_t option,
                      double value_over, double beta, double deliberation_cost);

// V(s') under an epsilon-greedy policy over Q: (1-eps) max + eps mean.
double value_over_options(std::span<const double> q, double epsilon);

// Epsilon-greedy draw; greedy ties break toward the lowest index.
std::size_t select_option(std::span<const double> q, double epsilon,
                          std::mt19937_64& rng);

// G_t = r_t + gamma G_{t+1}, seeded with the bootstrap (0 when terminal).
std::vector<double> n_step_targets(std::span<const double> rewards, double gamma,
                                   bool terminal, double bootstrap);

double annealed_epsilon(const LearnerConfig& config, std::size_t episode,
                        std::size_t total_episodes);

// ---- segment learning ----

// Everything needed to rebuild the unrolled loss for one <= n-step segment.
// Segments never cross episode boundaries, so only the last transition may
// be terminal.
struct SegmentRecord {
  std::vector<std::vector<Tensor>> observations;  // T x modalities
  std::vector<Tensor> bootstrap_observation;      // empty when terminal
  Tensor h0, c0;                                  // detached entry state
  std::vector<std::size_t> options;
  std::vector<std::size_t> actions;
  std::vector<double> rewards;
  std::vector<double> beta_samples;  // Bernoulli termination outcomes
  bool terminal = false;
  // Numeric telemetry captured during the rollout:
  std::vector<std::vector<double>> q_values;  // T rows, +1 when bootstrapping
  double bootstrap_beta = 0.0;                // beta_{w_{T-1}}(s_T)

  std::size_t length() const { return rewards.size(); }
};

// Fixed targets; no gradient flows through them.
struct SegmentTargets {
  std::vector<double> returns;          // G_t
  std::vector<double> advantages;       // G_t - Q(s_t, w_t)
  std::vector<double> termination_adv;  // Q(s_{t+1}, w_t) - V(s_{t+1}) + c
  double bootstrap = 0.0;
};

SegmentTargets compute_targets(const SegmentRecord& segment,
                               const LearnerConfig& config, double epsilon);

struct LossBreakdown {
  Tensor total;
  double critic = 0.0;
  double policy = 0.0;
  double termination = 0.0;
  double entropy_pi = 0.0;
  double entropy_alpha = 0.0;
};

// Re-runs the network over the segment (building the graph) and assembles
//   sum_t [ 0.5 lq (G_t - Q)^2 - A_t log pi(a_t) + beta(s_{t+1}) D_t
//           - lH H(pi) - la H(alpha) ].
// Throws NumericError when the total is not finite.
LossBreakdown unroll_and_loss(const CaslNetwork& network,
                              const SegmentRecord& segment,
                              const SegmentTargets& targets,
                              const LearnerConfig& config);

Tensor entropy_from_logits(const Tensor& logits);

// ---- shared parameter store ----

// Parameter server for the asynchronous workers. Each tensor is guarded by
// its own mutex: a reader never observes a half-updated tensor, while update
// order across workers stays unspecified.
class SharedStore {
 public:
  explicit SharedStore(const CaslNetwork& reference);

  void snapshot_into(CaslNetwork& dst) const;

  // RMSProp-style update: acc = d*acc + (1-d)*g^2; p -= lr*g/sqrt(acc+eps).
  // Tensors with non-finite gradients are skipped and counted.
  std::size_t apply_gradients(
      const std::vector<std::pair<std::string, std::vector<double>>>& grads,
      const LearnerConfig& config);

  std::vector<CheckpointEntry> to_checkpoint() const;
  void load(const std::vector<CheckpointEntry>& entries);

  std::uint64_t skipped_updates() const { return skipped_.load(); }

 private:
  struct Slot {
    std::string name;
    Shape shape;
    std::vector<double> value;
    std::vector<double> accum;
    mutable std::mutex mutex;
  };
  std::vector<std::unique_ptr<Slot>> slots_;
  std::unordered_map<std::string, std::size_t> index_;
  std::atomic<std::uint64_t> skipped_{0};
};

// ---- worker ----

struct EpisodeResult {
  std::size_t episode_index = 0;
  std::size_t steps = 0;
  double undiscounted_return = 0.0;
  double mean_option_duration = 0.0;
  std::vector<double> mean_alpha;
};

struct TrainShared {
  std::atomic<std::size_t> episodes_started{0};
  std::atomic<std::size_t> env_steps{0};
  std::atomic<bool> stop{false};
};

struct WorkerParams {
  std::size_t worker_id = 0;
  std::uint64_t seed = 0;
  std::size_t total_episodes = 0;
  bool feed_audio = true;  // false: video-only variants
};

// Runs episodes until the shared budget is exhausted (or stop is raised),
// learning from <= n-step segments against the shared store. Aborts with
// NumericError after 3 consecutive non-finite segment losses.
void run_worker(CaslNetwork& network, Environment& env, SharedStore& store,
                TrainShared& shared, const LearnerConfig& config,
                const WorkerParams& params,
                const std::function<void(const EpisodeResult&)>& on_episode);

// Numeric helpers shared with evaluation.
std::vector<double> softmax_values(std::span<const double> v);
std::size_t sample_categorical(std::span<const double> probs,
                               std::mt19937_64& rng);

std::vector<Tensor> observation_tensors(const MultimodalObservation& obs,
                                        bool feed_audio);

}  // namespace casl
