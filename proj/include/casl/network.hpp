#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "casl/checkpoint.hpp"
#include "casl/tensor.hpp"

namespace casl {

enum class AttentionMode { summed, concatenated };
enum class RecurrenceKind { lstm, feedforward };

struct NetworkConfig {
  std::size_t input_extent = 32;  // observations are [1, extent, extent]
  std::size_t conv_channels = 32;
  std::size_t num_modalities = 2;
  bool learned_attention = true;  // false: alpha frozen uniform, no params
  AttentionMode attention_mode = AttentionMode::concatenated;
  RecurrenceKind recurrence = RecurrenceKind::lstm;
  std::size_t hidden_width = 128;
  std::size_t attention_dim = 32;
  std::size_t num_options = 4;
  std::size_t num_actions = 5;

  std::size_t feature_extent() const {
    std::size_t e = input_extent;
    for (int i = 0; i < 3; ++i) e = (e + 1) / 2;
    return e;
  }
  std::size_t feature_length() const {
    return conv_channels * feature_extent() * feature_extent();
  }
  std::size_t fused_length() const {
    return attention_mode == AttentionMode::concatenated
               ? num_modalities * feature_length()
               : feature_length();
  }
};

struct ConvStageParams {
  Tensor kernels;  // [C_out, C_in, 3, 3]
  Tensor bias;     // [C_out]
};

struct ConvExtractorParams {
  std::array<ConvStageParams, 3> stages;
};

struct AttentionParams {
  std::vector<Tensor> w_m;  // per modality [attention_dim, feature_length]
  std::vector<Tensor> b_m;  // per modality [attention_dim]
  Tensor w_h, b_h;          // [attention_dim, hidden], [attention_dim]
  Tensor w_z, b_z;          // [M, attention_dim], [M]
};

struct LstmParams {
  Tensor w_f, b_f;  // gates act on [fused, h_prev]
  Tensor w_i, b_i;
  Tensor w_c, b_c;
  Tensor w_o, b_o;
};

struct FeedforwardParams {
  Tensor w, b;  // single tanh layer replacing the recurrent cell
};

struct OptionHeadParams {
  Tensor q_w, q_b;             // [num_options, hidden], [num_options]
  std::vector<Tensor> pi_w;    // per option [num_actions, hidden]
  std::vector<Tensor> pi_b;    // per option [num_actions]
  std::vector<Tensor> beta_w;  // per option [1, hidden]
  std::vector<Tensor> beta_b;  // per option [1]
};

struct AttentionResult {
  Tensor scores;  // [M] pre-softmax attention logits
  Tensor alpha;   // [M] on the simplex
  Tensor fused;
};

struct LstmStepResult {
  Tensor h, c;
  Tensor f_gate, i_gate;
};

struct HeadsResult {
  Tensor q;                      // [num_options]
  std::vector<Tensor> pi_logits; // per option [num_actions]
  std::vector<Tensor> beta;      // per option scalar in (0,1)
};

// Free-standing layer forwards; all differentiable through their inputs.
Tensor conv_extract(const ConvExtractorParams& params, const Tensor& obs);
AttentionResult attention_forward(const AttentionParams& params,
                                  const std::vector<Tensor>& features,
                                  const Tensor& h_prev, AttentionMode mode);
LstmStepResult lstm_step(const LstmParams& params, const Tensor& fused,
                         const Tensor& h_prev, const Tensor& c_prev);
HeadsResult heads_forward(const OptionHeadParams& params, const Tensor& h);

// The full network: per-modality convolutional extractors, a crossmodal
// attention layer (learned or frozen uniform), an LSTM cell or feedforward
// stand-in, and the option value / intra-option policy / termination heads.
class CaslNetwork {
 public:
  CaslNetwork(NetworkConfig config, std::uint64_t init_seed);

  const NetworkConfig& config() const { return config_; }

  struct State {
    Tensor h, c;
  };
  State initial_state() const;

  struct StepOutput {
    std::vector<double> alpha;      // telemetry copy, length M
    Tensor alpha_t;                 // defined only for learned attention
    Tensor alpha_scores;            // defined only for learned attention
    Tensor fused;
    Tensor h, c;                    // c undefined for feedforward variants
    Tensor f_gate, i_gate;          // defined for LSTM variants only
    Tensor q;
    std::vector<Tensor> pi_logits;
    std::vector<Tensor> beta;
  };

  Tensor extract_features(const Tensor& obs, std::size_t modality) const;
  StepOutput step(const std::vector<Tensor>& features, const State& prev) const;
  StepOutput observe(const std::vector<Tensor>& observations,
                     const State& prev) const;

  // Registration-ordered named parameters; names are stable across runs and
  // checkpoints (conv.video.0.kernels, attention.w_z, lstm.w_f, heads.q.w, ...).
  const std::vector<std::pair<std::string, Tensor>>& parameters() const {
    return parameters_;
  }
  Tensor parameter(const std::string& name) const;

  void zero_grads();
  std::vector<CheckpointEntry> to_checkpoint() const;
  // Loads every parameter by name; missing entries or shape mismatches are
  // rejected with the offending tensor names listed.
  void load_parameters(const std::vector<CheckpointEntry>& entries);

  const ConvExtractorParams& conv(std::size_t modality) const {
    return conv_[modality];
  }
  const AttentionParams& attention() const { return attention_; }
  const LstmParams& lstm() const { return lstm_; }
  const FeedforwardParams& feedforward() const { return ff_; }
  const OptionHeadParams& heads() const { return heads_; }

  static const std::vector<std::string>& modality_names(std::size_t count);

 private:
  Tensor register_param(const std::string& name, Shape shape,
                        std::size_t fan_in, std::mt19937_64& rng);

  NetworkConfig config_;
  std::vector<ConvExtractorParams> conv_;
  AttentionParams attention_;
  LstmParams lstm_;
  FeedforwardParams ff_;
  OptionHeadParams heads_;
  std::vector<std::pair<std::string, Tensor>> parameters_;
};

}  // namespace casl
