#include "casl/network.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace casl {

Tensor conv_extract(const ConvExtractorParams& params, const Tensor& obs) {
  Tensor t = obs;
  for (const ConvStageParams& stage : params.stages) {
    t = relu(conv2d(t, stage.kernels, stage.bias));
  }
  return flatten(t);
}

AttentionResult attention_forward(const AttentionParams& params,
                                  const std::vector<Tensor>& features,
                                  const Tensor& h_prev, AttentionMode mode) {
  const std::size_t m_count = features.size();
  if (m_count == 0) throw std::invalid_argument("attention: no modalities");
  if (m_count != params.w_m.size())
    throw std::invalid_argument("attention: feature count " +
                                std::to_string(m_count) +
                                " does not match parameter count " +
                                std::to_string(params.w_m.size()));
  if (mode == AttentionMode::summed) {
    for (const Tensor& f : features) {
      if (f.size() != features[0].size())
        throw std::invalid_argument(
            "attention: summed mode requires equal feature lengths, got " +
            shape_to_string(features[0].shape()) + " vs " +
            shape_to_string(f.shape()));
    }
  }
  Tensor z_pre = affine(params.w_m[0], features[0], params.b_m[0]);
  for (std::size_t m = 1; m < m_count; ++m) {
    z_pre = add(z_pre, affine(params.w_m[m], features[m], params.b_m[m]));
  }
  z_pre = add(z_pre, affine(params.w_h, h_prev, params.b_h));
  Tensor z = tanh(z_pre);
  Tensor scores = affine(params.w_z, z, params.b_z);
  Tensor alpha = softmax(scores);

  AttentionResult result;
  result.scores = scores;
  result.alpha = alpha;
  if (mode == AttentionMode::summed) {
    Tensor fused = scale_by(features[0], pick(alpha, 0));
    for (std::size_t m = 1; m < m_count; ++m)
      fused = add(fused, scale_by(features[m], pick(alpha, m)));
    result.fused = fused;
  } else {
    std::vector<Tensor> weighted;
    weighted.reserve(m_count);
    for (std::size_t m = 0; m < m_count; ++m)
      weighted.push_back(scale_by(features[m], pick(alpha, m)));
    result.fused = concat(weighted);
  }
  return result;
}

LstmStepResult lstm_step(const LstmParams& params, const Tensor& fused,
                         const Tensor& h_prev, const Tensor& c_prev) {
  if (h_prev.size() != c_prev.size())
    throw std::invalid_argument("lstm: h and c widths differ, " +
                                shape_to_string(h_prev.shape()) + " vs " +
                                shape_to_string(c_prev.shape()));
  Tensor u = concat({fused, h_prev});
  LstmStepResult r;
  r.f_gate = sigmoid(affine(params.w_f, u, params.b_f));
  r.i_gate = sigmoid(affine(params.w_i, u, params.b_i));
  Tensor o_gate = sigmoid(affine(params.w_o, u, params.b_o));
  Tensor candidate = tanh(affine(params.w_c, u, params.b_c));
  r.c = add(hadamard(r.f_gate, c_prev), hadamard(r.i_gate, candidate));
  r.h = hadamard(o_gate, tanh(r.c));
  return r;
}

HeadsResult heads_forward(const OptionHeadParams& params, const Tensor& h) {
  HeadsResult r;
  r.q = affine(params.q_w, h, params.q_b);
  const std::size_t n_options = params.pi_w.size();
  r.pi_logits.reserve(n_options);
  r.beta.reserve(n_options);
  for (std::size_t w = 0; w < n_options; ++w) {
    r.pi_logits.push_back(affine(params.pi_w[w], h, params.pi_b[w]));
    r.beta.push_back(sigmoid(affine(params.beta_w[w], h, params.beta_b[w])));
  }
  return r;
}

const std::vector<std::string>& CaslNetwork::modality_names(std::size_t count) {
  static const std::vector<std::string> one = {"video"};
  static const std::vector<std::string> two = {"video", "audio"};
  if (count == 1) return one;
  if (count == 2) return two;
  throw std::invalid_argument("unsupported modality count " +
                              std::to_string(count));
}

Tensor CaslNetwork::register_param(const std::string& name, Shape shape,
                                   std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  std::vector<double> values(n);
  for (double& v : values) v = dist(rng);
  Tensor t = Tensor::from_data(std::move(shape), std::move(values), true);
  parameters_.emplace_back(name, t);
  return t;
}

CaslNetwork::CaslNetwork(NetworkConfig config, std::uint64_t init_seed)
    : config_(config) {
  if (config_.num_modalities < 1 || config_.num_modalities > 2)
    throw std::invalid_argument("network requires 1 or 2 modalities");
  if (config_.num_options < 1)
    throw std::invalid_argument("network requires at least one option");
  std::mt19937_64 rng(init_seed);
  const auto& names = modality_names(config_.num_modalities);
  const std::size_t feat_len = config_.feature_length();
  const std::size_t hidden = config_.hidden_width;

  conv_.resize(config_.num_modalities);
  for (std::size_t m = 0; m < config_.num_modalities; ++m) {
    std::size_t c_in = 1;
    for (std::size_t s = 0; s < 3; ++s) {
      const std::string prefix = "conv." + names[m] + "." + std::to_string(s);
      const std::size_t fan_in = c_in * 9;
      conv_[m].stages[s].kernels = register_param(
          prefix + ".kernels", {config_.conv_channels, c_in, 3, 3}, fan_in, rng);
      conv_[m].stages[s].bias =
          register_param(prefix + ".bias", {config_.conv_channels}, fan_in, rng);
      c_in = config_.conv_channels;
    }
  }

  if (config_.learned_attention) {
    const std::size_t adim = config_.attention_dim;
    attention_.w_m.resize(config_.num_modalities);
    attention_.b_m.resize(config_.num_modalities);
    for (std::size_t m = 0; m < config_.num_modalities; ++m) {
      attention_.w_m[m] = register_param("attention.w_m." + names[m],
                                         {adim, feat_len}, feat_len, rng);
      attention_.b_m[m] =
          register_param("attention.b_m." + names[m], {adim}, feat_len, rng);
    }
    attention_.w_h = register_param("attention.w_h", {adim, hidden}, hidden, rng);
    attention_.b_h = register_param("attention.b_h", {adim}, hidden, rng);
    attention_.w_z = register_param(
        "attention.w_z", {config_.num_modalities, adim}, adim, rng);
    attention_.b_z =
        register_param("attention.b_z", {config_.num_modalities}, adim, rng);
  }

  const std::size_t fused_len = config_.fused_length();
  if (config_.recurrence == RecurrenceKind::lstm) {
    const std::size_t gate_in = fused_len + hidden;
    lstm_.w_f = register_param("lstm.w_f", {hidden, gate_in}, gate_in, rng);
    lstm_.b_f = register_param("lstm.b_f", {hidden}, gate_in, rng);
    lstm_.w_i = register_param("lstm.w_i", {hidden, gate_in}, gate_in, rng);
    lstm_.b_i = register_param("lstm.b_i", {hidden}, gate_in, rng);
    lstm_.w_c = register_param("lstm.w_c", {hidden, gate_in}, gate_in, rng);
    lstm_.b_c = register_param("lstm.b_c", {hidden}, gate_in, rng);
    lstm_.w_o = register_param("lstm.w_o", {hidden, gate_in}, gate_in, rng);
    lstm_.b_o = register_param("lstm.b_o", {hidden}, gate_in, rng);
  } else {
    ff_.w = register_param("ff.w", {hidden, fused_len}, fused_len, rng);
    ff_.b = register_param("ff.b", {hidden}, fused_len, rng);
  }

  heads_.q_w =
      register_param("heads.q.w", {config_.num_options, hidden}, hidden, rng);
  heads_.q_b = register_param("heads.q.b", {config_.num_options}, hidden, rng);
  heads_.pi_w.resize(config_.num_options);
  heads_.pi_b.resize(config_.num_options);
  heads_.beta_w.resize(config_.num_options);
  heads_.beta_b.resize(config_.num_options);
  for (std::size_t w = 0; w < config_.num_options; ++w) {
    const std::string prefix = "heads.pi." + std::to_string(w);
    heads_.pi_w[w] = register_param(prefix + ".w",
                                    {config_.num_actions, hidden}, hidden, rng);
    heads_.pi_b[w] =
        register_param(prefix + ".b", {config_.num_actions}, hidden, rng);
    const std::string bprefix = "heads.beta." + std::to_string(w);
    heads_.beta_w[w] = register_param(bprefix + ".w", {1, hidden}, hidden, rng);
    heads_.beta_b[w] = register_param(bprefix + ".b", {1}, hidden, rng);
  }
}

CaslNetwork::State CaslNetwork::initial_state() const {
  State s;
  s.h = Tensor::zeros({config_.hidden_width});
  s.c = Tensor::zeros({config_.hidden_width});
  return s;
}

Tensor CaslNetwork::extract_features(const Tensor& obs,
                                     std::size_t modality) const {
  const Shape expected = {1, config_.input_extent, config_.input_extent};
  if (obs.shape() != expected) {
    throw std::invalid_argument("extract_features: expected input " +
                                shape_to_string(expected) + ", got " +
                                shape_to_string(obs.shape()));
  }
  return conv_extract(conv_[modality], obs);
}

CaslNetwork::StepOutput CaslNetwork::step(const std::vector<Tensor>& features,
                                          const State& prev) const {
  if (features.size() != config_.num_modalities)
    throw std::invalid_argument("step: expected " +
                                std::to_string(config_.num_modalities) +
                                " feature vectors, got " +
                                std::to_string(features.size()));
  StepOutput out;
  const std::size_t m_count = features.size();

  Tensor fused;
  if (config_.learned_attention) {
    AttentionResult att = attention_forward(attention_, features, prev.h,
                                            config_.attention_mode);
    out.alpha_t = att.alpha;
    out.alpha_scores = att.scores;
    out.alpha.assign(att.alpha.data().begin(), att.alpha.data().end());
    fused = att.fused;
  } else {
    out.alpha.assign(m_count, 1.0 / static_cast<double>(m_count));
    if (m_count == 1) {
      fused = features[0];
    } else if (config_.attention_mode == AttentionMode::summed) {
      fused = scale(features[0], out.alpha[0]);
      for (std::size_t m = 1; m < m_count; ++m)
        fused = add(fused, scale(features[m], out.alpha[m]));
    } else {
      std::vector<Tensor> weighted;
      weighted.reserve(m_count);
      for (std::size_t m = 0; m < m_count; ++m)
        weighted.push_back(scale(features[m], out.alpha[m]));
      fused = concat(weighted);
    }
  }
  out.fused = fused;

  Tensor h;
  if (config_.recurrence == RecurrenceKind::lstm) {
    LstmStepResult r = lstm_step(lstm_, fused, prev.h, prev.c);
    out.h = r.h;
    out.c = r.c;
    out.f_gate = r.f_gate;
    out.i_gate = r.i_gate;
    h = r.h;
  } else {
    h = tanh(add(matvec(ff_.w, fused), ff_.b));
    out.h = h;
  }

  HeadsResult heads = heads_forward(heads_, h);
  out.q = heads.q;
  out.pi_logits = std::move(heads.pi_logits);
  out.beta = std::move(heads.beta);
  return out;
}

CaslNetwork::StepOutput CaslNetwork::observe(
    const std::vector<Tensor>& observations, const State& prev) const {
  if (observations.size() != config_.num_modalities)
    throw std::invalid_argument("observe: expected " +
                                std::to_string(config_.num_modalities) +
                                " observations, got " +
                                std::to_string(observations.size()));
  std::vector<Tensor> features;
  features.reserve(observations.size());
  for (std::size_t m = 0; m < observations.size(); ++m)
    features.push_back(extract_features(observations[m], m));
  return step(features, prev);
}

Tensor CaslNetwork::parameter(const std::string& name) const {
  for (const auto& [pname, tensor] : parameters_)
    if (pname == name) return tensor;
  throw std::invalid_argument("unknown parameter '" + name + "'");
}

void CaslNetwork::zero_grads() {
  for (auto& [name, tensor] : parameters_) tensor.zero_grad();
}

std::vector<CheckpointEntry> CaslNetwork::to_checkpoint() const {
  std::vector<CheckpointEntry> entries;
  entries.reserve(parameters_.size());
  for (const auto& [name, tensor] : parameters_)
    entries.push_back(entry_from_tensor(name, tensor));
  return entries;
}

void CaslNetwork::load_parameters(const std::vector<CheckpointEntry>& entries) {
  std::vector<std::string> problems;
  for (auto& [name, tensor] : parameters_) {
    const CheckpointEntry* found = nullptr;
    for (const CheckpointEntry& e : entries) {
      if (e.name == name) {
        found = &e;
        break;
      }
    }
    if (!found) {
      problems.push_back(name + " (missing)");
      continue;
    }
    if (found->shape != tensor.shape()) {
      problems.push_back(name + " (checkpoint " + shape_to_string(found->shape) +
                         ", expected " + shape_to_string(tensor.shape()) + ")");
      continue;
    }
    load_into_tensor(*found, tensor);
  }
  if (!problems.empty()) {
    std::ostringstream os;
    os << "checkpoint does not match network:";
    for (const std::string& p : problems) os << ' ' << p << ';';
    throw std::invalid_argument(os.str());
  }
}

}  // namespace casl
