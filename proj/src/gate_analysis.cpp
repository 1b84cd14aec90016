#include "casl/gate_analysis.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "casl/option_learner.hpp"

namespace casl {

namespace {

// Row dot-product over a column range of the gate weight matrix.
void accumulate_block(const Tensor& gate_w, std::vector<double>& acc,
                      std::size_t col_offset, std::span<const double> input) {
  const std::size_t rows = gate_w.shape()[0];
  const std::size_t cols = gate_w.shape()[1];
  const double* w = gate_w.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* wrow = w + r * cols + col_offset;
    double sum = 0.0;
    for (std::size_t c = 0; c < input.size(); ++c) sum += wrow[c] * input[c];
    acc[r] += sum;
  }
}

std::vector<double> gate_from_blocks(const Tensor& gate_w, const Tensor& gate_b,
                                     std::span<const double> weighted_video,
                                     std::span<const double> weighted_audio,
                                     std::span<const double> h_prev,
                                     bool with_video, bool with_audio,
                                     bool with_hidden, bool with_bias) {
  const std::size_t rows = gate_w.shape()[0];
  const std::size_t cols = gate_w.shape()[1];
  const std::size_t feat = weighted_video.size();
  if (weighted_audio.size() != feat)
    throw std::invalid_argument("gate: modality feature lengths differ");
  if (cols != 2 * feat + h_prev.size())
    throw std::invalid_argument(
        "gate: weight width " + std::to_string(cols) + " does not match inputs " +
        std::to_string(2 * feat + h_prev.size()));
  std::vector<double> acc(rows, 0.0);
  if (with_bias)
    for (std::size_t r = 0; r < rows; ++r) acc[r] = gate_b.data()[r];
  if (with_video) accumulate_block(gate_w, acc, 0, weighted_video);
  if (with_audio) accumulate_block(gate_w, acc, feat, weighted_audio);
  if (with_hidden) accumulate_block(gate_w, acc, 2 * feat, h_prev);
  for (double& v : acc) v = sigmoid_scalar(v);
  return acc;
}

std::vector<double> weighted(std::span<const double> x, double alpha) {
  std::vector<double> out(x.begin(), x.end());
  for (double& v : out) v *= alpha;
  return out;
}

double mean_abs_diff(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

double mean_of(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

}  // namespace

std::vector<double> gate_activation(const Tensor& gate_w, const Tensor& gate_b,
                                    std::span<const double> weighted_video,
                                    std::span<const double> weighted_audio,
                                    std::span<const double> h_prev) {
  return gate_from_blocks(gate_w, gate_b, weighted_video, weighted_audio, h_prev,
                          true, true, true, true);
}

std::vector<double> gate_ablation(const Tensor& gate_w, const Tensor& gate_b,
                                  double alpha_audio, double alpha_video,
                                  std::span<const double> x_audio,
                                  std::span<const double> x_video,
                                  std::span<const double> h_prev,
                                  GateVariable removed, AttentionMode mode) {
  if (mode != AttentionMode::concatenated)
    throw std::invalid_argument(
        "gate_ablation: requires concatenated attention");
  std::vector<double> wv = weighted(x_video, alpha_video);
  std::vector<double> wa = weighted(x_audio, alpha_audio);
  return gate_from_blocks(gate_w, gate_b, wv, wa, h_prev,
                          removed != GateVariable::video,
                          removed != GateVariable::audio,
                          removed != GateVariable::hidden,
                          removed != GateVariable::bias);
}

PseudoCorrelation pseudo_correlation(std::span<const double> residuals) {
  PseudoCorrelation result;
  result.rho.assign(residuals.size(), 0.0);
  double total = 0.0;
  for (double r : residuals) {
    if (r < 0.0)
      throw std::invalid_argument("pseudo_correlation: negative residual " +
                                  std::to_string(r));
    total += r;
  }
  if (total == 0.0) {
    result.degenerate = true;
    return result;
  }
  for (std::size_t i = 0; i < residuals.size(); ++i)
    result.rho[i] = residuals[i] / total;
  return result;
}

namespace {

constexpr std::array<GateVariable, 4> kVariables = {
    GateVariable::audio, GateVariable::video, GateVariable::hidden,
    GateVariable::bias};

// rho for one gate at one step, under either scalarization scheme. The
// baseline runs through the same block accumulation as the ablations so a
// zero weight block leaves a residual of exactly zero.
void attribute_gate(const Tensor& gate_w, const Tensor& gate_b,
                    std::span<const double> weighted_video,
                    std::span<const double> weighted_audio,
                    std::span<const double> h_prev, bool per_element_rho,
                    std::array<double, 4>& rho_out, bool& degenerate_out) {
  const std::vector<double> full_activation = gate_from_blocks(
      gate_w, gate_b, weighted_video, weighted_audio, h_prev, true, true, true,
      true);
  std::array<std::vector<double>, 4> ablated;
  for (std::size_t m = 0; m < 4; ++m) {
    const GateVariable removed = kVariables[m];
    ablated[m] = gate_from_blocks(gate_w, gate_b, weighted_video, weighted_audio,
                                  h_prev, removed != GateVariable::video,
                                  removed != GateVariable::audio,
                                  removed != GateVariable::hidden,
                                  removed != GateVariable::bias);
  }
  if (!per_element_rho) {
    std::array<double, 4> residuals{};
    for (std::size_t m = 0; m < 4; ++m)
      residuals[m] = mean_abs_diff(full_activation, ablated[m]);
    PseudoCorrelation pc = pseudo_correlation(residuals);
    for (std::size_t m = 0; m < 4; ++m) rho_out[m] = pc.rho[m];
    degenerate_out = pc.degenerate;
    return;
  }
  const std::size_t width = full_activation.size();
  std::array<double, 4> rho_sum{};
  std::size_t live_elements = 0;
  for (std::size_t j = 0; j < width; ++j) {
    std::array<double, 4> residuals{};
    for (std::size_t m = 0; m < 4; ++m)
      residuals[m] = std::abs(full_activation[j] - ablated[m][j]);
    PseudoCorrelation pc = pseudo_correlation(residuals);
    if (pc.degenerate) continue;
    ++live_elements;
    for (std::size_t m = 0; m < 4; ++m) rho_sum[m] += pc.rho[m];
  }
  degenerate_out = live_elements == 0;
  for (std::size_t m = 0; m < 4; ++m)
    rho_out[m] = degenerate_out
                     ? 0.0
                     : rho_sum[m] / static_cast<double>(live_elements);
}

}  // namespace

std::vector<GateAttributionRow> analyze_trajectory(const CaslNetwork& network,
                                                   const TrajectoryLog& log,
                                                   AnalysisOptions options) {
  const NetworkConfig& cfg = network.config();
  if (cfg.num_modalities != 2)
    throw std::invalid_argument(
        "analyze_trajectory: network must consume video and audio");
  if (cfg.recurrence != RecurrenceKind::lstm)
    throw std::invalid_argument("analyze_trajectory: network has no gates");
  if (cfg.attention_mode != AttentionMode::concatenated)
    throw std::invalid_argument(
        "analyze_trajectory: requires concatenated attention");
  if (cfg.input_extent != kObsExtent)
    throw std::invalid_argument("analyze_trajectory: network input extent " +
                                std::to_string(cfg.input_extent) +
                                " does not match observations");

  auto env = make_env(log.header.env_id);
  MultimodalObservation obs = env->reset(log.header.seed);

  NoGradGuard no_grad;
  CaslNetwork::State state = network.initial_state();
  const std::size_t feat = cfg.feature_length();

  std::vector<GateAttributionRow> rows;
  rows.reserve(log.steps.size());
  for (const TrajectoryStep& step : log.steps) {
    std::vector<Tensor> obs_tensors = observation_tensors(obs, true);
    CaslNetwork::StepOutput out = network.observe(obs_tensors, state);

    GateAttributionRow row;
    row.t = step.t;
    row.alpha_video = out.alpha[0];
    row.alpha_audio = out.alpha.size() > 1 ? out.alpha[1] : 0.0;
    row.f_mean = mean_of(out.f_gate.data());
    row.i_mean = mean_of(out.i_gate.data());

    auto fused = out.fused.data();
    std::span<const double> weighted_video(fused.data(), feat);
    std::span<const double> weighted_audio(fused.data() + feat, feat);
    std::span<const double> h_prev = state.h.data();
    attribute_gate(network.lstm().w_f, network.lstm().b_f, weighted_video,
                   weighted_audio, h_prev, options.per_element_rho, row.rho_f,
                   row.f_degenerate);
    attribute_gate(network.lstm().w_i, network.lstm().b_i, weighted_video,
                   weighted_audio, h_prev, options.per_element_rho, row.rho_i,
                   row.i_degenerate);
    rows.push_back(row);

    state.h = out.h;
    state.c = out.c;
    if (step.done) break;
    StepResult result = env->step(static_cast<Action>(step.action));
    obs = result.observation;
  }
  return rows;
}

void write_attribution_csv(const std::filesystem::path& path,
                           const std::vector<GateAttributionRow>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for write");
  os << "t,alpha_audio,alpha_video,f_mean,i_mean,rho_f_audio,rho_f_video,"
        "rho_f_hidden,rho_f_bias,rho_i_audio,rho_i_video,rho_i_hidden,"
        "rho_i_bias\n";
  char buf[512];
  for (const GateAttributionRow& r : rows) {
    std::snprintf(buf, sizeof(buf),
                  "%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,"
                  "%.10g,%.10g,%.10g\n",
                  r.t, r.alpha_audio, r.alpha_video, r.f_mean, r.i_mean,
                  r.rho_f[0], r.rho_f[1], r.rho_f[2], r.rho_f[3], r.rho_i[0],
                  r.rho_i[1], r.rho_i[2], r.rho_i[3]);
    os << buf;
  }
}

std::vector<GateAttributionRow> read_attribution_csv(
    const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::vector<GateAttributionRow> rows;
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    GateAttributionRow r;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    ss >> r.t >> r.alpha_audio >> r.alpha_video >> r.f_mean >> r.i_mean;
    for (double& v : r.rho_f) ss >> v;
    for (double& v : r.rho_i) ss >> v;
    rows.push_back(r);
  }
  return rows;
}

}  // namespace casl
