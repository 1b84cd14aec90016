#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "casl/envs.hpp"
#include "casl/network.hpp"

namespace casl {

// Contributing variables of a gate activation under concatenated attention.
// The gate weight acts on [alpha_v x_v, alpha_a x_a, h_prev] plus bias.
enum class GateVariable { audio, video, hidden, bias };

// Full gate activation sigma(W [wv, wa, h] + b) evaluated numerically.
std::vector<double> gate_activation(const Tensor& gate_w, const Tensor& gate_b,
                                    std::span<const double> weighted_video,
                                    std::span<const double> weighted_audio,
                                    std::span<const double> h_prev);

// Gate recomputed with the removed variable's weight block dropped (bias
// ablation drops b). Only defined for concatenated attention.
std::vector<double> gate_ablation(const Tensor& gate_w, const Tensor& gate_b,
                                  double alpha_audio, double alpha_video,
                                  std::span<const double> x_audio,
                                  std::span<const double> x_video,
                                  std::span<const double> h_prev,
                                  GateVariable removed, AttentionMode mode);

struct PseudoCorrelation {
  std::vector<double> rho;
  bool degenerate = false;  // all residuals were zero; rho left at zero
};

// rho_m = residual_m / sum_m residual_m; residuals must be non-negative.
PseudoCorrelation pseudo_correlation(std::span<const double> residuals);

// Per-timestep attribution: indices follow GateVariable order
// (audio, video, hidden, bias).
struct GateAttributionRow {
  int t = 0;
  double alpha_audio = 0.0;
  double alpha_video = 0.0;
  double f_mean = 0.0;
  double i_mean = 0.0;
  std::array<double, 4> rho_f{};
  std::array<double, 4> rho_i{};
  bool f_degenerate = false;
  bool i_degenerate = false;
};

struct AnalysisOptions {
  // Default: residuals are element means of |f - f_hat| before Eq.-style
  // normalization. The alternative normalizes per element, then averages.
  bool per_element_rho = false;
};

// Replays the logged episode (environment rebuilt from the log header, so
// observations are reproduced bit-exactly) through the network and emits the
// attention trace plus gate attributions for both gates.
std::vector<GateAttributionRow> analyze_trajectory(const CaslNetwork& network,
                                                   const TrajectoryLog& log,
                                                   AnalysisOptions options = {});

void write_attribution_csv(const std::filesystem::path& path,
                           const std::vector<GateAttributionRow>& rows);
std::vector<GateAttributionRow> read_attribution_csv(
    const std::filesystem::path& path);

}  // namespace casl
