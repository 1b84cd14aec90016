#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "casl/experiment.hpp"
#include "casl/gate_analysis.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfigError = 2;
constexpr int kExitNumericError = 3;

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  bool deterministic = false;
  std::string out_dir;
  std::string init_checkpoint;
};

void add_common(CLI::App* cmd, CommonFlags& flags, bool config_required) {
  auto* opt = cmd->add_option("--config", flags.config_path, "experiment config file");
  if (config_required) opt->required();
  cmd->add_option("--seed", flags.seed, "seed override");
  cmd->add_option("--workers", flags.workers, "worker count override");
  cmd->add_flag("--deterministic", flags.deterministic,
                "single seeded worker, reproducible output");
  cmd->add_option("--out", flags.out_dir, "output directory override");
  cmd->add_option("--init", flags.init_checkpoint, "initial checkpoint");
}

casl::ExperimentConfig resolve_config(const CommonFlags& flags) {
  casl::ExperimentConfig config =
      casl::ExperimentConfig::parse_file(flags.config_path);
  if (flags.seed) config.seed = *flags.seed;
  if (flags.workers) config.workers = *flags.workers;
  if (flags.deterministic) config.deterministic = true;
  if (!flags.out_dir.empty()) config.out_dir = flags.out_dir;
  if (!flags.init_checkpoint.empty()) config.init_checkpoint = flags.init_checkpoint;
  config.validate();
  return config;
}

// Minimal SVG line plot; series drawn over a light grid with axis labels.
void write_svg_plot(const std::filesystem::path& path, const std::string& title,
                    const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>& series) {
  const double width = 760, height = 420, margin = 55;
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool first = true;
  for (const auto& [name, pts] : series) {
    for (const auto& [x, y] : pts) {
      if (first) {
        xmin = xmax = x;
        ymin = ymax = y;
        first = false;
      }
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  auto sx = [&](double x) {
    return margin + (x - xmin) / (xmax - xmin) * (width - 2 * margin);
  };
  auto sy = [&](double y) {
    return height - margin - (y - ymin) / (ymax - ymin) * (height - 2 * margin);
  };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                 "#ff7f0e", "#8c564b"};
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string());
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width
     << "' height='" << height << "'>\n";
  os << "<rect width='100%' height='100%' fill='white'/>\n";
  os << "<text x='" << width / 2 << "' y='24' text-anchor='middle' "
        "font-family='sans-serif' font-size='15'>" << title << "</text>\n";
  for (int i = 0; i <= 4; ++i) {
    double fy = ymin + (ymax - ymin) * i / 4.0;
    os << "<line x1='" << margin << "' y1='" << sy(fy) << "' x2='"
       << width - margin << "' y2='" << sy(fy)
       << "' stroke='#dddddd' stroke-width='1'/>\n";
    char label[32];
    std::snprintf(label, sizeof(label), "%.3g", fy);
    os << "<text x='" << margin - 6 << "' y='" << sy(fy) + 4
       << "' text-anchor='end' font-family='sans-serif' font-size='11'>"
       << label << "</text>\n";
    double fx = xmin + (xmax - xmin) * i / 4.0;
    std::snprintf(label, sizeof(label), "%.4g", fx);
    os << "<text x='" << sx(fx) << "' y='" << height - margin + 18
       << "' text-anchor='middle' font-family='sans-serif' font-size='11'>"
       << label << "</text>\n";
  }
  std::size_t color_idx = 0;
  for (const auto& [name, pts] : series) {
    const char* color = colors[color_idx % 6];
    os << "<polyline fill='none' stroke='" << color
       << "' stroke-width='1.8' points='";
    for (const auto& [x, y] : pts) os << sx(x) << ',' << sy(y) << ' ';
    os << "'/>\n";
    os << "<text x='" << width - margin + 4 << "' y='"
       << margin + 16 * static_cast<double>(color_idx)
       << "' font-family='sans-serif' font-size='11' fill='" << color << "'>"
       << name << "</text>\n";
    ++color_idx;
  }
  os << "</svg>\n";
}

int run_train(const CommonFlags& flags) {
  casl::ExperimentConfig config = resolve_config(flags);
  casl::RunArtifacts artifacts = casl::train(config);
  std::cout << "curve: " << artifacts.curve_path.string() << '\n'
            << "checkpoint: " << artifacts.final_checkpoint_path.string()
            << std::endl;
  return kExitOk;
}

int run_transfer(const CommonFlags& flags) {
  casl::ExperimentConfig config = resolve_config(flags);
  if (config.init_checkpoint.empty())
    throw std::invalid_argument("transfer requires --init (or init_checkpoint)");
  return run_train(flags);
}

int run_eval(const CommonFlags& flags, const std::string& checkpoint,
             std::size_t episodes, const std::string& trajectory_out) {
  casl::ExperimentConfig config = resolve_config(flags);
  casl::CaslNetwork network = casl::network_from_checkpoint(config, checkpoint);
  casl::TrajectoryLog sample;
  casl::EvalReport report = casl::evaluate(
      network, config.env_id, casl::EnvConfig{config.episode_cap},
      config.feed_audio(), episodes, config.seed,
      trajectory_out.empty() ? nullptr : &sample, config.variant,
      config.config_hash());
  if (!trajectory_out.empty()) casl::write_trajectory(trajectory_out, sample);
  std::printf("episodes %zu\n", report.episodes);
  std::printf("mean_return %.6f\n", report.mean_return);
  std::printf("stdev_return %.6f\n", report.stdev_return);
  std::printf("mean_option_duration %.6f\n", report.mean_option_duration);
  for (std::size_t m = 0; m < report.mean_alpha.size(); ++m)
    std::printf("mean_alpha_%s %.6f\n", m == 0 ? "video" : "audio",
                report.mean_alpha[m]);
  return kExitOk;
}

int run_analyze(const CommonFlags& flags, const std::string& checkpoint,
                const std::string& trajectory, const std::string& csv_out,
                bool per_element) {
  casl::ExperimentConfig config = resolve_config(flags);
  casl::CaslNetwork network = casl::network_from_checkpoint(config, checkpoint);
  casl::TrajectoryLog log = casl::read_trajectory(trajectory);
  casl::AnalysisOptions options;
  options.per_element_rho = per_element;
  auto rows = casl::analyze_trajectory(network, log, options);
  casl::write_attribution_csv(csv_out, rows);
  std::cout << "wrote " << rows.size() << " rows to " << csv_out << std::endl;
  return kExitOk;
}

int run_plot(const std::string& curve, const std::string& analysis,
             const std::string& out) {
  if (curve.empty() == analysis.empty())
    throw std::invalid_argument("plot needs exactly one of --curve/--analysis");
  if (!curve.empty()) {
    auto points = casl::read_curve(curve);
    std::vector<std::pair<double, double>> returns, alpha;
    for (const auto& p : points) {
      returns.emplace_back(static_cast<double>(p.episode), p.mean_eval_return);
      alpha.emplace_back(static_cast<double>(p.episode), p.mean_alpha_audio);
    }
    write_svg_plot(out, "evaluation return / audio attention",
                   {{"return", returns}, {"alpha_audio", alpha}});
  } else {
    auto rows = casl::read_attribution_csv(analysis);
    std::vector<std::pair<double, double>> a_audio, rf_audio, ri_audio, fmean;
    for (const auto& r : rows) {
      a_audio.emplace_back(r.t, r.alpha_audio);
      rf_audio.emplace_back(r.t, r.rho_f[0]);
      ri_audio.emplace_back(r.t, r.rho_i[0]);
      fmean.emplace_back(r.t, r.f_mean);
    }
    write_svg_plot(out, "attention and gate attribution",
                   {{"alpha_audio", a_audio},
                    {"rho_f_audio", rf_audio},
                    {"rho_i_audio", ri_audio},
                    {"f_mean", fmean}});
  }
  std::cout << "wrote " << out << std::endl;
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"crossmodal attentive skill learner"};
  app.require_subcommand(1);

  CommonFlags train_flags, transfer_flags, eval_flags, analyze_flags;

  CLI::App* train_cmd = app.add_subcommand("train", "train a variant");
  add_common(train_cmd, train_flags, true);

  CLI::App* transfer_cmd =
      app.add_subcommand("transfer", "train from a checkpoint initialization");
  add_common(transfer_cmd, transfer_flags, true);

  CLI::App* eval_cmd = app.add_subcommand("eval", "greedy evaluation");
  add_common(eval_cmd, eval_flags, true);
  std::string eval_checkpoint, eval_trajectory;
  std::size_t eval_episodes = 30;
  eval_cmd->add_option("--checkpoint", eval_checkpoint)->required();
  eval_cmd->add_option("--episodes", eval_episodes);
  eval_cmd->add_option("--dump-trajectory", eval_trajectory,
                       "write the first evaluation episode as JSON lines");

  CLI::App* analyze_cmd =
      app.add_subcommand("analyze", "gate attribution over a trajectory");
  add_common(analyze_cmd, analyze_flags, true);
  std::string analyze_checkpoint, analyze_trajectory, analyze_out = "analysis.csv";
  bool per_element = false;
  analyze_cmd->add_option("--checkpoint", analyze_checkpoint)->required();
  analyze_cmd->add_option("--trajectory", analyze_trajectory)->required();
  analyze_cmd->add_option("--out-csv", analyze_out);
  analyze_cmd->add_flag("--per-element", per_element,
                        "per-element pseudo-correlations, then averaged");

  CLI::App* plot_cmd = app.add_subcommand("plot", "render CSV artifacts to SVG");
  std::string plot_curve, plot_analysis, plot_out = "plot.svg";
  plot_cmd->add_option("--curve", plot_curve, "learning-curve CSV");
  plot_cmd->add_option("--analysis", plot_analysis, "gate-attribution CSV");
  plot_cmd->add_option("--out", plot_out);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) return run_train(train_flags);
    if (transfer_cmd->parsed()) return run_transfer(transfer_flags);
    if (eval_cmd->parsed())
      return run_eval(eval_flags, eval_checkpoint, eval_episodes, eval_trajectory);
    if (analyze_cmd->parsed())
      return run_analyze(analyze_flags, analyze_checkpoint, analyze_trajectory,
                         analyze_out, per_element);
    if (plot_cmd->parsed()) return run_plot(plot_curve, plot_analysis, plot_out);
  } catch (const casl::NumericError& err) {
    std::cerr << "numeric failure: " << err.what() << std::endl;
    return kExitNumericError;
  } catch (const std::invalid_argument& err) {
    std::cerr << "config error: " << err.what() << std::endl;
    return kExitConfigError;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << std::endl;
    return kExitConfigError;
  }
  return kExitOk;
}
