// Command-line driver for the gateon continual-learning library.
//
// Subcommands:
//   run           train one experiment from a JSON config
//   baselines     isolated single-task baselines for the same config
//   metrics       recompute derived metrics from a ledger CSV
//   sweep         grid of runs over epsilon / relevance variant / seeds
//   export-plots  emit plot-ready x,y CSV series from a result directory

#include <cstdlib>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gateon/harness.hpp"

namespace {

using gateon::ExperimentConfig;

struct Overrides {
  std::string data_dir, out_dir, variant, context_mode;
  double epsilon = -1.0;
  std::int64_t seed = -1;
  int threads = 0;
};

void add_override_flags(CLI::App* cmd, Overrides& ov) {
  cmd->add_option("--data", ov.data_dir, "dataset directory (overrides config and GATEON_DATA_DIR)");
  cmd->add_option("--out", ov.out_dir, "output directory override");
  cmd->add_option("--seed", ov.seed, "seed override");
  cmd->add_option("--threads", ov.threads, "worker thread count");
  cmd->add_option("--variant", ov.variant, "relevance variant: p_taylor|n_grad|n_layerwise|n_activity");
  cmd->add_option("--epsilon", ov.epsilon, "availability threshold epsilon override");
  cmd->add_option("--context-mode", ov.context_mode, "given|inferred");
}

ExperimentConfig load_config(const std::string& path, const Overrides& ov) {
  ExperimentConfig cfg = ExperimentConfig::from_json(nlohmann::json::parse(gateon::read_text_file(path)));
  if (const char* env = std::getenv("GATEON_DATA_DIR"); env && *env) cfg.dataset_dir = env;
  if (!ov.data_dir.empty()) cfg.dataset_dir = ov.data_dir;
  if (!ov.out_dir.empty()) cfg.out_dir = ov.out_dir;
  if (ov.seed >= 0) cfg.seed = static_cast<std::uint64_t>(ov.seed);
  if (ov.threads > 0) cfg.threads = ov.threads;
  if (!ov.variant.empty()) cfg.relevance = gateon::relevance_from_name(ov.variant);
  if (ov.epsilon >= 0.0) cfg.epsilon = ov.epsilon;
  if (!ov.context_mode.empty()) {
    gateon::check(ov.context_mode == "given" || ov.context_mode == "inferred",
                  "--context-mode must be given or inferred");
    cfg.context_mode =
        ov.context_mode == "given" ? gateon::ContextMode::Given : gateon::ContextMode::Inferred;
  }
  return cfg;
}

int cmd_run(const std::string& config_path, const Overrides& ov) {
  ExperimentConfig cfg = load_config(config_path, ov);
  auto result = gateon::run_experiment(cfg);
  const double cont = gateon::continual_accuracy_mean(result.ledger);
  const double fr = gateon::forgetting_rate_mean(result.ledger);
  std::cout << "continual_accuracy_mean=" << gateon::format_real(cont)
            << " forgetting_rate_mean=" << gateon::format_real(fr)
            << " contexts=" << result.net->context_count() << "\n";
  if (!cfg.out_dir.empty()) std::cout << "results written to " << cfg.out_dir << "\n";
  return 0;
}

int cmd_baselines(const std::string& config_path, const Overrides& ov) {
  ExperimentConfig cfg = load_config(config_path, ov);
  const auto accs = gateon::run_isolated_baselines(cfg);
  double mean = 0;
  for (double a : accs) mean += a;
  mean /= accs.empty() ? 1.0 : static_cast<double>(accs.size());
  std::cout << "isolated_mean=" << gateon::format_real(mean) << " over " << accs.size() << " tasks\n";
  return 0;
}

int cmd_metrics(const std::string& ledger_path, const std::string& isolated_path,
                const std::string& out_path) {
  auto ledger = gateon::MetricsLedger::from_csv(gateon::read_text_file(ledger_path));
  if (!isolated_path.empty()) {
    std::istringstream in(gateon::read_text_file(isolated_path));
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto f = gateon::split_csv_line(line);
      ledger.isolated().push_back(static_cast<gateon::real>(std::stod(f.back())));
    }
  }
  std::ostringstream csv;
  csv << "task,immediate,continual,forgetting_rate\n";
  for (std::size_t k = 0; k < ledger.num_tasks(); ++k)
    csv << k << ',' << gateon::format_real(ledger.immediate(k)) << ','
        << gateon::format_real(gateon::continual_accuracy(ledger, k)) << ','
        << gateon::format_real(gateon::forgetting_rate(ledger, k)) << '\n';
  csv << "mean," << gateon::format_real(gateon::continual_accuracy_mean(ledger)) << ','
      << gateon::format_real(gateon::forgetting_rate_mean(ledger)) << ','
      << gateon::format_real(gateon::forgetting_rate_mean(ledger, false)) << '\n';
  if (!ledger.isolated().empty())
    csv << "accuracy_deviation_pct," << gateon::format_real(100.0 * gateon::accuracy_deviation(ledger))
        << ",,\n";
  if (out_path.empty())
    std::cout << csv.str();
  else
    gateon::write_text_file(out_path, csv.str());
  return 0;
}

int cmd_sweep(const std::string& config_path, const Overrides& ov, std::vector<double> epsilons,
              std::vector<std::string> variants, std::vector<std::uint64_t> seeds, int jobs) {
  ExperimentConfig base = load_config(config_path, ov);
  gateon::check(!base.out_dir.empty(), "sweep requires an output directory (config out_dir or --out)");
  if (epsilons.empty()) epsilons = {base.epsilon};
  if (variants.empty()) variants = {gateon::relevance_name(base.relevance)};
  if (seeds.empty()) seeds = {base.seed};

  std::vector<ExperimentConfig> grid;
  for (const auto& variant : variants)
    for (double eps : epsilons)
      for (std::uint64_t seed : seeds) {
        ExperimentConfig cfg = base;
        cfg.relevance = gateon::relevance_from_name(variant);
        cfg.epsilon = eps;
        cfg.seed = seed;
        std::ostringstream name;
        name << variant << "_eps" << eps << "_seed" << seed;
        cfg.name = name.str();
        cfg.out_dir = base.out_dir + "/" + name.str();
        grid.push_back(std::move(cfg));
      }

  std::vector<std::string> summary(grid.size());
  std::atomic<std::size_t> cursor{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = cursor.fetch_add(1);
      if (i >= grid.size()) return;
      auto result = gateon::run_experiment(grid[i]);
      std::ostringstream row;
      row << grid[i].name << ',' << gateon::relevance_name(grid[i].relevance) << ','
          << grid[i].epsilon << ',' << grid[i].seed << ','
          << gateon::format_real(gateon::continual_accuracy_mean(result.ledger)) << ','
          << gateon::format_real(gateon::forgetting_rate_mean(result.ledger));
      summary[i] = row.str();
    }
  };
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  std::ostringstream csv;
  csv << "run,variant,epsilon,seed,continual_accuracy_mean,forgetting_rate_mean\n";
  for (const auto& row : summary) csv << row << '\n';
  gateon::write_text_file(base.out_dir + "/sweep_summary.csv", csv.str());
  std::cout << "sweep wrote " << grid.size() << " runs under " << base.out_dir << "\n";
  return 0;
}

// Availability trajectories, immediate-accuracy-per-task and detection
// outcomes as plain x,y series for plotting.
int cmd_export_plots(const std::string& run_dir, std::string out_dir) {
  namespace fs = std::filesystem;
  if (out_dir.empty()) out_dir = run_dir + "/plots";
  gateon::ensure_dir(out_dir);

  {  // mean availability per layer over steps
    std::istringstream in(gateon::read_text_file(run_dir + "/availability.csv"));
    std::string line;
    std::getline(in, line);
    std::map<std::pair<long, long>, std::pair<double, long>> acc;  // (layer,step) -> (sum,count)
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto f = gateon::split_csv_line(line);
      const long layer = std::stol(f[0]);
      const long step = std::stol(f[3]);
      auto& slot = acc[{layer, step}];
      slot.first += std::stod(f[2]);
      slot.second += 1;
    }
    std::ostringstream csv;
    csv << "layer,step,mean_availability\n";
    for (const auto& [key, val] : acc)
      csv << key.first << ',' << key.second << ',' << gateon::format_real(val.first / val.second) << '\n';
    gateon::write_text_file(out_dir + "/availability_mean.csv", csv.str());
  }

  {  // immediate accuracy per task
    std::istringstream in(gateon::read_text_file(run_dir + "/metrics.csv"));
    std::string line;
    std::getline(in, line);
    std::ostringstream csv;
    csv << "task,immediate_accuracy\n";
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto f = gateon::split_csv_line(line);
      csv << f[0] << ',' << f[2] << '\n';
    }
    gateon::write_text_file(out_dir + "/immediate_accuracy.csv", csv.str());
  }

  if (fs::exists(run_dir + "/events.jsonl") && fs::exists(run_dir + "/switches.csv")) {
    std::vector<std::size_t> detected;
    std::istringstream in(gateon::read_text_file(run_dir + "/events.jsonl"));
    std::string line;
    std::size_t window = 1;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      if (j.at("event") != "stay") detected.push_back(j.at("step").get<std::size_t>());
    }
    if (fs::exists(run_dir + "/config.json")) {
      const auto cj = nlohmann::json::parse(gateon::read_text_file(run_dir + "/config.json"));
      window = cj.at("context").at("detector").value("window", 1);
    }
    std::istringstream sin(gateon::read_text_file(run_dir + "/switches.csv"));
    std::getline(sin, line);
    std::vector<std::size_t> switches;
    std::ostringstream csv;
    csv << "task,switch_step,detected_within_window\n";
    while (std::getline(sin, line)) {
      if (line.empty()) continue;
      const auto f = gateon::split_csv_line(line);
      const std::size_t sw = std::stoul(f[1]);
      switches.push_back(sw);
      bool hit = false;
      for (std::size_t d : detected)
        if (d >= sw && d <= sw + window + 5) hit = true;
      csv << f[0] << ',' << sw << ',' << (hit ? 1 : 0) << '\n';
    }
    csv << "missed_rate,,"
        << gateon::format_real(gateon::missed_detection_rate(detected, switches, window + 5)) << '\n';
    gateon::write_text_file(out_dir + "/detection.csv", csv.str());
  }
  std::cout << "plot series written to " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gateon: context-gated continual learning with availability-modulated plasticity"};
  app.require_subcommand(1);

  Overrides ov;
  std::string config_path, ledger_path, isolated_path, out_path, run_dir;
  std::vector<double> epsilons;
  std::vector<std::string> variants;
  std::vector<std::uint64_t> seeds;
  int jobs = 1;

  auto* run = app.add_subcommand("run", "train one experiment from a JSON config");
  run->add_option("--config", config_path, "experiment config JSON")->required()->check(CLI::ExistingFile);
  add_override_flags(run, ov);

  auto* baselines = app.add_subcommand("baselines", "isolated per-task baselines");
  baselines->add_option("--config", config_path, "experiment config JSON")
      ->required()
      ->check(CLI::ExistingFile);
  add_override_flags(baselines, ov);

  auto* metrics = app.add_subcommand("metrics", "recompute metrics from a ledger CSV");
  metrics->add_option("--ledger", ledger_path, "ledger.csv path")->required()->check(CLI::ExistingFile);
  metrics->add_option("--isolated", isolated_path, "isolated.csv path")->check(CLI::ExistingFile);
  metrics->add_option("--out", out_path, "output CSV path (stdout if omitted)");

  auto* sweep = app.add_subcommand("sweep", "grid of runs over epsilon/variant/seed");
  sweep->add_option("--config", config_path, "base config JSON")->required()->check(CLI::ExistingFile);
  sweep->add_option("--epsilons", epsilons, "epsilon values");
  sweep->add_option("--variants", variants, "relevance variants");
  sweep->add_option("--seeds", seeds, "seeds");
  sweep->add_option("--jobs", jobs, "parallel worker threads");
  add_override_flags(sweep, ov);

  auto* plots = app.add_subcommand("export-plots", "emit plot-ready CSV series from a run directory");
  plots->add_option("--run", run_dir, "result directory of a finished run")
      ->required()
      ->check(CLI::ExistingDirectory);
  plots->add_option("--out", out_path, "output directory (default <run>/plots)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(config_path, ov);
    if (baselines->parsed()) return cmd_baselines(config_path, ov);
    if (metrics->parsed()) return cmd_metrics(ledger_path, isolated_path, out_path);
    if (sweep->parsed()) return cmd_sweep(config_path, ov, epsilons, variants, seeds, jobs);
    if (plots->parsed()) return cmd_export_plots(run_dir, out_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
