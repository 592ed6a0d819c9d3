#pragma once

#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gateon/detector.hpp"
#include "gateon/io.hpp"
#include "gateon/metrics.hpp"
#include "gateon/network.hpp"
#include "gateon/plasticity.hpp"
#include "gateon/tasks.hpp"

namespace gateon {

enum class AblationMode { Full, GatingOnly, ObstructionOnly, Vanilla };
enum class ContextMode { Given, Inferred };

inline const char* ablation_name(AblationMode m) {
  switch (m) {
    case AblationMode::Full: return "full";
    case AblationMode::GatingOnly: return "gating_only";
    case AblationMode::ObstructionOnly: return "obstruction_only";
    case AblationMode::Vanilla: return "vanilla";
  }
  return "?";
}

inline AblationMode ablation_from_name(const std::string& s) {
  if (s == "full") return AblationMode::Full;
  if (s == "gating_only") return AblationMode::GatingOnly;
  if (s == "obstruction_only") return AblationMode::ObstructionOnly;
  if (s == "vanilla") return AblationMode::Vanilla;
  throw contract_error("unknown ablation mode: " + s);
}

inline const char* relevance_name(RelevanceVariant v) {
  switch (v) {
    case RelevanceVariant::PTaylor: return "p_taylor";
    case RelevanceVariant::NGrad: return "n_grad";
    case RelevanceVariant::NLayerwise: return "n_layerwise";
    case RelevanceVariant::NActivity: return "n_activity";
  }
  return "?";
}

inline RelevanceVariant relevance_from_name(const std::string& s) {
  if (s == "p_taylor") return RelevanceVariant::PTaylor;
  if (s == "n_grad") return RelevanceVariant::NGrad;
  if (s == "n_layerwise") return RelevanceVariant::NLayerwise;
  if (s == "n_activity") return RelevanceVariant::NActivity;
  throw contract_error("unknown relevance variant: " + s);
}

struct ArchConfig {
  std::vector<std::size_t> hidden = {400, 400};
  std::vector<std::size_t> conv_channels = {};  // prepended conv stack, empty = MLP
  std::size_t kernel = 3;
  std::size_t pool = 4;  // max-pool after the conv stack
  bool batchnorm = false;
  bool output_renorm = false;
  double gate_init_bias = 0.0;  // mean of the sign-random hidden-gate init
  std::size_t num_classes = 10;
  std::size_t input_height = 28, input_width = 28;
};

struct ExperimentConfig {
  std::string name = "run";
  std::string dataset_dir = "data/mnist";
  TaskFamily family = TaskFamily::Permuted;
  std::size_t num_tasks = 10;
  std::size_t steps_per_task = 100;
  std::size_t batch_size = 256;
  ArchConfig arch;

  RelevanceVariant relevance = RelevanceVariant::NGrad;
  double epsilon = 0.0;
  double eta_a_dense = 0.01;
  double eta_a_conv = 0.004;
  AblationMode ablation = AblationMode::Full;

  OptimizerConfig optimizer;
  ContextMode context_mode = ContextMode::Given;
  DetectorConfig detector;

  std::uint64_t seed = 1;
  std::size_t eval_subsample = 0;  // 0 = full test split per ledger cell
  std::uint64_t eval_seed = 7;
  std::size_t avail_log_every = 0;   // extra availability snapshots every N steps
  std::size_t task_locked_every = 0; // accuracy curve cadence during tasks, 0 = off
  std::vector<std::pair<int, int>> split_pairs = {{0, 1}, {2, 3}, {4, 5}, {6, 7}, {8, 9}};
  int threads = 0;  // 0 = leave the global setting untouched
  std::string out_dir;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["name"] = name;
    j["dataset_dir"] = dataset_dir;
    j["family"] = family_name(family);
    j["num_tasks"] = num_tasks;
    j["steps_per_task"] = steps_per_task;
    j["batch_size"] = batch_size;
    j["arch"] = {{"hidden", arch.hidden},
                 {"conv_channels", arch.conv_channels},
                 {"kernel", arch.kernel},
                 {"pool", arch.pool},
                 {"batchnorm", arch.batchnorm},
                 {"output_renorm", arch.output_renorm},
                 {"gate_init_bias", arch.gate_init_bias},
                 {"num_classes", arch.num_classes}};
    j["method"] = {{"relevance", relevance_name(relevance)},
                   {"epsilon", epsilon},
                   {"eta_a_dense", eta_a_dense},
                   {"eta_a_conv", eta_a_conv},
                   {"ablation", ablation_name(ablation)}};
    j["optimizer"] = {{"type", optimizer.type == OptimizerConfig::Type::Adam ? "adam" : "sgd"},
                      {"lr", optimizer.lr},
                      {"momentum", optimizer.momentum},
                      {"modulate_raw_gradient", optimizer.modulate_raw_gradient}};
    j["context"] = {{"mode", context_mode == ContextMode::Given ? "given" : "inferred"},
                    {"detector",
                     {{"window", detector.window},
                      {"threshold", detector.threshold},
                      {"eta_loss", detector.eta_loss},
                      {"eta_conf", detector.eta_conf}}}};
    j["seed"] = seed;
    j["eval_subsample"] = eval_subsample;
    j["eval_seed"] = eval_seed;
    j["avail_log_every"] = avail_log_every;
    j["task_locked_every"] = task_locked_every;
    nlohmann::ordered_json pairs = nlohmann::ordered_json::array();
    for (auto [a, b] : split_pairs) pairs.push_back({a, b});
    j["split_pairs"] = pairs;
    j["threads"] = threads;
    j["out_dir"] = out_dir;
    return j;
  }

  static ExperimentConfig from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    c.name = j.value("name", c.name);
    c.dataset_dir = j.value("dataset_dir", c.dataset_dir);
    if (j.contains("family")) c.family = family_from_name(j.at("family").get<std::string>());
    c.num_tasks = j.value("num_tasks", c.num_tasks);
    c.steps_per_task = j.value("steps_per_task", c.steps_per_task);
    c.batch_size = j.value("batch_size", c.batch_size);
    if (j.contains("arch")) {
      const auto& a = j.at("arch");
      c.arch.hidden = a.value("hidden", c.arch.hidden);
      c.arch.conv_channels = a.value("conv_channels", c.arch.conv_channels);
      c.arch.kernel = a.value("kernel", c.arch.kernel);
      c.arch.pool = a.value("pool", c.arch.pool);
      c.arch.batchnorm = a.value("batchnorm", c.arch.batchnorm);
      c.arch.output_renorm = a.value("output_renorm", c.arch.output_renorm);
      c.arch.gate_init_bias = a.value("gate_init_bias", c.arch.gate_init_bias);
      c.arch.num_classes = a.value("num_classes", c.arch.num_classes);
    }
    if (j.contains("method")) {
      const auto& m = j.at("method");
      if (m.contains("relevance")) c.relevance = relevance_from_name(m.at("relevance").get<std::string>());
      c.epsilon = m.value("epsilon", c.epsilon);
      c.eta_a_dense = m.value("eta_a_dense", c.eta_a_dense);
      c.eta_a_conv = m.value("eta_a_conv", c.eta_a_conv);
      if (m.contains("ablation")) c.ablation = ablation_from_name(m.at("ablation").get<std::string>());
    }
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      const std::string type = o.value("type", std::string("adam"));
      check(type == "adam" || type == "sgd", "config: optimizer type must be adam or sgd");
      c.optimizer.type = type == "adam" ? OptimizerConfig::Type::Adam : OptimizerConfig::Type::Sgd;
      c.optimizer.lr = o.value("lr", c.optimizer.lr);
      c.optimizer.momentum = o.value("momentum", c.optimizer.momentum);
      c.optimizer.modulate_raw_gradient = o.value("modulate_raw_gradient", false);
    }
    if (j.contains("context")) {
      const auto& ctx = j.at("context");
      const std::string mode = ctx.value("mode", std::string("given"));
      check(mode == "given" || mode == "inferred", "config: context mode must be given or inferred");
      c.context_mode = mode == "given" ? ContextMode::Given : ContextMode::Inferred;
      if (ctx.contains("detector")) {
        const auto& d = ctx.at("detector");
        c.detector.window = d.value("window", c.detector.window);
        c.detector.threshold = d.value("threshold", c.detector.threshold);
        c.detector.eta_loss = d.value("eta_loss", c.detector.eta_loss);
        c.detector.eta_conf = d.value("eta_conf", c.detector.eta_conf);
      }
    }
    c.seed = j.value("seed", c.seed);
    c.eval_subsample = j.value("eval_subsample", c.eval_subsample);
    c.eval_seed = j.value("eval_seed", c.eval_seed);
    c.avail_log_every = j.value("avail_log_every", c.avail_log_every);
    c.task_locked_every = j.value("task_locked_every", c.task_locked_every);
    if (j.contains("split_pairs")) {
      c.split_pairs.clear();
      for (const auto& p : j.at("split_pairs")) c.split_pairs.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
    }
    c.threads = j.value("threads", c.threads);
    c.out_dir = j.value("out_dir", c.out_dir);
    return c;
  }
};

struct DetectorEventRecord {
  std::size_t step = 0;
  DetectorEvent event;
};

struct ExperimentResult {
  ExperimentConfig config;
  std::vector<TaskDef> tasks;
  MetricsLedger ledger;
  std::vector<std::size_t> context_of_task;   // context evaluated for each task
  std::vector<std::size_t> true_switch_steps; // global step at which each task k >= 1 began
  std::vector<DetectorEventRecord> events;    // inferred mode only
  std::vector<std::vector<real>> task_locked_curves;  // per task, if recorded
  std::string availability_csv;
  std::unique_ptr<GatedNetwork> net;
};

// ---------------------------------------------------------------------------

inline std::vector<TaskDef> build_tasks(const ExperimentConfig& cfg) {
  std::vector<TaskDef> tasks;
  if (cfg.family == TaskFamily::Split) {
    tasks = make_split(cfg.split_pairs);
    check(cfg.num_tasks == tasks.size(), "config: num_tasks must match split_pairs");
  } else {
    for (std::size_t k = 0; k < cfg.num_tasks; ++k) {
      switch (cfg.family) {
        case TaskFamily::Permuted: tasks.push_back(make_permuted(k, cfg.seed)); break;
        case TaskFamily::Rotated: tasks.push_back(make_rotated(k, cfg.seed)); break;
        case TaskFamily::Shuffled: tasks.push_back(make_shuffled(k, cfg.seed)); break;
        case TaskFamily::Split: break;
      }
    }
  }
  return tasks;
}

inline std::unique_ptr<GatedNetwork> build_network(const ExperimentConfig& cfg) {
  auto net = std::make_unique<GatedNetwork>(cfg.seed);
  const ArchConfig& a = cfg.arch;
  std::size_t h = a.input_height, w = a.input_width, ch = 1;
  if (!a.conv_channels.empty()) {
    for (std::size_t c_out : a.conv_channels) {
      ConvGeometry geo{ch, h, w, c_out, a.kernel};
      net->add_conv(geo, a.batchnorm);
      h = geo.out_height();
      w = geo.out_width();
      ch = c_out;
    }
    net->add_maxpool(ch, h, w, a.pool);
    h /= a.pool;
    w /= a.pool;
  }
  std::size_t features = ch * h * w;
  if (a.conv_channels.empty()) features = a.input_height * a.input_width;
  for (std::size_t width : a.hidden) {
    net->add_dense(features, width, Activation::Relu, a.batchnorm, GateInit::SignRandom,
                   a.gate_init_bias);
    features = width;
  }
  // Logit layer: gates start well inside the open region (v in [1,2)) so no
  // class can be silenced by an early update overshooting into the dead
  // zone of the gate nonlinearity.
  net->add_dense(features, a.num_classes, Activation::Identity, false, GateInit::OpenUniform, 1.0);
  net->set_output_renorm(a.output_renorm);
  return net;
}

/// Accuracy of the network on a task's transformed test split under one
/// context, optionally on a seeded subsample.
inline real evaluate_accuracy(GatedNetwork& net, const TaskDef& task, const Dataset& test,
                              std::size_t context, std::size_t subsample, std::uint64_t eval_seed) {
  std::vector<std::size_t> rows = task.sample_indices(test);
  if (subsample > 0 && subsample < rows.size()) {
    Rng rng(eval_seed, task.index);
    rng.shuffle(rows);
    rows.resize(subsample);
  }
  Matrix images;
  std::vector<int> labels;
  task.transform(test, rows, images, labels);
  std::size_t correct = 0;
  const std::size_t chunk = 1024;
  for (std::size_t start = 0; start < rows.size(); start += chunk) {
    const std::size_t n = std::min(chunk, rows.size() - start);
    Matrix part(n, images.cols);
    std::copy(images.row(start), images.row(start) + n * images.cols, part.data.data());
    Matrix logits = net.forward(part, context, false);
    for (std::size_t b = 0; b < n; ++b) {
      const real* r = logits.row(b);
      std::size_t best = 0;
      for (std::size_t c = 1; c < logits.cols; ++c)
        if (r[c] > r[best]) best = c;
      if (static_cast<int>(best) == labels[start + b]) ++correct;
    }
  }
  return rows.empty() ? real(0) : static_cast<real>(correct) / static_cast<real>(rows.size());
}

namespace detail {

inline void append_availability_rows(std::ostringstream& out, const PlasticityState& plast,
                                     std::size_t step) {
  const auto& layers = plast.availability();
  for (std::size_t li = 0; li < layers.size(); ++li) {
    for (std::size_t u = 0; u < layers[li].size(); ++u)
      out << li << ',' << u << ',' << format_real(layers[li][u]) << ',' << step << '\n';
  }
}

/// For per-parameter granularity the CSV logs one row per unit: the mean
/// availability of the unit's parameters.
inline void append_availability_rows_per_unit(std::ostringstream& out, GatedNetwork& net,
                                              const PlasticityState& plast, std::size_t step) {
  if (plast.granularity() == Granularity::PerUnit) {
    append_availability_rows(out, plast, step);
    return;
  }
  auto gated = net.gated_layers();
  const auto& layers = plast.availability();
  for (std::size_t li = 0; li < gated.size(); ++li) {
    const std::size_t units = gated[li]->unit_count();
    std::vector<real> mean(units, real(0));
    std::vector<std::size_t> count(units, 0);
    std::size_t flat = 0;
    for (const ParamBlock& b : gated[li]->param_blocks()) {
      for (std::size_t p = 0; p < b.count; ++p, ++flat) {
        mean[p / b.per_unit] += layers[li][flat];
        ++count[p / b.per_unit];
      }
    }
    for (std::size_t u = 0; u < units; ++u)
      out << li << ',' << u << ',' << format_real(mean[u] / static_cast<real>(count[u])) << ',' << step
          << '\n';
  }
}

}  // namespace detail

/// Runs the full task sequence: training, context routing (scheduled or
/// inferred), availability dynamics, and the accuracy ledger. Writes result
/// files when config.out_dir is set.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  if (cfg.threads > 0) set_num_threads(cfg.threads);
  const Dataset train = load_mnist(cfg.dataset_dir, "train");
  const Dataset test = load_mnist(cfg.dataset_dir, "test");

  ExperimentResult result;
  result.config = cfg;
  result.tasks = build_tasks(cfg);
  result.ledger.reset(result.tasks.size());
  result.net = build_network(cfg);
  GatedNetwork& net = *result.net;

  const bool gates_on = cfg.ablation == AblationMode::Full || cfg.ablation == AblationMode::GatingOnly;
  const bool obstruction_on =
      cfg.ablation == AblationMode::Full || cfg.ablation == AblationMode::ObstructionOnly;
  net.set_gates_pinned(!gates_on);

  PlasticityConfig pcfg;
  pcfg.variant = cfg.relevance;
  pcfg.epsilon = cfg.epsilon;
  pcfg.eta_a_dense = cfg.eta_a_dense;
  pcfg.eta_a_conv = cfg.eta_a_conv;
  pcfg.enabled = obstruction_on;
  PlasticityState plast(net, pcfg);
  ObstructedOptimizer opt(net, cfg.optimizer);

  std::optional<ContextDetector> detector;
  const bool inferred = cfg.context_mode == ContextMode::Inferred;
  std::size_t active_context = 0;
  if (gates_on) net.allocate_context();
  if (inferred) detector.emplace(cfg.detector, 1);

  std::ostringstream avail_csv;
  avail_csv << "layer,unit,availability,step\n";

  std::size_t global_step = 0;
  Matrix images;
  std::vector<int> labels;
  if (cfg.task_locked_every > 0) result.task_locked_curves.resize(result.tasks.size());

  for (std::size_t k = 0; k < result.tasks.size(); ++k) {
    const TaskDef& task = result.tasks[k];
    if (k > 0) {
      result.true_switch_steps.push_back(global_step);
      if (!inferred) {
        // Scheduled switch: new context, fresh optimizer moments.
        if (gates_on) active_context = net.allocate_context();
        opt.reset_moments();
      }
    }
    MinibatchStream stream(task, train, cfg.batch_size, cfg.steps_per_task,
                           cfg.seed + 7919 * (k + 1));
    while (stream.next(images, labels)) {
      auto fl = net.forward_loss(images, labels, active_context, true);
      if (!is_finite(fl.loss)) {
        std::ostringstream msg;
        msg << "non-finite loss at step " << global_step << " (task " << k << ")";
        throw std::runtime_error(msg.str());
      }
      if (inferred) {
        detector->observe_loss(fl.loss);
        DetectorEvent ev = detector->detect_and_route(
            [&](std::size_t ctx) { return net.eval_loss(images, labels, ctx); },
            [&]() { return net.allocate_context(); });
        result.events.push_back({global_step, ev});
        if (ev.type != DetectorEventType::Stay) {
          active_context = ev.active_context;
          opt.reset_moments();
          fl = net.forward_loss(images, labels, active_context, true);
        }
        detector->update_confidence();
      }
      net.backward(fl.dlogits);
      opt.step(net, plast);
      plast.update(net);
      ++global_step;
      if (cfg.avail_log_every > 0 && global_step % cfg.avail_log_every == 0)
        detail::append_availability_rows_per_unit(avail_csv, net, plast, global_step);
      if (cfg.task_locked_every > 0 && stream.produced() % cfg.task_locked_every == 0)
        result.task_locked_curves[k].push_back(
            evaluate_accuracy(net, task, test, active_context, cfg.eval_subsample, cfg.eval_seed));
    }
    detail::append_availability_rows_per_unit(avail_csv, net, plast, global_step);
    result.context_of_task.push_back(active_context);

    // Ledger column t_k: test accuracy of every task seen so far.
    for (std::size_t j = 0; j <= k; ++j)
      result.ledger.set_accuracy(j, k,
                                 evaluate_accuracy(net, result.tasks[j], test, result.context_of_task[j],
                                                   cfg.eval_subsample, cfg.eval_seed));
  }
  result.availability_csv = avail_csv.str();

  if (!cfg.out_dir.empty()) {
    ensure_dir(cfg.out_dir);
    write_text_file(cfg.out_dir + "/config.json", cfg.to_json().dump(2) + "\n");
    nlohmann::ordered_json tasks_json = nlohmann::ordered_json::array();
    for (const auto& t : result.tasks) tasks_json.push_back(t.to_json());
    write_text_file(cfg.out_dir + "/tasks.json", tasks_json.dump(2) + "\n");
    write_text_file(cfg.out_dir + "/ledger.csv", result.ledger.to_csv());
    write_text_file(cfg.out_dir + "/availability.csv", result.availability_csv);

    std::ostringstream switches;
    switches << "task,start_step\n";
    for (std::size_t k = 1; k < result.tasks.size(); ++k)
      switches << k << ',' << result.true_switch_steps[k - 1] << '\n';
    write_text_file(cfg.out_dir + "/switches.csv", switches.str());

    std::ostringstream metrics_csv;
    metrics_csv << "task,context,immediate,continual,forgetting_rate\n";
    for (std::size_t k = 0; k < result.tasks.size(); ++k)
      metrics_csv << k << ',' << result.context_of_task[k] << ','
                  << format_real(result.ledger.immediate(k)) << ','
                  << format_real(continual_accuracy(result.ledger, k)) << ','
                  << format_real(forgetting_rate(result.ledger, k)) << '\n';
    write_text_file(cfg.out_dir + "/metrics.csv", metrics_csv.str());

    if (inferred) {
      std::ostringstream events;
      for (const auto& rec : result.events) {
        nlohmann::ordered_json j;
        j["step"] = rec.step;
        j["event"] = rec.event.type == DetectorEventType::Stay
                         ? "stay"
                         : (rec.event.type == DetectorEventType::Reactivate ? "reactivate" : "create");
        j["active"] = rec.event.active_context;
        j["loss_avg"] = rec.event.loss_avg;
        j["min_window"] = rec.event.min_window;
        j["confidence"] = rec.event.confidence;
        events << j.dump() << '\n';
      }
      write_text_file(cfg.out_dir + "/events.jsonl", events.str());
    }

    if (cfg.task_locked_every > 0) {
      std::ostringstream tl;
      tl << "task,local_step,accuracy\n";
      for (std::size_t k = 0; k < result.task_locked_curves.size(); ++k)
        for (std::size_t s = 0; s < result.task_locked_curves[k].size(); ++s)
          tl << k << ',' << (s + 1) * cfg.task_locked_every << ','
             << format_real(result.task_locked_curves[k][s]) << '\n';
      if (result.task_locked_curves.size() >= 2) {
        const auto avg = task_locked_accuracy(result.task_locked_curves);
        for (std::size_t s = 0; s < avg.size(); ++s)
          tl << "avg," << (s + 1) * cfg.task_locked_every << ',' << format_real(avg[s]) << '\n';
      }
      write_text_file(cfg.out_dir + "/task_locked.csv", tl.str());
    }

    if (gates_on && net.context_count() >= 2) {
      const auto gated = net.gated_layers();
      for (std::size_t li = 0; li < gated.size(); ++li) {
        std::vector<std::vector<real>> cols;
        for (std::size_t ctx = 0; ctx < net.context_count(); ++ctx)
          cols.push_back(gated[li]->gate_weights(ctx));
        write_text_file(cfg.out_dir + "/correlation_layer" + std::to_string(li) + ".csv",
                        correlation_to_csv(context_correlation(cols)));
      }
    }
    net.save(cfg.out_dir + "/checkpoint.bin");
  }
  return result;
}

/// Fresh vanilla network per task, same training budget; feeds the isolated
/// baselines of the accuracy-deviation metric.
inline std::vector<real> run_isolated_baselines(const ExperimentConfig& cfg) {
  if (cfg.threads > 0) set_num_threads(cfg.threads);
  const Dataset train = load_mnist(cfg.dataset_dir, "train");
  const Dataset test = load_mnist(cfg.dataset_dir, "test");
  const std::vector<TaskDef> tasks = build_tasks(cfg);

  std::vector<real> accs;
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    ExperimentConfig one = cfg;
    one.seed = cfg.seed + 1315423911ULL * k;
    auto net = build_network(one);
    net->set_gates_pinned(true);  // vanilla
    PlasticityConfig pcfg;
    pcfg.enabled = false;
    PlasticityState plast(*net, pcfg);
    ObstructedOptimizer opt(*net, cfg.optimizer);
    MinibatchStream stream(tasks[k], train, cfg.batch_size, cfg.steps_per_task,
                           cfg.seed + 7919 * (k + 1));
    Matrix images;
    std::vector<int> labels;
    while (stream.next(images, labels)) {
      auto fl = net->forward_loss(images, labels, 0, true);
      check(is_finite(fl.loss), "isolated baseline: non-finite loss");
      net->backward(fl.dlogits);
      opt.step(*net, plast);
    }
    accs.push_back(evaluate_accuracy(*net, tasks[k], test, 0, cfg.eval_subsample, cfg.eval_seed));
  }
  if (!cfg.out_dir.empty()) {
    ensure_dir(cfg.out_dir);
    std::ostringstream csv;
    csv << "task,accuracy\n";
    for (std::size_t k = 0; k < accs.size(); ++k) csv << k << ',' << format_real(accs[k]) << '\n';
    write_text_file(cfg.out_dir + "/isolated.csv", csv.str());
  }
  return accs;
}

}  // namespace gateon
