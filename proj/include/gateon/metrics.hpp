#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "gateon/io.hpp"
#include "gateon/matrix.hpp"

namespace gateon {

/// Test accuracies across the task sequence: cell (k, k') holds the accuracy
/// on task k measured right after training task k' (k' >= k), plus the
/// isolated single-task baselines and optional task-locked curves.
class MetricsLedger {
 public:
  explicit MetricsLedger(std::size_t num_tasks = 0) { reset(num_tasks); }

  void reset(std::size_t num_tasks) {
    k_ = num_tasks;
    acc_.assign(num_tasks, std::vector<real>(num_tasks, missing()));
  }

  std::size_t num_tasks() const { return k_; }

  void set_accuracy(std::size_t task, std::size_t after_task, real accuracy) {
    check(task < k_ && after_task < k_ && task <= after_task, "ledger: cell must satisfy k <= k'");
    check(accuracy >= real(0) && accuracy <= real(1), "ledger: accuracy must be in [0,1]");
    acc_[task][after_task] = accuracy;
  }

  bool filled(std::size_t task, std::size_t after_task) const {
    return task < k_ && after_task < k_ && !std::isnan(static_cast<double>(acc_[task][after_task]));
  }

  real accuracy(std::size_t task, std::size_t after_task) const {
    check(filled(task, after_task), "ledger: missing cell");
    return acc_[task][after_task];
  }

  /// Immediate test accuracy: measured right after the task's own training.
  real immediate(std::size_t task) const { return accuracy(task, task); }

  std::vector<real>& isolated() { return isolated_; }
  const std::vector<real>& isolated() const { return isolated_; }

  std::string to_csv() const {
    std::ostringstream out;
    out << "task,after_task,accuracy\n";
    for (std::size_t k = 0; k < k_; ++k)
      for (std::size_t a = k; a < k_; ++a)
        if (filled(k, a)) out << k << ',' << a << ',' << format_real(acc_[k][a]) << '\n';
    return out.str();
  }

  static MetricsLedger from_csv(const std::string& csv) {
    std::istringstream in(csv);
    std::string line;
    check(static_cast<bool>(std::getline(in, line)), "ledger csv: empty file");
    struct Cell {
      std::size_t k, a;
      real v;
    };
    std::vector<Cell> cells;
    std::size_t max_task = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto f = split_csv_line(line);
      check(f.size() == 3, "ledger csv: expected task,after_task,accuracy");
      Cell c{std::stoul(f[0]), std::stoul(f[1]), static_cast<real>(std::stod(f[2]))};
      max_task = std::max({max_task, c.k, c.a});
      cells.push_back(c);
    }
    MetricsLedger ledger(max_task + 1);
    for (const auto& c : cells) ledger.set_accuracy(c.k, c.a, c.v);
    return ledger;
  }

 private:
  static constexpr real missing() { return std::numeric_limits<real>::quiet_NaN(); }

  std::size_t k_ = 0;
  std::vector<std::vector<real>> acc_;
  std::vector<real> isolated_;
};

/// Mean accuracy on task k over all evaluation points from its own end of
/// training through the end of the last task.
inline real continual_accuracy(const MetricsLedger& ledger, std::size_t task) {
  const std::size_t k_total = ledger.num_tasks();
  check(task < k_total, "continual_accuracy: task out of range");
  real sum = 0;
  for (std::size_t a = task; a < k_total; ++a) sum += ledger.accuracy(task, a);
  return sum / static_cast<real>(k_total - task);
}

/// Task-averaged continual accuracy.
inline real continual_accuracy_mean(const MetricsLedger& ledger) {
  real sum = 0;
  for (std::size_t k = 0; k < ledger.num_tasks(); ++k) sum += continual_accuracy(ledger, k);
  return sum / static_cast<real>(ledger.num_tasks());
}

/// Immediate minus continual accuracy; negative values indicate backward
/// transfer.
inline real forgetting_rate(const MetricsLedger& ledger, std::size_t task) {
  return ledger.immediate(task) - continual_accuracy(ledger, task);
}

inline real forgetting_rate_mean(const MetricsLedger& ledger, bool include_last = true) {
  const std::size_t n = ledger.num_tasks() - (include_last ? 0 : 1);
  check(n >= 1, "forgetting_rate_mean: no tasks");
  real sum = 0;
  for (std::size_t k = 0; k < n; ++k) sum += forgetting_rate(ledger, k);
  return sum / static_cast<real>(n);
}

/// Relative deviation of the mean immediate accuracy from the isolated
/// baseline (fraction; multiply by 100 to report percent).
inline real accuracy_deviation(const MetricsLedger& ledger) {
  const auto& iso = ledger.isolated();
  check(iso.size() == ledger.num_tasks(), "accuracy_deviation: isolated baselines missing");
  real iso_mean = 0;
  for (real v : iso) iso_mean += v;
  iso_mean /= static_cast<real>(iso.size());
  check(iso_mean != real(0), "accuracy_deviation: zero isolated baseline");
  real imm_mean = 0;
  for (std::size_t k = 0; k < ledger.num_tasks(); ++k) imm_mean += ledger.immediate(k);
  imm_mean /= static_cast<real>(ledger.num_tasks());
  return (imm_mean - iso_mean) / iso_mean;
}

/// Average of the per-task accuracy curves recorded on a shared step grid,
/// over tasks k >= 2 (curves are aligned to each task's switch point).
inline std::vector<real> task_locked_accuracy(const std::vector<std::vector<real>>& curves) {
  check(curves.size() >= 2, "task_locked_accuracy: needs at least two tasks");
  const std::size_t grid = curves[1].size();
  for (std::size_t k = 1; k < curves.size(); ++k)
    check(curves[k].size() == grid, "task_locked_accuracy: step grids differ");
  std::vector<real> avg(grid, real(0));
  for (std::size_t k = 1; k < curves.size(); ++k)
    for (std::size_t s = 0; s < grid; ++s) avg[s] += curves[k][s];
  const real inv = real(1) / static_cast<real>(curves.size() - 1);
  for (auto& v : avg) v *= inv;
  return avg;
}

/// Pearson correlation between binarized (v > 0) gating columns of one
/// layer. Zero-variance columns correlate as 0, including on the diagonal.
inline Matrix context_correlation(const std::vector<std::vector<real>>& gate_columns) {
  const std::size_t n = gate_columns.size();
  check(n >= 2, "context_correlation: needs at least two contexts");
  const std::size_t units = gate_columns[0].size();
  std::vector<std::vector<real>> b(n, std::vector<real>(units));
  std::vector<real> mean(n, real(0));
  for (std::size_t i = 0; i < n; ++i) {
    check(gate_columns[i].size() == units, "context_correlation: column sizes differ");
    for (std::size_t u = 0; u < units; ++u) {
      b[i][u] = gate_columns[i][u] > real(0) ? real(1) : real(0);
      mean[i] += b[i][u];
    }
    mean[i] /= static_cast<real>(units);
  }
  std::vector<real> var(n, real(0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t u = 0; u < units; ++u) {
      const real d = b[i][u] - mean[i];
      var[i] += d * d;
    }
  }
  Matrix c(n, n, real(0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      if (var[i] <= real(0) || var[j] <= real(0)) {
        c(i, j) = c(j, i) = real(0);
        continue;
      }
      real cov = 0;
      for (std::size_t u = 0; u < units; ++u) cov += (b[i][u] - mean[i]) * (b[j][u] - mean[j]);
      c(i, j) = c(j, i) = cov / std::sqrt(var[i] * var[j]);
    }
  }
  return c;
}

/// Fraction of true switches with no detector event (reactivate or create)
/// within `tolerance` steps at or after the switch.
inline real missed_detection_rate(const std::vector<std::size_t>& detected_steps,
                                  const std::vector<std::size_t>& true_switch_steps,
                                  std::size_t tolerance) {
  if (true_switch_steps.empty()) return real(0);
  std::size_t missed = 0;
  for (std::size_t sw : true_switch_steps) {
    bool hit = false;
    for (std::size_t d : detected_steps) {
      if (d >= sw && d <= sw + tolerance) {
        hit = true;
        break;
      }
    }
    if (!hit) ++missed;
  }
  return static_cast<real>(missed) / static_cast<real>(true_switch_steps.size());
}

inline std::string correlation_to_csv(const Matrix& c) {
  std::ostringstream out;
  for (std::size_t i = 0; i < c.rows; ++i) {
    for (std::size_t j = 0; j < c.cols; ++j) {
      if (j) out << ',';
      out << format_real(c(i, j));
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace gateon
