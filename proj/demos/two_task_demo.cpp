// Minimal library walkthrough: two permuted-MNIST tasks back to back, one
// context per task, availability-obstructed updates. Prints the accuracy of
// task 0 before and after task 1 so the retention effect is visible.

#include <cstdlib>
#include <iostream>

#include "gateon/harness.hpp"

int main() {
  gateon::ExperimentConfig cfg;
  cfg.name = "two_task_demo";
  if (const char* env = std::getenv("GATEON_DATA_DIR"); env && *env) cfg.dataset_dir = env;
  cfg.family = gateon::TaskFamily::Permuted;
  cfg.num_tasks = 2;
  cfg.steps_per_task = 60;
  cfg.batch_size = 256;
  cfg.arch.hidden = {200, 200};
  cfg.relevance = gateon::RelevanceVariant::NGrad;
  cfg.epsilon = 0.0;
  cfg.seed = 42;

  auto result = gateon::run_experiment(cfg);
  std::cout << "task 0 immediately after training: " << result.ledger.accuracy(0, 0) << "\n";
  std::cout << "task 0 after training task 1:      " << result.ledger.accuracy(0, 1) << "\n";
  std::cout << "task 1 immediately after training: " << result.ledger.accuracy(1, 1) << "\n";
  std::cout << "continual accuracy (mean):         " << gateon::continual_accuracy_mean(result.ledger)
            << "\n";
  return 0;
}
