#pragma once

#include <algorithm>
#include <cstddef>
#include <deque>
#include <vector>

#include "gateon/common.hpp"

namespace gateon {

struct DetectorConfig {
  std::size_t window = 1;     // m: min-search window length
  double threshold = 1.01;    // Theta: change-point multiplier on the loss average
  double eta_loss = 0.02;     // eta_L: loss running-average rate
  double eta_conf = 0.02;     // eta_C: confidence rate
  double confidence_gate = 0.9;
};

enum class DetectorEventType { Stay, Reactivate, Create };

struct DetectorEvent {
  DetectorEventType type = DetectorEventType::Stay;
  std::size_t active_context = 0;
  real loss_avg = 0;     // after any switch reset
  real min_window = 0;
  real confidence = 0;   // confidence of the context that was active at decision time
};

/// Unsupervised context inference: a change point fires when the minimum
/// loss over the last m steps exceeds threshold * running average while the
/// network is confident in its current context. On a change point, existing
/// contexts are scanned in ascending order and the first one that fits the
/// current batch is reactivated; otherwise a new context is created.
class ContextDetector {
 public:
  explicit ContextDetector(const DetectorConfig& cfg, std::size_t initial_contexts = 1) : cfg_(cfg) {
    check(cfg.window >= 1, "detector: window must be >= 1");
    check(cfg.threshold > 1.0, "detector: threshold must exceed 1");
    confidence_.assign(initial_contexts, real(0));
  }

  std::size_t active_context() const { return active_; }
  std::size_t context_count() const { return confidence_.size(); }
  real loss_average() const { return loss_avg_; }
  const std::vector<real>& confidence() const { return confidence_; }

  /// Running-average update: Lbar += eta_L * (L - Lbar). The raw loss also
  /// enters the min-search window.
  void observe_loss(real loss) {
    check(is_finite(loss) && loss >= real(0), "detector: loss must be finite and >= 0");
    if (!seeded_) {
      loss_avg_ = loss;
      seeded_ = true;
    } else {
      loss_avg_ += static_cast<real>(cfg_.eta_loss) * (loss - loss_avg_);
    }
    window_.push_back(loss);
    while (window_.size() > cfg_.window) window_.pop_front();
  }

  /// Confidence relaxes toward 1 for the active context and toward 0 for all
  /// others; applied every step.
  void update_confidence() {
    for (std::size_t k = 0; k < confidence_.size(); ++k) {
      const real target = (k == active_) ? real(1) : real(0);
      confidence_[k] += static_cast<real>(cfg_.eta_conf) * (target - confidence_[k]);
    }
  }

  /// Change-point check and routing. `eval_loss(k)` must return the current
  /// batch's loss under context k (forward only); `allocate()` must create a
  /// context in the model and return its index. observe_loss must already
  /// have been called this step.
  template <typename EvalFn, typename AllocFn>
  DetectorEvent detect_and_route(EvalFn&& eval_loss, AllocFn&& allocate) {
    check(!window_.empty(), "detector: no observed loss this step");
    DetectorEvent ev;
    ev.min_window = *std::min_element(window_.begin(), window_.end());
    ev.confidence = confidence_[active_];
    const real bar = static_cast<real>(cfg_.threshold) * loss_avg_;
    if (ev.min_window > bar && confidence_[active_] > static_cast<real>(cfg_.confidence_gate)) {
      bool reactivated = false;
      for (std::size_t k = 0; k < confidence_.size(); ++k) {
        const real lk = static_cast<real>(eval_loss(k));
        if (lk < bar) {
          active_ = k;
          loss_avg_ = lk;
          ev.type = DetectorEventType::Reactivate;
          reactivated = true;
          break;
        }
      }
      if (!reactivated) {
        const std::size_t idx = allocate();
        check(idx == confidence_.size(), "detector: context index out of sync with model");
        confidence_.push_back(real(0));
        active_ = idx;
        loss_avg_ = static_cast<real>(eval_loss(idx));
        ev.type = DetectorEventType::Create;
      }
    }
    ev.active_context = active_;
    ev.loss_avg = loss_avg_;
    return ev;
  }

 private:
  DetectorConfig cfg_;
  std::vector<real> confidence_;
  std::deque<real> window_;
  real loss_avg_ = 0;
  std::size_t active_ = 0;
  bool seeded_ = false;
};

}  // namespace gateon
