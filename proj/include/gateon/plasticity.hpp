#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "gateon/network.hpp"

namespace gateon {

enum class RelevanceVariant { PTaylor, NGrad, NLayerwise, NActivity };

/// Parameter-level availability for the Taylor variant, unit-level
/// (neuron / channel) for the rest.
enum class Granularity { PerParameter, PerUnit };

inline Granularity granularity_of(RelevanceVariant v) {
  return v == RelevanceVariant::PTaylor ? Granularity::PerParameter : Granularity::PerUnit;
}

/// (dL/dtheta * theta)^2 for every feedforward parameter, flattened in
/// param-block order. Requires a completed backward pass.
inline std::vector<real> relevance_p_taylor(GatedLayer& layer) {
  std::vector<real> mu;
  for (const ParamBlock& b : layer.param_blocks())
    for (std::size_t i = 0; i < b.count; ++i) {
      const real t = b.grad[i] * b.value[i];
      mu.push_back(t * t);
    }
  return mu;
}

/// (dL/dx_i * x_i)^2 per unit, batch-averaged; x is the gated activity.
inline std::vector<real> relevance_n_grad(GatedLayer& layer) { return layer.unit_grad_activity_sq(); }

/// x_i^2 per unit, averaged over the batch (and spatial positions for conv).
inline std::vector<real> relevance_n_activity(GatedLayer& layer) { return layer.unit_activity_sq(); }

/// Outgoing-weight-norm relevance: mu_i = (sum_j w_next[j,i]^2 / N_next) * x_i^2.
/// Defined for a dense layer followed by a dense layer; everything else
/// (conv stages, the output layer) falls back to the gradient form.
inline std::vector<real> relevance_n_layerwise(const std::vector<GatedLayer*>& gated, std::size_t index) {
  GatedLayer* layer = gated[index];
  const bool has_next = index + 1 < gated.size();
  if (!has_next || layer->kind() != LayerKind::Dense || gated[index + 1]->kind() != LayerKind::Dense)
    return relevance_n_grad(*layer);
  auto* next = static_cast<GatedDenseLayer*>(gated[index + 1]);
  if (next->in_features() != layer->unit_count()) return relevance_n_grad(*layer);  // pooled in between

  const Matrix& w_next = next->weights();
  const std::size_t n_next = w_next.rows;
  std::vector<real> out_norm(layer->unit_count(), real(0));
  for (std::size_t j = 0; j < w_next.rows; ++j) {
    const real* row = w_next.row(j);
    for (std::size_t i = 0; i < w_next.cols; ++i) out_norm[i] += row[i] * row[i];
  }
  std::vector<real> mu = layer->unit_activity_sq();
  for (std::size_t i = 0; i < mu.size(); ++i) mu[i] *= out_norm[i] / static_cast<real>(n_next);
  return mu;
}

/// Softmax-style normalization: mu_norm = unit_count * mu / sum(mu), so a
/// uniform mu maps to all ones. An all-zero mu stays all zero (a dead layer
/// recovers availability).
inline std::vector<real> normalize_relevance(const std::vector<real>& mu, std::size_t unit_count) {
  real sum = 0;
  for (real m : mu) {
    check(m >= real(0), "normalize_relevance: negative relevance");
    sum += m;
  }
  std::vector<real> norm(mu.size(), real(0));
  if (sum > real(0)) {
    const real scale = static_cast<real>(unit_count) / sum;
    for (std::size_t i = 0; i < mu.size(); ++i) norm[i] = mu[i] * scale;
  }
  return norm;
}

/// One availability step: A <- clip_[0,1]( A * (1 - eta_a * (mu_norm - eps)) ).
inline void availability_update(std::vector<real>& a, const std::vector<real>& mu_norm, real eta_a,
                                real epsilon) {
  check(eta_a >= real(0), "availability_update: eta_a must be >= 0");
  check(a.size() == mu_norm.size(), "availability_update: shape mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) {
    real next = a[i] * (real(1) - eta_a * (mu_norm[i] - epsilon));
    if (next < real(0)) next = real(0);
    if (next > real(1)) next = real(1);
    a[i] = next;
  }
}

/// Steps of sub-threshold relevance b needed to undo T steps at relevance a
/// (both held constant): T* = -T * log(1 - eta_a*(a-eps)) / log(1 - eta_a*(b-eps)).
inline double recovery_time(double t_steps, double a, double b, double epsilon, double eta_a) {
  check(a > epsilon && epsilon > b && b >= 0.0, "recovery_time: need a > eps > b >= 0");
  check(eta_a > 0.0 && eta_a * (a - epsilon) < 1.0, "recovery_time: need 0 < eta_a*(a-eps) < 1");
  return -t_steps * std::log(1.0 - eta_a * (a - epsilon)) / std::log(1.0 - eta_a * (b - epsilon));
}

// ---------------------------------------------------------------------------

struct PlasticityConfig {
  RelevanceVariant variant = RelevanceVariant::NGrad;
  double epsilon = 0.0;
  double eta_a_dense = 0.01;
  double eta_a_conv = 0.004;
  bool enabled = true;  // false pins all availability at 1 (gating-only, vanilla)
};

/// Per-layer availability arrays plus the once-per-step update that ties
/// relevance estimation to the availability dynamics.
class PlasticityState {
 public:
  PlasticityState(GatedNetwork& net, const PlasticityConfig& cfg) : cfg_(cfg) {
    for (GatedLayer* l : net.gated_layers()) {
      std::size_t n = 0;
      if (granularity() == Granularity::PerParameter)
        for (const ParamBlock& b : l->param_blocks()) n += b.count;
      else
        n = l->unit_count();
      availability_.emplace_back(n, real(1));
    }
  }

  Granularity granularity() const { return granularity_of(cfg_.variant); }
  const PlasticityConfig& config() const { return cfg_; }

  std::vector<std::vector<real>>& availability() { return availability_; }
  const std::vector<std::vector<real>>& availability() const { return availability_; }

  /// Relevance -> normalization -> availability step, per gated layer.
  /// Call once per minibatch, after the optimizer step.
  void update(GatedNetwork& net) {
    if (!cfg_.enabled) return;
    const auto gated = net.gated_layers();
    check(gated.size() == availability_.size(), "plasticity: layer count changed");
    for (std::size_t i = 0; i < gated.size(); ++i) {
      std::vector<real> mu;
      switch (cfg_.variant) {
        case RelevanceVariant::PTaylor: mu = relevance_p_taylor(*gated[i]); break;
        case RelevanceVariant::NGrad: mu = relevance_n_grad(*gated[i]); break;
        case RelevanceVariant::NLayerwise: mu = relevance_n_layerwise(gated, i); break;
        case RelevanceVariant::NActivity: mu = relevance_n_activity(*gated[i]); break;
      }
      const std::vector<real> mu_norm = normalize_relevance(mu, mu.size());
      const real eta = static_cast<real>(gated[i]->kind() == LayerKind::Conv ? cfg_.eta_a_conv
                                                                             : cfg_.eta_a_dense);
      availability_update(availability_[i], mu_norm, eta, static_cast<real>(cfg_.epsilon));
    }
  }

 private:
  PlasticityConfig cfg_;
  std::vector<std::vector<real>> availability_;
};

// ---------------------------------------------------------------------------

struct OptimizerConfig {
  enum class Type { Sgd, Adam };
  Type type = Type::Adam;
  double lr = 5e-3;
  double momentum = 0.0;  // SGD only
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  /// When set, availability scales the raw gradient fed into the optimizer
  /// state instead of the final step.
  bool modulate_raw_gradient = false;
};

/// Gradient-descent step where feedforward updates are scaled by the
/// availability; gating weights always take the plain, unobstructed step.
class ObstructedOptimizer {
 public:
  ObstructedOptimizer(GatedNetwork& net, const OptimizerConfig& cfg) : cfg_(cfg) {
    for (GatedLayer* l : net.gated_layers()) {
      LayerMoments lm;
      for (const ParamBlock& b : l->param_blocks()) {
        lm.m.emplace_back(b.count, real(0));
        lm.v.emplace_back(b.count, real(0));
      }
      moments_.push_back(std::move(lm));
      gate_moments_.emplace_back();
    }
  }

  const OptimizerConfig& config() const { return cfg_; }

  /// Resets Adam moments and the step counter (used at task switches).
  void reset_moments() {
    for (auto& lm : moments_)
      for (std::size_t i = 0; i < lm.m.size(); ++i) {
        std::fill(lm.m[i].begin(), lm.m[i].end(), real(0));
        std::fill(lm.v[i].begin(), lm.v[i].end(), real(0));
      }
    for (auto& gm : gate_moments_) gm.clear();
    t_ = 0;
  }

  void step(GatedNetwork& net, const PlasticityState& plast) {
    const auto gated = net.gated_layers();
    check(gated.size() == moments_.size(), "optimizer: layer count changed");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const bool per_param = plast.granularity() == Granularity::PerParameter;

    for (std::size_t li = 0; li < gated.size(); ++li) {
      GatedLayer* layer = gated[li];
      const std::vector<real>& avail = plast.availability()[li];
      auto blocks = layer->param_blocks();
      check(!per_param || total_count(blocks) == avail.size(),
            "optimizer: availability granularity mismatch");
      check(per_param || avail.size() == layer->unit_count(),
            "optimizer: availability granularity mismatch");

      std::size_t flat = 0;
      for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
        const ParamBlock& b = blocks[bi];
        std::vector<real>& m = moments_[li].m[bi];
        std::vector<real>& v = moments_[li].v[bi];
        for (std::size_t p = 0; p < b.count; ++p, ++flat) {
          const real a = per_param ? avail[flat] : avail[p / b.per_unit];
          real g = b.grad[p];
          if (cfg_.modulate_raw_gradient) g *= a;
          real step = adjusted_step(g, m[p], v[p], bc1, bc2);
          if (!cfg_.modulate_raw_gradient) step *= a;
          b.value[p] -= static_cast<real>(cfg_.lr) * step;
        }
      }

      if (!layer->gates_pinned() && layer->context_count() > 0) {
        const std::size_t ctx = layer->active_context();
        auto& gm = gate_moments_[li];
        if (gm.size() <= ctx) gm.resize(ctx + 1);
        if (gm[ctx].m.empty()) {
          gm[ctx].m.assign(layer->unit_count(), real(0));
          gm[ctx].v.assign(layer->unit_count(), real(0));
        }
        std::vector<real>& col = layer->gate_weights(ctx);
        const std::vector<real>& dv = layer->gate_weight_grad();
        for (std::size_t i = 0; i < col.size(); ++i) {
          // Gating weights take the standard descent step: no momentum (a
          // momentum-amplified update can overshoot a gate into the dead
          // region, silencing the unit for good), no availability.
          const real step = cfg_.type == OptimizerConfig::Type::Sgd
                                ? dv[i]
                                : adjusted_step(dv[i], gm[ctx].m[i], gm[ctx].v[i], bc1, bc2);
          col[i] -= static_cast<real>(cfg_.lr) * step;
        }
      }
    }
  }

 private:
  struct Moments {
    std::vector<real> m, v;
  };
  struct LayerMoments {
    std::vector<std::vector<real>> m, v;
  };

  static std::size_t total_count(const std::vector<ParamBlock>& blocks) {
    std::size_t n = 0;
    for (const auto& b : blocks) n += b.count;
    return n;
  }

  real adjusted_step(real g, real& m, real& v, double bc1, double bc2) const {
    if (cfg_.type == OptimizerConfig::Type::Sgd) {
      if (cfg_.momentum == 0.0) return g;
      m = static_cast<real>(cfg_.momentum) * m + g;
      return m;
    }
    m = static_cast<real>(cfg_.beta1) * m + (real(1) - static_cast<real>(cfg_.beta1)) * g;
    v = static_cast<real>(cfg_.beta2) * v + (real(1) - static_cast<real>(cfg_.beta2)) * g * g;
    const double mhat = static_cast<double>(m) / bc1;
    const double vhat = static_cast<double>(v) / bc2;
    return static_cast<real>(mhat / (std::sqrt(vhat) + cfg_.adam_eps));
  }

  OptimizerConfig cfg_;
  std::vector<LayerMoments> moments_;
  std::vector<std::vector<Moments>> gate_moments_;  // [layer][context]
  std::uint64_t t_ = 0;
};

}  // namespace gateon
