#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "gateon/matrix.hpp"
#include "gateon/ops.hpp"
#include "gateon/rng.hpp"

namespace gateon {

enum class LayerKind { Dense, Conv, MaxPool };

/// Gating-column initialization. SignRandom (standard normal) starts half
/// the gates closed, which makes each context select a random subnetwork
/// from step 0; OpenUniform (uniform [0,1)) starts every gate open, which
/// the output layer needs since a closed gate cannot re-open (zero slope in
/// the rectified region) and would permanently silence its class.
enum class GateInit { SignRandom, OpenUniform };

/// View over one trainable tensor of a gated layer. Parameter i belongs to
/// unit i / per_unit, which is how per-neuron (or per-channel) availability
/// broadcasts over it.
struct ParamBlock {
  real* value = nullptr;
  real* grad = nullptr;
  std::size_t count = 0;
  std::size_t per_unit = 1;
  const char* name = "";
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual LayerKind kind() const = 0;
  virtual std::size_t in_features() const = 0;
  virtual std::size_t out_features() const = 0;

  /// Forward one batch (rows = samples). Training mode caches intermediates
  /// for backward and updates batch-norm running statistics.
  virtual Matrix forward(const Matrix& x_prev, std::size_t context, bool training) = 0;

  /// Consumes dL/d(output) of the cached training forward; stores parameter
  /// gradients internally and returns dL/d(input).
  virtual Matrix backward(const Matrix& doutput) = 0;
};

/// Common state of the context-gated layers (dense and conv): gating weight
/// columns, one gate per unit, plus the obstructed parameter blocks.
class GatedLayer : public Layer {
 public:
  /// Units = neurons (dense) or output channels (conv).
  virtual std::size_t unit_count() const = 0;

  /// Trainable feedforward tensors (weights, bias, batch-norm affine). The
  /// gating weights are not included; availability never applies to them.
  virtual std::vector<ParamBlock> param_blocks() = 0;

  std::size_t context_count() const { return v_.size(); }

  /// Appends a randomly initialized gating column; earlier columns are
  /// untouched. Returns the new context index.
  std::size_t allocate_context(Rng& rng) {
    std::vector<real> col(unit_count());
    for (auto& x : col)
      x = static_cast<real>(gate_init_ == GateInit::SignRandom
                                ? rng.normal(gate_init_bias_, 1.0)
                                : gate_init_bias_ + rng.uniform());
    v_.push_back(std::move(col));
    dv_.assign(unit_count(), real(0));
    on_context_allocated();
    return v_.size() - 1;
  }

  /// `bias` shifts the draw. For SignRandom it is the mean of the normal
  /// (negative = sparser subnetworks); for OpenUniform the lower edge of the
  /// uniform window.
  void set_gate_init(GateInit init, double bias = 0.0) {
    gate_init_ = init;
    gate_init_bias_ = bias;
  }
  GateInit gate_init() const { return gate_init_; }
  double gate_init_bias() const { return gate_init_bias_; }

  std::vector<real>& gate_weights(std::size_t context) {
    check(context < v_.size(), "gated layer: unknown context");
    return v_[context];
  }
  const std::vector<real>& gate_weights(std::size_t context) const {
    check(context < v_.size(), "gated layer: unknown context");
    return v_[context];
  }
  std::vector<real>& gate_weight_grad() { return dv_; }

  /// Ablation hook: pinned gates read as 1 and stop v from learning.
  void set_gates_pinned(bool pinned) { gates_pinned_ = pinned; }
  bool gates_pinned() const { return gates_pinned_; }

  std::size_t active_context() const { return active_context_; }

  // Cached tensors of the last training forward, used by the relevance
  // estimators: gated output x, dL/dx, gate values, pre-gate activity.
  const Matrix& cached_output() const { return x_; }
  const Matrix& cached_output_grad() const { return dx_; }
  const std::vector<real>& cached_gate() const { return gate_; }
  const Matrix& cached_pre_gate() const { return h_; }

  /// Mean over batch (and spatial positions, for conv) of x^2, per unit.
  std::vector<real> unit_activity_sq() const {
    check(x_.rows > 0, "gated layer: no cached forward");
    const std::size_t units = unit_count();
    const std::size_t per_unit = x_.cols / units;  // spatial positions per unit
    std::vector<real> mu(units, real(0));
    for (std::size_t b = 0; b < x_.rows; ++b) {
      const real* xr = x_.row(b);
      for (std::size_t c = 0; c < x_.cols; ++c) mu[c / per_unit] += xr[c] * xr[c];
    }
    const real inv = real(1) / static_cast<real>(x_.rows * per_unit);
    for (auto& m : mu) m *= inv;
    return mu;
  }

  /// Mean over batch of (B * dL/dx * x)^2, per unit. The factor B undoes the
  /// 1/batch in the mean-loss gradient so the scale is batch-size invariant.
  std::vector<real> unit_grad_activity_sq() const {
    check(x_.rows > 0 && dx_.rows == x_.rows, "gated layer: no cached backward");
    const std::size_t units = unit_count();
    const std::size_t per_unit = x_.cols / units;
    const real scale = static_cast<real>(x_.rows);
    std::vector<real> mu(units, real(0));
    for (std::size_t b = 0; b < x_.rows; ++b) {
      const real* xr = x_.row(b);
      const real* gr = dx_.row(b);
      for (std::size_t c = 0; c < x_.cols; ++c) {
        const real t = scale * xr[c] * gr[c];
        mu[c / per_unit] += t * t;
      }
    }
    const real inv = real(1) / static_cast<real>(x_.rows * per_unit);
    for (auto& m : mu) m *= inv;
    return mu;
  }

 protected:
  virtual void on_context_allocated() {}

  /// Gate vector for a context; all ones when pinned.
  std::vector<real> gate_values(std::size_t context) const {
    std::vector<real> g(unit_count(), real(1));
    if (!gates_pinned_) {
      const auto& col = gate_weights(context);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = rectified_tanh(col[i]);
    }
    return g;
  }

  std::vector<std::vector<real>> v_;  // one gating column per context
  std::vector<real> dv_;              // gradient for the active column
  GateInit gate_init_ = GateInit::SignRandom;
  double gate_init_bias_ = 0.0;
  std::vector<real> gate_;            // cached g
  Matrix h_;                          // cached f(a) (pre-gate)
  Matrix x_;                          // cached gated output
  Matrix dx_;                         // cached dL/dx
  std::size_t active_context_ = 0;
  bool gates_pinned_ = false;
  bool has_cache_ = false;
};

// ---------------------------------------------------------------------------

/// Fully connected gated layer: x = g(v[:,k]) .* f(BN(w x_prev + bias)).
/// Batch norm, when enabled, sits between the affine map and f.
class GatedDenseLayer final : public GatedLayer {
 public:
  GatedDenseLayer(std::size_t n_in, std::size_t n_out, Activation act, bool batchnorm, Rng& rng)
      : n_in_(n_in), n_out_(n_out), act_(act), use_bn_(batchnorm) {
    // He/Xavier scaled by 1/sqrt(E[g^2]) so the freshly gated forward signal
    // keeps unit variance; E[g^2] is ~0.197 for sign-random gates and
    // 1 - tanh(1) for open-uniform ones.
    const double gate_gain = 1.0 / std::sqrt(0.197);
    const double stddev = gate_gain * (act == Activation::Relu
                                           ? std::sqrt(2.0 / static_cast<double>(n_in))
                                           : std::sqrt(1.0 / static_cast<double>(n_in)));
    w_ = Matrix::randn(n_out, n_in, rng, stddev);
    bias_.assign(n_out, real(0));
    dw_ = Matrix(n_out, n_in);
    dbias_.assign(n_out, real(0));
    if (use_bn_) {
      bn_ = BatchNormParams(n_out);
      dgamma_.assign(n_out, real(0));
      dbeta_.assign(n_out, real(0));
    }
  }

  LayerKind kind() const override { return LayerKind::Dense; }
  std::size_t in_features() const override { return n_in_; }
  std::size_t out_features() const override { return n_out_; }
  std::size_t unit_count() const override { return n_out_; }

  Matrix forward(const Matrix& x_prev, std::size_t context, bool training) override {
    check(x_prev.cols == n_in_, "dense forward: input width mismatch");
    check(gates_pinned_ || context < v_.size(), "dense forward: unknown context");
    Matrix lin = matmul_nt(x_prev, w_);
    for (std::size_t b = 0; b < lin.rows; ++b) {
      real* r = lin.row(b);
      for (std::size_t i = 0; i < n_out_; ++i) r[i] += bias_[i];
    }
    Matrix pre_f;
    if (use_bn_) {
      // Running statistics follow the context (the affine gamma/beta stay
      // shared); pinned-gate networks with no contexts keep a single set.
      const bool ctx_stats = context < bn_rm_ctx_.size();
      if (ctx_stats) {
        bn_.running_mean = bn_rm_ctx_[context];
        bn_.running_var = bn_rv_ctx_[context];
      }
      pre_f = batch_norm_forward(lin, bn_, training, training ? &bn_cache_ : nullptr);
      if (ctx_stats && training) {
        bn_rm_ctx_[context] = bn_.running_mean;
        bn_rv_ctx_[context] = bn_.running_var;
      }
    } else {
      pre_f = std::move(lin);
    }
    const std::vector<real> g = gate_values(context);
    Matrix x(pre_f.rows, n_out_);
    Matrix h(pre_f.rows, n_out_);
    for (std::size_t b = 0; b < pre_f.rows; ++b) {
      const real* pf = pre_f.row(b);
      real* hr = h.row(b);
      real* xr = x.row(b);
      for (std::size_t i = 0; i < n_out_; ++i) {
        hr[i] = activate(act_, pf[i]);
        xr[i] = g[i] * hr[i];
      }
    }
    if (training) {
      x_prev_ = x_prev;
      pre_f_ = std::move(pre_f);
      h_ = std::move(h);
      gate_ = g;
      x_ = x;
      active_context_ = context;
      has_cache_ = true;
    }
    return x;
  }

  Matrix backward(const Matrix& dx) override {
    check(has_cache_, "dense backward: no cached forward");
    check_same_shape(dx, x_, "dense backward: gradient shape mismatch");
    dx_ = dx;
    dv_.assign(n_out_, real(0));
    Matrix da(dx.rows, n_out_);
    const std::vector<real>* vcol = gates_pinned_ ? nullptr : &v_[active_context_];
    for (std::size_t b = 0; b < dx.rows; ++b) {
      const real* dxr = dx.row(b);
      const real* hr = h_.row(b);
      const real* pf = pre_f_.row(b);
      real* dar = da.row(b);
      for (std::size_t i = 0; i < n_out_; ++i) {
        if (vcol) dv_[i] += dxr[i] * hr[i] * rectified_tanh_grad((*vcol)[i]);
        dar[i] = dxr[i] * gate_[i] * activate_grad(act_, pf[i]);
      }
    }
    Matrix dlin;
    if (use_bn_) {
      BatchNormGrads g = batch_norm_backward(da, bn_, bn_cache_);
      dgamma_ = std::move(g.dgamma);
      dbeta_ = std::move(g.dbeta);
      dlin = std::move(g.dx);
    } else {
      dlin = std::move(da);
    }
    dw_ = matmul_tn(dlin, x_prev_);
    dbias_.assign(n_out_, real(0));
    for (std::size_t b = 0; b < dlin.rows; ++b) {
      const real* r = dlin.row(b);
      for (std::size_t i = 0; i < n_out_; ++i) dbias_[i] += r[i];
    }
    has_cache_ = false;
    return matmul(dlin, w_);
  }

  std::vector<ParamBlock> param_blocks() override {
    std::vector<ParamBlock> blocks;
    blocks.push_back({w_.data.data(), dw_.data.data(), w_.size(), n_in_, "w"});
    blocks.push_back({bias_.data(), dbias_.data(), n_out_, 1, "bias"});
    if (use_bn_) {
      blocks.push_back({bn_.gamma.data(), dgamma_.data(), n_out_, 1, "bn_gamma"});
      blocks.push_back({bn_.beta.data(), dbeta_.data(), n_out_, 1, "bn_beta"});
    }
    return blocks;
  }

  Matrix& weights() { return w_; }
  const Matrix& weights() const { return w_; }
  std::vector<real>& bias() { return bias_; }
  Activation activation() const { return act_; }
  bool has_batchnorm() const { return use_bn_; }
  BatchNormParams& batchnorm() { return bn_; }
  std::vector<std::vector<real>>& bn_context_means() { return bn_rm_ctx_; }
  std::vector<std::vector<real>>& bn_context_vars() { return bn_rv_ctx_; }

 private:
  void on_context_allocated() override {
    if (use_bn_) {
      bn_rm_ctx_.emplace_back(n_out_, real(0));
      bn_rv_ctx_.emplace_back(n_out_, real(1));
    }
  }

  std::size_t n_in_, n_out_;
  Activation act_;
  bool use_bn_;
  Matrix w_, dw_;
  std::vector<real> bias_, dbias_;
  BatchNormParams bn_{0};
  BatchNormCache bn_cache_;
  std::vector<real> dgamma_, dbeta_;
  std::vector<std::vector<real>> bn_rm_ctx_, bn_rv_ctx_;  // per-context stats
  Matrix x_prev_, pre_f_;
};

// ---------------------------------------------------------------------------

struct ConvGeometry {
  std::size_t channels_in = 1, height = 28, width = 28;
  std::size_t channels_out = 8, kernel = 3;

  std::size_t out_height() const { return height - kernel + 1; }  // valid padding
  std::size_t out_width() const { return width - kernel + 1; }
  std::size_t in_features() const { return channels_in * height * width; }
  std::size_t out_features() const { return channels_out * out_height() * out_width(); }
};

/// Convolutional gated layer. One gate, one availability unit per output
/// channel, shared across all spatial positions.
class GatedConvLayer final : public GatedLayer {
 public:
  GatedConvLayer(const ConvGeometry& geo, Activation act, bool batchnorm, Rng& rng)
      : geo_(geo), act_(act), use_bn_(batchnorm) {
    const std::size_t fan_in = geo.channels_in * geo.kernel * geo.kernel;
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    kernels_.assign(geo.channels_out * fan_in, real(0));
    for (auto& k : kernels_) k = static_cast<real>(rng.normal(0.0, stddev));
    bias_.assign(geo.channels_out, real(0));
    dkernels_.assign(kernels_.size(), real(0));
    dbias_.assign(geo.channels_out, real(0));
    if (use_bn_) {
      bn_ = BatchNormParams(geo.channels_out);
      dgamma_.assign(geo.channels_out, real(0));
      dbeta_.assign(geo.channels_out, real(0));
    }
  }

  LayerKind kind() const override { return LayerKind::Conv; }
  std::size_t in_features() const override { return geo_.in_features(); }
  std::size_t out_features() const override { return geo_.out_features(); }
  std::size_t unit_count() const override { return geo_.channels_out; }
  const ConvGeometry& geometry() const { return geo_; }

  Matrix forward(const Matrix& x_prev, std::size_t context, bool training) override {
    check(x_prev.cols == geo_.in_features(), "conv forward: input size mismatch");
    check(gates_pinned_ || context < v_.size(), "conv forward: unknown context");
    const std::size_t ho = geo_.out_height(), wo = geo_.out_width();
    const std::size_t hw_out = ho * wo;
    Matrix lin(x_prev.rows, geo_.out_features());
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::ptrdiff_t bi = 0; bi < static_cast<std::ptrdiff_t>(x_prev.rows); ++bi) {
      const std::size_t b = static_cast<std::size_t>(bi);
      const real* in = x_prev.row(b);
      real* out = lin.row(b);
      for (std::size_t c = 0; c < geo_.channels_out; ++c) {
        const real* kc = kernel(c);
        for (std::size_t i = 0; i < ho; ++i) {
          for (std::size_t j = 0; j < wo; ++j) {
            real acc = bias_[c];
            for (std::size_t ci = 0; ci < geo_.channels_in; ++ci) {
              const real* plane = in + ci * geo_.height * geo_.width;
              const real* kk = kc + ci * geo_.kernel * geo_.kernel;
              for (std::size_t p = 0; p < geo_.kernel; ++p) {
                const real* xrow = plane + (i + p) * geo_.width + j;
                const real* krow = kk + p * geo_.kernel;
                for (std::size_t q = 0; q < geo_.kernel; ++q) acc += krow[q] * xrow[q];
              }
            }
            out[c * hw_out + i * wo + j] = acc;
          }
        }
      }
    }
    Matrix pre_f;
    if (use_bn_) {
      const bool ctx_stats = context < bn_rm_ctx_.size();
      if (ctx_stats) {
        bn_.running_mean = bn_rm_ctx_[context];
        bn_.running_var = bn_rv_ctx_[context];
      }
      pre_f = channel_bn_forward(lin, training);
      if (ctx_stats && training) {
        bn_rm_ctx_[context] = bn_.running_mean;
        bn_rv_ctx_[context] = bn_.running_var;
      }
    } else {
      pre_f = std::move(lin);
    }
    const std::vector<real> g = gate_values(context);
    Matrix x(pre_f.rows, pre_f.cols);
    Matrix h(pre_f.rows, pre_f.cols);
    for (std::size_t b = 0; b < pre_f.rows; ++b) {
      const real* pf = pre_f.row(b);
      real* hr = h.row(b);
      real* xr = x.row(b);
      for (std::size_t c = 0; c < pre_f.cols; ++c) {
        hr[c] = activate(act_, pf[c]);
        xr[c] = g[c / hw_out] * hr[c];
      }
    }
    if (training) {
      x_prev_ = x_prev;
      pre_f_ = std::move(pre_f);
      h_ = std::move(h);
      gate_ = g;
      x_ = x;
      active_context_ = context;
      has_cache_ = true;
    }
    return x;
  }

  Matrix backward(const Matrix& dx) override {
    check(has_cache_, "conv backward: no cached forward");
    check_same_shape(dx, x_, "conv backward: gradient shape mismatch");
    dx_ = dx;
    const std::size_t ho = geo_.out_height(), wo = geo_.out_width();
    const std::size_t hw_out = ho * wo;
    dv_.assign(geo_.channels_out, real(0));
    Matrix da(dx.rows, dx.cols);
    const std::vector<real>* vcol = gates_pinned_ ? nullptr : &v_[active_context_];
    for (std::size_t b = 0; b < dx.rows; ++b) {
      const real* dxr = dx.row(b);
      const real* hr = h_.row(b);
      const real* pf = pre_f_.row(b);
      real* dar = da.row(b);
      for (std::size_t c = 0; c < dx.cols; ++c) {
        const std::size_t ch = c / hw_out;
        if (vcol) dv_[ch] += dxr[c] * hr[c] * rectified_tanh_grad((*vcol)[ch]);
        dar[c] = dxr[c] * gate_[ch] * activate_grad(act_, pf[c]);
      }
    }
    Matrix dlin = use_bn_ ? channel_bn_backward(da) : std::move(da);

    dkernels_.assign(kernels_.size(), real(0));
    dbias_.assign(geo_.channels_out, real(0));
    Matrix dx_prev(x_prev_.rows, geo_.in_features(), real(0));
    for (std::size_t b = 0; b < dlin.rows; ++b) {
      const real* in = x_prev_.row(b);
      const real* dl = dlin.row(b);
      real* dip = dx_prev.row(b);
      for (std::size_t c = 0; c < geo_.channels_out; ++c) {
        const real* kc = kernel(c);
        real* dkc = dkernels_.data() + c * geo_.channels_in * geo_.kernel * geo_.kernel;
        for (std::size_t i = 0; i < ho; ++i) {
          for (std::size_t j = 0; j < wo; ++j) {
            const real d = dl[c * hw_out + i * wo + j];
            if (d == real(0)) continue;
            dbias_[c] += d;
            for (std::size_t ci = 0; ci < geo_.channels_in; ++ci) {
              const real* plane = in + ci * geo_.height * geo_.width;
              real* dplane = dip + ci * geo_.height * geo_.width;
              const real* kk = kc + ci * geo_.kernel * geo_.kernel;
              real* dkk = dkc + ci * geo_.kernel * geo_.kernel;
              for (std::size_t p = 0; p < geo_.kernel; ++p) {
                const real* xrow = plane + (i + p) * geo_.width + j;
                real* dxrow = dplane + (i + p) * geo_.width + j;
                const real* krow = kk + p * geo_.kernel;
                real* dkrow = dkk + p * geo_.kernel;
                for (std::size_t q = 0; q < geo_.kernel; ++q) {
                  dkrow[q] += d * xrow[q];
                  dxrow[q] += d * krow[q];
                }
              }
            }
          }
        }
      }
    }
    has_cache_ = false;
    return dx_prev;
  }

  std::vector<ParamBlock> param_blocks() override {
    const std::size_t per_unit = geo_.channels_in * geo_.kernel * geo_.kernel;
    std::vector<ParamBlock> blocks;
    blocks.push_back({kernels_.data(), dkernels_.data(), kernels_.size(), per_unit, "kernels"});
    blocks.push_back({bias_.data(), dbias_.data(), bias_.size(), 1, "bias"});
    if (use_bn_) {
      blocks.push_back({bn_.gamma.data(), dgamma_.data(), bn_.gamma.size(), 1, "bn_gamma"});
      blocks.push_back({bn_.beta.data(), dbeta_.data(), bn_.beta.size(), 1, "bn_beta"});
    }
    return blocks;
  }

  real* kernel(std::size_t c_out) {
    return kernels_.data() + c_out * geo_.channels_in * geo_.kernel * geo_.kernel;
  }
  const real* kernel(std::size_t c_out) const {
    return kernels_.data() + c_out * geo_.channels_in * geo_.kernel * geo_.kernel;
  }
  std::vector<real>& kernels() { return kernels_; }
  std::vector<real>& bias() { return bias_; }
  bool has_batchnorm() const { return use_bn_; }
  BatchNormParams& batchnorm() { return bn_; }
  std::vector<std::vector<real>>& bn_context_means() { return bn_rm_ctx_; }
  std::vector<std::vector<real>>& bn_context_vars() { return bn_rv_ctx_; }
  Activation activation() const { return act_; }

 private:
  void on_context_allocated() override {
    if (use_bn_) {
      bn_rm_ctx_.emplace_back(geo_.channels_out, real(0));
      bn_rv_ctx_.emplace_back(geo_.channels_out, real(1));
    }
  }

  // Per-channel batch norm: statistics over batch x spatial positions.
  Matrix channel_bn_forward(const Matrix& lin, bool training) {
    const std::size_t hw = geo_.out_height() * geo_.out_width();
    Matrix y(lin.rows, lin.cols);
    if (training) {
      check(lin.rows >= 2, "conv batch_norm: training mode requires batch >= 2");
      bn_xhat_ = Matrix(lin.rows, lin.cols);
      bn_inv_std_.assign(geo_.channels_out, real(0));
      const real inv_n = real(1) / static_cast<real>(lin.rows * hw);
      for (std::size_t c = 0; c < geo_.channels_out; ++c) {
        real mean = 0;
        for (std::size_t b = 0; b < lin.rows; ++b) {
          const real* r = lin.row(b) + c * hw;
          for (std::size_t s = 0; s < hw; ++s) mean += r[s];
        }
        mean *= inv_n;
        real var = 0;
        for (std::size_t b = 0; b < lin.rows; ++b) {
          const real* r = lin.row(b) + c * hw;
          for (std::size_t s = 0; s < hw; ++s) {
            const real d = r[s] - mean;
            var += d * d;
          }
        }
        var *= inv_n;
        const real inv_std = real(1) / std::sqrt(var + kBatchNormEps);
        bn_inv_std_[c] = inv_std;
        for (std::size_t b = 0; b < lin.rows; ++b) {
          const real* r = lin.row(b) + c * hw;
          real* xh = bn_xhat_.row(b) + c * hw;
          real* yr = y.row(b) + c * hw;
          for (std::size_t s = 0; s < hw; ++s) {
            xh[s] = (r[s] - mean) * inv_std;
            yr[s] = bn_.gamma[c] * xh[s] + bn_.beta[c];
          }
        }
        bn_.running_mean[c] = kBatchNormMomentum * bn_.running_mean[c] + (real(1) - kBatchNormMomentum) * mean;
        bn_.running_var[c] = kBatchNormMomentum * bn_.running_var[c] + (real(1) - kBatchNormMomentum) * var;
      }
    } else {
      for (std::size_t c = 0; c < geo_.channels_out; ++c) {
        const real inv_std = real(1) / std::sqrt(bn_.running_var[c] + kBatchNormEps);
        for (std::size_t b = 0; b < lin.rows; ++b) {
          const real* r = lin.row(b) + c * hw;
          real* yr = y.row(b) + c * hw;
          for (std::size_t s = 0; s < hw; ++s)
            yr[s] = bn_.gamma[c] * (r[s] - bn_.running_mean[c]) * inv_std + bn_.beta[c];
        }
      }
    }
    return y;
  }

  Matrix channel_bn_backward(const Matrix& dy) {
    const std::size_t hw = geo_.out_height() * geo_.out_width();
    const real n = static_cast<real>(dy.rows * hw);
    Matrix dx(dy.rows, dy.cols);
    dgamma_.assign(geo_.channels_out, real(0));
    dbeta_.assign(geo_.channels_out, real(0));
    for (std::size_t c = 0; c < geo_.channels_out; ++c) {
      real dg = 0, db = 0;
      for (std::size_t b = 0; b < dy.rows; ++b) {
        const real* dr = dy.row(b) + c * hw;
        const real* xh = bn_xhat_.row(b) + c * hw;
        for (std::size_t s = 0; s < hw; ++s) {
          dg += dr[s] * xh[s];
          db += dr[s];
        }
      }
      dgamma_[c] = dg;
      dbeta_[c] = db;
      const real scale = bn_.gamma[c] * bn_inv_std_[c] / n;
      for (std::size_t b = 0; b < dy.rows; ++b) {
        const real* dr = dy.row(b) + c * hw;
        const real* xh = bn_xhat_.row(b) + c * hw;
        real* dxr = dx.row(b) + c * hw;
        for (std::size_t s = 0; s < hw; ++s) dxr[s] = scale * (n * dr[s] - db - xh[s] * dg);
      }
    }
    return dx;
  }

  ConvGeometry geo_;
  Activation act_;
  bool use_bn_;
  std::vector<real> kernels_, dkernels_;
  std::vector<real> bias_, dbias_;
  BatchNormParams bn_{0};
  Matrix bn_xhat_;
  std::vector<real> bn_inv_std_;
  std::vector<real> dgamma_, dbeta_;
  std::vector<std::vector<real>> bn_rm_ctx_, bn_rv_ctx_;  // per-context stats
  Matrix x_prev_, pre_f_;
};

// ---------------------------------------------------------------------------

/// Non-overlapping max pooling per channel (kernel = stride).
class MaxPoolLayer final : public Layer {
 public:
  MaxPoolLayer(std::size_t channels, std::size_t height, std::size_t width, std::size_t pool)
      : channels_(channels), height_(height), width_(width), pool_(pool) {
    check(pool >= 1, "max pool: kernel must be >= 1");
  }

  LayerKind kind() const override { return LayerKind::MaxPool; }
  std::size_t in_features() const override { return channels_ * height_ * width_; }
  std::size_t out_features() const override { return channels_ * out_height() * out_width(); }
  std::size_t out_height() const { return height_ / pool_; }
  std::size_t out_width() const { return width_ / pool_; }
  std::size_t channels() const { return channels_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t pool() const { return pool_; }

  Matrix forward(const Matrix& x_prev, std::size_t, bool training) override {
    check(x_prev.cols == in_features(), "max pool: input size mismatch");
    const std::size_t ho = out_height(), wo = out_width();
    Matrix y(x_prev.rows, out_features());
    argmax_.assign(x_prev.rows * out_features(), 0);
    for (std::size_t b = 0; b < x_prev.rows; ++b) {
      const real* in = x_prev.row(b);
      real* out = y.row(b);
      for (std::size_t c = 0; c < channels_; ++c) {
        const real* plane = in + c * height_ * width_;
        for (std::size_t i = 0; i < ho; ++i) {
          for (std::size_t j = 0; j < wo; ++j) {
            std::size_t best = (i * pool_) * width_ + j * pool_;
            real bestv = plane[best];
            for (std::size_t p = 0; p < pool_; ++p) {
              for (std::size_t q = 0; q < pool_; ++q) {
                const std::size_t idx = (i * pool_ + p) * width_ + j * pool_ + q;
                if (plane[idx] > bestv) {
                  bestv = plane[idx];
                  best = idx;
                }
              }
            }
            const std::size_t oidx = c * ho * wo + i * wo + j;
            out[oidx] = bestv;
            argmax_[b * out_features() + oidx] = c * height_ * width_ + best;
          }
        }
      }
    }
    in_rows_ = x_prev.rows;
    has_cache_ = training;
    return y;
  }

  Matrix backward(const Matrix& dy) override {
    check(has_cache_ && dy.rows == in_rows_, "max pool backward: no cached forward");
    Matrix dx(dy.rows, in_features(), real(0));
    for (std::size_t b = 0; b < dy.rows; ++b) {
      const real* dr = dy.row(b);
      real* dxr = dx.row(b);
      for (std::size_t o = 0; o < out_features(); ++o) dxr[argmax_[b * out_features() + o]] += dr[o];
    }
    has_cache_ = false;
    return dx;
  }

 private:
  std::size_t channels_, height_, width_, pool_;
  std::vector<std::size_t> argmax_;
  std::size_t in_rows_ = 0;
  bool has_cache_ = false;
};

}  // namespace gateon
