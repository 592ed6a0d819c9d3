#pragma once

#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "gateon/layers.hpp"
#include "gateon/matrix.hpp"
#include "gateon/ops.hpp"
#include "gateon/rng.hpp"

namespace gateon {

/// Layered context-gated network. The final dense layer produces logits
/// (identity activation); softmax lives in the loss.
class GatedNetwork {
 public:
  explicit GatedNetwork(std::uint64_t seed) : rng_(seed, 0xfeedULL), seed_(seed) {}

  GatedNetwork(GatedNetwork&&) = default;
  GatedNetwork& operator=(GatedNetwork&&) = default;

  void add_dense(std::size_t n_in, std::size_t n_out, Activation act, bool batchnorm,
                 GateInit gate_init = GateInit::SignRandom, double gate_init_bias = 0.0) {
    layers_.push_back(std::make_unique<GatedDenseLayer>(n_in, n_out, act, batchnorm, rng_));
    static_cast<GatedLayer*>(layers_.back().get())->set_gate_init(gate_init, gate_init_bias);
  }
  void add_conv(const ConvGeometry& geo, bool batchnorm) {
    layers_.push_back(std::make_unique<GatedConvLayer>(geo, Activation::Relu, batchnorm, rng_));
  }
  void add_maxpool(std::size_t channels, std::size_t height, std::size_t width, std::size_t pool) {
    layers_.push_back(std::make_unique<MaxPoolLayer>(channels, height, width, pool));
  }

  /// Grows every gated layer by one gating column. Returns the new index.
  std::size_t allocate_context() {
    std::size_t idx = contexts_;
    for (auto& l : layers_)
      if (auto* g = as_gated(l.get())) idx = g->allocate_context(rng_);
    ++contexts_;
    return idx;
  }

  std::size_t context_count() const { return contexts_; }

  void set_gates_pinned(bool pinned) {
    for (auto& l : layers_)
      if (auto* g = as_gated(l.get())) g->set_gates_pinned(pinned);
    gates_pinned_ = pinned;
  }
  bool gates_pinned() const { return gates_pinned_; }

  void set_output_renorm(bool on) { output_renorm_ = on; }
  bool output_renorm() const { return output_renorm_; }

  /// Logits for one batch. Training mode caches intermediates for backward.
  Matrix forward(const Matrix& batch, std::size_t context, bool training) {
    check(gates_pinned_ || context < contexts_, "network forward: unknown context");
    Matrix x = batch;
    for (auto& l : layers_) x = l->forward(x, context, training);
    if (output_renorm_) x = rms_norm_forward(x, training ? &renorm_cache_ : nullptr);
    return x;
  }

  struct ForwardLoss {
    Matrix logits;
    real loss = 0;
    Matrix dlogits;
  };

  ForwardLoss forward_loss(const Matrix& batch, const std::vector<int>& labels, std::size_t context,
                           bool training) {
    ForwardLoss r;
    r.logits = forward(batch, context, training);
    SoftmaxLoss s = softmax_cross_entropy(r.logits, labels);
    r.loss = s.loss;
    r.dlogits = std::move(s.dlogits);
    return r;
  }

  /// Evaluation-only loss under a context (no cache, no stat updates).
  real eval_loss(const Matrix& batch, const std::vector<int>& labels, std::size_t context) {
    Matrix logits = forward(batch, context, false);
    return softmax_cross_entropy(logits, labels).loss;
  }

  /// Backprop from dL/dlogits; fills every layer's parameter gradients.
  void backward(const Matrix& dlogits) {
    Matrix d = output_renorm_ ? rms_norm_backward(dlogits, renorm_cache_) : dlogits;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) d = (*it)->backward(d);
  }

  std::vector<Layer*> layers() {
    std::vector<Layer*> out;
    for (auto& l : layers_) out.push_back(l.get());
    return out;
  }

  std::vector<GatedLayer*> gated_layers() {
    std::vector<GatedLayer*> out;
    for (auto& l : layers_)
      if (auto* g = as_gated(l.get())) out.push_back(g);
    return out;
  }

  std::size_t in_features() const { return layers_.empty() ? 0 : layers_.front()->in_features(); }
  std::size_t out_features() const { return layers_.empty() ? 0 : layers_.back()->out_features(); }

  // --- checkpoint container ------------------------------------------------
  // Little-endian binary: magic, version, flags, then one record per layer
  // with its shape header and raw tensors. Round-trips bit-exactly.

  void save(const std::string& path) const {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    check(f != nullptr, "checkpoint save: cannot open file");
    write_u32(f, kMagic);
    write_u32(f, 1);  // version
    write_u32(f, static_cast<std::uint32_t>(sizeof(real)));
    write_u64(f, seed_);
    write_u64(f, contexts_);
    write_u32(f, output_renorm_ ? 1 : 0);
    write_u64(f, layers_.size());
    for (const auto& l : layers_) save_layer(f, l.get());
    std::fclose(f);
  }

  static GatedNetwork load(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    check(f != nullptr, "checkpoint load: cannot open file");
    check(read_u32(f) == kMagic, "checkpoint load: bad magic");
    check(read_u32(f) == 1, "checkpoint load: unsupported version");
    check(read_u32(f) == sizeof(real), "checkpoint load: float width mismatch");
    GatedNetwork net(read_u64(f));
    net.contexts_ = read_u64(f);
    net.output_renorm_ = read_u32(f) != 0;
    const std::uint64_t n_layers = read_u64(f);
    for (std::uint64_t i = 0; i < n_layers; ++i) net.load_layer(f);
    std::fclose(f);
    return net;
  }

 private:
  static constexpr std::uint32_t kMagic = 0x4e4f5447;  // "GTON"

  static GatedLayer* as_gated(Layer* l) {
    if (l->kind() == LayerKind::MaxPool) return nullptr;
    return static_cast<GatedLayer*>(l);
  }

  static void write_u32(std::FILE* f, std::uint32_t v) { std::fwrite(&v, sizeof v, 1, f); }
  static void write_u64(std::FILE* f, std::uint64_t v) { std::fwrite(&v, sizeof v, 1, f); }
  static void write_f64(std::FILE* f, double v) { std::fwrite(&v, sizeof v, 1, f); }
  static double read_f64(std::FILE* f) {
    double v = 0;
    check(std::fread(&v, sizeof v, 1, f) == 1, "checkpoint load: truncated file");
    return v;
  }
  static std::uint32_t read_u32(std::FILE* f) {
    std::uint32_t v = 0;
    check(std::fread(&v, sizeof v, 1, f) == 1, "checkpoint load: truncated file");
    return v;
  }
  static std::uint64_t read_u64(std::FILE* f) {
    std::uint64_t v = 0;
    check(std::fread(&v, sizeof v, 1, f) == 1, "checkpoint load: truncated file");
    return v;
  }
  static void write_reals(std::FILE* f, const std::vector<real>& v) {
    write_u64(f, v.size());
    if (!v.empty()) std::fwrite(v.data(), sizeof(real), v.size(), f);
  }
  static std::vector<real> read_reals(std::FILE* f) {
    std::vector<real> v(read_u64(f));
    if (!v.empty())
      check(std::fread(v.data(), sizeof(real), v.size(), f) == v.size(),
            "checkpoint load: truncated tensor");
    return v;
  }

  void save_layer(std::FILE* f, const Layer* l) const {
    write_u32(f, static_cast<std::uint32_t>(l->kind()));
    if (l->kind() == LayerKind::Dense) {
      const auto* d = static_cast<const GatedDenseLayer*>(l);
      write_u64(f, d->in_features());
      write_u64(f, d->out_features());
      write_u32(f, static_cast<std::uint32_t>(d->activation()));
      write_u32(f, static_cast<std::uint32_t>(d->gate_init()));
      write_f64(f, d->gate_init_bias());
      write_u32(f, d->has_batchnorm() ? 1 : 0);
      auto* dm = const_cast<GatedDenseLayer*>(d);
      write_reals(f, dm->weights().data);
      write_reals(f, dm->bias());
      if (d->has_batchnorm()) {
        write_reals(f, dm->batchnorm().gamma);
        write_reals(f, dm->batchnorm().beta);
        write_reals(f, dm->batchnorm().running_mean);
        write_reals(f, dm->batchnorm().running_var);
      }
      save_gates(f, *d);
      if (d->has_batchnorm()) save_context_stats(f, dm->bn_context_means(), dm->bn_context_vars());
    } else if (l->kind() == LayerKind::Conv) {
      const auto* c = static_cast<const GatedConvLayer*>(l);
      const auto& g = c->geometry();
      write_u64(f, g.channels_in);
      write_u64(f, g.height);
      write_u64(f, g.width);
      write_u64(f, g.channels_out);
      write_u64(f, g.kernel);
      write_u32(f, c->has_batchnorm() ? 1 : 0);
      auto* cm = const_cast<GatedConvLayer*>(c);
      write_reals(f, cm->kernels());
      write_reals(f, cm->bias());
      if (c->has_batchnorm()) {
        write_reals(f, cm->batchnorm().gamma);
        write_reals(f, cm->batchnorm().beta);
        write_reals(f, cm->batchnorm().running_mean);
        write_reals(f, cm->batchnorm().running_var);
      }
      save_gates(f, *c);
      if (c->has_batchnorm()) save_context_stats(f, cm->bn_context_means(), cm->bn_context_vars());
    } else {
      const auto* p = static_cast<const MaxPoolLayer*>(l);
      write_u64(f, p->channels());
      write_u64(f, p->height());
      write_u64(f, p->width());
      write_u64(f, p->pool());
    }
  }

  void save_gates(std::FILE* f, const GatedLayer& g) const {
    write_u64(f, g.context_count());
    for (std::size_t k = 0; k < g.context_count(); ++k) write_reals(f, g.gate_weights(k));
  }

  void save_context_stats(std::FILE* f, std::vector<std::vector<real>>& means,
                          std::vector<std::vector<real>>& vars) const {
    write_u64(f, means.size());
    for (std::size_t k = 0; k < means.size(); ++k) {
      write_reals(f, means[k]);
      write_reals(f, vars[k]);
    }
  }

  void load_context_stats(std::FILE* f, std::vector<std::vector<real>>& means,
                          std::vector<std::vector<real>>& vars) {
    const std::uint64_t n = read_u64(f);
    means.clear();
    vars.clear();
    for (std::uint64_t k = 0; k < n; ++k) {
      means.push_back(read_reals(f));
      vars.push_back(read_reals(f));
    }
  }

  void load_layer(std::FILE* f) {
    const auto kind = static_cast<LayerKind>(read_u32(f));
    if (kind == LayerKind::Dense) {
      const std::size_t n_in = read_u64(f);
      const std::size_t n_out = read_u64(f);
      const auto act = static_cast<Activation>(read_u32(f));
      const auto gate_init = static_cast<GateInit>(read_u32(f));
      const double gate_bias = read_f64(f);
      const bool bn = read_u32(f) != 0;
      add_dense(n_in, n_out, act, bn, gate_init, gate_bias);
      auto* d = static_cast<GatedDenseLayer*>(layers_.back().get());
      d->weights().data = read_reals(f);
      d->bias() = read_reals(f);
      if (bn) {
        d->batchnorm().gamma = read_reals(f);
        d->batchnorm().beta = read_reals(f);
        d->batchnorm().running_mean = read_reals(f);
        d->batchnorm().running_var = read_reals(f);
      }
      load_gates(f, *d);
      if (bn) load_context_stats(f, d->bn_context_means(), d->bn_context_vars());
    } else if (kind == LayerKind::Conv) {
      ConvGeometry geo;
      geo.channels_in = read_u64(f);
      geo.height = read_u64(f);
      geo.width = read_u64(f);
      geo.channels_out = read_u64(f);
      geo.kernel = read_u64(f);
      const bool bn = read_u32(f) != 0;
      add_conv(geo, bn);
      auto* c = static_cast<GatedConvLayer*>(layers_.back().get());
      c->kernels() = read_reals(f);
      c->bias() = read_reals(f);
      if (bn) {
        c->batchnorm().gamma = read_reals(f);
        c->batchnorm().beta = read_reals(f);
        c->batchnorm().running_mean = read_reals(f);
        c->batchnorm().running_var = read_reals(f);
      }
      load_gates(f, *c);
      if (bn) load_context_stats(f, c->bn_context_means(), c->bn_context_vars());
    } else if (kind == LayerKind::MaxPool) {
      const std::size_t channels = read_u64(f);
      const std::size_t height = read_u64(f);
      const std::size_t width = read_u64(f);
      const std::size_t pool = read_u64(f);
      add_maxpool(channels, height, width, pool);
    } else {
      check(false, "checkpoint load: unsupported layer kind");
    }
  }

  void load_gates(std::FILE* f, GatedLayer& g) {
    const std::uint64_t n = read_u64(f);
    for (std::uint64_t k = 0; k < n; ++k) {
      Rng dummy(0);
      g.allocate_context(dummy);
      g.gate_weights(k) = read_reals(f);
    }
  }

  std::vector<std::unique_ptr<Layer>> layers_;
  std::size_t contexts_ = 0;
  Rng rng_{0};
  std::uint64_t seed_ = 0;
  bool gates_pinned_ = false;
  bool output_renorm_ = false;
  RmsNormCache renorm_cache_;
};

}  // namespace gateon
