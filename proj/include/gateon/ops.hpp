#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "gateon/matrix.hpp"

namespace gateon {

/// max(0, tanh(z)); the gate nonlinearity. Range [0,1).
inline real rectified_tanh(real z) { return std::max(real(0), std::tanh(z)); }

/// d/dz rectified_tanh: 1 - tanh^2 on z > 0, else 0.
inline real rectified_tanh_grad(real z) {
  if (z <= real(0)) return real(0);
  const real t = std::tanh(z);
  return real(1) - t * t;
}

inline real relu(real z) { return z > real(0) ? z : real(0); }
inline real relu_grad(real z) { return z > real(0) ? real(1) : real(0); }

enum class Activation { Relu, Identity };

inline real activate(Activation a, real z) { return a == Activation::Relu ? relu(z) : z; }
inline real activate_grad(Activation a, real z) { return a == Activation::Relu ? relu_grad(z) : real(1); }

struct SoftmaxLoss {
  real loss = 0;
  Matrix dlogits;  // (softmax - onehot) / batch
};

/// Mean cross-entropy over the batch, stabilized by row-max subtraction.
inline SoftmaxLoss softmax_cross_entropy(const Matrix& logits, const std::vector<int>& labels) {
  check(labels.size() == logits.rows, "softmax_cross_entropy: one label per row");
  SoftmaxLoss out;
  out.dlogits = Matrix(logits.rows, logits.cols);
  const real inv_batch = real(1) / static_cast<real>(logits.rows);
  double loss_sum = 0.0;
  for (std::size_t b = 0; b < logits.rows; ++b) {
    const int label = labels[b];
    check(label >= 0 && static_cast<std::size_t>(label) < logits.cols,
          "softmax_cross_entropy: label out of range");
    const real* z = logits.row(b);
    real zmax = z[0];
    for (std::size_t c = 1; c < logits.cols; ++c) zmax = std::max(zmax, z[c]);
    real sum = 0;
    real* d = out.dlogits.row(b);
    for (std::size_t c = 0; c < logits.cols; ++c) {
      d[c] = std::exp(z[c] - zmax);
      sum += d[c];
    }
    loss_sum += -(static_cast<double>(z[label]) - zmax - std::log(static_cast<double>(sum)));
    const real inv_sum = real(1) / sum;
    for (std::size_t c = 0; c < logits.cols; ++c) d[c] *= inv_sum * inv_batch;
    d[label] -= inv_batch;
  }
  out.loss = static_cast<real>(loss_sum) * inv_batch;
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization (per feature column).

inline constexpr real kBatchNormEps = real(1e-5);
inline constexpr real kBatchNormMomentum = real(0.9);

struct BatchNormParams {
  std::vector<real> gamma, beta;
  std::vector<real> running_mean, running_var;

  explicit BatchNormParams(std::size_t features = 0)
      : gamma(features, real(1)),
        beta(features, real(0)),
        running_mean(features, real(0)),
        running_var(features, real(1)) {}

  std::size_t features() const { return gamma.size(); }
};

struct BatchNormCache {
  Matrix x_hat;
  std::vector<real> inv_std;
};

struct BatchNormGrads {
  Matrix dx;
  std::vector<real> dgamma, dbeta;
};

/// Training mode normalizes by batch statistics (biased variance, floored at
/// kBatchNormEps inside the square root) and updates the running statistics;
/// eval mode uses the running statistics. `cache` must be non-null in
/// training mode.
inline Matrix batch_norm_forward(const Matrix& x, BatchNormParams& params, bool training,
                                 BatchNormCache* cache = nullptr) {
  check(params.features() == x.cols, "batch_norm: feature count mismatch");
  Matrix y(x.rows, x.cols);
  if (training) {
    check(x.rows >= 2, "batch_norm: training mode requires batch >= 2");
    check(cache != nullptr, "batch_norm: training mode requires a cache");
    cache->x_hat = Matrix(x.rows, x.cols);
    cache->inv_std.assign(x.cols, real(0));
    const real inv_n = real(1) / static_cast<real>(x.rows);
    for (std::size_t j = 0; j < x.cols; ++j) {
      real mean = 0;
      for (std::size_t b = 0; b < x.rows; ++b) mean += x(b, j);
      mean *= inv_n;
      real var = 0;
      for (std::size_t b = 0; b < x.rows; ++b) {
        const real d = x(b, j) - mean;
        var += d * d;
      }
      var *= inv_n;
      const real inv_std = real(1) / std::sqrt(var + kBatchNormEps);
      cache->inv_std[j] = inv_std;
      for (std::size_t b = 0; b < x.rows; ++b) {
        const real xh = (x(b, j) - mean) * inv_std;
        cache->x_hat(b, j) = xh;
        y(b, j) = params.gamma[j] * xh + params.beta[j];
      }
      params.running_mean[j] = kBatchNormMomentum * params.running_mean[j] + (real(1) - kBatchNormMomentum) * mean;
      params.running_var[j] = kBatchNormMomentum * params.running_var[j] + (real(1) - kBatchNormMomentum) * var;
    }
  } else {
    for (std::size_t j = 0; j < x.cols; ++j) {
      const real inv_std = real(1) / std::sqrt(params.running_var[j] + kBatchNormEps);
      for (std::size_t b = 0; b < x.rows; ++b)
        y(b, j) = params.gamma[j] * (x(b, j) - params.running_mean[j]) * inv_std + params.beta[j];
    }
  }
  return y;
}

inline BatchNormGrads batch_norm_backward(const Matrix& dy, const BatchNormParams& params,
                                          const BatchNormCache& cache) {
  check(cache.x_hat.rows == dy.rows && cache.x_hat.cols == dy.cols,
        "batch_norm_backward: no matching forward cache");
  BatchNormGrads g;
  g.dx = Matrix(dy.rows, dy.cols);
  g.dgamma.assign(dy.cols, real(0));
  g.dbeta.assign(dy.cols, real(0));
  const real n = static_cast<real>(dy.rows);
  for (std::size_t j = 0; j < dy.cols; ++j) {
    real dg = 0, db = 0;
    for (std::size_t b = 0; b < dy.rows; ++b) {
      dg += dy(b, j) * cache.x_hat(b, j);
      db += dy(b, j);
    }
    g.dgamma[j] = dg;
    g.dbeta[j] = db;
    const real scale = params.gamma[j] * cache.inv_std[j] / n;
    for (std::size_t b = 0; b < dy.rows; ++b)
      g.dx(b, j) = scale * (n * dy(b, j) - db - cache.x_hat(b, j) * dg);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Batch RMS renormalization of the output pre-softmax activations
// (optional; see the experiment config).

struct RmsNormCache {
  Matrix z;
  real inv_rms = 0;
};

inline Matrix rms_norm_forward(const Matrix& z, RmsNormCache* cache) {
  const real n = static_cast<real>(z.size());
  real sumsq = 0;
  for (real v : z.data) sumsq += v * v;
  const real inv_rms = real(1) / std::sqrt(sumsq / n + kBatchNormEps);
  Matrix y(z.rows, z.cols);
  for (std::size_t i = 0; i < z.size(); ++i) y.data[i] = z.data[i] * inv_rms;
  if (cache) {
    cache->z = z;
    cache->inv_rms = inv_rms;
  }
  return y;
}

inline Matrix rms_norm_backward(const Matrix& dy, const RmsNormCache& cache) {
  const real n = static_cast<real>(dy.size());
  real dot = 0;
  for (std::size_t i = 0; i < dy.size(); ++i) dot += dy.data[i] * cache.z.data[i];
  const real r = cache.inv_rms;
  Matrix dz(dy.rows, dy.cols);
  for (std::size_t i = 0; i < dy.size(); ++i)
    dz.data[i] = dy.data[i] * r - cache.z.data[i] * dot * r * r * r / n;
  return dz;
}

}  // namespace gateon
