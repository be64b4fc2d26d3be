// Copyright 2026 The cllora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <vector>

#include "cllora/numerics.hpp"

// Forward and backward kernels for the transformer ops. The tape and the
// plain value path both call these, so a forward pass produces identical bits
// whichever way it is evaluated.
namespace cllora::kernels {

inline constexpr double kLayerNormEpsilon = 1e-6;

struct LayerNormCache {
  Matrix normalized;  // (x - mean) * inv_std
  Vector inv_std;
};

inline Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, LayerNormCache* cache = nullptr) {
  if (gain.rows() != 1 || gain.cols() != x.cols() || bias.rows() != 1 || bias.cols() != x.cols()) {
    throw ShapeError("layer_norm: gain/bias " + shape_of(gain) + "/" + shape_of(bias) + " do not match input " + shape_of(x));
  }
  const auto n = x.rows();
  const double width = static_cast<double>(x.cols());
  Matrix normalized(n, x.cols());
  Vector inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.row(i).sum() / width;
    const auto centered = (x.row(i).array() - mean).matrix();
    const double var = centered.squaredNorm() / width;
    inv_std(i) = 1.0 / std::sqrt(var + kLayerNormEpsilon);
    normalized.row(i) = centered * inv_std(i);
  }
  Matrix out = (normalized.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

inline Matrix layer_norm_backward(const Matrix& grad_out, const Matrix& gain, const LayerNormCache& cache) {
  const double width = static_cast<double>(grad_out.cols());
  Matrix grad_in(grad_out.rows(), grad_out.cols());
  for (Eigen::Index i = 0; i < grad_out.rows(); ++i) {
    const Eigen::RowVectorXd g = grad_out.row(i).array() * gain.row(0).array();
    const auto xhat = cache.normalized.row(i);
    const double mean_g = g.sum() / width;
    const double mean_gx = g.dot(xhat) / width;
    grad_in.row(i) = cache.inv_std(i) * (g.array() - mean_g - xhat.array() * mean_gx).matrix();
  }
  return grad_in;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

inline Matrix gelu(const Matrix& x) { return x.unaryExpr([](double v) { return gelu(v); }); }

// Numerically stable log(1 + e^x).
inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Inverse of softplus for y > 0: log(e^y - 1).
inline double softplus_inverse(double y) {
  if (!(y > 0.0)) throw ParameterError("softplus_inverse: argument must be positive");
  return y > 30.0 ? y + std::log(-std::expm1(-y)) : std::log(std::expm1(y));
}

// Row-wise log-softmax of logits / tau.
inline Matrix log_softmax_rows(const Matrix& logits, double tau = 1.0) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double top = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd shifted = (logits.row(i).array() - top) / tau;
    const double lse = std::log(shifted.array().exp().sum());
    out.row(i) = shifted.array() - lse;
  }
  return out;
}

inline Matrix softmax_rows(const Matrix& logits, double tau = 1.0) { return log_softmax_rows(logits, tau).array().exp(); }

struct AttentionCache {
  // One seq x seq probability block per (sequence, head), stacked vertically.
  Matrix probs;
};

/// Multi-head self-attention core: softmax(Q K^T / sqrt(dh)) V per head and
/// per sequence. Rows hold `seq_len` consecutive tokens of each sequence.
inline Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, int seq_len, int heads,
                        AttentionCache* cache = nullptr) {
  if (q.rows() != k.rows() || q.rows() != v.rows() || q.cols() != k.cols() || q.cols() != v.cols()) {
    throw ShapeError("attention: q/k/v shapes " + shape_of(q) + "/" + shape_of(k) + "/" + shape_of(v) + " differ");
  }
  if (seq_len <= 0 || q.rows() % seq_len != 0) throw ShapeError("attention: row count not a multiple of sequence length");
  if (heads <= 0 || q.cols() % heads != 0) throw ShapeError("attention: heads do not divide width");
  const Eigen::Index sequences = q.rows() / seq_len;
  const Eigen::Index head_dim = q.cols() / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Matrix out(q.rows(), q.cols());
  if (cache) cache->probs.resize(sequences * heads * seq_len, seq_len);
  for (Eigen::Index s = 0; s < sequences; ++s) {
    const Eigen::Index r0 = s * seq_len;
    for (Eigen::Index h = 0; h < heads; ++h) {
      const Eigen::Index c0 = h * head_dim;
      const auto qh = q.block(r0, c0, seq_len, head_dim);
      const auto kh = k.block(r0, c0, seq_len, head_dim);
      const auto vh = v.block(r0, c0, seq_len, head_dim);
      Matrix scores = (qh * kh.transpose()) * scale;
      Matrix probs = softmax_rows(scores);
      out.block(r0, c0, seq_len, head_dim) = probs * vh;
      if (cache) cache->probs.block((s * heads + h) * seq_len, 0, seq_len, seq_len) = probs;
    }
  }
  return out;
}

struct AttentionGrads {
  Matrix q, k, v;
};

inline AttentionGrads attention_backward(const Matrix& grad_out, const Matrix& q, const Matrix& k, const Matrix& v,
                                         int seq_len, int heads, const AttentionCache& cache) {
  const Eigen::Index sequences = q.rows() / seq_len;
  const Eigen::Index head_dim = q.cols() / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  AttentionGrads g{Matrix::Zero(q.rows(), q.cols()), Matrix::Zero(k.rows(), k.cols()), Matrix::Zero(v.rows(), v.cols())};
  for (Eigen::Index s = 0; s < sequences; ++s) {
    const Eigen::Index r0 = s * seq_len;
    for (Eigen::Index h = 0; h < heads; ++h) {
      const Eigen::Index c0 = h * head_dim;
      const auto probs = cache.probs.block((s * heads + h) * seq_len, 0, seq_len, seq_len);
      const auto go = grad_out.block(r0, c0, seq_len, head_dim);
      const auto qh = q.block(r0, c0, seq_len, head_dim);
      const auto kh = k.block(r0, c0, seq_len, head_dim);
      const auto vh = v.block(r0, c0, seq_len, head_dim);
      g.v.block(r0, c0, seq_len, head_dim) = probs.transpose() * go;
      const Matrix grad_probs = go * vh.transpose();
      Matrix grad_scores(seq_len, seq_len);
      for (Eigen::Index i = 0; i < seq_len; ++i) {
        const double inner = grad_probs.row(i).dot(probs.row(i));
        grad_scores.row(i) = probs.row(i).array() * (grad_probs.row(i).array() - inner);
      }
      grad_scores *= scale;
      g.q.block(r0, c0, seq_len, head_dim) = grad_scores * kh;
      g.k.block(r0, c0, seq_len, head_dim) = grad_scores.transpose() * qh;
    }
  }
  return g;
}

}  // namespace cllora::kernels
