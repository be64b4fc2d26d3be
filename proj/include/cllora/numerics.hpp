// Copyright 2026 The cllora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <random>
#include <string>

#include "cllora/errors.hpp"

namespace cllora {

// Row-major dense matrix in double precision. Every tensor in the library is
// one of these; token sequences are stacked as rows.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
  return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")";
}

template <class M>
std::string shape_of(const M& m) {
  return shape_string(m.rows(), m.cols());
}

template <class M>
bool all_finite(const M& m) {
  return m.allFinite();
}

/// Deterministic random source.
///
/// Bits come from std::mt19937_64, whose output sequence is fixed by the C++
/// standard. Real-valued draws are derived here rather than through the
/// <random> distributions (those are implementation-defined), so a seed
/// reproduces the same values on every conforming platform:
///   uniform():  top 53 bits of one engine word scaled to [0, 1)
///   normal():   Box-Muller on two uniform_open() draws, both outputs used
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // (0, 1): never returns exactly zero.
  double uniform_open() { return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform_open(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_open();
    const double u2 = uniform_open();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * 3.14159265358979323846 * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ParameterError("Rng::below requires n > 0");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  // Independent child stream; depends only on (seed, stream), not on how many
  // draws were taken from this generator.
  Rng fork(std::uint64_t stream) const { return Rng(splitmix64(seed_ ^ splitmix64(stream + 0x9E3779B97F4A7C15ULL))); }

  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: cannot multiply " + shape_of(a) + " by " + shape_of(b));
  }
  return a * b;
}

// a * b^T
inline Matrix matmul_bt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_bt: cannot multiply " + shape_of(a) + " by transpose of " + shape_of(b));
  }
  return a * b.transpose();
}

// a^T * b
inline Matrix matmul_at(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_at: cannot multiply transpose of " + shape_of(a) + " by " + shape_of(b));
  }
  return a.transpose() * b;
}

// Entries filled in row-major order from rng.normal().
inline Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = stddev * rng.normal();
  return m;
}

/// Random r x k matrix with orthonormal rows (B * B^T = I_r).
///
/// Draws M with i.i.d. N(0, 1) entries, takes the thin SVD M = U S V^T and
/// returns U * V_r^T, i.e. the orthogonal polar factor of M.
inline Matrix sample_orthogonal_rows(int r, int k, Rng& rng) {
  if (r <= 0 || k <= 0) throw RankError("sample_orthogonal_rows: r and k must be positive");
  if (r > k) {
    throw RankError("sample_orthogonal_rows: rank r=" + std::to_string(r) + " exceeds k=" + std::to_string(k));
  }
  const Matrix m = gaussian_matrix(r, k, 1.0, rng);
  const Eigen::MatrixXd dense = m;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(dense, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Matrix out = svd.matrixU() * svd.matrixV().leftCols(r).transpose();
  if (!all_finite(out)) throw Error("sample_orthogonal_rows: non-finite result");
  return out;
}

/// Softmax of logits / tau, max-subtracted.
inline Vector softmax_temperature(const Vector& logits, double tau) {
  if (!(tau > 0.0)) throw ParameterError("softmax_temperature: tau must be positive");
  if (logits.size() == 0) return logits;
  const double top = logits.maxCoeff();
  Vector out = ((logits.array() - top) / tau).exp().matrix();
  out /= out.sum();
  return out;
}

// Entry j is the L2 norm of row j.
inline Vector row_l2_norms(const Matrix& m) {
  Vector out(m.rows());
  for (Eigen::Index j = 0; j < m.rows(); ++j) out(j) = m.row(j).norm();
  return out;
}

inline constexpr double kNormalizeEpsilon = 1e-12;

/// d * w / sum(w). Inputs summing below kNormalizeEpsilon map to all ones.
inline Vector dimension_preserving_normalize(const Vector& w) {
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    if (!(w(i) >= 0.0)) throw ParameterError("dimension_preserving_normalize: negative or NaN entry at " + std::to_string(i));
  }
  const double total = w.sum();
  if (total < kNormalizeEpsilon) return Vector::Ones(w.size());
  // Equal entries map to exactly 1 even when the rounded sum is not d * w.
  if ((w.array() == w(0)).all()) return Vector::Ones(w.size());
  return (static_cast<double>(w.size()) / total) * w;
}

// FNV-1a over the little-endian bytes of each entry, row-major.
class ContentHasher {
 public:
  void add_bytes(const unsigned char* data, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      state_ ^= data[i];
      state_ *= 0x100000001B3ULL;
    }
  }

  void add(std::uint64_t v) {
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
    add_bytes(bytes, 8);
  }

  void add(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    add(bits);
  }

  void add(const Matrix& m) {
    add(static_cast<std::uint64_t>(m.rows()));
    add(static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) add(m(i, j));
  }

  std::uint64_t digest() const noexcept { return state_; }

 private:
  std::uint64_t state_ = 0xCBF29CE484222325ULL;
};

}  // namespace cllora
