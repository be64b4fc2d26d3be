// Copyright 2026 The cllora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cllora/autodiff.hpp"
#include "cllora/numerics.hpp"

namespace cllora {

enum class Projection { Query = 0, Key = 1, Value = 2 };

inline constexpr std::array<Projection, 3> kAllProjections = {Projection::Query, Projection::Key, Projection::Value};

inline char projection_letter(Projection p) { return "qkv"[static_cast<int>(p)]; }

/// Subset of {q, k, v}; written as a string of letters, e.g. "qv".
class AttachSet {
 public:
  AttachSet() = default;

  static AttachSet parse(const std::string& letters) {
    AttachSet s;
    for (char c : letters) {
      switch (c) {
        case 'q': s.bits_[0] = true; break;
        case 'k': s.bits_[1] = true; break;
        case 'v': s.bits_[2] = true; break;
        default: throw ConfigError("attach set: unknown projection '" + std::string(1, c) + "' in \"" + letters + "\"");
      }
    }
    return s;
  }

  bool contains(Projection p) const { return bits_[static_cast<int>(p)]; }
  bool empty() const { return !(bits_[0] || bits_[1] || bits_[2]); }
  int size() const { return int(bits_[0]) + int(bits_[1]) + int(bits_[2]); }

  std::vector<Projection> members() const {
    std::vector<Projection> out;
    for (Projection p : kAllProjections)
      if (contains(p)) out.push_back(p);
    return out;
  }

  std::string str() const {
    std::string s;
    for (Projection p : members()) s += projection_letter(p);
    return s;
  }

  std::uint32_t mask() const { return unsigned(bits_[0]) | (unsigned(bits_[1]) << 1) | (unsigned(bits_[2]) << 2); }

  bool operator==(const AttachSet&) const = default;

 private:
  std::array<bool, 3> bits_{false, false, false};
};

struct BackboneConfig {
  int num_blocks = 4;
  int width = 64;
  int heads = 4;
  double mlp_ratio = 4.0;
  int image_side = 16;
  int patch_side = 8;
  int channels = 1;
  AttachSet attach = AttachSet::parse("qv");

  static BackboneConfig desk() { return {}; }

  static BackboneConfig paper() {
    BackboneConfig c;
    c.num_blocks = 12;
    c.width = 768;
    c.heads = 12;
    c.image_side = 224;
    c.patch_side = 16;
    c.channels = 3;
    return c;
  }

  void validate() const {
    if (num_blocks <= 0 || width <= 0 || heads <= 0 || image_side <= 0 || patch_side <= 0 || channels <= 0 || !(mlp_ratio > 0.0)) {
      throw ConfigError("backbone config: all sizes must be positive");
    }
    if (width % heads != 0) throw ConfigError("backbone config: heads=" + std::to_string(heads) + " does not divide width=" + std::to_string(width));
    if (image_side % patch_side != 0) {
      throw ConfigError("backbone config: patch_side=" + std::to_string(patch_side) + " does not divide image_side=" + std::to_string(image_side));
    }
    if (attach.empty()) throw ConfigError("backbone config: attach set is empty");
  }

  int patches_per_side() const { return image_side / patch_side; }
  int num_patches() const { return patches_per_side() * patches_per_side(); }
  int seq_len() const { return 1 + num_patches(); }
  int patch_dim() const { return channels * patch_side * patch_side; }
  int mlp_hidden() const { return static_cast<int>(std::lround(width * mlp_ratio)); }

  // Frozen weight count: patch projection + bias, [CLS], per block two layer
  // norms, q/k/v/out projections with biases and the two MLP layers, final
  // layer norm. The positional encoding is fixed and not counted.
  std::size_t parameter_count() const {
    const std::size_t d = static_cast<std::size_t>(width);
    const std::size_t m = static_cast<std::size_t>(mlp_hidden());
    const std::size_t per_block = 2 * (2 * d) + 4 * (d * d + d) + (d * m + m) + (m * d + d);
    return d * static_cast<std::size_t>(patch_dim()) + d + d + static_cast<std::size_t>(num_blocks) * per_block + 2 * d;
  }
};

/// Channels x height x width pixels, channel-major then row-major.
struct Image {
  int channels = 1;
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  float at(int c, int y, int x) const { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
};

struct TokenState {
  Matrix tokens;  // row 0 is [CLS]
  int block_index = 0;
};

struct TransformerBlock {
  Matrix ln1_gain, ln1_bias;
  std::array<Matrix, 3> proj_weight;  // q, k, v as d_out x d_in
  std::array<Matrix, 3> proj_bias;
  Matrix out_weight, out_bias;
  Matrix ln2_gain, ln2_bias;
  Matrix mlp_in_weight, mlp_in_bias;
  Matrix mlp_out_weight, mlp_out_bias;

  template <class Fn>
  void for_each_tensor(Fn&& fn) const {
    fn(ln1_gain), fn(ln1_bias);
    for (int p = 0; p < 3; ++p) fn(proj_weight[p]), fn(proj_bias[p]);
    fn(out_weight), fn(out_bias), fn(ln2_gain), fn(ln2_bias);
    fn(mlp_in_weight), fn(mlp_in_bias), fn(mlp_out_weight), fn(mlp_out_bias);
  }
};

// Token-matrix -> token-matrix delta for one projection.
using ProjectionDelta = std::function<Matrix(const Matrix&)>;
using ProjectionDeltas = std::array<ProjectionDelta, 3>;

inline Matrix sinusoidal_positions(int seq_len, int width) {
  Matrix pos(seq_len, width);
  for (int t = 0; t < seq_len; ++t) {
    for (int i = 0; i < width; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / width);
      pos(t, i) = (i % 2 == 0) ? std::sin(t * freq) : std::cos(t * freq);
    }
  }
  return pos;
}

/// Frozen pre-norm vision transformer.
class Backbone {
 public:
  static Backbone init(const BackboneConfig& cfg, Rng& rng) {
    cfg.validate();
    Backbone b;
    b.cfg_ = cfg;
    const int d = cfg.width;
    const int m = cfg.mlp_hidden();
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
    b.patch_weight_ = gaussian_matrix(d, cfg.patch_dim(), 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim())), rng);
    b.patch_bias_ = Matrix::Zero(1, d);
    b.cls_ = gaussian_matrix(1, d, 1.0, rng);
    b.positions_ = sinusoidal_positions(cfg.seq_len(), d);
    b.blocks_.resize(static_cast<std::size_t>(cfg.num_blocks));
    for (auto& blk : b.blocks_) {
      blk.ln1_gain = Matrix::Ones(1, d);
      blk.ln1_bias = Matrix::Zero(1, d);
      for (int p = 0; p < 3; ++p) {
        blk.proj_weight[p] = gaussian_matrix(d, d, proj_std, rng);
        blk.proj_bias[p] = Matrix::Zero(1, d);
      }
      blk.out_weight = gaussian_matrix(d, d, proj_std, rng);
      blk.out_bias = Matrix::Zero(1, d);
      blk.ln2_gain = Matrix::Ones(1, d);
      blk.ln2_bias = Matrix::Zero(1, d);
      blk.mlp_in_weight = gaussian_matrix(m, d, proj_std, rng);
      blk.mlp_in_bias = Matrix::Zero(1, m);
      blk.mlp_out_weight = gaussian_matrix(d, m, 1.0 / std::sqrt(static_cast<double>(m)), rng);
      blk.mlp_out_bias = Matrix::Zero(1, d);
    }
    b.final_gain_ = Matrix::Ones(1, d);
    b.final_bias_ = Matrix::Zero(1, d);
    return b;
  }

  const BackboneConfig& config() const { return cfg_; }
  const TransformerBlock& block(int i) const { return blocks_.at(static_cast<std::size_t>(i - 1)); }  // 1-based
  TransformerBlock& mutable_block(int i) { return blocks_.at(static_cast<std::size_t>(i - 1)); }
  const Matrix& cls_embedding() const { return cls_; }
  const Matrix& positions() const { return positions_; }
  const Matrix& patch_weight() const { return patch_weight_; }
  const Matrix& final_gain() const { return final_gain_; }
  const Matrix& final_bias() const { return final_bias_; }

  template <class Fn>
  void for_each_tensor(Fn&& fn) const {
    fn(patch_weight_), fn(patch_bias_), fn(cls_);
    for (const auto& blk : blocks_) blk.for_each_tensor(fn);
    fn(final_gain_), fn(final_bias_);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_tensor([&](const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  std::uint64_t content_hash() const {
    ContentHasher h;
    for_each_tensor([&](const Matrix& m) { h.add(m); });
    h.add(positions_);
    return h.digest();
  }

  void check_image(const Image& img) const {
    if (img.channels != cfg_.channels || img.height != cfg_.image_side || img.width != cfg_.image_side ||
        img.pixels.size() != static_cast<std::size_t>(img.channels) * img.height * img.width) {
      throw ShapeError("patch_embed: image " + std::to_string(img.channels) + "x" + std::to_string(img.height) + "x" +
                       std::to_string(img.width) + " does not match config " + std::to_string(cfg_.channels) + "x" +
                       std::to_string(cfg_.image_side) + "x" + std::to_string(cfg_.image_side));
    }
  }

  /// Embeds a batch; rows are seq_len consecutive tokens per image.
  Matrix embed(std::span<const Image* const> images) const {
    const int per_side = cfg_.patches_per_side();
    const int ps = cfg_.patch_side;
    const int seq = cfg_.seq_len();
    const auto n = static_cast<Eigen::Index>(images.size());
    Matrix patches(n * cfg_.num_patches(), cfg_.patch_dim());
    for (Eigen::Index b = 0; b < n; ++b) {
      const Image& img = *images[static_cast<std::size_t>(b)];
      check_image(img);
      for (int py = 0; py < per_side; ++py) {
        for (int px = 0; px < per_side; ++px) {
          const Eigen::Index row = b * cfg_.num_patches() + py * per_side + px;
          Eigen::Index col = 0;
          for (int c = 0; c < cfg_.channels; ++c)
            for (int y = 0; y < ps; ++y)
              for (int x = 0; x < ps; ++x) patches(row, col++) = img.at(c, py * ps + y, px * ps + x);
        }
      }
    }
    Matrix projected = cllora::matmul_bt(patches, patch_weight_);
    projected.rowwise() += patch_bias_.row(0);
    Matrix tokens(n * seq, cfg_.width);
    for (Eigen::Index b = 0; b < n; ++b) {
      tokens.row(b * seq) = cls_.row(0) + positions_.row(0);
      tokens.block(b * seq + 1, 0, cfg_.num_patches(), cfg_.width) =
          projected.block(b * cfg_.num_patches(), 0, cfg_.num_patches(), cfg_.width) +
          positions_.block(1, 0, cfg_.num_patches(), cfg_.width);
    }
    return tokens;
  }

  TokenState patch_embed(const Image& image) const {
    const Image* one[] = {&image};
    return TokenState{embed(one), 0};
  }

  /// One pre-norm block. `hook(ops, projection, normalized_input)` may return
  /// a delta added to that projection's output; it is consulted only for
  /// projections in the attach set.
  template <class Ops, class Hook>
  typename Ops::Var run_block(Ops& ops, const typename Ops::Var& x, int i, Hook&& hook) const {
    const TransformerBlock& blk = block(i);
    using Var = typename Ops::Var;
    const Var xn = ops.layer_norm(x, blk.ln1_gain, blk.ln1_bias);
    std::array<std::optional<Var>, 3> qkv;
    for (Projection p : kAllProjections) {
      const int pi = static_cast<int>(p);
      Var y = ops.linear(xn, blk.proj_weight[pi], blk.proj_bias[pi]);
      if (cfg_.attach.contains(p)) {
        std::optional<Var> delta = hook(ops, p, xn);
        if (delta) y = ops.add(y, *delta);
      }
      qkv[pi] = std::move(y);
    }
    const Var attended = ops.attention(*qkv[0], *qkv[1], *qkv[2], cfg_.seq_len(), cfg_.heads);
    const Var h = ops.add(x, ops.linear(attended, blk.out_weight, blk.out_bias));
    const Var hn = ops.layer_norm(h, blk.ln2_gain, blk.ln2_bias);
    const Var mlp = ops.linear(ops.gelu(ops.linear(hn, blk.mlp_in_weight, blk.mlp_in_bias)), blk.mlp_out_weight, blk.mlp_out_bias);
    return ops.add(h, mlp);
  }

  template <class Ops>
  typename Ops::Var run_block(Ops& ops, const typename Ops::Var& x, int i) const {
    return run_block(ops, x, i, [](Ops&, Projection, const typename Ops::Var&) { return std::optional<typename Ops::Var>{}; });
  }

  // Final layer norm applied to the [CLS] row of every sequence.
  template <class Ops>
  typename Ops::Var cls_features(Ops& ops, const typename Ops::Var& tokens) const {
    return ops.layer_norm(ops.select_rows(tokens, cfg_.seq_len()), final_gain_, final_bias_);
  }

  TokenState block_forward(const TokenState& state, int i, const ProjectionDeltas* deltas = nullptr) const {
    if (i < 1 || i > cfg_.num_blocks) throw RangeError("block_forward: block " + std::to_string(i) + " out of range");
    if (state.block_index != i - 1) {
      throw ProtocolError("block_forward: state is at block " + std::to_string(state.block_index) + ", expected " + std::to_string(i - 1));
    }
    ValueOps ops;
    Matrix out = run_block(ops, state.tokens, i, [&](ValueOps&, Projection p, const Matrix& xn) -> std::optional<Matrix> {
      if (!deltas || !(*deltas)[static_cast<int>(p)]) return std::nullopt;
      Matrix d = (*deltas)[static_cast<int>(p)](xn);
      if (d.rows() != xn.rows() || d.cols() != cfg_.width) {
        throw ShapeError(std::string("block_forward: delta for projection ") + projection_letter(p) + " has shape " + shape_of(d) +
                         ", expected " + shape_string(xn.rows(), cfg_.width));
      }
      return d;
    });
    return TokenState{std::move(out), i};
  }

  Vector extract_cls(const TokenState& state) const {
    ValueOps ops;
    return cls_features(ops, state.tokens).row(0).transpose();
  }

 private:
  BackboneConfig cfg_;
  Matrix patch_weight_, patch_bias_, cls_, positions_;
  std::vector<TransformerBlock> blocks_;
  Matrix final_gain_, final_bias_;
};

}  // namespace cllora
