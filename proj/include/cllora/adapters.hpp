// Copyright 2026 The cllora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "cllora/autodiff.hpp"
#include "cllora/backbone.hpp"
#include "cllora/binary_io.hpp"
#include "cllora/kernels.hpp"
#include "cllora/numerics.hpp"

namespace cllora {

/// Which blocks carry shared vs. task-specific adapters. Blocks are 1-based.
/// Normally blocks 1..l are shared and l+1..N specific; `flip` swaps the two
/// regions (specific in 1..l, shared in l+1..N).
struct AdapterLayout {
  int num_blocks = 4;
  int position = 2;  // l
  int rank = 4;
  int width = 64;
  AttachSet attach = AttachSet::parse("qv");
  bool flip = false;

  static AdapterLayout from(const BackboneConfig& cfg, int position, int rank, bool flip = false) {
    AdapterLayout a;
    a.num_blocks = cfg.num_blocks;
    a.position = position;
    a.rank = rank;
    a.width = cfg.width;
    a.attach = cfg.attach;
    a.flip = flip;
    a.validate();
    return a;
  }

  void validate() const {
    if (position < 0 || position > num_blocks) {
      throw RangeError("adapter layout: position l=" + std::to_string(position) + " outside [0, " + std::to_string(num_blocks) + "]");
    }
    if (rank <= 0) throw RankError("adapter layout: rank must be positive, got " + std::to_string(rank));
    if (rank > width) throw RankError("adapter layout: rank " + std::to_string(rank) + " exceeds width " + std::to_string(width));
    if (attach.empty()) throw ConfigError("adapter layout: attach set is empty");
  }

  bool is_shared(int block) const { return flip ? block > position : block <= position; }

  std::vector<int> shared_blocks() const {
    std::vector<int> out;
    for (int i = 1; i <= num_blocks; ++i)
      if (is_shared(i)) out.push_back(i);
    return out;
  }

  std::vector<int> specific_blocks() const {
    std::vector<int> out;
    for (int i = 1; i <= num_blocks; ++i)
      if (!is_shared(i)) out.push_back(i);
    return out;
  }

  int num_shared() const { return flip ? num_blocks - position : position; }
  int num_specific() const { return num_blocks - num_shared(); }

  // Block whose [CLS] output is distilled: the last shared block.
  int distill_block() const { return flip ? num_blocks : position; }
};

/// Up-projection A (d x r) and down-projection B (r x k) for one
/// (block, projection) site. delta(x) = x B^T A^T, i.e. A B applied to each
/// token row.
struct LoraSite {
  int block = 0;
  Projection projection = Projection::Query;
  Parameter down;
  Parameter up;

  template <class Ops>
  typename Ops::Var delta(Ops& ops, const typename Ops::Var& x) const {
    return ops.matmul_bt(ops.matmul_bt(x, ops.leaf(down)), ops.leaf(up));
  }

  Matrix delta(const Matrix& x) const {
    ValueOps ops;
    return delta(ops, x);
  }
};

inline std::string site_id(const std::string& owner, int block, Projection p, const char* part) {
  return owner + ".b" + std::to_string(block) + "." + projection_letter(p) + "." + part;
}

enum class DownProjection {
  Orthogonal,  // fixed, orthonormal rows
  Random,      // fixed, plain N(0, 1) entries
  Trainable,   // trained, N(0, 1/r) entries
};

inline const char* to_string(DownProjection d) {
  switch (d) {
    case DownProjection::Orthogonal: return "orthogonal";
    case DownProjection::Random: return "random";
    case DownProjection::Trainable: return "trainable";
  }
  return "?";
}

class SharedAdapter {
 public:
  static SharedAdapter init(const AdapterLayout& layout, Rng& rng, DownProjection mode = DownProjection::Orthogonal) {
    layout.validate();
    SharedAdapter s;
    s.layout_ = layout;
    s.mode_ = mode;
    const int r = layout.rank, d = layout.width;
    for (int block : layout.shared_blocks()) {
      for (Projection p : layout.attach.members()) {
        Matrix down;
        switch (mode) {
          case DownProjection::Orthogonal: down = sample_orthogonal_rows(r, d, rng); break;
          case DownProjection::Random: down = gaussian_matrix(r, d, 1.0, rng); break;
          case DownProjection::Trainable: down = gaussian_matrix(r, d, 1.0 / std::sqrt(static_cast<double>(r)), rng); break;
        }
        s.sites_.push_back(LoraSite{block, p,
                                    Parameter(site_id("shared", block, p, "down"), std::move(down), ParamTag::SharedDown,
                                              mode == DownProjection::Trainable),
                                    Parameter(site_id("shared", block, p, "up"), Matrix::Zero(d, r), ParamTag::SharedUp, true)});
      }
    }
    return s;
  }

  const AdapterLayout& layout() const { return layout_; }
  DownProjection mode() const { return mode_; }
  std::vector<LoraSite>& sites() { return sites_; }
  const std::vector<LoraSite>& sites() const { return sites_; }

  const LoraSite* find(int block, Projection p) const {
    for (const auto& s : sites_)
      if (s.block == block && s.projection == p) return &s;
    return nullptr;
  }

  const LoraSite& site(int block, Projection p) const {
    if (!layout_.is_shared(block) || block < 1 || block > layout_.num_blocks) {
      throw RangeError("shared adapter: block " + std::to_string(block) + " is outside the shared range");
    }
    const LoraSite* s = find(block, p);
    if (!s) throw RangeError(std::string("shared adapter: projection ") + projection_letter(p) + " is not attached");
    return *s;
  }

  Matrix delta(const Matrix& x, int block, Projection p) const { return site(block, p).delta(x); }

  std::uint64_t content_hash() const { return hash_sites(sites_, nullptr); }

  std::uint64_t down_hash() const {
    ContentHasher h;
    for (const auto& s : sites_) h.add(s.down.value);
    return h.digest();
  }

  static std::uint64_t hash_sites(const std::vector<LoraSite>& sites, const Parameter* extra) {
    ContentHasher h;
    for (const auto& s : sites) {
      h.add(s.down.value);
      h.add(s.up.value);
    }
    if (extra) h.add(extra->value);
    return h.digest();
  }

 private:
  AdapterLayout layout_;
  DownProjection mode_ = DownProjection::Orthogonal;
  std::vector<LoraSite> sites_;
};

/// Learnable positive scale per specific block. mu = softplus(rho) keeps
/// every factor strictly positive under unconstrained gradient steps.
struct BlockWeights {
  int task = 0;
  Parameter rho;  // 1 x (number of specific blocks)
  bool frozen = false;

  Vector mu() const {
    Vector out(rho.value.cols());
    for (Eigen::Index i = 0; i < out.size(); ++i) out(i) = kernels::softplus(rho.value(0, i));
    return out;
  }

  void freeze() {
    rho.trainable = false;
    frozen = true;
  }
};

struct SpecificAdapter {
  int task = 0;
  std::vector<LoraSite> sites;
  bool frozen = false;

  const LoraSite* find(int block, Projection p) const {
    for (const auto& s : sites)
      if (s.block == block && s.projection == p) return &s;
    return nullptr;
  }

  void freeze() {
    for (auto& s : sites) {
      s.down.trainable = false;
      s.up.trainable = false;
    }
    frozen = true;
  }

  std::uint64_t content_hash(const BlockWeights* weights = nullptr) const {
    return SharedAdapter::hash_sites(sites, weights ? &weights->rho : nullptr);
  }
};

struct TaskAdapters {
  SpecificAdapter adapter;
  std::optional<BlockWeights> weights;  // absent when block weights are disabled
};

inline TaskAdapters init_specific(int task, const AdapterLayout& layout, Rng& rng, bool block_weights = true) {
  layout.validate();
  TaskAdapters out;
  out.adapter.task = task;
  const std::string owner = "task" + std::to_string(task);
  const int r = layout.rank, d = layout.width;
  const double down_std = 1.0 / std::sqrt(static_cast<double>(r));
  for (int block : layout.specific_blocks()) {
    for (Projection p : layout.attach.members()) {
      out.adapter.sites.push_back(LoraSite{block, p,
                                           Parameter(site_id(owner, block, p, "down"), gaussian_matrix(r, d, down_std, rng),
                                                     ParamTag::SpecificDown, true),
                                           Parameter(site_id(owner, block, p, "up"), Matrix::Zero(d, r), ParamTag::SpecificUp, true)});
    }
  }
  if (block_weights) {
    const int n = layout.num_specific();
    Matrix rho(1, n);
    for (int i = 0; i < n; ++i) rho(0, i) = kernels::softplus_inverse(rng.uniform(0.0, 2.0));
    out.weights = BlockWeights{task, Parameter(owner + ".mu", std::move(rho), ParamTag::BlockWeight, true), false};
  }
  return out;
}

// Index of `block` among the specific blocks of `layout`.
inline int specific_slot(const AdapterLayout& layout, int block) {
  int slot = 0;
  for (int b : layout.specific_blocks()) {
    if (b == block) return slot;
    ++slot;
  }
  throw RangeError("block " + std::to_string(block) + " is not a specific block");
}

/// mu_t^i * A_t B_t x for one site; mu is 1 when block weights are disabled.
inline Matrix specific_delta(const Matrix& x, int block, Projection p, const AdapterLayout& layout, const TaskAdapters& task) {
  const LoraSite* s = task.adapter.find(block, p);
  if (!s) throw MissingAdapterError("task " + std::to_string(task.adapter.task) + " has no adapter at block " + std::to_string(block));
  Matrix delta = s->delta(x);
  if (task.weights) delta = task.weights->mu()(specific_slot(layout, block)) * delta;
  return delta;
}

inline std::size_t lora_pair_params(int r, int d, int k) {
  if (r <= 0) throw RankError("lora_pair_params: rank must be positive, got " + std::to_string(r));
  if (d <= 0 || k <= 0) throw ShapeError("lora_pair_params: dimensions must be positive");
  return static_cast<std::size_t>(r) * static_cast<std::size_t>(d + k);
}

struct ParamCount {
  std::size_t shared = 0;             // shared up-projections (and downs when trainable)
  std::size_t specific_per_task = 0;  // LoRA pairs plus block weights for one task
  std::size_t block_weights_per_task = 0;
  std::size_t total = 0;              // shared + tasks * specific_per_task
  std::size_t backbone = 0;
  double ratio = 0.0;                 // total / backbone
};

inline ParamCount count_trainable_params(const AdapterLayout& layout, std::size_t backbone_params, int tasks_seen,
                                         bool block_weights = true, bool trainable_down = false) {
  layout.validate();
  const std::size_t r = static_cast<std::size_t>(layout.rank);
  const std::size_t d = static_cast<std::size_t>(layout.width);
  const std::size_t sites_per_block = static_cast<std::size_t>(layout.attach.size());
  ParamCount c;
  c.shared = static_cast<std::size_t>(layout.num_shared()) * sites_per_block * (trainable_down ? lora_pair_params(layout.rank, layout.width, layout.width) : d * r);
  c.block_weights_per_task = block_weights ? static_cast<std::size_t>(layout.num_specific()) : 0;
  c.specific_per_task = static_cast<std::size_t>(layout.num_specific()) * sites_per_block * lora_pair_params(layout.rank, layout.width, layout.width) +
                        c.block_weights_per_task;
  c.total = c.shared + static_cast<std::size_t>(tasks_seen) * c.specific_per_task;
  c.backbone = backbone_params;
  c.ratio = backbone_params ? static_cast<double>(c.total) / static_cast<double>(backbone_params) : 0.0;
  return c;
}

// ---------------------------------------------------------------------------
// Adapter checkpoint file (little-endian):
//   "CLLA"  magic
//   u32     version (1)
//   u32     kind (0 = shared, 1 = task-specific)
//   i32     task id (-1 for shared)
//   u32 l, u32 N, u32 r, u32 d, u32 attach mask (q=1, k=2, v=4), u32 flip
//   u32     has block weights
//   u32     matrix count
//   per matrix: u32 rows, u32 cols, rows*cols f64 row-major
//   u64     content hash (FNV-1a, same as content_hash())
// Matrix order: sites by ascending block then q, k, v; each site down then
// up; finally the block-weight row (unconstrained rho) if present.
// ---------------------------------------------------------------------------

inline constexpr char kAdapterMagic[4] = {'C', 'L', 'L', 'A'};
inline constexpr std::uint32_t kAdapterVersion = 1;

struct AdapterCheckpoint {
  bool shared = true;
  int task = -1;
  AdapterLayout layout;
  std::vector<LoraSite> sites;
  std::optional<Parameter> block_weights;
  std::uint64_t hash = 0;
};

namespace detail {

inline void write_matrix(ByteWriter& w, const Matrix& m) {
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) w.f64(m(i, j));
}

inline Matrix read_matrix(ByteReader& r) {
  const std::uint32_t rows = r.u32();
  const std::uint32_t cols = r.u32();
  r.require(static_cast<std::size_t>(rows) * cols * 8, "matrix data");
  Matrix m(rows, cols);
  for (std::uint32_t i = 0; i < rows; ++i)
    for (std::uint32_t j = 0; j < cols; ++j) m(i, j) = r.f64();
  return m;
}

inline std::vector<unsigned char> encode_adapter(bool shared, int task, const AdapterLayout& layout, const std::vector<LoraSite>& sites,
                                                 const Parameter* weights) {
  ByteWriter w;
  w.raw(std::string_view(kAdapterMagic, 4));
  w.u32(kAdapterVersion);
  w.u32(shared ? 0 : 1);
  w.i32(task);
  w.u32(static_cast<std::uint32_t>(layout.position));
  w.u32(static_cast<std::uint32_t>(layout.num_blocks));
  w.u32(static_cast<std::uint32_t>(layout.rank));
  w.u32(static_cast<std::uint32_t>(layout.width));
  w.u32(layout.attach.mask());
  w.u32(layout.flip ? 1 : 0);
  w.u32(weights ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(2 * sites.size() + (weights ? 1 : 0)));
  for (const auto& s : sites) {
    write_matrix(w, s.down.value);
    write_matrix(w, s.up.value);
  }
  if (weights) write_matrix(w, weights->value);
  w.u64(SharedAdapter::hash_sites(sites, weights));
  return w.take();
}

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const SharedAdapter& s) {
  return detail::encode_adapter(true, -1, s.layout(), s.sites(), nullptr);
}

inline std::vector<unsigned char> encode_checkpoint(const TaskAdapters& t, const AdapterLayout& layout) {
  return detail::encode_adapter(false, t.adapter.task, layout, t.adapter.sites, t.weights ? &t.weights->rho : nullptr);
}

inline AdapterCheckpoint decode_checkpoint(std::span<const unsigned char> bytes) {
  ByteReader r(bytes);
  const std::string magic = r.raw(4);
  if (magic != std::string_view(kAdapterMagic, 4)) throw FormatError("adapter checkpoint: bad magic, expected \"CLLA\"", 0);
  const std::size_t version_at = r.offset();
  if (r.u32() != kAdapterVersion) throw FormatError("adapter checkpoint: unsupported version", version_at);
  AdapterCheckpoint c;
  c.shared = r.u32() == 0;
  c.task = r.i32();
  c.layout.position = static_cast<int>(r.u32());
  c.layout.num_blocks = static_cast<int>(r.u32());
  c.layout.rank = static_cast<int>(r.u32());
  c.layout.width = static_cast<int>(r.u32());
  const std::uint32_t mask = r.u32();
  c.layout.attach = AttachSet::parse(std::string(mask & 1 ? "q" : "") + (mask & 2 ? "k" : "") + (mask & 4 ? "v" : ""));
  c.layout.flip = r.u32() != 0;
  const bool has_weights = r.u32() != 0;
  const std::uint32_t count = r.u32();
  const std::size_t site_count = (count - (has_weights ? 1 : 0)) / 2;
  const std::vector<int> blocks = c.shared ? c.layout.shared_blocks() : c.layout.specific_blocks();
  const std::vector<Projection> projections = c.layout.attach.members();
  if (site_count != blocks.size() * projections.size()) {
    throw FormatError("adapter checkpoint: matrix count does not match header layout", r.offset());
  }
  const std::string owner = c.shared ? "shared" : "task" + std::to_string(c.task);
  for (int block : blocks) {
    for (Projection p : projections) {
      Matrix down = detail::read_matrix(r);
      Matrix up = detail::read_matrix(r);
      c.sites.push_back(LoraSite{block, p, Parameter(site_id(owner, block, p, "down"), std::move(down), c.shared ? ParamTag::SharedDown : ParamTag::SpecificDown, false),
                                 Parameter(site_id(owner, block, p, "up"), std::move(up), c.shared ? ParamTag::SharedUp : ParamTag::SpecificUp, false)});
    }
  }
  if (has_weights) c.block_weights = Parameter(owner + ".mu", detail::read_matrix(r), ParamTag::BlockWeight, false);
  const std::size_t hash_at = r.offset();
  c.hash = r.u64();
  if (c.hash != SharedAdapter::hash_sites(c.sites, c.block_weights ? &*c.block_weights : nullptr)) {
    throw FormatError("adapter checkpoint: content hash mismatch", hash_at);
  }
  return c;
}

}  // namespace cllora
