// Copyright 2026 The cllora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cllora/backbone.hpp"
#include "cllora/binary_io.hpp"
#include "cllora/numerics.hpp"

namespace cllora {

struct Dataset {
  std::uint32_t num_classes = 0;
  std::uint32_t train_per_class = 0;
  std::uint32_t test_per_class = 0;
  std::uint32_t channels = 1;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::vector<Image> train, test;  // class-major, sample-minor
  std::vector<std::uint32_t> train_labels, test_labels;

  bool operator==(const Dataset& o) const {
    auto same_images = [](const std::vector<Image>& a, const std::vector<Image>& b) {
      if (a.size() != b.size()) return false;
      for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].pixels != b[i].pixels || a[i].channels != b[i].channels || a[i].height != b[i].height || a[i].width != b[i].width) return false;
      return true;
    };
    return num_classes == o.num_classes && train_per_class == o.train_per_class && test_per_class == o.test_per_class &&
           channels == o.channels && height == o.height && width == o.width && train_labels == o.train_labels &&
           test_labels == o.test_labels && same_images(train, o.train) && same_images(test, o.test);
  }
};

struct SyntheticSpec {
  int num_classes = 10;
  int train_per_class = 20;
  int test_per_class = 10;
  int image_side = 16;
  int channels = 1;
  double noise_std = 0.08;
};

/// One uniform(0,1) template image per class; every sample is the template
/// plus N(0, noise_std^2) pixel noise, clamped to [0, 1]. Draw order: all
/// templates, then train samples, then test samples (class-major).
inline Dataset gen_synthetic(const SyntheticSpec& spec, Rng& rng) {
  if (spec.num_classes < 2) throw ConfigError("gen_synthetic: need at least 2 classes");
  if (!(spec.noise_std >= 0.0)) throw ConfigError("gen_synthetic: noise_std must be non-negative");
  if (spec.train_per_class <= 0 || spec.test_per_class < 0 || spec.image_side <= 0 || spec.channels <= 0) {
    throw ConfigError("gen_synthetic: sample counts and image sizes must be positive");
  }
  const std::size_t pixels = static_cast<std::size_t>(spec.channels) * spec.image_side * spec.image_side;
  std::vector<std::vector<double>> templates(static_cast<std::size_t>(spec.num_classes), std::vector<double>(pixels));
  for (auto& t : templates)
    for (double& v : t) v = rng.uniform();

  Dataset ds;
  ds.num_classes = static_cast<std::uint32_t>(spec.num_classes);
  ds.train_per_class = static_cast<std::uint32_t>(spec.train_per_class);
  ds.test_per_class = static_cast<std::uint32_t>(spec.test_per_class);
  ds.channels = static_cast<std::uint32_t>(spec.channels);
  ds.height = ds.width = static_cast<std::uint32_t>(spec.image_side);

  auto draw = [&](int cls) {
    Image img{spec.channels, spec.image_side, spec.image_side, std::vector<float>(pixels)};
    for (std::size_t i = 0; i < pixels; ++i) {
      const double noisy = templates[static_cast<std::size_t>(cls)][i] + (spec.noise_std > 0.0 ? spec.noise_std * rng.normal() : 0.0);
      img.pixels[i] = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
    }
    return img;
  };
  for (int c = 0; c < spec.num_classes; ++c)
    for (int s = 0; s < spec.train_per_class; ++s) {
      ds.train.push_back(draw(c));
      ds.train_labels.push_back(static_cast<std::uint32_t>(c));
    }
  for (int c = 0; c < spec.num_classes; ++c)
    for (int s = 0; s < spec.test_per_class; ++s) {
      ds.test.push_back(draw(c));
      ds.test_labels.push_back(static_cast<std::uint32_t>(c));
    }
  return ds;
}

// ---------------------------------------------------------------------------
// Dataset file (little-endian):
//   "CLLD", u32 version = 1, u32 num_classes, u32 train_per_class,
//   u32 test_per_class, u32 channels, u32 height, u32 width,
//   train pixels (f32, class-major then sample, each image C x H x W
//   row-major), test pixels, u32 train labels[], u32 test labels[].
// ---------------------------------------------------------------------------

inline constexpr char kDatasetMagic[4] = {'C', 'L', 'L', 'D'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::vector<unsigned char> encode_dataset(const Dataset& ds) {
  ByteWriter w;
  w.raw(std::string_view(kDatasetMagic, 4));
  w.u32(kDatasetVersion);
  for (std::uint32_t v : {ds.num_classes, ds.train_per_class, ds.test_per_class, ds.channels, ds.height, ds.width}) w.u32(v);
  for (const auto* split : {&ds.train, &ds.test})
    for (const Image& img : *split)
      for (float p : img.pixels) w.f32(p);
  for (std::uint32_t l : ds.train_labels) w.u32(l);
  for (std::uint32_t l : ds.test_labels) w.u32(l);
  return w.take();
}

inline Dataset decode_dataset(std::span<const unsigned char> bytes) {
  ByteReader r(bytes);
  r.require(4, "magic");
  if (r.raw(4) != std::string_view(kDatasetMagic, 4)) throw FormatError("dataset: bad magic, expected \"CLLD\"", 0);
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) throw FormatError("dataset: unsupported version " + std::to_string(version), version_at);
  Dataset ds;
  ds.num_classes = r.u32();
  ds.train_per_class = r.u32();
  ds.test_per_class = r.u32();
  ds.channels = r.u32();
  ds.height = r.u32();
  ds.width = r.u32();
  const std::uint64_t pixels = std::uint64_t{ds.channels} * ds.height * ds.width;
  const std::uint64_t n_train = std::uint64_t{ds.num_classes} * ds.train_per_class;
  const std::uint64_t n_test = std::uint64_t{ds.num_classes} * ds.test_per_class;
  const std::uint64_t expected = (n_train + n_test) * pixels * 4 + (n_train + n_test) * 4;
  if (r.remaining() < expected) {
    throw FormatError("dataset: truncated, header promises " + std::to_string(expected) + " payload bytes but " +
                          std::to_string(r.remaining()) + " remain",
                      r.offset() + r.remaining());
  }
  if (r.remaining() > expected) throw FormatError("dataset: trailing bytes after payload", r.offset() + expected);
  auto read_images = [&](std::uint64_t n, std::vector<Image>& out) {
    out.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
      Image img{static_cast<int>(ds.channels), static_cast<int>(ds.height), static_cast<int>(ds.width), std::vector<float>(pixels)};
      for (float& p : img.pixels) p = r.f32();
      out.push_back(std::move(img));
    }
  };
  read_images(n_train, ds.train);
  read_images(n_test, ds.test);
  for (std::uint64_t i = 0; i < n_train; ++i) ds.train_labels.push_back(r.u32());
  for (std::uint64_t i = 0; i < n_test; ++i) ds.test_labels.push_back(r.u32());
  for (std::uint32_t l : ds.train_labels)
    if (l >= ds.num_classes) throw FormatError("dataset: train label out of range", r.offset());
  for (std::uint32_t l : ds.test_labels)
    if (l >= ds.num_classes) throw FormatError("dataset: test label out of range", r.offset());
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) { write_file_atomic(path, encode_dataset(ds)); }

inline Dataset load_dataset(const std::filesystem::path& path) { return decode_dataset(read_file_bytes(path)); }

struct Task {
  int index = 0;             // 1-based position in the stream
  std::vector<int> classes;  // global class ids; position = local label
  std::vector<Image> train, test;
  std::vector<int> train_local, test_local;
  std::vector<int> train_global, test_global;

  int local_label(int global) const {
    const auto it = std::find(classes.begin(), classes.end(), global);
    if (it == classes.end()) throw DataError("class " + std::to_string(global) + " is not in task " + std::to_string(index));
    return static_cast<int>(it - classes.begin());
  }
};

struct TaskStream {
  std::vector<Task> tasks;

  void check_disjoint() const {
    std::set<int> seen;
    for (const auto& t : tasks)
      for (int c : t.classes)
        if (!seen.insert(c).second) throw DataError("task stream: class " + std::to_string(c) + " appears in more than one task");
  }
};

/// Partitions classes into T contiguous groups of equal size, in ascending
/// class order or, when `class_order_seed` is given, in a seeded permutation.
inline TaskStream split_tasks(const Dataset& ds, int num_tasks, std::optional<std::uint64_t> class_order_seed = std::nullopt) {
  if (num_tasks <= 0) throw DataError("split_tasks: number of tasks must be positive");
  if (ds.num_classes % static_cast<std::uint32_t>(num_tasks) != 0) {
    throw DataError("split_tasks: " + std::to_string(num_tasks) + " tasks do not divide " + std::to_string(ds.num_classes) + " classes");
  }
  std::vector<int> order(ds.num_classes);
  std::iota(order.begin(), order.end(), 0);
  if (class_order_seed) {
    Rng rng(*class_order_seed);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  }
  const int per_task = static_cast<int>(ds.num_classes) / num_tasks;
  TaskStream stream;
  std::vector<int> owner(ds.num_classes), local(ds.num_classes);
  for (int t = 0; t < num_tasks; ++t) {
    Task task;
    task.index = t + 1;
    for (int j = 0; j < per_task; ++j) {
      const int c = order[static_cast<std::size_t>(t * per_task + j)];
      task.classes.push_back(c);
      owner[static_cast<std::size_t>(c)] = t;
      local[static_cast<std::size_t>(c)] = j;
    }
    stream.tasks.push_back(std::move(task));
  }
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    const auto c = ds.train_labels[i];
    Task& t = stream.tasks[static_cast<std::size_t>(owner[c])];
    t.train.push_back(ds.train[i]);
    t.train_local.push_back(local[c]);
    t.train_global.push_back(static_cast<int>(c));
  }
  for (std::size_t i = 0; i < ds.test.size(); ++i) {
    const auto c = ds.test_labels[i];
    Task& t = stream.tasks[static_cast<std::size_t>(owner[c])];
    t.test.push_back(ds.test[i]);
    t.test_local.push_back(local[c]);
    t.test_global.push_back(static_cast<int>(c));
  }
  stream.check_disjoint();
  return stream;
}

}  // namespace cllora
