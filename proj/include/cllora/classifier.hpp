// Copyright 2026 The cllora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <compare>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cllora/model.hpp"
#include "cllora/streams.hpp"

namespace cllora {

struct PrototypeKey {
  int task = 0;
  int cls = 0;  // global class id
  auto operator<=>(const PrototypeKey&) const = default;
};

/// Per-(task, class) mean feature vectors. Append-only: a stored prototype is
/// never replaced.
class PrototypeStore {
 public:
  void add(int task, int cls, Vector prototype) {
    if (!prototypes_.emplace(PrototypeKey{task, cls}, std::move(prototype)).second) {
      throw ProtocolError("prototype for task " + std::to_string(task) + " class " + std::to_string(cls) + " already stored");
    }
  }

  bool empty() const { return prototypes_.empty(); }
  std::size_t size() const { return prototypes_.size(); }
  const std::map<PrototypeKey, Vector>& entries() const { return prototypes_; }

  const Vector& at(int task, int cls) const { return prototypes_.at(PrototypeKey{task, cls}); }

  std::vector<int> tasks() const {
    std::vector<int> out;
    for (const auto& [k, v] : prototypes_)
      if (out.empty() || out.back() != k.task) out.push_back(k.task);
    return out;
  }

  // {"task.class": [d floats]}
  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : prototypes_) j[std::to_string(k.task) + "." + std::to_string(k.cls)] = std::vector<double>(v.data(), v.data() + v.size());
    return j;
  }

 private:
  std::map<PrototypeKey, Vector> prototypes_;
};

/// Cosine similarity; a zero vector on either side scores -1.
inline double cosine_score(const Vector& a, const Vector& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return -1.0;
  return a.dot(b) / (na * nb);
}

inline std::vector<const Image*> image_pointers(const std::vector<Image>& images) {
  std::vector<const Image*> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(&img);
  return out;
}

/// Mean final [CLS] feature per class of `task`, computed with the current
/// shared adapter and the task's own specific adapters.
inline std::vector<std::pair<int, Vector>> compute_prototypes(const ClLoraModel& model, const Task& task, std::size_t chunk = 64) {
  const TaskAdapters& adapters = model.task(task.index);
  std::map<int, Vector> sums;
  std::map<int, int> counts;
  const auto ptrs = image_pointers(task.train);
  for (std::size_t begin = 0; begin < ptrs.size(); begin += chunk) {
    const std::size_t n = std::min(chunk, ptrs.size() - begin);
    const Matrix feats = model.features(std::span(ptrs).subspan(begin, n), &adapters);
    for (std::size_t i = 0; i < n; ++i) {
      const int cls = task.train_global[begin + i];
      auto [it, inserted] = sums.try_emplace(cls, Vector::Zero(feats.cols()));
      it->second += feats.row(static_cast<Eigen::Index>(i)).transpose();
      ++counts[cls];
    }
  }
  std::vector<std::pair<int, Vector>> out;
  for (int cls : task.classes) {
    if (!counts.contains(cls)) throw DataError("compute_prototypes: class " + std::to_string(cls) + " has no training samples");
    out.emplace_back(cls, sums.at(cls) / static_cast<double>(counts.at(cls)));
  }
  return out;
}

inline std::size_t adapter_pass_count(int l, int num_blocks, int num_tasks) {
  if (l < 0 || l > num_blocks) throw RangeError("adapter_pass_count: l=" + std::to_string(l) + " outside [0, " + std::to_string(num_blocks) + "]");
  if (num_tasks < 1) throw RangeError("adapter_pass_count: need at least one task");
  return static_cast<std::size_t>(l) + static_cast<std::size_t>(num_blocks - l) * static_cast<std::size_t>(num_tasks);
}

struct ClassScore {
  int task = 0;
  int cls = 0;
  double score = 0.0;
};

struct Prediction {
  int cls = -1;
  int task = -1;
  double score = 0.0;
  std::vector<ClassScore> scores;  // ordered by (task, class)
  PassCounter counter;
};

namespace detail {

// Leading blocks that are shared and therefore task-independent.
inline int shared_prefix_length(const AdapterLayout& layout) {
  int n = 0;
  while (n < layout.num_blocks && layout.is_shared(n + 1)) ++n;
  return n;
}

inline void score_task(const Matrix& feats, int task, const PrototypeStore& store, std::vector<Prediction>& out) {
  for (const auto& [key, proto] : store.entries()) {
    if (key.task != task) continue;
    for (Eigen::Index i = 0; i < feats.rows(); ++i) {
      const double s = cosine_score(proto, feats.row(i).transpose());
      out[static_cast<std::size_t>(i)].scores.push_back(ClassScore{task, key.cls, s});
    }
  }
}

// Highest score wins; ties go to the lowest (task, class) because scores are
// visited in that order and only a strictly larger score replaces the best.
inline void finalize(Prediction& p) {
  bool first = true;
  for (const auto& s : p.scores) {
    if (first || s.score > p.score) {
      p.score = s.score;
      p.cls = s.cls;
      p.task = s.task;
      first = false;
    }
  }
}

}  // namespace detail

/// Scores a batch against every stored prototype. Blocks in the leading
/// shared region run once per query; the remaining blocks run once per seen
/// task with that task's adapters.
inline std::vector<Prediction> predict_batch(const ClLoraModel& model, std::span<const Image* const> images, const PrototypeStore& store) {
  if (store.empty()) throw ProtocolError("predict: prototype store is empty");
  const AdapterLayout& layout = model.layout();
  const int prefix = detail::shared_prefix_length(layout);
  std::vector<Prediction> out(images.size());
  ValueOps ops;
  PassCounter prefix_counter;
  const Matrix shared = model.run_blocks(ops, model.embed(images), 1, prefix, ClLoraModel::Route{nullptr, nullptr, &prefix_counter});
  for (int t : store.tasks()) {
    PassCounter task_counter;
    const TaskAdapters& adapters = model.task(t);
    const Matrix z = model.run_blocks(ops, shared, prefix + 1, layout.num_blocks, ClLoraModel::Route{&adapters, nullptr, &task_counter});
    detail::score_task(model.backbone().cls_features(ops, z), t, store, out);
    for (auto& p : out) p.counter.adapter_block_applications += task_counter.adapter_block_applications;
  }
  for (auto& p : out) {
    p.counter.adapter_block_applications += prefix_counter.adapter_block_applications;
    detail::finalize(p);
  }
  return out;
}

/// Reference path: every task reruns all N blocks from the embedding.
inline std::vector<Prediction> predict_batch_naive(const ClLoraModel& model, std::span<const Image* const> images, const PrototypeStore& store) {
  if (store.empty()) throw ProtocolError("predict: prototype store is empty");
  std::vector<Prediction> out(images.size());
  ValueOps ops;
  const Matrix embedded = model.embed(images);
  for (int t : store.tasks()) {
    PassCounter counter;
    const TaskAdapters& adapters = model.task(t);
    const Matrix z = model.run_blocks(ops, embedded, 1, model.layout().num_blocks, ClLoraModel::Route{&adapters, nullptr, &counter});
    detail::score_task(model.backbone().cls_features(ops, z), t, store, out);
    for (auto& p : out) p.counter.adapter_block_applications += counter.adapter_block_applications;
  }
  for (auto& p : out) detail::finalize(p);
  return out;
}

inline Prediction predict(const ClLoraModel& model, const Image& image, const PrototypeStore& store) {
  const Image* one[] = {&image};
  return predict_batch(model, one, store).front();
}

struct Evaluation {
  std::size_t correct = 0;
  std::size_t total = 0;
  // Adapter-block applications per query; every query of one evaluation
  // performs the same count.
  std::size_t pass_count = 0;

  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

inline Evaluation evaluate(const ClLoraModel& model, const std::vector<const Image*>& images, const std::vector<int>& labels,
                           const PrototypeStore& store, std::size_t chunk = 64) {
  if (images.size() != labels.size()) throw ShapeError("evaluate: " + std::to_string(images.size()) + " images vs " + std::to_string(labels.size()) + " labels");
  Evaluation e;
  e.total = images.size();
  for (std::size_t begin = 0; begin < images.size(); begin += chunk) {
    const std::size_t n = std::min(chunk, images.size() - begin);
    const auto preds = predict_batch(model, std::span(images).subspan(begin, n), store);
    for (std::size_t i = 0; i < n; ++i) {
      if (preds[i].cls == labels[begin + i]) ++e.correct;
      if (begin + i == 0) {
        e.pass_count = preds[i].counter.adapter_block_applications;
      } else if (preds[i].counter.adapter_block_applications != e.pass_count) {
        throw ConsistencyError("evaluate: queries report different adapter pass counts");
      }
    }
  }
  return e;
}

// Fraction of `images` whose predicted global class equals the label.
inline double evaluate_accuracy(const ClLoraModel& model, const std::vector<const Image*>& images, const std::vector<int>& labels,
                                const PrototypeStore& store, std::size_t chunk = 64) {
  return evaluate(model, images, labels, store, chunk).accuracy();
}

}  // namespace cllora
