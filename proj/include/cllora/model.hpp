// Copyright 2026 The cllora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <utility>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cllora/adapters.hpp"
#include "cllora/autodiff.hpp"
#include "cllora/backbone.hpp"

namespace cllora {

struct PassCounter {
  std::size_t adapter_block_applications = 0;
};

/// Frozen copy of the shared up-projections at the end of the previous task,
/// keyed by parameter id, with the row norms used for gradient reassignment.
struct TeacherSnapshot {
  std::map<std::string, Matrix> up;
  std::map<std::string, Vector> row_norms;

  static TeacherSnapshot capture(const SharedAdapter& shared) {
    TeacherSnapshot s;
    for (const auto& site : shared.sites()) {
      s.up.emplace(site.up.id, site.up.value);
      s.row_norms.emplace(site.up.id, row_l2_norms(site.up.value));
    }
    return s;
  }
};

/// Frozen backbone plus the shared adapter and every task's specific
/// adapters. Block i routes through the shared site when the layout marks it
/// shared, otherwise through the selected task's site scaled by its block
/// weight.
class ClLoraModel {
 public:
  ClLoraModel(Backbone backbone, AdapterLayout layout, SharedAdapter shared)
      : backbone_(std::move(backbone)), layout_(std::move(layout)), shared_(std::move(shared)) {
    if (layout_.num_blocks != backbone_.config().num_blocks || layout_.width != backbone_.config().width ||
        !(layout_.attach == backbone_.config().attach)) {
      throw ConfigError("model: adapter layout does not match backbone config");
    }
  }

  const Backbone& backbone() const { return backbone_; }
  const AdapterLayout& layout() const { return layout_; }
  SharedAdapter& shared() { return shared_; }
  const SharedAdapter& shared() const { return shared_; }
  std::vector<TaskAdapters>& tasks() { return tasks_; }
  const std::vector<TaskAdapters>& tasks() const { return tasks_; }

  const TaskAdapters& task(int t) const {
    for (const auto& ta : tasks_)
      if (ta.adapter.task == t) return ta;
    throw MissingAdapterError("no adapters stored for task " + std::to_string(t));
  }

  TaskAdapters& task(int t) { return const_cast<TaskAdapters&>(std::as_const(*this).task(t)); }

  struct Route {
    const TaskAdapters* task = nullptr;          // specific blocks run adapter-free when null
    const TeacherSnapshot* shared_up = nullptr;  // replaces live shared up-projections
    PassCounter* counter = nullptr;
  };

  /// Runs blocks first..last (inclusive, 1-based) on stacked token rows.
  template <class Ops>
  typename Ops::Var run_blocks(Ops& ops, typename Ops::Var x, int first, int last, const Route& route) const {
    using Var = typename Ops::Var;
    std::optional<Var> mu;
    if (route.task && route.task->weights) {
      for (int i = first; i <= last; ++i) {
        if (!layout_.is_shared(i)) {
          mu = ops.softplus(ops.leaf(route.task->weights->rho));
          break;
        }
      }
    }
    for (int i = first; i <= last; ++i) {
      const bool shared_block = layout_.is_shared(i);
      if (!shared_block && !route.task) {
        x = backbone_.run_block(ops, x, i);
        continue;
      }
      if (route.counter) ++route.counter->adapter_block_applications;
      if (shared_block) {
        x = backbone_.run_block(ops, x, i, [&](Ops& o, Projection p, const Var& xn) -> std::optional<Var> {
          const LoraSite* site = shared_.find(i, p);
          if (!site) return std::nullopt;
          if (route.shared_up) {
            const Var down = o.leaf(site->down);
            return o.matmul_bt(o.matmul_bt(xn, down), o.constant(route.shared_up->up.at(site->up.id)));
          }
          return site->delta(o, xn);
        });
      } else {
        const int slot = specific_slot(layout_, i);
        x = backbone_.run_block(ops, x, i, [&](Ops& o, Projection p, const Var& xn) -> std::optional<Var> {
          const LoraSite* site = route.task->adapter.find(i, p);
          if (!site) throw MissingAdapterError("task " + std::to_string(route.task->adapter.task) + " has no site at block " + std::to_string(i));
          Var d = site->delta(o, xn);
          if (mu) d = o.scale(d, o.element(*mu, 0, slot));
          return d;
        });
      }
    }
    return x;
  }

  Matrix embed(std::span<const Image* const> images) const { return backbone_.embed(images); }

  // Final-block [CLS] features (after the final layer norm), one row per image.
  Matrix features(std::span<const Image* const> images, const TaskAdapters* task, PassCounter* counter = nullptr) const {
    ValueOps ops;
    const Matrix z = run_blocks(ops, embed(images), 1, layout_.num_blocks, Route{task, nullptr, counter});
    return backbone_.cls_features(ops, z);
  }

  // [CLS] features at the distillation block, with shared up-projections taken
  // from `snapshot` when given.
  Matrix distill_features(std::span<const Image* const> images, const TaskAdapters* task, const TeacherSnapshot* snapshot) const {
    ValueOps ops;
    const Matrix z = run_blocks(ops, embed(images), 1, layout_.distill_block(), Route{task, snapshot, nullptr});
    return backbone_.cls_features(ops, z);
  }

 private:
  Backbone backbone_;
  AdapterLayout layout_;
  SharedAdapter shared_;
  std::vector<TaskAdapters> tasks_;
};

}  // namespace cllora
