// Copyright 2026 The cllora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cllora/adapters.hpp"
#include "cllora/autodiff.hpp"
#include "cllora/classifier.hpp"
#include "cllora/model.hpp"
#include "cllora/streams.hpp"

namespace cllora {

enum class OptimizerKind { GradientDescent, Adam };

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd"; }

struct TrainConfig {
  double lambda_kd = 5.0;
  double lambda_orth = 1e-4;
  double tau = 2.0;
  int epochs = 30;
  int batch_size = 16;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  int position = 2;  // l
  bool kd = true;
  bool gr = true;
  bool bw = true;
  bool fix_b = true;
  bool flip_positions = false;

  void validate(int num_blocks) const {
    std::vector<std::string> bad;
    if (!(lambda_kd >= 0.0)) bad.push_back("lambda_kd");
    if (!(lambda_orth >= 0.0)) bad.push_back("lambda_orth");
    if (!(tau > 0.0)) bad.push_back("tau");
    if (epochs <= 0) bad.push_back("epochs");
    if (batch_size <= 0) bad.push_back("batch_size");
    if (!(learning_rate >= 0.0)) bad.push_back("learning_rate");
    if (position < 0 || position > num_blocks) bad.push_back("position");
    if (!bad.empty()) throw ConfigError("train config: invalid values", bad);
  }
};

// Temporary linear classifier over the current task's classes.
struct LocalHead {
  Parameter weight;  // |C_t| x d
  Parameter bias;    // 1 x |C_t|

  template <class Ops>
  typename Ops::Var logits(Ops& ops, const typename Ops::Var& feats) const {
    return ops.add_row(ops.matmul_bt(feats, ops.leaf(weight)), ops.leaf(bias));
  }

  Matrix logits(const Matrix& feats) const {
    ValueOps ops;
    return logits(ops, feats);
  }
};

/// Mean over rows of -log softmax(logits)[label].
inline double local_ce_loss(const Matrix& logits, const std::vector<int>& labels) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) throw ShapeError("local_ce_loss: " + shape_of(logits) + " logits vs " + std::to_string(labels.size()) + " labels");
  if (labels.empty()) throw ShapeError("local_ce_loss: empty batch");
  const Matrix logp = kernels::log_softmax_rows(logits);
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= logits.cols()) {
      throw RangeError("local_ce_loss: label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(logits.cols()) + ")");
    }
    total -= logp(static_cast<Eigen::Index>(i), labels[i]);
  }
  return total / static_cast<double>(labels.size());
}

inline double local_ce_loss(const Vector& logits, int label) { return local_ce_loss(Matrix(logits.transpose()), std::vector<int>{label}); }

/// -sum_i p_i log q_i with p = softmax(teacher / tau) and q = softmax(student / tau).
inline double soft_cross_entropy(const Vector& student_logits, const Vector& teacher_logits, double tau) {
  if (student_logits.size() != teacher_logits.size()) throw ShapeError("soft_cross_entropy: logit lengths differ");
  const Vector p = softmax_temperature(teacher_logits, tau);
  const Matrix logq = kernels::log_softmax_rows(Matrix(student_logits.transpose()), tau);
  return -p.dot(logq.row(0).transpose());
}

/// Distillation loss between the student's and the teacher's [CLS] vectors,
/// both scored by the same head. Only defined from the second task on.
inline double kd_loss(const Vector& student_cls, const Vector& teacher_cls, const LocalHead& head, double tau, int task) {
  if (task <= 1) throw ProtocolError("kd_loss: no teacher exists at task " + std::to_string(task));
  if (student_cls.size() != teacher_cls.size()) throw ShapeError("kd_loss: [CLS] lengths differ");
  const Vector s = head.logits(Matrix(student_cls.transpose())).row(0).transpose();
  const Vector t = head.logits(Matrix(teacher_cls.transpose())).row(0).transpose();
  return soft_cross_entropy(s, t, tau);
}

/// sum_i |<u, previous_i>|.
inline double orth_loss(const Vector& u, const std::vector<Vector>& previous) {
  double total = 0.0;
  for (const auto& p : previous) {
    if (p.size() != u.size()) throw ShapeError("orth_loss: length " + std::to_string(p.size()) + " vs " + std::to_string(u.size()));
    total += std::abs(u.dot(p));
  }
  return total;
}

/// Scales row j of the KD gradient by sigma(prev_row_norms)_j.
inline Matrix reassign_gradient(const Matrix& kd_grad, const Vector& prev_row_norms) {
  if (kd_grad.rows() != prev_row_norms.size()) {
    throw ShapeError("reassign_gradient: gradient " + shape_of(kd_grad) + " vs " + std::to_string(prev_row_norms.size()) + " norms");
  }
  const Vector scale = dimension_preserving_normalize(prev_row_norms);
  return scale.asDiagonal() * kd_grad;
}

/// Combines the per-term gradients into the update direction:
///   ce + lambda_kd * kd* + lambda_orth * orth
/// where kd* is the reassigned KD gradient for shared up-projections (when
/// enabled) and the plain KD gradient everywhere else.
inline GradientMap total_step_gradient(const GradientBundle& bundle, const TrainConfig& cfg, const TeacherSnapshot* snapshot,
                                       std::span<const Parameter* const> params, int task) {
  if (task > 1 && cfg.kd && !snapshot) throw ProtocolError("total_step_gradient: no teacher snapshot for task " + std::to_string(task));
  GradientMap out;
  for (const Parameter* p : params) {
    if (!p->trainable) continue;
    // A parameter that did not take part in this step's graph has no entry.
    const Matrix zero = Matrix::Zero(p->value.rows(), p->value.cols());
    auto term = [&](const GradientMap& m) -> const Matrix& {
      const auto it = m.find(p->id);
      return it == m.end() ? zero : it->second;
    };
    const Matrix& ce = term(bundle.ce);
    const Matrix& kd = term(bundle.kd);
    const Matrix& orth = term(bundle.orth);
    Matrix g = ce;
    if (cfg.lambda_kd != 0.0) {
      if (p->tag == ParamTag::SharedUp && cfg.gr && snapshot) {
        g += cfg.lambda_kd * reassign_gradient(kd, snapshot->row_norms.at(p->id));
      } else {
        g += cfg.lambda_kd * kd;
      }
    }
    if (cfg.lambda_orth != 0.0) g += cfg.lambda_orth * orth;
    out.emplace(p->id, std::move(g));
  }
  return out;
}

class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}

  void step(std::span<Parameter* const> params, const GradientMap& grads) {
    ++t_;
    for (Parameter* p : params) {
      if (!p->trainable) continue;
      const Matrix& g = grads.at(p->id);
      if (kind_ == OptimizerKind::GradientDescent) {
        p->value -= lr_ * g;
        continue;
      }
      auto [it, inserted] = moments_.try_emplace(p->id, Moments{Matrix::Zero(g.rows(), g.cols()), Matrix::Zero(g.rows(), g.cols())});
      Moments& m = it->second;
      m.first = kBeta1 * m.first + (1.0 - kBeta1) * g;
      m.second = kBeta2 * m.second + (1.0 - kBeta2) * g.cwiseProduct(g);
      const double c1 = 1.0 - std::pow(kBeta1, t_);
      const double c2 = 1.0 - std::pow(kBeta2, t_);
      p->value.array() -= lr_ * (m.first.array() / c1) / ((m.second.array() / c2).sqrt() + kEpsilon);
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEpsilon = 1e-8;

  struct Moments {
    Matrix first, second;
  };

  OptimizerKind kind_;
  double lr_;
  int t_ = 0;
  std::map<std::string, Moments> moments_;
};

struct StepRecord {
  int task = 0;
  int epoch = 0;
  double ce = 0.0, kd = 0.0, orth = 0.0, total = 0.0;
};

struct EpochLog {
  int task = 0;
  int epoch = 0;
  double loss_ce = 0.0, loss_kd = 0.0, loss_orth = 0.0, loss_total = 0.0;
};

/// Sequential class-incremental training. Owns the model, the prototype store
/// and the loss log; tasks must arrive in order 1..T.
class Trainer {
 public:
  Trainer(ClLoraModel model, TrainConfig cfg, std::uint64_t seed) : model_(std::move(model)), cfg_(cfg), root_(seed) {
    cfg_.validate(model_.layout().num_blocks);
    if (cfg_.position != model_.layout().position || cfg_.flip_positions != model_.layout().flip) {
      throw ConfigError("trainer: position/flip disagree with the model's adapter layout", {"position", "flip_positions"});
    }
    if (cfg_.fix_b == (model_.shared().mode() == DownProjection::Trainable)) {
      throw ConfigError("trainer: fix_b disagrees with the shared down-projection mode", {"fix_b"});
    }
  }

  const ClLoraModel& model() const { return model_; }
  ClLoraModel& mutable_model() { return model_; }
  const TrainConfig& config() const { return cfg_; }
  const PrototypeStore& prototypes() const { return store_; }
  const std::vector<EpochLog>& epoch_log() const { return epochs_; }
  const std::vector<StepRecord>& step_log() const { return steps_; }
  int tasks_trained() const { return trained_; }
  int current_task() const { return current_ ? current_->index : 0; }
  const std::optional<TeacherSnapshot>& snapshot() const { return snapshot_; }
  const std::optional<LocalHead>& head() const { return head_; }
  const std::vector<Vector>& previous_block_weights() const { return previous_mu_; }

  bool kd_active() const { return current_ && current_->index > 1 && cfg_.kd; }
  bool orth_active() const { return current_ && current_->index > 1 && cfg_.bw && !previous_mu_.empty(); }

  /// Runs the whole per-task procedure: set up, epochs x batches of steps,
  /// then freeze, prototypes, and head discard.
  std::vector<EpochLog> train_task(const Task& task) {
    begin_task(task);
    Rng shuffle = root_.fork(2000 + static_cast<std::uint64_t>(task.index));
    const std::size_t n = task.train.size();
    const std::size_t bs = static_cast<std::size_t>(cfg_.batch_size);
    std::vector<EpochLog> out;
    for (int epoch = 1; epoch <= cfg_.epochs; ++epoch) {
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), std::size_t{0});
      for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
      EpochLog log{task.index, epoch};
      int steps = 0;
      for (std::size_t begin = 0; begin < n; begin += bs) {
        const std::size_t len = std::min(bs, n - begin);
        const StepRecord rec = step(std::span(order).subspan(begin, len), epoch);
        log.loss_ce += rec.ce;
        log.loss_kd += rec.kd;
        log.loss_orth += rec.orth;
        log.loss_total += rec.total;
        ++steps;
      }
      log.loss_ce /= steps;
      log.loss_kd /= steps;
      log.loss_orth /= steps;
      log.loss_total /= steps;
      epochs_.push_back(log);
      out.push_back(log);
    }
    end_task();
    return out;
  }

  void begin_task(const Task& task) {
    if (current_) throw ProtocolError("begin_task: task " + std::to_string(current_->index) + " is still in progress");
    if (task.index != trained_ + 1) {
      throw ProtocolError("train_task: expected task " + std::to_string(trained_ + 1) + ", got " + std::to_string(task.index));
    }
    if (task.train.empty()) throw DataError("train_task: task " + std::to_string(task.index) + " has no training data");
    for (int c : task.classes)
      if (seen_classes_.contains(c)) throw ProtocolError("train_task: class " + std::to_string(c) + " was already learned");
    current_ = &task;
    snapshot_.reset();
    if (task.index > 1) snapshot_ = TeacherSnapshot::capture(model_.shared());

    Rng rng = root_.fork(1000 + static_cast<std::uint64_t>(task.index));
    model_.tasks().push_back(init_specific(task.index, model_.layout(), rng, cfg_.bw));
    const int d = model_.layout().width;
    const auto classes = static_cast<Eigen::Index>(task.classes.size());
    const std::string owner = "task" + std::to_string(task.index);
    head_ = LocalHead{Parameter(owner + ".head.w", gaussian_matrix(classes, d, 1.0 / std::sqrt(static_cast<double>(d)), rng), ParamTag::Head, true),
                      Parameter(owner + ".head.b", Matrix::Zero(1, classes), ParamTag::Head, true)};
    optimizer_.emplace(cfg_.optimizer, cfg_.learning_rate);

    teacher_cache_.reset();
    if (kd_active() && !model_.layout().flip) teacher_cache_ = teacher_features(image_pointers(task.train));
  }

  void end_task() {
    if (!current_) throw ProtocolError("end_task: no task in progress");
    TaskAdapters& adapters = model_.task(current_->index);
    adapters.adapter.freeze();
    if (adapters.weights) {
      adapters.weights->freeze();
      previous_mu_.push_back(adapters.weights->mu());
    }
    for (auto& [cls, proto] : compute_prototypes(model_, *current_)) store_.add(current_->index, cls, std::move(proto));
    for (int c : current_->classes) seen_classes_.insert(c);
    head_.reset();
    optimizer_.reset();
    teacher_cache_.reset();
    snapshot_.reset();
    ++trained_;
    current_ = nullptr;
  }

  // Every parameter the current step may update.
  std::vector<Parameter*> trainable_parameters() {
    std::vector<Parameter*> out;
    for (auto& s : model_.shared().sites()) {
      if (s.down.trainable) out.push_back(&s.down);
      if (s.up.trainable) out.push_back(&s.up);
    }
    if (current_) {
      TaskAdapters& t = model_.task(current_->index);
      for (auto& s : t.adapter.sites) {
        if (s.down.trainable) out.push_back(&s.down);
        if (s.up.trainable) out.push_back(&s.up);
      }
      if (t.weights && t.weights->rho.trainable) out.push_back(&t.weights->rho);
    }
    if (head_) {
      out.push_back(&head_->weight);
      out.push_back(&head_->bias);
    }
    return out;
  }

  /// Softened teacher distribution for a batch: the current head applied to
  /// the teacher's distillation-block [CLS] features.
  Matrix kd_target(std::span<const std::size_t> batch) const {
    if (!kd_active() || !head_) throw ProtocolError("kd_target: distillation is not active");
    const Task& task = *current_;
    Matrix teacher(static_cast<Eigen::Index>(batch.size()), model_.layout().width);
    if (teacher_cache_) {
      for (std::size_t r = 0; r < batch.size(); ++r) teacher.row(static_cast<Eigen::Index>(r)) = teacher_cache_->row(static_cast<Eigen::Index>(batch[r]));
    } else {
      std::vector<const Image*> images;
      for (std::size_t i : batch) images.push_back(&task.train.at(i));
      teacher = teacher_features(images);
    }
    return kernels::softmax_rows(head_->logits(teacher), cfg_.tau);
  }

  /// Records the three losses for a batch of the current task's training
  /// samples (indices into task.train). `fixed_target` replaces the KD target
  /// that would otherwise be recomputed from the current head.
  Tape::LossVars record_losses(Tape& tape, std::span<const std::size_t> batch, const Matrix* fixed_target = nullptr) const {
    if (!current_ || !head_) throw ProtocolError("record_losses: no task in progress");
    const Task& task = *current_;
    std::vector<const Image*> images;
    std::vector<int> labels;
    for (std::size_t i : batch) {
      images.push_back(&task.train.at(i));
      labels.push_back(task.train_local.at(i));
    }
    const AdapterLayout& layout = model_.layout();
    const TaskAdapters& adapters = model_.task(task.index);
    const ClLoraModel::Route route{&adapters, nullptr, nullptr};
    const Tape::Var x = tape.constant(model_.embed(images));
    const Tape::Var mid = model_.run_blocks(tape, x, 1, layout.distill_block(), route);
    const Tape::Var top = model_.run_blocks(tape, mid, layout.distill_block() + 1, layout.num_blocks, route);

    Tape::LossVars losses;
    losses.ce = tape.cross_entropy(head_->logits(tape, model_.backbone().cls_features(tape, top)), labels);
    if (kd_active()) {
      const Matrix target = fixed_target ? *fixed_target : kd_target(batch);
      const Tape::Var student = head_->logits(tape, model_.backbone().cls_features(tape, mid));
      losses.kd = tape.soft_cross_entropy(student, target, cfg_.tau);
    }
    if (orth_active() && adapters.weights) {
      losses.orth = tape.abs_dot_sum(tape.softplus(tape.leaf(adapters.weights->rho)), previous_mu_);
    }
    return losses;
  }

  // Distillation-block [CLS] features with the previous task's shared
  // up-projections.
  Matrix teacher_features(const std::vector<const Image*>& images) const {
    if (!snapshot_) throw ProtocolError("teacher_features: no snapshot");
    const TaskAdapters* adapters = current_ ? &model_.task(current_->index) : nullptr;
    Matrix out(static_cast<Eigen::Index>(images.size()), model_.layout().width);
    constexpr std::size_t kChunk = 64;
    for (std::size_t begin = 0; begin < images.size(); begin += kChunk) {
      const std::size_t n = std::min(kChunk, images.size() - begin);
      out.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(n)) =
          model_.distill_features(std::span(images).subspan(begin, n), adapters, &*snapshot_);
    }
    return out;
  }

  StepRecord step(std::span<const std::size_t> batch, int epoch = 0) {
    if (!current_) throw ProtocolError("step: no task in progress");
    Tape tape;
    const Tape::LossVars losses = record_losses(tape, batch);
    StepRecord rec{current_->index, epoch};
    rec.ce = tape.value(*losses.ce)(0, 0);
    rec.kd = losses.kd ? tape.value(*losses.kd)(0, 0) : 0.0;
    rec.orth = losses.orth ? tape.value(*losses.orth)(0, 0) : 0.0;
    rec.total = rec.ce + cfg_.lambda_kd * rec.kd + cfg_.lambda_orth * rec.orth;
    const GradientBundle bundle = tape.backward(losses);
    const std::vector<Parameter*> params = trainable_parameters();
    const std::vector<const Parameter*> view(params.begin(), params.end());
    const GradientMap update = total_step_gradient(bundle, cfg_, snapshot_ ? &*snapshot_ : nullptr, view, current_->index);
    optimizer_->step(params, update);
    steps_.push_back(rec);
    return rec;
  }

 private:
  ClLoraModel model_;
  TrainConfig cfg_;
  Rng root_;
  PrototypeStore store_;
  std::vector<EpochLog> epochs_;
  std::vector<StepRecord> steps_;
  std::vector<Vector> previous_mu_;
  std::set<int> seen_classes_;
  int trained_ = 0;

  const Task* current_ = nullptr;
  std::optional<TeacherSnapshot> snapshot_;
  std::optional<LocalHead> head_;
  std::optional<Optimizer> optimizer_;
  std::optional<Matrix> teacher_cache_;
};

}  // namespace cllora
