// Copyright 2026 The cllora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cllora/kernels.hpp"
#include "cllora/numerics.hpp"

namespace cllora {

enum class ParamTag { SharedUp, SharedDown, SpecificUp, SpecificDown, BlockWeight, Head, Backbone };

inline const char* to_string(ParamTag tag) {
  switch (tag) {
    case ParamTag::SharedUp: return "shared-up";
    case ParamTag::SharedDown: return "shared-down";
    case ParamTag::SpecificUp: return "specific-up";
    case ParamTag::SpecificDown: return "specific-down";
    case ParamTag::BlockWeight: return "block-weight";
    case ParamTag::Head: return "head";
    case ParamTag::Backbone: return "backbone";
  }
  return "unknown";
}

struct Parameter {
  std::string id;
  Matrix value;
  ParamTag tag = ParamTag::Backbone;
  bool trainable = false;

  Parameter() = default;
  Parameter(std::string id_, Matrix value_, ParamTag tag_, bool trainable_)
      : id(std::move(id_)), value(std::move(value_)), tag(tag_), trainable(trainable_) {
    if (trainable && tag == ParamTag::Backbone) throw ParameterError("backbone parameter '" + id + "' cannot be trainable");
  }
};

enum class LossTerm { Ce = 0, Kd = 1, Orth = 2 };

using GradientMap = std::map<std::string, Matrix>;

/// Per-loss-term gradients for every trainable parameter seen by a tape.
struct GradientBundle {
  GradientMap ce, kd, orth;

  GradientMap& term(LossTerm t) { return t == LossTerm::Ce ? ce : t == LossTerm::Kd ? kd : orth; }
  const GradientMap& term(LossTerm t) const { return t == LossTerm::Ce ? ce : t == LossTerm::Kd ? kd : orth; }
};

/// Recorded computation over matrices with reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so a reverse sweep over indices is
/// a valid topological order. Frozen weights enter ops as plain matrices and
/// never become nodes.
class Tape {
 public:
  struct Var {
    std::size_t index = 0;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const Matrix& value(Var v) const { return nodes_.at(v.index).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.index).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Matrix m) { return push(std::move(m), false, nullptr); }

  // Trainable parameters become gradient leaves; one leaf per parameter.
  Var leaf(const Parameter& p) {
    if (!p.trainable) return constant(p.value);
    if (auto it = leaves_.find(&p); it != leaves_.end()) return it->second;
    Var v = push(p.value, true, nullptr);
    nodes_.back().param = &p;
    leaves_.emplace(&p, v);
    leaf_order_.push_back(&p);
    return v;
  }

  // x * W^T + b with frozen W, b.
  Var linear(Var x, const Matrix& weight, const Matrix& bias) {
    if (value(x).cols() != weight.cols()) throw ShapeError("linear: input " + shape_of(value(x)) + " vs weight " + shape_of(weight));
    Matrix out = cllora::matmul_bt(value(x), weight);
    if (bias.size() > 0) out.rowwise() += bias.row(0);
    return unary(x, std::move(out), [&weight](const Matrix& g) { return Matrix(g * weight); });
  }

  // a * b^T
  Var matmul_bt(Var a, Var b) {
    Matrix out = cllora::matmul_bt(value(a), value(b));
    return binary(a, b, std::move(out), [this, a, b](const Matrix& g, Matrix* ga, Matrix* gb) {
      if (ga) *ga = g * value(b);
      if (gb) *gb = g.transpose() * value(a);
    });
  }

  Var add(Var a, Var b) {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
      throw ShapeError("add: " + shape_of(value(a)) + " vs " + shape_of(value(b)));
    }
    Matrix out = value(a) + value(b);
    return binary(a, b, std::move(out), [](const Matrix& g, Matrix* ga, Matrix* gb) {
      if (ga) *ga = g;
      if (gb) *gb = g;
    });
  }

  // a + alpha * b
  Var axpy(Var a, double alpha, Var b) {
    Matrix out = value(a) + alpha * value(b);
    return binary(a, b, std::move(out), [alpha](const Matrix& g, Matrix* ga, Matrix* gb) {
      if (ga) *ga = g;
      if (gb) *gb = alpha * g;
    });
  }

  // x + b broadcast over rows, b is 1 x cols.
  Var add_row(Var x, Var b) {
    if (value(b).rows() != 1 || value(b).cols() != value(x).cols()) throw ShapeError("add_row: " + shape_of(value(b)) + " vs " + shape_of(value(x)));
    Matrix out = value(x);
    out.rowwise() += value(b).row(0);
    return binary(x, b, std::move(out), [](const Matrix& g, Matrix* gx, Matrix* gb) {
      if (gx) *gx = g;
      if (gb) *gb = g.colwise().sum();
    });
  }

  // x scaled by the 1x1 entry of s.
  Var scale(Var x, Var s) {
    if (value(s).size() != 1) throw ShapeError("scale: scalar operand has shape " + shape_of(value(s)));
    Matrix out = value(s)(0, 0) * value(x);
    return binary(x, s, std::move(out), [this, x, s](const Matrix& g, Matrix* gx, Matrix* gs) {
      if (gx) *gx = value(s)(0, 0) * g;
      if (gs) *gs = Matrix::Constant(1, 1, g.cwiseProduct(value(x)).sum());
    });
  }

  // 1x1 matrix holding entry (row, col) of x.
  Var element(Var x, Eigen::Index row, Eigen::Index col) {
    Matrix out = Matrix::Constant(1, 1, value(x)(row, col));
    const auto rows = value(x).rows();
    const auto cols = value(x).cols();
    return unary(x, std::move(out), [rows, cols, row, col](const Matrix& g) {
      Matrix gx = Matrix::Zero(rows, cols);
      gx(row, col) = g(0, 0);
      return gx;
    });
  }

  Var layer_norm(Var x, const Matrix& gain, const Matrix& bias) {
    kernels::LayerNormCache cache;
    Matrix out = kernels::layer_norm(value(x), gain, bias, &cache);
    return unary(x, std::move(out), [&gain, cache = std::move(cache)](const Matrix& g) {
      return kernels::layer_norm_backward(g, gain, cache);
    });
  }

  Var gelu(Var x) {
    Matrix out = kernels::gelu(value(x));
    return unary(x, std::move(out), [this, x](const Matrix& g) {
      return Matrix(g.cwiseProduct(value(x).unaryExpr([](double v) { return kernels::gelu_derivative(v); })));
    });
  }

  Var softplus(Var x) {
    Matrix out = value(x).unaryExpr([](double v) { return kernels::softplus(v); });
    return unary(x, std::move(out), [this, x](const Matrix& g) {
      return Matrix(g.cwiseProduct(value(x).unaryExpr([](double v) { return kernels::sigmoid(v); })));
    });
  }

  Var attention(Var q, Var k, Var v, int seq_len, int heads) {
    kernels::AttentionCache cache;
    Matrix out = kernels::attention(value(q), value(k), value(v), seq_len, heads, &cache);
    const Var out_var = push(std::move(out), any_grad({q, k, v}), nullptr);
    if (requires_grad(out_var)) {
      nodes_.back().backprop = [this, q, k, v, seq_len, heads, cache = std::move(cache)](const Matrix& g) {
        auto grads = kernels::attention_backward(g, value(q), value(k), value(v), seq_len, heads, cache);
        accumulate(q, std::move(grads.q));
        accumulate(k, std::move(grads.k));
        accumulate(v, std::move(grads.v));
      };
    }
    return out_var;
  }

  // Rows 0, stride, 2*stride, ... (the [CLS] rows of stacked sequences).
  Var select_rows(Var x, int stride) {
    const Matrix& xv = value(x);
    if (stride <= 0 || xv.rows() % stride != 0) throw ShapeError("select_rows: stride does not divide row count");
    const Eigen::Index n = xv.rows() / stride;
    Matrix out(n, xv.cols());
    for (Eigen::Index i = 0; i < n; ++i) out.row(i) = xv.row(i * stride);
    const auto rows = xv.rows();
    return unary(x, std::move(out), [rows, stride](const Matrix& g) {
      Matrix gx = Matrix::Zero(rows, g.cols());
      for (Eigen::Index i = 0; i < g.rows(); ++i) gx.row(i * stride) = g.row(i);
      return gx;
    });
  }

  // Mean over rows of -log softmax(logits)[label].
  Var cross_entropy(Var logits, const std::vector<int>& labels) {
    const Matrix& lv = value(logits);
    if (static_cast<Eigen::Index>(labels.size()) != lv.rows()) throw ShapeError("cross_entropy: label count does not match batch");
    const Matrix logp = kernels::log_softmax_rows(lv);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < lv.rows(); ++i) {
      const int y = labels[static_cast<std::size_t>(i)];
      if (y < 0 || y >= lv.cols()) throw RangeError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(lv.cols()) + ")");
      loss -= logp(i, y);
    }
    const double batch = static_cast<double>(lv.rows());
    Matrix out = Matrix::Constant(1, 1, loss / batch);
    return unary(logits, std::move(out), [logp, labels, batch](const Matrix& g) {
      Matrix gl = logp.array().exp();
      for (Eigen::Index i = 0; i < gl.rows(); ++i) gl(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
      return Matrix(gl * (g(0, 0) / batch));
    });
  }

  // Mean over rows of -sum_i target_i * log softmax(logits / tau)_i. The
  // target is a constant.
  Var soft_cross_entropy(Var logits, const Matrix& target, double tau) {
    const Matrix& lv = value(logits);
    if (target.rows() != lv.rows() || target.cols() != lv.cols()) throw ShapeError("soft_cross_entropy: target " + shape_of(target) + " vs logits " + shape_of(lv));
    if (!(tau > 0.0)) throw ParameterError("soft_cross_entropy: tau must be positive");
    const Matrix logq = kernels::log_softmax_rows(lv, tau);
    const double batch = static_cast<double>(lv.rows());
    Matrix out = Matrix::Constant(1, 1, -target.cwiseProduct(logq).sum() / batch);
    return unary(logits, std::move(out), [logq, target, tau, batch](const Matrix& g) {
      Matrix q = logq.array().exp();
      return Matrix((q - target) * (g(0, 0) / (batch * tau)));
    });
  }

  // sum_i |<u, others_i>| for a 1 x n row u; the others are constants.
  Var abs_dot_sum(Var u, const std::vector<Vector>& others) {
    const Matrix& uv = value(u);
    if (uv.rows() != 1) throw ShapeError("abs_dot_sum: expected a row vector, got " + shape_of(uv));
    double total = 0.0;
    Eigen::RowVectorXd grad = Eigen::RowVectorXd::Zero(uv.cols());
    for (const auto& o : others) {
      if (o.size() != uv.cols()) throw ShapeError("abs_dot_sum: length " + std::to_string(o.size()) + " vs " + std::to_string(uv.cols()));
      const double dot = uv.row(0).dot(o.transpose());
      total += std::abs(dot);
      const double sign = dot > 0.0 ? 1.0 : (dot < 0.0 ? -1.0 : 0.0);
      grad += sign * o.transpose();
    }
    Matrix out = Matrix::Constant(1, 1, total);
    return unary(u, std::move(out), [grad](const Matrix& g) { return Matrix(g(0, 0) * grad); });
  }

  /// Reverse sweep from a scalar root; returns d root / d p for every
  /// trainable leaf (zeros where no path exists).
  GradientMap gradients(Var root) {
    if (value(root).size() != 1) throw ShapeError("gradients: root is not a scalar " + shape_of(value(root)));
    check_consistency();
    grads_.assign(nodes_.size(), Matrix());
    grads_[root.index] = Matrix::Ones(1, 1);
    for (std::size_t i = root.index + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (grads_[i].size() == 0 || !n.requires_grad || !n.backprop) continue;
      n.backprop(grads_[i]);
    }
    GradientMap out;
    for (const Parameter* p : leaf_order_) {
      const std::size_t idx = leaves_.at(p).index;
      out.emplace(p->id, grads_[idx].size() ? grads_[idx] : Matrix::Zero(p->value.rows(), p->value.cols()));
    }
    grads_.clear();
    return out;
  }

  struct LossVars {
    std::optional<Var> ce, kd, orth;
  };

  /// One reverse sweep per loss term over the shared recording. Absent terms
  /// yield zero gradients.
  GradientBundle backward(const LossVars& losses) {
    GradientBundle bundle;
    const std::optional<Var>* terms[3] = {&losses.ce, &losses.kd, &losses.orth};
    for (int t = 0; t < 3; ++t) {
      GradientMap& dst = bundle.term(static_cast<LossTerm>(t));
      if (terms[t]->has_value()) {
        dst = gradients(**terms[t]);
      } else {
        for (const Parameter* p : leaf_order_) dst.emplace(p->id, Matrix::Zero(p->value.rows(), p->value.cols()));
      }
    }
    return bundle;
  }

  const std::vector<const Parameter*>& trainable_leaves() const { return leaf_order_; }

 private:
  struct Node {
    Matrix value;
    bool requires_grad = false;
    const Parameter* param = nullptr;
    std::function<void(const Matrix&)> backprop;
  };

  Var push(Matrix value, bool requires_grad, std::function<void(const Matrix&)> backprop) {
    if (!all_finite(value)) throw Error("tape: non-finite value produced at node " + std::to_string(nodes_.size()));
    nodes_.push_back(Node{std::move(value), requires_grad, nullptr, std::move(backprop)});
    return Var{nodes_.size() - 1};
  }

  bool any_grad(std::initializer_list<Var> vars) const {
    for (Var v : vars)
      if (requires_grad(v)) return true;
    return false;
  }

  template <class Fn>
  Var unary(Var x, Matrix out, Fn fn) {
    const Var result = push(std::move(out), requires_grad(x), nullptr);
    if (requires_grad(x)) nodes_.back().backprop = [this, x, fn = std::move(fn)](const Matrix& g) { accumulate(x, fn(g)); };
    return result;
  }

  template <class Fn>
  Var binary(Var a, Var b, Matrix out, Fn fn) {
    const bool ra = requires_grad(a), rb = requires_grad(b);
    const Var result = push(std::move(out), ra || rb, nullptr);
    if (ra || rb) {
      nodes_.back().backprop = [this, a, b, ra, rb, fn = std::move(fn)](const Matrix& g) {
        Matrix ga, gb;
        fn(g, ra ? &ga : nullptr, rb ? &gb : nullptr);
        if (ra) accumulate(a, std::move(ga));
        if (rb) accumulate(b, std::move(gb));
      };
    }
    return result;
  }

  void accumulate(Var v, Matrix g) {
    Matrix& slot = grads_[v.index];
    if (slot.size() == 0) {
      slot = std::move(g);
    } else {
      slot += g;
    }
  }

  void check_consistency() const {
    for (const Parameter* p : leaf_order_) {
      const Matrix& recorded = nodes_[leaves_.at(p).index].value;
      if (recorded.rows() != p->value.rows() || recorded.cols() != p->value.cols() || !p->trainable) {
        throw ConsistencyError("tape: parameter '" + p->id + "' no longer matches its recorded leaf");
      }
    }
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, Var> leaves_;
  std::vector<const Parameter*> leaf_order_;
  std::vector<Matrix> grads_;
};

/// Eager evaluator with the same op surface as Tape, for inference. Each op
/// calls the same kernel as its Tape counterpart.
class ValueOps {
 public:
  using Var = Matrix;

  const Matrix& value(const Matrix& v) const { return v; }
  Var constant(Matrix m) { return m; }
  Var leaf(const Parameter& p) { return p.value; }

  Var linear(const Matrix& x, const Matrix& weight, const Matrix& bias) {
    if (x.cols() != weight.cols()) throw ShapeError("linear: input " + shape_of(x) + " vs weight " + shape_of(weight));
    Matrix out = cllora::matmul_bt(x, weight);
    if (bias.size() > 0) out.rowwise() += bias.row(0);
    return out;
  }
  Var matmul_bt(const Matrix& a, const Matrix& b) { return cllora::matmul_bt(a, b); }
  Var add(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("add: " + shape_of(a) + " vs " + shape_of(b));
    return a + b;
  }
  Var axpy(const Matrix& a, double alpha, const Matrix& b) { return a + alpha * b; }
  Var add_row(const Matrix& x, const Matrix& b) {
    if (b.rows() != 1 || b.cols() != x.cols()) throw ShapeError("add_row: " + shape_of(b) + " vs " + shape_of(x));
    Matrix out = x;
    out.rowwise() += b.row(0);
    return out;
  }
  Var scale(const Matrix& x, const Matrix& s) {
    if (s.size() != 1) throw ShapeError("scale: scalar operand has shape " + shape_of(s));
    return s(0, 0) * x;
  }
  Var element(const Matrix& x, Eigen::Index row, Eigen::Index col) { return Matrix::Constant(1, 1, x(row, col)); }
  Var layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias) { return kernels::layer_norm(x, gain, bias); }
  Var gelu(const Matrix& x) { return kernels::gelu(x); }
  Var softplus(const Matrix& x) { return x.unaryExpr([](double v) { return kernels::softplus(v); }); }
  Var attention(const Matrix& q, const Matrix& k, const Matrix& v, int seq_len, int heads) {
    return kernels::attention(q, k, v, seq_len, heads);
  }
  Var select_rows(const Matrix& x, int stride) {
    if (stride <= 0 || x.rows() % stride != 0) throw ShapeError("select_rows: stride does not divide row count");
    Matrix out(x.rows() / stride, x.cols());
    for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) = x.row(i * stride);
    return out;
  }
};

struct FiniteDifferenceReport {
  double max_relative_error = 0.0;
  std::size_t checked_scalars = 0;
  std::size_t checked_parameters = 0;
  std::size_t skipped_parameters = 0;
  std::map<std::string, double> per_parameter;  // id -> max relative error
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

/// Compares analytic gradients against central differences
/// (f(p + h) - f(p - h)) / 2h for every scalar of every trainable parameter.
/// Frozen parameters are skipped. `loss` must rebuild its computation from the
/// current parameter values on each call.
inline FiniteDifferenceReport finite_difference_check(const std::function<double()>& loss,
                                                      std::span<Parameter* const> params,
                                                      const GradientMap& analytic, double step) {
  if (!(step > 0.0)) throw ParameterError("finite_difference_check: step must be positive");
  const double first = loss();
  const double second = loss();
  if (std::memcmp(&first, &second, sizeof(double)) != 0) {
    throw DeterminismError("finite_difference_check: two identical evaluations differ");
  }
  FiniteDifferenceReport report;
  for (Parameter* p : params) {
    if (!p->trainable) {
      ++report.skipped_parameters;
      continue;
    }
    const auto it = analytic.find(p->id);
    if (it == analytic.end()) throw ConsistencyError("finite_difference_check: no analytic gradient for '" + p->id + "'");
    const Matrix& grad = it->second;
    if (grad.rows() != p->value.rows() || grad.cols() != p->value.cols()) {
      throw ShapeError("finite_difference_check: gradient shape " + shape_of(grad) + " vs parameter " + shape_of(p->value));
    }
    double worst = 0.0;
    for (Eigen::Index i = 0; i < p->value.rows(); ++i) {
      for (Eigen::Index j = 0; j < p->value.cols(); ++j) {
        const double saved = p->value(i, j);
        p->value(i, j) = saved + step;
        const double plus = loss();
        p->value(i, j) = saved - step;
        const double minus = loss();
        p->value(i, j) = saved;
        const double numeric = (plus - minus) / (2.0 * step);
        worst = std::max(worst, relative_error(grad(i, j), numeric));
        ++report.checked_scalars;
      }
    }
    report.per_parameter[p->id] = worst;
    report.max_relative_error = std::max(report.max_relative_error, worst);
    ++report.checked_parameters;
  }
  return report;
}

}  // namespace cllora
