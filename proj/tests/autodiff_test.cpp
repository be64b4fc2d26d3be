// Copyright 2026 The cllora Authors
// SPDX-License-Identifier: Apache-2.0

#include <array>
#include <functional>
#include <vector>

#include <gtest/gtest.h>

#include "cllora/autodiff.hpp"

namespace cllora {
namespace {

Parameter param(const std::string& id, Eigen::Index rows, Eigen::Index cols, Rng& rng, double std = 1.0, ParamTag tag = ParamTag::Head) {
  return Parameter(id, gaussian_matrix(rows, cols, std, rng), tag, true);
}

double scalar(const Tape& tape, Tape::Var v) { return tape.value(v)(0, 0); }

TEST(ParameterTest, BackboneCannotBeTrainable) {
  EXPECT_THROW(Parameter("w", Matrix::Zero(2, 2), ParamTag::Backbone, true), ParameterError);
  EXPECT_NO_THROW(Parameter("w", Matrix::Zero(2, 2), ParamTag::Backbone, false));
}

TEST(TapeTest, HalfSquaredNormHasGradientEqualToParameter) {
  Rng rng(1);
  Parameter p = param("p", 1, 5, rng);
  Tape tape;
  const auto x = tape.leaf(p);
  const auto loss = tape.scale(tape.matmul_bt(x, x), tape.constant(Matrix::Constant(1, 1, 0.5)));
  const GradientMap g = tape.gradients(loss);
  EXPECT_LE((g.at("p") - p.value).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(TapeTest, UnrelatedParameterGetsZeroGradient) {
  Rng rng(2);
  Parameter p = param("p", 1, 3, rng), q = param("q", 1, 3, rng);
  Tape tape;
  tape.leaf(p);
  const auto y = tape.leaf(q);
  const GradientMap g = tape.gradients(tape.matmul_bt(y, y));
  EXPECT_EQ(g.at("p"), Matrix::Zero(1, 3));
}

TEST(TapeTest, FrozenParameterHasNoEntry) {
  Rng rng(3);
  Parameter p = param("p", 1, 3, rng);
  Parameter frozen("frozen", gaussian_matrix(1, 3, 1.0, rng), ParamTag::SharedDown, false);
  Tape tape;
  const auto loss = tape.matmul_bt(tape.leaf(p), tape.leaf(frozen));
  const GradientMap g = tape.gradients(loss);
  EXPECT_EQ(g.count("frozen"), 0u);
  EXPECT_EQ(g.at("p"), frozen.value);
  EXPECT_EQ(tape.trainable_leaves().size(), 1u);
}

TEST(TapeTest, LeafIsRecordedOncePerParameter) {
  Rng rng(4);
  Parameter p = param("p", 1, 2, rng);
  Tape tape;
  const auto a = tape.leaf(p);
  const auto b = tape.leaf(p);
  EXPECT_EQ(a.index, b.index);
  // d(p p^T)/dp = 2p through the single shared leaf.
  EXPECT_LE((tape.gradients(tape.matmul_bt(a, b)).at("p") - 2.0 * p.value).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(TapeTest, ShapeMismatchesThrow) {
  Tape tape;
  const auto a = tape.constant(Matrix::Zero(2, 3));
  const auto b = tape.constant(Matrix::Zero(3, 2));
  EXPECT_THROW(tape.add(a, b), ShapeError);
  EXPECT_THROW(tape.matmul_bt(a, b), ShapeError);
  EXPECT_THROW(tape.add_row(a, tape.constant(Matrix::Zero(1, 2))), ShapeError);
  EXPECT_THROW(tape.scale(a, b), ShapeError);
  EXPECT_THROW(tape.select_rows(a, 3), ShapeError);
  EXPECT_THROW(tape.cross_entropy(a, {0}), ShapeError);
  EXPECT_THROW(tape.gradients(a), ShapeError);
}

TEST(TapeTest, CrossEntropyLabelOutOfRange) {
  Tape tape;
  const auto logits = tape.constant(Matrix::Zero(2, 3));
  EXPECT_THROW(tape.cross_entropy(logits, {0, 3}), RangeError);
  EXPECT_THROW(tape.cross_entropy(logits, {-1, 0}), RangeError);
}

TEST(TapeTest, NonFiniteValuesAreRejected) {
  Tape tape;
  Matrix bad = Matrix::Zero(1, 2);
  bad(0, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(tape.constant(bad), Error);
}

TEST(TapeTest, ResizedParameterBreaksConsistency) {
  Rng rng(5);
  Parameter p = param("p", 1, 3, rng);
  Tape tape;
  const auto x = tape.leaf(p);
  const auto loss = tape.matmul_bt(x, x);
  p.value = Matrix::Zero(2, 3);
  EXPECT_THROW(tape.gradients(loss), ConsistencyError);
}

TEST(TapeTest, FrozenAfterRecordingBreaksConsistency) {
  Rng rng(6);
  Parameter p = param("p", 1, 3, rng);
  Tape tape;
  const auto x = tape.leaf(p);
  const auto loss = tape.matmul_bt(x, x);
  p.trainable = false;
  EXPECT_THROW(tape.gradients(loss), ConsistencyError);
}

TEST(TapeTest, AbsentLossTermsGiveZeroBundles) {
  Rng rng(7);
  Parameter p = param("p", 2, 3, rng);
  Tape tape;
  const auto x = tape.leaf(p);
  Tape::LossVars losses;
  losses.ce = tape.cross_entropy(x, {0, 2});
  const GradientBundle b = tape.backward(losses);
  EXPECT_NE(b.ce.at("p"), Matrix::Zero(2, 3));
  EXPECT_EQ(b.kd.at("p"), Matrix::Zero(2, 3));
  EXPECT_EQ(b.orth.at("p"), Matrix::Zero(2, 3));
}

// A small graph that touches every tape op and ends in all three loss
// kinds.
struct Playground {
  Parameter w1, b1, w2, head, bias, rho;
  Matrix input, target, frozen, gain, zero_bias;
  std::vector<Vector> previous;

  explicit Playground(std::uint64_t seed) {
    Rng rng(seed);
    w1 = param("w1", 8, 8, rng, 0.4, ParamTag::SpecificUp);
    b1 = param("b1", 1, 8, rng, 0.1, ParamTag::SpecificDown);
    gain = gaussian_matrix(1, 8, 0.3, rng);
    gain.array() += 1.0;
    zero_bias = Matrix::Zero(1, 8);
    w2 = param("w2", 8, 8, rng, 0.4, ParamTag::SharedUp);
    head = param("head", 3, 8, rng, 0.5);
    bias = param("bias", 1, 3, rng, 0.1);
    rho = param("rho", 1, 4, rng, 0.5, ParamTag::BlockWeight);
    input = gaussian_matrix(6, 8, 1.0, rng);  // 2 sequences of 3 tokens
    frozen = gaussian_matrix(8, 8, 0.3, rng);
    target = softmax_temperature(Vector::Constant(3, 0.2), 1.0).transpose().replicate(2, 1);
    target.row(1) << 0.1, 0.7, 0.2;
    previous = {Vector::LinSpaced(4, 0.2, 1.4), Vector::LinSpaced(4, 1.0, -0.5)};
  }

  std::vector<Parameter*> params() { return {&w1, &b1, &w2, &head, &bias, &rho}; }

  template <class Ops>
  std::array<typename Ops::Var, 3> losses(Ops& ops) const {
    using Var = typename Ops::Var;
    const Var x = ops.constant(input);
    Var h = ops.add_row(ops.matmul_bt(x, ops.leaf(w1)), ops.leaf(b1));
    h = ops.layer_norm(h, gain, zero_bias);
    h = ops.axpy(h, 0.5, ops.gelu(ops.linear(h, frozen, zero_bias)));
    const Var mu = ops.softplus(ops.leaf(rho));
    h = ops.scale(h, ops.element(mu, 0, 2));
    const Var q = ops.matmul_bt(h, ops.leaf(w2));
    const Var att = ops.attention(q, h, ops.add(h, q), 3, 2);
    const Var cls = ops.select_rows(att, 3);
    const Var logits = ops.add_row(ops.matmul_bt(cls, ops.leaf(head)), ops.leaf(bias));
    return {ops.cross_entropy(logits, {1, 2}), ops.soft_cross_entropy(logits, target, 2.0), ops.abs_dot_sum(mu, previous)};
  }
};

// ValueOps mirrors the scalar-producing ops the playground uses.
struct ValueLossOps : ValueOps {
  using ValueOps::ValueOps;
  Var cross_entropy(const Matrix& logits, const std::vector<int>& labels) {
    const Matrix logp = kernels::log_softmax_rows(logits);
    double s = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) s -= logp(static_cast<Eigen::Index>(i), labels[i]);
    return Matrix::Constant(1, 1, s / static_cast<double>(labels.size()));
  }
  Var soft_cross_entropy(const Matrix& logits, const Matrix& target, double tau) {
    return Matrix::Constant(1, 1, -target.cwiseProduct(kernels::log_softmax_rows(logits, tau)).sum() / static_cast<double>(logits.rows()));
  }
  Var abs_dot_sum(const Matrix& u, const std::vector<Vector>& others) {
    double s = 0.0;
    for (const auto& o : others) s += std::abs(u.row(0).dot(o.transpose()));
    return Matrix::Constant(1, 1, s);
  }
};

TEST(TapeTest, EveryOpMatchesCentralDifferences) {
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    Playground pg(seed);
    auto params = pg.params();
    for (int term = 0; term < 3; ++term) {
      Tape tape;
      const auto l = pg.losses(tape);
      const GradientMap analytic = tape.gradients(l[static_cast<std::size_t>(term)]);
      const auto loss = [&] {
        Tape t;
        return scalar(t, pg.losses(t)[static_cast<std::size_t>(term)]);
      };
      const FiniteDifferenceReport r = finite_difference_check(loss, params, analytic, 1e-5);
      EXPECT_LE(r.max_relative_error, 1e-6) << "seed " << seed << " term " << term;
      EXPECT_EQ(r.checked_parameters, params.size());
    }
  }
}

TEST(TapeTest, ValueOpsReproduceTapeValuesBitwise) {
  Playground pg(4);
  Tape tape;
  const auto tl = pg.losses(tape);
  ValueLossOps ops;
  const auto vl = pg.losses(ops);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(tape.value(tl[i]), vl[i]) << i;
}

TEST(TapeTest, AttributionIsAdditive) {
  Playground pg(5);
  const double lambda1 = 5.0, lambda2 = 1e-4;
  Tape split;
  const auto l = pg.losses(split);
  const GradientBundle bundle = split.backward({l[0], l[1], l[2]});

  Tape joint;
  const auto m = pg.losses(joint);
  const auto total = joint.axpy(joint.axpy(m[0], lambda1, m[1]), lambda2, m[2]);
  const GradientMap combined = joint.gradients(total);
  for (const auto& [id, g] : combined) {
    const Matrix expected = bundle.ce.at(id) + lambda1 * bundle.kd.at(id) + lambda2 * bundle.orth.at(id);
    EXPECT_LE((g - expected).cwiseAbs().maxCoeff(), 1e-12) << id;
  }
}

TEST(TapeTest, SoftCrossEntropyGradientVanishesAtMatchedDistributions) {
  Matrix logits(1, 3);
  logits << 0.3, -1.2, 2.0;
  Parameter p("logits", logits, ParamTag::Head, true);
  Tape tape;
  const auto loss = tape.soft_cross_entropy(tape.leaf(p), kernels::softmax_rows(logits, 2.0), 2.0);
  EXPECT_LE(tape.gradients(loss).at("logits").cwiseAbs().maxCoeff(), 1e-16);
}

TEST(TapeTest, AttentionOnSingleTokenIsValuePath) {
  Rng rng(9);
  Parameter q = param("q", 1, 4, rng), k = param("k", 1, 4, rng), v = param("v", 1, 4, rng);
  Tape tape;
  const auto out = tape.attention(tape.leaf(q), tape.leaf(k), tape.leaf(v), 1, 1);
  EXPECT_EQ(tape.value(out), v.value);
  // With one key the softmax is constant, so q and k get no gradient.
  const GradientMap g = tape.gradients(tape.matmul_bt(out, tape.constant(Matrix::Ones(1, 4))));
  EXPECT_LE(g.at("q").cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LE(g.at("k").cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(g.at("v"), Matrix::Ones(1, 4));
}

TEST(FiniteDifferenceTest, LinearModelIsExact) {
  Rng rng(10);
  Parameter w = param("w", 1, 6, rng);
  const Matrix x = gaussian_matrix(1, 6, 1.0, rng);
  Tape tape;
  const GradientMap g = tape.gradients(tape.matmul_bt(tape.leaf(w), tape.constant(x)));
  std::vector<Parameter*> ps{&w};
  const auto r = finite_difference_check(
      [&] {
        Tape t;
        return scalar(t, t.matmul_bt(t.leaf(w), t.constant(x)));
      },
      ps, g, 1e-5);
  EXPECT_LE(r.max_relative_error, 1e-10);
  EXPECT_EQ(r.checked_scalars, 6u);
}

TEST(FiniteDifferenceTest, SoftmaxCrossEntropyHead) {
  Rng rng(11);
  Parameter w = param("w", 4, 5, rng, 0.5), b = param("b", 1, 4, rng, 0.1);
  const Matrix x = gaussian_matrix(3, 5, 1.0, rng);
  const std::vector<int> labels{0, 3, 1};
  auto build = [&](Tape& t) { return t.cross_entropy(t.add_row(t.matmul_bt(t.constant(x), t.leaf(w)), t.leaf(b)), labels); };
  Tape tape;
  const GradientMap g = tape.gradients(build(tape));
  std::vector<Parameter*> ps{&w, &b};
  const auto r = finite_difference_check(
      [&] {
        Tape t;
        return scalar(t, build(t));
      },
      ps, g, 1e-5);
  EXPECT_LE(r.max_relative_error, 1e-6);
}

TEST(FiniteDifferenceTest, FrozenParametersAreSkipped) {
  Rng rng(12);
  Parameter w = param("w", 1, 3, rng);
  Parameter frozen("frozen", gaussian_matrix(1, 3, 1.0, rng), ParamTag::Backbone, false);
  Tape tape;
  const GradientMap g = tape.gradients(tape.matmul_bt(tape.leaf(w), tape.leaf(frozen)));
  std::vector<Parameter*> ps{&w, &frozen};
  const auto r = finite_difference_check(
      [&] {
        Tape t;
        return scalar(t, t.matmul_bt(t.leaf(w), t.leaf(frozen)));
      },
      ps, g, 1e-5);
  EXPECT_EQ(r.checked_parameters, 1u);
  EXPECT_EQ(r.skipped_parameters, 1u);
  EXPECT_EQ(r.checked_scalars, 3u);
  EXPECT_EQ(r.per_parameter.count("frozen"), 0u);
}

TEST(FiniteDifferenceTest, NondeterministicClosureIsDetected) {
  Rng rng(13);
  Parameter w = param("w", 1, 2, rng);
  std::vector<Parameter*> ps{&w};
  int calls = 0;
  EXPECT_THROW(finite_difference_check([&] { return static_cast<double>(++calls); }, ps, {{"w", Matrix::Zero(1, 2)}}, 1e-5),
               DeterminismError);
}

TEST(FiniteDifferenceTest, RejectsBadInputs) {
  Rng rng(14);
  Parameter w = param("w", 1, 2, rng);
  std::vector<Parameter*> ps{&w};
  const auto constant = [] { return 1.0; };
  EXPECT_THROW(finite_difference_check(constant, ps, {}, 1e-5), ConsistencyError);
  EXPECT_THROW(finite_difference_check(constant, ps, {{"w", Matrix::Zero(2, 1)}}, 1e-5), ShapeError);
  EXPECT_THROW(finite_difference_check(constant, ps, {{"w", Matrix::Zero(1, 2)}}, 0.0), ParameterError);
}

TEST(FiniteDifferenceTest, RelativeErrorFloor) {
  EXPECT_DOUBLE_EQ(relative_error(1.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 1e-10), 1e-10 / 1e-8);
}

}  // namespace
}  // namespace cllora
