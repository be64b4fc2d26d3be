// Copyright 2026 The cllora Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstring>
#include <vector>

#include <gtest/gtest.h>

#include "cllora/classifier.hpp"
#include "test_support.hpp"

namespace cllora {
namespace {

using testing::busy_model;
using testing::tiny_backbone;

Vector unit(int n, int i) {
  Vector v = Vector::Zero(n);
  v(i) = 1.0;
  return v;
}

bool bit_equal(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

// One random prototype per (task, class) with classes 2t-2 and 2t-1.
PrototypeStore random_store(int tasks, int width, Rng& rng) {
  PrototypeStore store;
  for (int t = 1; t <= tasks; ++t)
    for (int c : {2 * t - 2, 2 * t - 1}) store.add(t, c, gaussian_matrix(width, 1, 1.0, rng).col(0));
  return store;
}

TEST(PassCountTest, FormulaExamples) {
  EXPECT_EQ(adapter_pass_count(0, 12, 20), 240u);
  EXPECT_EQ(adapter_pass_count(12, 12, 20), 12u);
  EXPECT_EQ(adapter_pass_count(6, 12, 20), 126u);
  EXPECT_THROW(adapter_pass_count(13, 12, 20), RangeError);
  EXPECT_THROW(adapter_pass_count(-1, 12, 20), RangeError);
  EXPECT_THROW(adapter_pass_count(6, 12, 0), RangeError);
}

TEST(PassCountTest, InstrumentedCountMatchesFormulaForEveryTaskCount) {
  const BackboneConfig cfg = tiny_backbone(4);
  for (int l = 0; l <= 4; ++l) {
    ClLoraModel model = busy_model(cfg, l, 2, 5, 100 + static_cast<std::uint64_t>(l));
    Rng rng(l);
    const auto images = testing::random_images(cfg, 3, rng);
    const auto ptrs = image_pointers(images);
    for (int t = 1; t <= 5; ++t) {
      const PrototypeStore store = random_store(t, cfg.width, rng);
      for (const Prediction& p : predict_batch(model, ptrs, store))
        EXPECT_EQ(p.counter.adapter_block_applications, adapter_pass_count(l, 4, t)) << "l=" << l << " t=" << t;
    }
  }
}

TEST(PassCountTest, TwelveBlocksTwentyTasks) {
  BackboneConfig cfg = tiny_backbone(12);
  cfg.width = 8;
  cfg.image_side = 4;
  cfg.patch_side = 2;
  Rng rng(1);
  const Image img = testing::random_image(cfg, rng);
  for (const auto& [l, expected] : std::vector<std::pair<int, std::size_t>>{{6, 126}, {0, 240}}) {
    const ClLoraModel model = busy_model(cfg, l, 2, 20, 7);
    EXPECT_EQ(predict(model, img, random_store(20, cfg.width, rng)).counter.adapter_block_applications, expected);
  }
}

TEST(PredictTest, SharedPrefixMatchesNaiveForwardBitwise) {
  const BackboneConfig cfg = tiny_backbone(4, "qkv");
  for (const auto& [l, flip] : std::vector<std::pair<int, bool>>{{0, false}, {2, false}, {4, false}, {1, true}, {3, true}}) {
    const ClLoraModel model = busy_model(cfg, l, 3, 3, 40, flip);
    Rng rng(41);
    const PrototypeStore store = random_store(3, cfg.width, rng);
    const auto images = testing::random_images(cfg, 25, rng);
    const auto ptrs = image_pointers(images);
    const auto fast = predict_batch(model, ptrs, store);
    const auto naive = predict_batch_naive(model, ptrs, store);
    for (std::size_t i = 0; i < fast.size(); ++i) {
      ASSERT_EQ(fast[i].scores.size(), naive[i].scores.size());
      for (std::size_t j = 0; j < fast[i].scores.size(); ++j) ASSERT_TRUE(bit_equal(fast[i].scores[j].score, naive[i].scores[j].score));
      EXPECT_EQ(fast[i].cls, naive[i].cls);
    }
  }
}

TEST(PredictTest, BatchOfOneMatchesBatchedPrediction) {
  const BackboneConfig cfg = tiny_backbone(2);
  const ClLoraModel model = busy_model(cfg, 1, 2, 2, 50);
  Rng rng(51);
  const PrototypeStore store = random_store(2, cfg.width, rng);
  const auto images = testing::random_images(cfg, 4, rng);
  const auto batch = predict_batch(model, image_pointers(images), store);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Prediction one = predict(model, images[i], store);
    for (std::size_t j = 0; j < one.scores.size(); ++j) EXPECT_NEAR(one.scores[j].score, batch[i].scores[j].score, 1e-12);
  }
}

TEST(PredictTest, SingleSeenClassAlwaysWins) {
  const BackboneConfig cfg = tiny_backbone(2);
  const ClLoraModel model = busy_model(cfg, 1, 2, 1, 60);
  Rng rng(61);
  PrototypeStore store;
  store.add(1, 7, gaussian_matrix(cfg.width, 1, 1.0, rng).col(0));
  for (const Image& img : testing::random_images(cfg, 10, rng)) EXPECT_EQ(predict(model, img, store).cls, 7);
}

TEST(PredictTest, FeatureEqualToAPrototypeScoresOne) {
  const BackboneConfig cfg = tiny_backbone(2);
  const ClLoraModel model = busy_model(cfg, 1, 2, 1, 70);
  Rng rng(71);
  const Image img = testing::random_image(cfg, rng);
  const Image* one[] = {&img};
  const Vector f = model.features(one, &model.task(1)).row(0).transpose();
  // Complete f to a mutually orthogonal set.
  Matrix basis = gaussian_matrix(cfg.width, 3, 1.0, rng);
  basis.col(0) = f;
  Eigen::HouseholderQR<Matrix> qr(basis);
  const Matrix q = qr.householderQ() * Matrix::Identity(cfg.width, 3);
  PrototypeStore store;
  store.add(1, 0, q.col(1));
  store.add(1, 1, f);
  store.add(1, 2, q.col(2));
  const Prediction p = predict(model, img, store);
  EXPECT_EQ(p.cls, 1);
  EXPECT_NEAR(p.score, 1.0, 1e-12);
  EXPECT_NEAR(p.scores[0].score, 0.0, 1e-12);
}

TEST(PredictTest, PrototypeScaleDoesNotChangePredictions) {
  const BackboneConfig cfg = tiny_backbone(2);
  const ClLoraModel model = busy_model(cfg, 1, 2, 2, 80);
  Rng rng(81);
  const PrototypeStore store = random_store(2, cfg.width, rng);
  PrototypeStore scaled;
  double k = 0.25;
  for (const auto& [key, proto] : store.entries()) scaled.add(key.task, key.cls, (k *= 3.0) * proto);
  const auto images = testing::random_images(cfg, 20, rng);
  const auto a = predict_batch(model, image_pointers(images), store);
  const auto b = predict_batch(model, image_pointers(images), scaled);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].cls, b[i].cls);
    EXPECT_NEAR(a[i].score, b[i].score, 1e-12);
  }
}

TEST(PredictTest, TiesGoToTheLowestTaskThenClass) {
  const BackboneConfig cfg = tiny_backbone(2);
  const ClLoraModel model = busy_model(cfg, 2, 2, 2, 90);  // fully shared: features identical across tasks
  Rng rng(91);
  const Vector proto = gaussian_matrix(cfg.width, 1, 1.0, rng).col(0);
  PrototypeStore store;
  store.add(2, 0, proto);
  store.add(1, 5, proto);
  store.add(1, 3, proto);
  const Prediction p = predict(model, testing::random_image(cfg, rng), store);
  EXPECT_EQ(p.task, 1);
  EXPECT_EQ(p.cls, 3);
}

TEST(PredictTest, ZeroPrototypeScoresMinusOne) {
  EXPECT_EQ(cosine_score(Vector::Zero(4), unit(4, 1)), -1.0);
  EXPECT_EQ(cosine_score(unit(4, 1), Vector::Zero(4)), -1.0);
  EXPECT_EQ(cosine_score(unit(4, 1), -unit(4, 1)), -1.0);

  const BackboneConfig cfg = tiny_backbone(2);
  const ClLoraModel model = busy_model(cfg, 1, 2, 1, 95);
  Rng rng(96);
  PrototypeStore store;
  store.add(1, 0, Vector::Zero(cfg.width));
  store.add(1, 1, gaussian_matrix(cfg.width, 1, 1.0, rng).col(0));
  const Prediction p = predict(model, testing::random_image(cfg, rng), store);
  EXPECT_EQ(p.scores[0].score, -1.0);
  EXPECT_EQ(p.cls, p.scores[1].score > -1.0 ? 1 : 0);
}

TEST(PredictTest, EmptyStoreIsAProtocolError) {
  const BackboneConfig cfg = tiny_backbone(2);
  const ClLoraModel model = busy_model(cfg, 1, 2, 1, 97);
  Rng rng(98);
  const Image img = testing::random_image(cfg, rng);
  EXPECT_THROW(predict(model, img, PrototypeStore{}), ProtocolError);
  const Image* one[] = {&img};
  EXPECT_THROW(predict_batch_naive(model, one, PrototypeStore{}), ProtocolError);
}

TEST(PredictTest, UnknownTaskInStoreIsMissingAdapter) {
  const BackboneConfig cfg = tiny_backbone(2);
  const ClLoraModel model = busy_model(cfg, 1, 2, 1, 99);
  Rng rng(100);
  PrototypeStore store;
  store.add(4, 0, unit(cfg.width, 0));
  EXPECT_THROW(predict(model, testing::random_image(cfg, rng), store), MissingAdapterError);
}

TEST(PrototypeStoreTest, AppendOnlyAndJson) {
  PrototypeStore store;
  store.add(1, 0, unit(2, 0));
  store.add(2, 3, unit(2, 1));
  EXPECT_THROW(store.add(1, 0, unit(2, 1)), ProtocolError);
  EXPECT_EQ(store.tasks(), (std::vector<int>{1, 2}));
  const nlohmann::json j = store.to_json();
  EXPECT_EQ(j.at("1.0"), nlohmann::json::array({1.0, 0.0}));
  EXPECT_EQ(j.at("2.3"), nlohmann::json::array({0.0, 1.0}));
  EXPECT_EQ(j.size(), 2u);
}

Task task_from(const std::vector<Image>& images, const std::vector<int>& labels, std::vector<int> classes) {
  Task t;
  t.index = 1;
  t.classes = std::move(classes);
  t.train = images;
  t.train_global = labels;
  for (int g : labels) t.train_local.push_back(t.local_label(g));
  return t;
}

TEST(ComputePrototypesTest, OneSamplePerClassIsThatFeature) {
  const BackboneConfig cfg = tiny_backbone(2);
  const ClLoraModel model = busy_model(cfg, 1, 2, 1, 110);
  Rng rng(111);
  const auto images = testing::random_images(cfg, 3, rng);
  const auto protos = compute_prototypes(model, task_from(images, {4, 2, 9}, {2, 4, 9}));
  const Matrix feats = model.features(image_pointers(images), &model.task(1));
  ASSERT_EQ(protos.size(), 3u);
  EXPECT_EQ(protos[0].first, 2);
  EXPECT_EQ(protos[0].second, Vector(feats.row(1).transpose()));
  EXPECT_EQ(protos[1].second, Vector(feats.row(0).transpose()));
  EXPECT_EQ(protos[2].second, Vector(feats.row(2).transpose()));
}

TEST(ComputePrototypesTest, DuplicatingSamplesKeepsTheMean) {
  const BackboneConfig cfg = tiny_backbone(2);
  const ClLoraModel model = busy_model(cfg, 1, 2, 1, 120);
  Rng rng(121);
  const auto images = testing::random_images(cfg, 6, rng);
  const std::vector<int> labels = {0, 1, 0, 1, 1, 0};
  auto doubled = images;
  doubled.insert(doubled.end(), images.begin(), images.end());
  auto doubled_labels = labels;
  doubled_labels.insert(doubled_labels.end(), labels.begin(), labels.end());
  const auto a = compute_prototypes(model, task_from(images, labels, {0, 1}));
  const auto b = compute_prototypes(model, task_from(doubled, doubled_labels, {0, 1}));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_LE((a[i].second - b[i].second).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ComputePrototypesTest, ChunkingDoesNotChangeTheMean) {
  const BackboneConfig cfg = tiny_backbone(2);
  const ClLoraModel model = busy_model(cfg, 1, 2, 1, 125);
  Rng rng(126);
  const auto images = testing::random_images(cfg, 7, rng);
  const Task t = task_from(images, {0, 0, 1, 1, 0, 1, 0}, {0, 1});
  const auto a = compute_prototypes(model, t, 64);
  const auto b = compute_prototypes(model, t, 2);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_LE((a[i].second - b[i].second).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ComputePrototypesTest, ClassWithoutSamplesIsADataError) {
  const BackboneConfig cfg = tiny_backbone(2);
  const ClLoraModel model = busy_model(cfg, 1, 2, 1, 130);
  Rng rng(131);
  const auto images = testing::random_images(cfg, 2, rng);
  EXPECT_THROW(compute_prototypes(model, task_from(images, {0, 0}, {0, 1})), DataError);
}

TEST(EvaluateTest, CountsCorrectAndRecordsPassCount) {
  const BackboneConfig cfg = tiny_backbone(2);
  const ClLoraModel model = busy_model(cfg, 1, 2, 2, 140);
  Rng rng(141);
  const auto images = testing::random_images(cfg, 9, rng);
  const auto ptrs = image_pointers(images);
  const PrototypeStore store = random_store(2, cfg.width, rng);
  std::vector<int> labels;
  for (const Prediction& p : predict_batch(model, ptrs, store)) labels.push_back(p.cls);
  labels[3] = 99;
  const Evaluation e = evaluate(model, ptrs, labels, store, 4);
  EXPECT_EQ(e.total, 9u);
  EXPECT_EQ(e.correct, 8u);
  EXPECT_EQ(e.pass_count, adapter_pass_count(1, 2, 2));
  EXPECT_DOUBLE_EQ(evaluate_accuracy(model, ptrs, labels, store), 8.0 / 9.0);
  EXPECT_THROW(evaluate(model, ptrs, std::vector<int>(3, 0), store), ShapeError);
}

}  // namespace
}  // namespace cllora
