// Copyright 2026 The cllora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails. Pass a directory as the first argument
// to keep the random-vs-orthogonal sweep CSV there (default: current
// directory).

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "cllora/cllora.hpp"

namespace {

using namespace cllora;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

bool bit_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

double gram_deviation(const Matrix& b) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < b.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      double dot = 0.0;
      for (Eigen::Index c = 0; c < b.cols(); ++c) dot += b(i, c) * b(j, c);
      worst = std::max(worst, std::abs(dot - (i == j ? 1.0 : 0.0)));
    }
  return worst;
}

Image random_image(const BackboneConfig& cfg, Rng& rng) {
  Image img{cfg.channels, cfg.image_side, cfg.image_side, {}};
  img.pixels.resize(static_cast<std::size_t>(cfg.channels) * cfg.image_side * cfg.image_side);
  for (float& p : img.pixels) p = static_cast<float>(rng.uniform());
  return img;
}

// ---------------------------------------------------------------------------

Outcome orthogonality_suite() {
  const auto start = Clock::now();
  double worst = 0.0;
  for (const auto& [r, k] : std::vector<std::pair<int, int>>{{1, 8}, {5, 32}, {10, 64}, {10, 768}}) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng rng(seed);
      const Matrix b = sample_orthogonal_rows(r, k, rng);
      if (b.rows() != r || b.cols() != k) return {false, "wrong shape"};
      worst = std::max(worst, gram_deviation(b));
    }
  }
  const double t = seconds_since(start);
  return {worst <= 1e-6 && t < 10.0, fmt("max |BB^T - I| = %.2e over 400 draws, %.2f s", worst, t)};
}

Outcome gradient_oracle() {
  const auto start = Clock::now();
  const GradcheckReport r = gradcheck(ExperimentConfig::micro());
  const double t = seconds_since(start);
  std::map<std::string, double> per_term;
  for (const auto& e : r.entries) per_term[e.term] = std::max(per_term[e.term], e.max_relative_error);
  const bool all_terms = per_term.size() == 3 && per_term.contains("ce") && per_term.contains("kd") && per_term.contains("orth");
  bool within = true;
  for (const auto& [term, err] : per_term) within = within && err <= 1e-4;
  return {all_terms && within && r.parameters_restored && r.task == 2 && r.num_blocks == 2 && r.width == 16 && t < 120.0,
          fmt("task %d, N=%d d=%d, ce %.2e kd %.2e orth %.2e over %zu scalars, %.1f s", r.task, r.num_blocks, r.width, per_term["ce"],
              per_term["kd"], per_term["orth"], r.checked_scalars, t)};
}

Outcome reassignment_properties() {
  const auto start = Clock::now();
  bool uniform = true, sigma = true, zeros = true;
  double worst_sum = 0.0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const int d = 1 + static_cast<int>(rng.below(64));
    const int r = 1 + static_cast<int>(rng.below(10));
    const Matrix g = gaussian_matrix(d, r, 1.0, rng);
    uniform = uniform && bit_equal(reassign_gradient(g, Vector::Constant(d, rng.uniform(0.01, 5.0))), g);
    zeros = zeros && bit_equal(reassign_gradient(g, Vector::Zero(d)), g);
    Vector norms(d);
    for (int i = 0; i < d; ++i) norms(i) = rng.uniform(0.0, 4.0);
    const Vector s = dimension_preserving_normalize(norms);
    const Matrix out = reassign_gradient(g, norms);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < r; ++j) sigma = sigma && out(i, j) == s(i) * g(i, j);
    for (int i = 0; i < d; ++i) sigma = sigma && std::abs(s(i) - d * norms(i) / norms.sum()) <= 4e-16 * std::max(1.0, s(i));
    worst_sum = std::max(worst_sum, std::abs(s.sum() - d));
  }
  const double t = seconds_since(start);
  return {uniform && sigma && zeros && worst_sum <= 1e-9 && t < 1.0,
          fmt("uniform %s, sigma %s, zero %s, max |sum - d| = %.1e, %.3f s", uniform ? "bit-equal" : "DIFFERS", sigma ? "exact" : "INEXACT",
              zeros ? "no-op" : "CHANGED", worst_sum, t)};
}

Outcome structural_isolation() {
  const auto start = Clock::now();
  std::size_t checked = 0;
  bool ok = true;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ExperimentConfig cfg = ExperimentConfig::micro();
    cfg.seed = seed;
    ExperimentSetup s = build_experiment(cfg);
    s.trainer.train_task(s.stream.tasks[0]);
    s.trainer.begin_task(s.stream.tasks[1]);
    std::vector<std::size_t> batch(4);
    std::iota(batch.begin(), batch.end(), std::size_t{0});
    for (int step = 0; step < 3; ++step) {
      Tape tape;
      const GradientBundle g = tape.backward(s.trainer.record_losses(tape, batch));
      for (Parameter* p : s.trainer.trainable_parameters()) {
        const bool specific = p->tag == ParamTag::SpecificUp || p->tag == ParamTag::SpecificDown || p->tag == ParamTag::BlockWeight;
        if (specific && g.kd.contains(p->id)) ok = ok && g.kd.at(p->id).isZero(0.0);
        if (p->tag != ParamTag::BlockWeight && g.orth.contains(p->id)) ok = ok && g.orth.at(p->id).isZero(0.0);
        ++checked;
      }
      s.trainer.step(batch);
    }
  }
  const double t = seconds_since(start);
  return {ok && t < 1.0, fmt("%zu parameter bundles checked, %.3f s", checked, t)};
}

struct DeskRunChecks {
  Outcome freezing, transparency, pass_count_per_query, first_task_losses;
  ClLoraModel* model = nullptr;
  PrototypeStore store;
};

// One T=5 desk run that tracks hashes across every task, zero-init logits at
// every task's first step, and the measured pass count at every evaluation.
DeskRunChecks desk_protocol_run(std::unique_ptr<ExperimentSetup>& keep) {
  ExperimentConfig cfg = ExperimentConfig::desk();
  keep = std::make_unique<ExperimentSetup>(build_experiment(cfg));
  ExperimentSetup& s = *keep;
  Trainer& tr = s.trainer;
  DeskRunChecks out;
  bool frozen_ok = true, transparent = true, passes_ok = true;
  std::size_t hashes = 0, logit_checks = 0, queries = 0;
  for (const Task& task : s.stream.tasks) {
    std::vector<std::uint64_t> before;
    before.push_back(tr.model().backbone().content_hash());
    before.push_back(tr.model().shared().down_hash());
    for (const auto& ta : tr.model().tasks()) before.push_back(ta.adapter.content_hash(ta.weights ? &*ta.weights : nullptr));

    tr.begin_task(task);
    const auto images = image_pointers(task.train);
    const Matrix with_adapters = tr.head()->logits(tr.model().features(images, &tr.model().task(task.index)));
    const Matrix without = tr.head()->logits(tr.model().features(images, nullptr));
    transparent = transparent && bit_equal(with_adapters, without);
    logit_checks += static_cast<std::size_t>(with_adapters.size());

    Rng shuffle(task.index);
    const std::size_t bs = static_cast<std::size_t>(cfg.train.batch_size);
    for (int epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
      std::vector<std::size_t> order(task.train.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
      for (std::size_t b = 0; b < order.size(); b += bs) tr.step(std::span(order).subspan(b, std::min(bs, order.size() - b)), epoch);
    }
    tr.end_task();

    std::vector<std::uint64_t> after;
    after.push_back(tr.model().backbone().content_hash());
    after.push_back(tr.model().shared().down_hash());
    for (std::size_t i = 0; i + 2 < before.size(); ++i) {
      const auto& ta = tr.model().tasks()[i];
      after.push_back(ta.adapter.content_hash(ta.weights ? &*ta.weights : nullptr));
    }
    frozen_ok = frozen_ok && before == after;
    hashes += before.size();

    const auto [test_images, labels] = seen_test_set(s.stream, task.index);
    const auto preds = predict_batch(tr.model(), test_images, tr.prototypes());
    const std::size_t expected = adapter_pass_count(cfg.train.position, cfg.backbone.num_blocks, task.index);
    for (const auto& p : preds) passes_ok = passes_ok && p.counter.adapter_block_applications == expected;
    queries += preds.size();
  }
  bool first_zero = true;
  std::size_t first_steps = 0;
  for (const StepRecord& r : tr.step_log())
    if (r.task == 1) first_zero = first_zero && r.kd == 0.0 && r.orth == 0.0, ++first_steps;

  out.freezing = {frozen_ok, fmt("%zu hashes compared across 5 tasks", hashes)};
  out.transparency = {transparent, fmt("%zu logits bit-equal across 5 task starts", logit_checks)};
  out.pass_count_per_query = {passes_ok, fmt("%zu evaluation queries matched l + (N-l)t", queries)};
  out.first_task_losses = {first_zero && first_steps > 0, fmt("%zu task-1 steps with kd = orth = 0", first_steps)};
  out.model = &tr.mutable_model();
  out.store = tr.prototypes();
  return out;
}

Outcome inference_cost(const Outcome& per_query) {
  BackboneConfig cfg;
  cfg.num_blocks = 12;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.image_side = 4;
  cfg.patch_side = 2;
  std::map<int, std::size_t> measured;
  for (int l : {6, 0}) {
    Rng rng(5);
    const AdapterLayout layout = AdapterLayout::from(cfg, l, 2);
    ClLoraModel model(Backbone::init(cfg, rng), layout, SharedAdapter::init(layout, rng));
    PrototypeStore store;
    for (int t = 1; t <= 20; ++t) {
      model.tasks().push_back(init_specific(t, layout, rng));
      store.add(t, t - 1, gaussian_matrix(cfg.width, 1, 1.0, rng).col(0));
    }
    measured[l] = predict(model, random_image(cfg, rng), store).counter.adapter_block_applications;
  }
  const bool ok = per_query.pass && measured[6] == 126 && measured[0] == 240;
  return {ok, fmt("l=6,N=12,T=20: %zu; l=0: %zu; %s", measured[6], measured[0], per_query.detail.c_str())};
}

Outcome prefix_equivalence(const ClLoraModel& model, const PrototypeStore& store) {
  Rng rng(2024);
  std::vector<Image> images;
  for (int i = 0; i < 100; ++i) images.push_back(random_image(model.backbone().config(), rng));
  const auto ptrs = image_pointers(images);
  const auto fast = predict_batch(model, ptrs, store);
  const auto naive = predict_batch_naive(model, ptrs, store);
  bool ok = fast.size() == 100;
  std::size_t scores = 0;
  for (std::size_t i = 0; i < fast.size(); ++i) {
    ok = ok && fast[i].scores.size() == naive[i].scores.size() && fast[i].cls == naive[i].cls;
    for (std::size_t j = 0; ok && j < fast[i].scores.size(); ++j, ++scores)
      ok = std::memcmp(&fast[i].scores[j].score, &naive[i].scores[j].score, sizeof(double)) == 0;
  }
  return {ok, fmt("100 queries, %zu scores bit-equal on the trained desk model", scores)};
}

Outcome protocol_degeneracies(const Outcome& first_task) {
  ExperimentConfig cfg = ExperimentConfig::desk();
  cfg.num_tasks = 1;
  const RunReport r = run_experiment(cfg);
  const bool single = r.accuracy.per_task.size() == 1 && r.accuracy.average() == r.accuracy.per_task[0] &&
                      r.accuracy.final_accuracy() == r.accuracy.per_task[0];
  return {first_task.pass && single, fmt("%s; T=1: A_bar = A_1 = A_T = %.4f", first_task.detail.c_str(), r.accuracy.average())};
}

Outcome desk_direction() {
  const auto start = Clock::now();
  ExperimentConfig cl = ExperimentConfig::desk();
  cl.train.position = cl.backbone.num_blocks / 2;
  ExperimentConfig specific = ExperimentConfig::desk();
  specific.train.position = 0;
  specific.train.kd = specific.train.gr = specific.train.bw = false;
  double cl_sum = 0.0, sp_sum = 0.0;
  std::string cl_runs, sp_runs;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    cl.seed = specific.seed = seed;
    const double a = run_experiment(cl).accuracy.final_accuracy();
    const double b = run_experiment(specific).accuracy.final_accuracy();
    cl_sum += a, sp_sum += b;
    cl_runs += fmt(" %.2f", a), sp_runs += fmt(" %.2f", b);
  }
  const double cl_mean = cl_sum / 5.0, sp_mean = sp_sum / 5.0, t = seconds_since(start);
  const bool ok = cl_mean >= sp_mean - 0.01 && cl_mean >= 0.80 && sp_mean >= 0.80 && t < 300.0;
  return {ok, fmt("A_T CL-LoRA(l=%d) %.4f [%s ] vs specific-only(l=0) %.4f [%s ], %.0f s", cl.train.position, cl_mean, cl_runs.c_str(), sp_mean,
                  sp_runs.c_str(), t)};
}

Outcome random_vs_orthogonal(const std::filesystem::path& dir) {
  const ExperimentConfig base = ExperimentConfig::desk();
  const AblationResult r = run_ablation(base, parse_axes("bs-init", base), {0, 1, 2, 3, 4});
  const std::filesystem::path csv = dir / "acceptance_bs_init.csv";
  write_file_atomic(csv, r.csv());
  std::map<std::string, double> sums;
  for (const auto& run : r.runs) sums[run.values.at(0)] += run.report.accuracy.average();
  const double orth = sums["orthogonal"] / 5.0, random = sums["random"] / 5.0;
  return {orth >= random - 0.02, fmt("A_bar orthogonal %.4f vs random %.4f over 5 seeds; sweep CSV %s", orth, random, csv.string().c_str())};
}

Outcome parameter_accounting() {
  const std::size_t pair = lora_pair_params(10, 768, 768);
  AdapterLayout one;
  one.num_blocks = 1;
  one.position = 0;
  one.rank = 10;
  one.width = 768;
  one.attach = AttachSet::parse("q");
  const ParamCount c = count_trainable_params(one, BackboneConfig::paper().parameter_count(), 1, false);
  return {pair == 15360 && c.total == 15360, fmt("r(d+k) = %zu, single-site count %zu", pair, c.total)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::filesystem::path out_dir = argc > 1 ? std::filesystem::path(argv[1]) : std::filesystem::current_path();
  std::filesystem::create_directories(out_dir);
  int failures = 0;
  auto report = [&](int id, const char* name, const Outcome& o) {
    std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failures;
  };
  auto guarded = [](const std::function<Outcome()>& fn) -> Outcome {
    try {
      return fn();
    } catch (const std::exception& e) {
      return {false, std::string("threw: ") + e.what()};
    }
  };

  report(1, "orthogonality suite", guarded(orthogonality_suite));
  report(2, "gradient oracle", guarded(gradient_oracle));
  report(3, "reassignment properties", guarded(reassignment_properties));
  report(4, "structural isolation", guarded(structural_isolation));

  std::unique_ptr<ExperimentSetup> keep;
  DeskRunChecks desk;
  try {
    desk = desk_protocol_run(keep);
  } catch (const std::exception& e) {
    desk.freezing = desk.transparency = desk.pass_count_per_query = desk.first_task_losses = {false, std::string("threw: ") + e.what()};
  }
  report(5, "freezing and frozen backbone", desk.freezing);
  report(6, "zero-init transparency", desk.transparency);
  report(7, "inference cost", guarded([&] { return inference_cost(desk.pass_count_per_query); }));
  report(8, "prefix-sharing equivalence", guarded([&] {
           if (!desk.model) return Outcome{false, "desk run unavailable"};
           return prefix_equivalence(*desk.model, desk.store);
         }));
  report(9, "protocol degeneracies", guarded([&] { return protocol_degeneracies(desk.first_task_losses); }));
  report(10, "desk-scale direction", guarded(desk_direction));
  report(11, "random vs orthogonal down-projection", guarded([&] { return random_vs_orthogonal(out_dir); }));
  report(12, "parameter accounting", guarded(parameter_accounting));

  std::printf("%d of 12 criteria passed\n", 12 - failures);
  return failures == 0 ? 0 : 1;
}
