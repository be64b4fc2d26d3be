// Copyright 2026 The cllora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "cllora/adapters.hpp"
#include "cllora/backbone.hpp"
#include "cllora/binary_io.hpp"
#include "cllora/classifier.hpp"
#include "cllora/model.hpp"
#include "cllora/streams.hpp"
#include "cllora/trainer.hpp"

namespace cllora {

using OrderedJson = nlohmann::ordered_json;

/// Everything one experiment needs: stream shape, backbone, adapters and
/// training. Serialized as one flat JSON object; see config_keys() for the
/// accepted keys.
struct ExperimentConfig {
  std::uint64_t seed = 0;

  int num_classes = 10;
  int train_per_class = 20;
  int test_per_class = 10;
  double noise_std = 0.08;
  int num_tasks = 5;
  std::optional<std::uint64_t> class_order_seed;
  std::string dataset;  // optional dataset file; generated there when missing

  BackboneConfig backbone;
  int rank = 4;
  DownProjection bs_init = DownProjection::Orthogonal;  // used while train.fix_b
  TrainConfig train;

  static ExperimentConfig desk() { return {}; }

  static ExperimentConfig paper() {
    ExperimentConfig c;
    c.num_classes = 100;
    c.train_per_class = 500;
    c.test_per_class = 100;
    c.num_tasks = 10;
    c.backbone = BackboneConfig::paper();
    c.rank = 10;
    c.train.position = 6;
    c.train.batch_size = 48;
    c.train.epochs = 20;
    return c;
  }

  // Two blocks of width 16 on 8x8 images: small enough for exhaustive
  // finite differences.
  static ExperimentConfig micro() {
    ExperimentConfig c;
    c.num_classes = 4;
    c.train_per_class = 3;
    c.test_per_class = 2;
    c.num_tasks = 2;
    c.backbone.num_blocks = 2;
    c.backbone.width = 16;
    c.backbone.heads = 2;
    c.backbone.mlp_ratio = 2.0;
    c.backbone.image_side = 8;
    c.backbone.patch_side = 4;
    c.rank = 2;
    c.train.position = 1;
    c.train.epochs = 3;
    c.train.batch_size = 4;
    c.train.learning_rate = 1e-2;
    return c;
  }

  /// The same losses at micro scale (2 blocks of width 16, four classes in at
  /// most two tasks) on the micro schedule. Toggles, loss weights, temperature,
  /// optimizer kind, attach set and down-projection mode carry over; the rank
  /// is capped at the micro width and the split position keeps its relative
  /// place.
  ExperimentConfig micro_run() const {
    ExperimentConfig m = micro();
    m.seed = seed;
    m.num_tasks = std::min(num_tasks, m.num_tasks);
    m.backbone.attach = backbone.attach;
    m.backbone.channels = backbone.channels;
    m.rank = std::min(rank, m.backbone.width);
    m.bs_init = bs_init;
    TrainConfig t = train;
    t.position = static_cast<int>(std::lround(static_cast<double>(train.position) * m.backbone.num_blocks / backbone.num_blocks));
    t.epochs = m.train.epochs;
    t.batch_size = m.train.batch_size;
    t.learning_rate = m.train.learning_rate;
    m.train = t;
    return m;
  }

  static ExperimentConfig preset(std::string_view name) {
    if (name == "desk") return desk();
    if (name == "paper") return paper();
    if (name == "micro") return micro();
    throw ConfigError("unknown preset '" + std::string(name) + "'", {"preset"});
  }

  DownProjection down_projection() const { return train.fix_b ? bs_init : DownProjection::Trainable; }

  SyntheticSpec synthetic() const {
    return SyntheticSpec{num_classes, train_per_class, test_per_class, backbone.image_side, backbone.channels, noise_std};
  }

  AdapterLayout layout() const { return AdapterLayout::from(backbone, train.position, rank, train.flip_positions); }

  void validate() const {
    std::vector<std::string> bad;
    auto check = [&](bool ok, const char* key) {
      if (!ok) bad.emplace_back(key);
    };
    check(num_classes >= 2, "num_classes");
    check(train_per_class >= 1, "train_per_class");
    check(test_per_class >= 1, "test_per_class");
    check(noise_std >= 0.0, "noise_std");
    check(num_tasks >= 1 && num_classes % std::max(num_tasks, 1) == 0, "num_tasks");
    check(backbone.num_blocks >= 1, "num_blocks");
    check(backbone.width >= 1, "width");
    check(backbone.heads >= 1 && backbone.width % std::max(backbone.heads, 1) == 0, "heads");
    check(backbone.mlp_ratio > 0.0, "mlp_ratio");
    check(backbone.channels >= 1, "channels");
    check(backbone.patch_side >= 1, "patch_side");
    check(backbone.image_side >= 1 && backbone.image_side % std::max(backbone.patch_side, 1) == 0, "image_side");
    check(rank >= 1 && rank <= backbone.width, "rank");
    check(train.position >= 0 && train.position <= backbone.num_blocks, "position");
    check(train.lambda_kd >= 0.0, "lambda_kd");
    check(train.lambda_orth >= 0.0, "lambda_orth");
    check(train.tau > 0.0, "tau");
    check(train.epochs >= 1, "epochs");
    check(train.batch_size >= 1, "batch_size");
    check(train.learning_rate >= 0.0, "learning_rate");
    if (!bad.empty()) throw ConfigError("config: invalid values", bad);
  }

  OrderedJson to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j, ExperimentConfig base = desk());

  static ExperimentConfig load(const std::filesystem::path& path, ExperimentConfig base = desk()) {
    const auto bytes = read_file_bytes(path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("config " + path.string() + ": " + e.what(), e.byte);
    }
    return from_json(j, std::move(base));
  }
};

namespace detail {

struct ConfigKey {
  const char* name;
  std::function<void(ExperimentConfig&, const nlohmann::json&)> read;
  std::function<OrderedJson(const ExperimentConfig&)> write;
};

[[noreturn]] inline void wrong_type(const char* key, const char* expected) {
  throw ConfigError(std::string("config: key '") + key + "' expects " + expected, {key});
}

template <class T>
T read_value(const char* key, const nlohmann::json& v) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) wrong_type(key, "a boolean");
    return v.get<bool>();
  } else if constexpr (std::is_same_v<T, std::uint64_t>) {
    if (!v.is_number_unsigned()) wrong_type(key, "a non-negative integer");
    return v.get<std::uint64_t>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) wrong_type(key, "an integer");
    const auto x = v.get<std::int64_t>();
    if (x < std::numeric_limits<T>::min() || x > std::numeric_limits<T>::max()) wrong_type(key, "an integer in range");
    return static_cast<T>(x);
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) wrong_type(key, "a number");
    return v.get<double>();
  } else {
    if (!v.is_string()) wrong_type(key, "a string");
    return v.get<std::string>();
  }
}

template <class Get>
ConfigKey scalar_key(const char* name, Get get) {
  return ConfigKey{name,
                   [name, get](ExperimentConfig& c, const nlohmann::json& v) {
                     using T = std::remove_cvref_t<decltype(get(c))>;
                     get(c) = read_value<T>(name, v);
                   },
                   [get](const ExperimentConfig& c) { return OrderedJson(get(c)); }};
}

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    k.push_back(scalar_key("seed", [](auto& c) -> auto& { return c.seed; }));
    k.push_back(scalar_key("num_classes", [](auto& c) -> auto& { return c.num_classes; }));
    k.push_back(scalar_key("train_per_class", [](auto& c) -> auto& { return c.train_per_class; }));
    k.push_back(scalar_key("test_per_class", [](auto& c) -> auto& { return c.test_per_class; }));
    k.push_back(scalar_key("noise_std", [](auto& c) -> auto& { return c.noise_std; }));
    k.push_back(scalar_key("num_tasks", [](auto& c) -> auto& { return c.num_tasks; }));
    k.push_back(ConfigKey{"class_order_seed",
                          [](ExperimentConfig& c, const nlohmann::json& v) {
                            if (v.is_null()) {
                              c.class_order_seed.reset();
                            } else {
                              c.class_order_seed = read_value<std::uint64_t>("class_order_seed", v);
                            }
                          },
                          [](const ExperimentConfig& c) { return c.class_order_seed ? OrderedJson(*c.class_order_seed) : OrderedJson(nullptr); }});
    k.push_back(scalar_key("dataset", [](auto& c) -> auto& { return c.dataset; }));
    k.push_back(scalar_key("num_blocks", [](auto& c) -> auto& { return c.backbone.num_blocks; }));
    k.push_back(scalar_key("width", [](auto& c) -> auto& { return c.backbone.width; }));
    k.push_back(scalar_key("heads", [](auto& c) -> auto& { return c.backbone.heads; }));
    k.push_back(scalar_key("mlp_ratio", [](auto& c) -> auto& { return c.backbone.mlp_ratio; }));
    k.push_back(scalar_key("image_side", [](auto& c) -> auto& { return c.backbone.image_side; }));
    k.push_back(scalar_key("patch_side", [](auto& c) -> auto& { return c.backbone.patch_side; }));
    k.push_back(scalar_key("channels", [](auto& c) -> auto& { return c.backbone.channels; }));
    k.push_back(ConfigKey{"attach",
                          [](ExperimentConfig& c, const nlohmann::json& v) {
                            try {
                              c.backbone.attach = AttachSet::parse(read_value<std::string>("attach", v));
                            } catch (const ConfigError& e) {
                              throw ConfigError(std::string("config: ") + e.what(), {"attach"});
                            }
                          },
                          [](const ExperimentConfig& c) { return OrderedJson(c.backbone.attach.str()); }});
    k.push_back(scalar_key("rank", [](auto& c) -> auto& { return c.rank; }));
    k.push_back(scalar_key("position", [](auto& c) -> auto& { return c.train.position; }));
    k.push_back(scalar_key("flip_positions", [](auto& c) -> auto& { return c.train.flip_positions; }));
    k.push_back(scalar_key("fix_b", [](auto& c) -> auto& { return c.train.fix_b; }));
    k.push_back(ConfigKey{"bs_init",
                          [](ExperimentConfig& c, const nlohmann::json& v) {
                            const auto s = read_value<std::string>("bs_init", v);
                            if (s == "orthogonal") {
                              c.bs_init = DownProjection::Orthogonal;
                            } else if (s == "random") {
                              c.bs_init = DownProjection::Random;
                            } else {
                              throw ConfigError("config: bs_init must be \"orthogonal\" or \"random\", got \"" + s + "\"", {"bs_init"});
                            }
                          },
                          [](const ExperimentConfig& c) { return OrderedJson(to_string(c.bs_init)); }});
    k.push_back(scalar_key("kd", [](auto& c) -> auto& { return c.train.kd; }));
    k.push_back(scalar_key("gr", [](auto& c) -> auto& { return c.train.gr; }));
    k.push_back(scalar_key("bw", [](auto& c) -> auto& { return c.train.bw; }));
    k.push_back(scalar_key("lambda_kd", [](auto& c) -> auto& { return c.train.lambda_kd; }));
    k.push_back(scalar_key("lambda_orth", [](auto& c) -> auto& { return c.train.lambda_orth; }));
    k.push_back(scalar_key("tau", [](auto& c) -> auto& { return c.train.tau; }));
    k.push_back(scalar_key("epochs", [](auto& c) -> auto& { return c.train.epochs; }));
    k.push_back(scalar_key("batch_size", [](auto& c) -> auto& { return c.train.batch_size; }));
    k.push_back(scalar_key("learning_rate", [](auto& c) -> auto& { return c.train.learning_rate; }));
    k.push_back(ConfigKey{"optimizer",
                          [](ExperimentConfig& c, const nlohmann::json& v) {
                            const auto s = read_value<std::string>("optimizer", v);
                            if (s == "adam") {
                              c.train.optimizer = OptimizerKind::Adam;
                            } else if (s == "sgd") {
                              c.train.optimizer = OptimizerKind::GradientDescent;
                            } else {
                              throw ConfigError("config: optimizer must be \"adam\" or \"sgd\", got \"" + s + "\"", {"optimizer"});
                            }
                          },
                          [](const ExperimentConfig& c) { return OrderedJson(to_string(c.train.optimizer)); }});
    return k;
  }();
  return keys;
}

}  // namespace detail

inline OrderedJson ExperimentConfig::to_json() const {
  OrderedJson j = OrderedJson::object();
  for (const auto& key : detail::config_keys()) j[key.name] = key.write(*this);
  return j;
}

/// Applies the keys present in `j` on top of `base`. Unknown keys are
/// rejected all at once, before any value is read.
inline ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j, ExperimentConfig base) {
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  const auto& keys = detail::config_keys();
  std::vector<std::string> unknown;
  for (const auto& [name, value] : j.items()) {
    const bool known = std::any_of(keys.begin(), keys.end(), [&](const detail::ConfigKey& k) { return name == k.name; });
    if (!known) unknown.push_back(name);
  }
  if (!unknown.empty()) throw ConfigError("config: unknown keys", unknown);
  for (const auto& key : keys)
    if (j.contains(key.name)) key.read(base, j.at(key.name));
  base.validate();
  return base;
}

/// Per-stage accuracies A_1..A_T on the union of seen test sets.
struct AccuracyRecord {
  std::vector<double> per_task;
  std::vector<std::size_t> evaluated;  // test samples behind each A_t

  double average() const {
    if (per_task.empty()) return 0.0;
    double sum = 0.0;
    for (double a : per_task) sum += a;
    return sum / static_cast<double>(per_task.size());
  }

  double final_accuracy() const { return per_task.empty() ? 0.0 : per_task.back(); }
};

struct RunReport {
  ExperimentConfig config;
  AccuracyRecord accuracy;
  ParamCount params;
  std::size_t pass_count = 0;  // measured on the final evaluation
  std::string training_log;    // file name of the JSON-lines log, next to the report
  std::vector<EpochLog> log;
  std::uint64_t backbone_hash = 0;
  double total_seconds = 0.0;
  std::vector<double> task_seconds;

  OrderedJson to_json(bool include_timings = true) const {
    OrderedJson j;
    j["config"] = config.to_json();
    j["seed"] = config.seed;
    j["accuracy"] = {{"per_task", accuracy.per_task},
                     {"evaluated_samples", accuracy.evaluated},
                     {"A_bar", accuracy.average()},
                     {"A_T", accuracy.final_accuracy()}};
    j["params"] = {{"shared", params.shared},
                   {"specific_per_task", params.specific_per_task},
                   {"block_weights_per_task", params.block_weights_per_task},
                   {"total", params.total},
                   {"backbone", params.backbone},
                   {"ratio", params.ratio},
                   {"percent", 100.0 * params.ratio}};
    j["adapter_pass_count"] = pass_count;
    j["backbone_hash"] = backbone_hash;
    j["training_log"] = training_log;
    if (include_timings) j["timings"] = {{"total_seconds", total_seconds}, {"per_task_seconds", task_seconds}};
    return j;
  }
};

/// Dataset, task stream and an untrained trainer, all derived from
/// (config, config.seed).
struct ExperimentSetup {
  Dataset dataset;
  TaskStream stream;
  Trainer trainer;
};

inline Dataset obtain_dataset(const ExperimentConfig& cfg, Rng& rng) {
  if (cfg.dataset.empty()) return gen_synthetic(cfg.synthetic(), rng);
  const std::filesystem::path path(cfg.dataset);
  if (!std::filesystem::exists(path)) {
    Dataset ds = gen_synthetic(cfg.synthetic(), rng);
    save_dataset(ds, path);
    return ds;
  }
  Dataset ds = load_dataset(path);
  std::vector<std::string> mismatch;
  if (ds.num_classes != static_cast<std::uint32_t>(cfg.num_classes)) mismatch.emplace_back("num_classes");
  if (ds.train_per_class != static_cast<std::uint32_t>(cfg.train_per_class)) mismatch.emplace_back("train_per_class");
  if (ds.test_per_class != static_cast<std::uint32_t>(cfg.test_per_class)) mismatch.emplace_back("test_per_class");
  if (ds.channels != static_cast<std::uint32_t>(cfg.backbone.channels)) mismatch.emplace_back("channels");
  if (ds.height != static_cast<std::uint32_t>(cfg.backbone.image_side) || ds.width != ds.height) mismatch.emplace_back("image_side");
  if (!mismatch.empty()) throw ConfigError("config: dataset " + path.string() + " does not match", mismatch);
  return ds;
}

inline ExperimentSetup build_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  Rng root(cfg.seed);
  Rng data_rng = root.fork(1);
  Rng backbone_rng = root.fork(2);
  Rng shared_rng = root.fork(3);
  const std::uint64_t trainer_seed = root.fork(4).next_u64();

  Dataset ds = obtain_dataset(cfg, data_rng);
  TaskStream stream = split_tasks(ds, cfg.num_tasks, cfg.class_order_seed);
  const AdapterLayout layout = cfg.layout();
  Backbone backbone = Backbone::init(cfg.backbone, backbone_rng);
  SharedAdapter shared = SharedAdapter::init(layout, shared_rng, cfg.down_projection());
  Trainer trainer(ClLoraModel(std::move(backbone), layout, std::move(shared)), cfg.train, trainer_seed);
  return ExperimentSetup{std::move(ds), std::move(stream), std::move(trainer)};
}

// Test images and global labels of tasks 1..t.
inline std::pair<std::vector<const Image*>, std::vector<int>> seen_test_set(const TaskStream& stream, int t) {
  std::pair<std::vector<const Image*>, std::vector<int>> out;
  for (int i = 0; i < t; ++i) {
    const Task& task = stream.tasks.at(static_cast<std::size_t>(i));
    for (std::size_t j = 0; j < task.test.size(); ++j) {
      out.first.push_back(&task.test[j]);
      out.second.push_back(task.test_global[j]);
    }
  }
  return out;
}

inline std::string training_log_jsonl(const std::vector<EpochLog>& log) {
  std::string out;
  for (const auto& e : log) {
    OrderedJson j;
    j["task"] = e.task;
    j["epoch"] = e.epoch;
    j["loss_ce"] = e.loss_ce;
    j["loss_kd"] = e.loss_kd;
    j["loss_orth"] = e.loss_orth;
    j["loss_total"] = e.loss_total;
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline std::filesystem::path log_path_for(const std::filesystem::path& report) {
  std::filesystem::path p = report;
  p.replace_extension(".log.jsonl");
  return p;
}

/// Trains tasks 1..T in order and evaluates after each on every test sample
/// of the tasks seen so far. When `out` is given the JSON-lines log is written
/// first, then the report, both atomically.
inline RunReport run_experiment(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& out = std::nullopt) {
  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();
  ExperimentSetup setup = build_experiment(cfg);
  Trainer& trainer = setup.trainer;

  RunReport report;
  report.config = cfg;
  report.backbone_hash = trainer.model().backbone().content_hash();
  for (const Task& task : setup.stream.tasks) {
    const auto task_start = Clock::now();
    trainer.train_task(task);
    const auto [images, labels] = seen_test_set(setup.stream, task.index);
    const Evaluation e = evaluate(trainer.model(), images, labels, trainer.prototypes());
    report.accuracy.per_task.push_back(e.accuracy());
    report.accuracy.evaluated.push_back(e.total);
    report.pass_count = e.pass_count;
    report.task_seconds.push_back(std::chrono::duration<double>(Clock::now() - task_start).count());
  }
  report.log = trainer.epoch_log();
  const AdapterLayout& layout = trainer.model().layout();
  report.params = count_trainable_params(layout, trainer.model().backbone().parameter_count(), cfg.num_tasks, cfg.train.bw,
                                         cfg.down_projection() == DownProjection::Trainable);
  report.total_seconds = std::chrono::duration<double>(Clock::now() - start).count();

  if (out) {
    const std::filesystem::path log = log_path_for(*out);
    report.training_log = log.filename().string();
    if (out->has_parent_path()) std::filesystem::create_directories(out->parent_path());
    write_file_atomic(log, training_log_jsonl(report.log));
    write_file_atomic(*out, report.to_json().dump(2) + "\n");
  }
  return report;
}

inline RunReport run_experiment(const std::filesystem::path& config_path, std::uint64_t seed,
                                const std::optional<std::filesystem::path>& out = std::nullopt) {
  ExperimentConfig cfg = ExperimentConfig::load(config_path);
  cfg.seed = seed;
  return run_experiment(cfg, out);
}

// ---------------------------------------------------------------------------
// Ablation sweeps
// ---------------------------------------------------------------------------

struct AblationAxis {
  std::string name;
  std::vector<std::string> values;
};

inline const std::vector<std::string>& known_axes() {
  static const std::vector<std::string> axes = {"kd", "gr", "bw", "l-sweep", "fixB", "flip", "rank", "attach", "bs-init"};
  return axes;
}

inline std::vector<std::string> default_axis_values(const std::string& name, const ExperimentConfig& base) {
  if (name == "kd" || name == "gr" || name == "bw" || name == "fixB") return {"true", "false"};
  if (name == "flip") return {"false", "true"};
  if (name == "l-sweep") {
    const int n = base.backbone.num_blocks;
    return {"0", std::to_string(n / 2), std::to_string(n)};
  }
  if (name == "rank") return {"1", "5", "10"};
  if (name == "attach") return {"qv", "qkv", "q", "v"};
  if (name == "bs-init") return {"orthogonal", "random"};
  throw ConfigError("unknown ablation axis '" + name + "'", {name});
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t begin = 0;
  while (true) {
    const std::size_t end = s.find(sep, begin);
    out.emplace_back(s.substr(begin, end == std::string_view::npos ? std::string_view::npos : end - begin));
    if (end == std::string_view::npos) break;
    begin = end + 1;
  }
  return out;
}

/// Parses "kd,l-sweep,rank=1:5:10". An axis without "=values" takes its
/// default value list.
inline std::vector<AblationAxis> parse_axes(std::string_view spec, const ExperimentConfig& base) {
  std::vector<AblationAxis> axes;
  std::vector<std::string> unknown;
  for (const std::string& item : split(spec, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    AblationAxis axis{item.substr(0, eq), {}};
    if (std::find(known_axes().begin(), known_axes().end(), axis.name) == known_axes().end()) {
      unknown.push_back(axis.name);
      continue;
    }
    for (const auto& a : axes)
      if (a.name == axis.name) throw ConfigError("ablation axis '" + axis.name + "' given twice", {axis.name});
    axis.values = eq == std::string::npos ? default_axis_values(axis.name, base) : split(std::string_view(item).substr(eq + 1), ':');
    for (const auto& v : axis.values)
      if (v.empty()) throw ConfigError("ablation axis '" + axis.name + "' has an empty value", {axis.name});
    axes.push_back(std::move(axis));
  }
  if (!unknown.empty()) throw ConfigError("unknown ablation axes", unknown);
  return axes;
}

inline void apply_axis(ExperimentConfig& cfg, const std::string& name, const std::string& value) {
  auto as_bool = [&]() {
    if (value == "true" || value == "on" || value == "1") return true;
    if (value == "false" || value == "off" || value == "0") return false;
    throw ConfigError("ablation axis '" + name + "': expected a boolean, got '" + value + "'", {name});
  };
  auto as_int = [&]() {
    try {
      std::size_t used = 0;
      const int v = std::stoi(value, &used);
      if (used == value.size()) return v;
    } catch (const std::exception&) {
    }
    throw ConfigError("ablation axis '" + name + "': expected an integer, got '" + value + "'", {name});
  };
  if (name == "kd") {
    cfg.train.kd = as_bool();
  } else if (name == "gr") {
    cfg.train.gr = as_bool();
  } else if (name == "bw") {
    cfg.train.bw = as_bool();
  } else if (name == "fixB") {
    cfg.train.fix_b = as_bool();
  } else if (name == "flip") {
    cfg.train.flip_positions = as_bool();
  } else if (name == "l-sweep") {
    cfg.train.position = as_int();
  } else if (name == "rank") {
    cfg.rank = as_int();
  } else if (name == "attach") {
    cfg = ExperimentConfig::from_json({{"attach", value}}, cfg);
  } else if (name == "bs-init") {
    cfg = ExperimentConfig::from_json({{"bs_init", value}}, cfg);
  } else {
    throw ConfigError("unknown ablation axis '" + name + "'", {name});
  }
}

struct AblationRun {
  std::vector<std::string> values;  // one per axis
  std::uint64_t seed = 0;
  RunReport report;
};

struct AblationResult {
  std::vector<AblationAxis> axes;
  std::vector<AblationRun> runs;

  std::string csv() const {
    std::ostringstream os;
    for (const auto& a : axes) os << a.name << ',';
    os << "seed,A_T,A_bar,params_pct,pass_count\n";
    char buf[64];
    for (const auto& r : runs) {
      for (const auto& v : r.values) os << v << ',';
      os << r.seed << ',';
      std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,", r.report.accuracy.final_accuracy(), r.report.accuracy.average(),
                    100.0 * r.report.params.ratio);
      os << buf << r.report.pass_count << '\n';
    }
    return os.str();
  }
};

// Every combination of axis values, first axis varying slowest.
inline std::vector<std::vector<std::string>> cross_product(const std::vector<AblationAxis>& axes) {
  std::vector<std::vector<std::string>> out{{}};
  for (const auto& axis : axes) {
    std::vector<std::vector<std::string>> next;
    for (const auto& prefix : out) {
      for (const auto& v : axis.values) {
        auto row = prefix;
        row.push_back(v);
        next.push_back(std::move(row));
      }
    }
    out = std::move(next);
  }
  return out;
}

/// Runs the cross product of `axes` once per seed. With `out_dir`, each run
/// writes run_NNNN.json (+ log) there and the sweep writes summary.csv.
inline AblationResult run_ablation(const ExperimentConfig& base, const std::vector<AblationAxis>& axes, const std::vector<std::uint64_t>& seeds,
                                   const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                                   const std::function<void(const AblationRun&)>& on_run = {}) {
  if (seeds.empty()) throw ConfigError("ablation: no seeds given", {"seed"});
  AblationResult result{axes, {}};
  const auto combos = cross_product(axes);
  std::vector<ExperimentConfig> configs;
  for (const auto& combo : combos) {
    ExperimentConfig cfg = base;
    for (std::size_t i = 0; i < axes.size(); ++i) apply_axis(cfg, axes[i].name, combo[i]);
    cfg.validate();
    configs.push_back(cfg);
  }
  std::size_t index = 0;
  for (std::size_t c = 0; c < combos.size(); ++c) {
    for (std::uint64_t seed : seeds) {
      ExperimentConfig cfg = configs[c];
      cfg.seed = seed;
      std::optional<std::filesystem::path> report_path;
      if (out_dir) {
        char name[32];
        std::snprintf(name, sizeof name, "run_%04zu.json", index);
        report_path = *out_dir / name;
      }
      result.runs.push_back(AblationRun{combos[c], seed, run_experiment(cfg, report_path)});
      if (on_run) on_run(result.runs.back());
      ++index;
    }
  }
  if (out_dir) write_file_atomic(*out_dir / "summary.csv", result.csv());
  return result;
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

struct GradcheckEntry {
  std::string term;   // ce, kd or orth
  std::string group;  // parameter tag
  double max_relative_error = 0.0;
  std::size_t scalars = 0;
};

struct GradcheckReport {
  int task = 0;
  std::vector<std::string> terms;
  std::vector<GradcheckEntry> entries;
  double max_relative_error = 0.0;
  std::size_t checked_scalars = 0;
  bool warmup_changed_parameters = false;
  bool parameters_restored = false;
  int num_blocks = 0;
  int width = 0;

  OrderedJson to_json() const {
    OrderedJson j;
    j["model"] = {{"num_blocks", num_blocks}, {"width", width}};
    j["task"] = task;
    j["terms"] = terms;
    j["max_relative_error"] = max_relative_error;
    j["checked_scalars"] = checked_scalars;
    j["warmup_changed_parameters"] = warmup_changed_parameters;
    j["parameters_restored"] = parameters_restored;
    OrderedJson groups = OrderedJson::array();
    for (const auto& e : entries) {
      groups.push_back({{"term", e.term}, {"group", e.group}, {"max_relative_error", e.max_relative_error}, {"scalars", e.scalars}});
    }
    j["groups"] = groups;
    return j;
  }
};

inline const char* loss_term_name(LossTerm t) { return t == LossTerm::Ce ? "ce" : t == LossTerm::Kd ? "kd" : "orth"; }

inline std::uint64_t parameters_hash(const std::vector<Parameter*>& params) {
  ContentHasher h;
  for (const Parameter* p : params) h.add(p->value);
  return h.digest();
}

enum class GradcheckScope {
  Micro,  // the configuration's micro_run()
  Full,   // the configuration as given
};

/// Trains task 1 (when the stream has a second task), starts the last task
/// of at most two, takes `warmup_steps` optimizer steps so that zero-initialized
/// up-projections move, then compares every active loss term's analytic
/// gradient against central differences on one fixed batch.
inline GradcheckReport gradcheck(const ExperimentConfig& config, int warmup_steps = 2, double step = 1e-5,
                                 GradcheckScope scope = GradcheckScope::Micro) {
  const ExperimentConfig cfg = scope == GradcheckScope::Micro ? config.micro_run() : config;
  ExperimentSetup setup = build_experiment(cfg);
  Trainer& trainer = setup.trainer;
  const int target = std::min(2, static_cast<int>(setup.stream.tasks.size()));
  for (int t = 1; t < target; ++t) trainer.train_task(setup.stream.tasks[static_cast<std::size_t>(t - 1)]);
  const Task& task = setup.stream.tasks[static_cast<std::size_t>(target - 1)];
  trainer.begin_task(task);

  std::vector<std::size_t> batch(std::min(task.train.size(), static_cast<std::size_t>(cfg.train.batch_size)));
  std::iota(batch.begin(), batch.end(), std::size_t{0});

  std::vector<Parameter*> params = trainer.trainable_parameters();
  const std::uint64_t before_warmup = parameters_hash(params);
  for (int i = 0; i < warmup_steps; ++i) trainer.step(batch);

  GradcheckReport report;
  report.num_blocks = cfg.backbone.num_blocks;
  report.width = cfg.backbone.width;
  report.task = task.index;
  report.warmup_changed_parameters = parameters_hash(params) != before_warmup;

  std::vector<LossTerm> terms{LossTerm::Ce};
  if (trainer.kd_active()) terms.push_back(LossTerm::Kd);
  if (trainer.orth_active()) terms.push_back(LossTerm::Orth);

  // The KD target is a constant of each step; finite differences must hold it
  // fixed as well.
  std::optional<Matrix> kd_target;
  if (trainer.kd_active()) kd_target = trainer.kd_target(batch);
  const Matrix* fixed_target = kd_target ? &*kd_target : nullptr;

  const std::uint64_t before_check = parameters_hash(params);
  for (LossTerm term : terms) {
    report.terms.emplace_back(loss_term_name(term));
    GradientMap analytic;
    {
      Tape tape;
      const GradientBundle bundle = tape.backward(trainer.record_losses(tape, batch, fixed_target));
      analytic = bundle.term(term);
    }
    for (const Parameter* p : params)
      if (!analytic.contains(p->id)) analytic.emplace(p->id, Matrix::Zero(p->value.rows(), p->value.cols()));
    const auto loss = [&] {
      Tape tape;
      const Tape::LossVars l = trainer.record_losses(tape, batch, fixed_target);
      const std::optional<Tape::Var>& v = term == LossTerm::Ce ? l.ce : term == LossTerm::Kd ? l.kd : l.orth;
      return v ? tape.value(*v)(0, 0) : 0.0;
    };
    const FiniteDifferenceReport fd = finite_difference_check(loss, params, analytic, step);
    std::map<std::string, GradcheckEntry> groups;
    for (const Parameter* p : params) {
      GradcheckEntry& e = groups[to_string(p->tag)];
      e.term = loss_term_name(term);
      e.group = to_string(p->tag);
      e.max_relative_error = std::max(e.max_relative_error, fd.per_parameter.at(p->id));
      e.scalars += static_cast<std::size_t>(p->value.size());
    }
    for (auto& [name, e] : groups) report.entries.push_back(e);
    report.max_relative_error = std::max(report.max_relative_error, fd.max_relative_error);
    report.checked_scalars += fd.checked_scalars;
  }
  report.parameters_restored = parameters_hash(params) == before_check;
  return report;
}

// ---------------------------------------------------------------------------
// Report pretty-printing
// ---------------------------------------------------------------------------

inline std::string format_report(const nlohmann::json& j) {
  std::ostringstream os;
  char buf[128];
  auto line = [&](const char* label, const std::string& value) { os << std::left << std::setw(20) << label << value << '\n'; };
  const auto& acc = j.at("accuracy");
  const auto& cfg = j.at("config");
  line("seed", std::to_string(j.at("seed").get<std::uint64_t>()));
  std::snprintf(buf, sizeof buf, "N=%d d=%d l=%d r=%d attach=%s", cfg.at("num_blocks").get<int>(), cfg.at("width").get<int>(),
                cfg.at("position").get<int>(), cfg.at("rank").get<int>(), cfg.at("attach").get<std::string>().c_str());
  line("model", buf);
  std::snprintf(buf, sizeof buf, "kd=%s gr=%s bw=%s fix_b=%s flip=%s", cfg.at("kd").get<bool>() ? "on" : "off",
                cfg.at("gr").get<bool>() ? "on" : "off", cfg.at("bw").get<bool>() ? "on" : "off", cfg.at("fix_b").get<bool>() ? "on" : "off",
                cfg.at("flip_positions").get<bool>() ? "on" : "off");
  line("toggles", buf);
  std::string stages;
  for (const auto& a : acc.at("per_task")) {
    std::snprintf(buf, sizeof buf, "%s%.4f", stages.empty() ? "" : " ", a.get<double>());
    stages += buf;
  }
  line("A_t", stages);
  std::snprintf(buf, sizeof buf, "%.4f", acc.at("A_bar").get<double>());
  line("A_bar", buf);
  std::snprintf(buf, sizeof buf, "%.4f", acc.at("A_T").get<double>());
  line("A_T", buf);
  const auto& params = j.at("params");
  std::snprintf(buf, sizeof buf, "%llu (%.4f%% of %llu backbone)", static_cast<unsigned long long>(params.at("total").get<std::uint64_t>()),
                params.at("percent").get<double>(), static_cast<unsigned long long>(params.at("backbone").get<std::uint64_t>()));
  line("trainable params", buf);
  line("adapter passes", std::to_string(j.at("adapter_pass_count").get<std::uint64_t>()));
  line("training log", j.at("training_log").get<std::string>());
  if (j.contains("timings")) {
    std::snprintf(buf, sizeof buf, "%.2f s", j.at("timings").at("total_seconds").get<double>());
    line("wall clock", buf);
  }
  return os.str();
}

}  // namespace cllora
