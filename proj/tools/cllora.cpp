// Copyright 2026 The cllora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: dataset generation, single runs, ablation sweeps,
// gradient checks and report printing.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cllora/cllora.hpp"

namespace {

struct CommonOptions {
  std::string config;
  std::string preset = "desk";
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, CommonOptions& o, const std::string& out_help) {
  cmd->add_option("--config", o.config, "Flat JSON config applied on top of the preset")->check(CLI::ExistingFile);
  cmd->add_option("--preset", o.preset, "Base configuration")->check(CLI::IsMember({"desk", "paper", "micro"}));
  cmd->add_option("--seed", o.seed, "Seed (overrides the config's seed)");
  cmd->add_option("--out", o.out, out_help);
}

cllora::ExperimentConfig resolve(const CommonOptions& o) {
  cllora::ExperimentConfig cfg = cllora::ExperimentConfig::preset(o.preset);
  if (!o.config.empty()) cfg = cllora::ExperimentConfig::load(o.config, cfg);
  if (o.seed) cfg.seed = *o.seed;
  cfg.validate();
  return cfg;
}

std::optional<std::filesystem::path> out_path(const CommonOptions& o) {
  if (o.out.empty()) return std::nullopt;
  return std::filesystem::path(o.out);
}

int gen_data(const CommonOptions& o) {
  const cllora::ExperimentConfig cfg = resolve(o);
  if (o.out.empty()) throw cllora::ConfigError("gen-data needs --out", {"out"});
  cllora::Rng rng = cllora::Rng(cfg.seed).fork(1);
  const cllora::Dataset ds = cllora::gen_synthetic(cfg.synthetic(), rng);
  cllora::save_dataset(ds, o.out);
  std::cout << "wrote " << ds.train.size() << " train and " << ds.test.size() << " test samples to " << o.out << "\n";
  return 0;
}

int run(const CommonOptions& o) {
  const cllora::ExperimentConfig cfg = resolve(o);
  const cllora::RunReport report = cllora::run_experiment(cfg, out_path(o));
  std::cout << cllora::format_report(report.to_json());
  return 0;
}

int ablate(const CommonOptions& o, const std::string& axes_spec, int num_seeds) {
  const cllora::ExperimentConfig cfg = resolve(o);
  const auto axes = cllora::parse_axes(axes_spec, cfg);
  if (num_seeds < 1) throw cllora::ConfigError("--seeds must be at least 1", {"seeds"});
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < num_seeds; ++i) seeds.push_back(cfg.seed + static_cast<std::uint64_t>(i));
  const auto result = cllora::run_ablation(cfg, axes, seeds, out_path(o), [](const cllora::AblationRun& r) {
    std::cerr << "run";
    for (const auto& v : r.values) std::cerr << ' ' << v;
    std::cerr << " seed " << r.seed << ": A_T " << r.report.accuracy.final_accuracy() << " A_bar " << r.report.accuracy.average() << "\n";
  });
  std::cout << result.csv();
  return 0;
}

int gradcheck(const CommonOptions& o, int warmup, double step, double tolerance, bool full) {
  const cllora::ExperimentConfig cfg = resolve(o);
  const cllora::GradcheckReport report =
      cllora::gradcheck(cfg, warmup, step, full ? cllora::GradcheckScope::Full : cllora::GradcheckScope::Micro);
  const std::string text = report.to_json().dump(2) + "\n";
  if (!o.out.empty()) cllora::write_file_atomic(o.out, text);
  std::cout << text;
  return report.max_relative_error <= tolerance ? 0 : 1;
}

int report(const CommonOptions& o, const std::string& path) {
  const auto bytes = cllora::read_file_bytes(path);
  const std::string text = cllora::format_report(nlohmann::json::parse(bytes.begin(), bytes.end()));
  if (!o.out.empty()) cllora::write_file_atomic(o.out, text);
  std::cout << text;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cllora: continual low-rank adaptation experiments on a miniature vision transformer"};
  app.require_subcommand(1);

  CommonOptions gen_opts, run_opts, ablate_opts, grad_opts, report_opts;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate the synthetic dataset file");
  add_common(gen_cmd, gen_opts, "Dataset file to write");

  auto* run_cmd = app.add_subcommand("run", "Train all tasks and write a run report");
  add_common(run_cmd, run_opts, "Run report JSON (training log written next to it)");

  std::string axes;
  int num_seeds = 1;
  auto* ablate_cmd = app.add_subcommand("ablate", "Sweep the cross product of ablation axes");
  add_common(ablate_cmd, ablate_opts, "Directory for per-run reports and summary.csv");
  ablate_cmd->add_option("--axes", axes, "Comma list of axes, each optionally name=v1:v2:...")->required();
  ablate_cmd->add_option("--seeds", num_seeds, "Consecutive seeds per configuration, starting at --seed");

  int warmup = 2;
  double step = 1e-5;
  double tolerance = 1e-4;
  bool full = false;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  add_common(grad_cmd, grad_opts, "Gradient-check report JSON");
  grad_cmd->add_option("--warmup", warmup, "Optimizer steps taken before the check");
  grad_cmd->add_option("--step", step, "Central-difference step");
  grad_cmd->add_option("--tolerance", tolerance, "Maximum relative error for a zero exit status");
  grad_cmd->add_flag("--full", full, "Check the configured model itself instead of its micro-scale run");

  std::string report_path;
  auto* report_cmd = app.add_subcommand("report", "Pretty-print a run report");
  add_common(report_cmd, report_opts, "Write the formatted report here as well");
  report_cmd->add_option("report", report_path, "Run report JSON")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_cmd) return gen_data(gen_opts);
    if (*run_cmd) return run(run_opts);
    if (*ablate_cmd) return ablate(ablate_opts, axes, num_seeds);
    if (*grad_cmd) return gradcheck(grad_opts, warmup, step, tolerance, full);
    if (*report_cmd) return report(report_opts, report_path);
  } catch (const cllora::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
