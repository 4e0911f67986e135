/*
 * Copyright 2026 The MME Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mme/pipeline.hpp"
#include "mme/version.hpp"

namespace {

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Flags {
  std::string manifest, stats, out, detectors, benchmark, config, splits;
  std::optional<double> temperature, lambda, tpr_level;
  std::optional<std::uint64_t> seed;
  std::string which;
};

void add_common(CLI::App* cmd, Flags& f, bool needs_stats_data) {
  cmd->add_option("--manifest", f.manifest, "Path to the dataset manifest JSON");
  cmd->add_option("--stats", f.stats, "Calibration statistics directory");
  cmd->add_option("--out", f.out, "Output directory");
  cmd->add_option("--seed", f.seed, "Random seed");
  cmd->add_option("--config", f.config, "JSON config; its keys override flags");
  if (!needs_stats_data) return;
  cmd->add_option("--detectors", f.detectors, "Comma-separated detector tokens (e.g. msp,energy@react,mme)");
  cmd->add_option("--temperature", f.temperature, "NME+ temperature T");
  cmd->add_option("--lambda", f.lambda, "CO+ boost lambda");
  cmd->add_option("--benchmark", f.benchmark, "Temperature preset: large (T=0.5) or small (T=0.1)");
  cmd->add_option("--splits", f.splits, "Comma-separated split names (score only)");
  cmd->add_option("--tpr", f.tpr_level, "TPR operating level for the FPR metric");
}

mme::RunConfig build_config(const Flags& f) {
  mme::RunConfig cfg;
  if (!f.manifest.empty()) cfg.manifest = f.manifest;
  if (!f.stats.empty()) cfg.stats_dir = f.stats;
  if (!f.out.empty()) cfg.out_dir = f.out;
  if (!f.detectors.empty()) cfg.detectors = split_list(f.detectors);
  if (!f.splits.empty()) cfg.splits = split_list(f.splits);
  if (!f.benchmark.empty()) cfg.ensemble.temperature = mme::benchmark_temperature(f.benchmark);
  if (f.temperature) cfg.ensemble.temperature = *f.temperature;
  if (f.lambda) cfg.ensemble.lambda = *f.lambda;
  if (f.tpr_level) cfg.tpr_level = *f.tpr_level;
  if (f.seed) {
    cfg.seed = *f.seed;
    cfg.calibration.seed = *f.seed;
  }
  if (!f.config.empty()) mme::apply_config_file(cfg, f.config);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-method ensemble OOD detection toolkit"};
  app.set_version_flag("--version", std::string(mme::kVersion));
  app.require_subcommand(1);
  Flags f;

  auto* calibrate = app.add_subcommand("calibrate", "Fit calibration statistics from id_train splits");
  add_common(calibrate, f, true);
  auto* score = app.add_subcommand("score", "Write per-split score vectors");
  add_common(score, f, true);
  auto* eval = app.add_subcommand("eval", "Compute AUROC / FPR95 per detector and OOD split");
  add_common(eval, f, true);
  auto* ablate = app.add_subcommand("ablate", "Sweep ensemble hyperparameters, truncations and extra scorers");
  add_common(ablate, f, true);
  auto* analyze = app.add_subcommand("analyze", "Consistency, covariance, prop1 or hyp1 analysis");
  add_common(analyze, f, true);
  analyze->add_option("which", f.which, "consistency | covariance | prop1 | hyp1")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const auto cfg = build_config(f);
    if (calibrate->parsed()) {
      mme::cmd_calibrate(cfg);
      std::cout << "wrote " << cfg.stats_dir.string() << "\n";
    } else if (score->parsed()) {
      const auto scores = mme::cmd_score(cfg);
      std::cout << "scored " << scores.size() << " splits into " << (cfg.out_dir / "scores").string() << "\n";
    } else if (eval->parsed()) {
      const auto r = mme::cmd_eval(cfg);
      std::cout << r.metrics.str();
    } else if (ablate->parsed()) {
      const auto rows = mme::cmd_ablate(cfg);
      std::cout << rows.size() << " configurations written to " << (cfg.out_dir / "ablation.csv").string() << "\n";
    } else if (analyze->parsed()) {
      std::cout << mme::cmd_analyze(cfg, f.which).str();
    }
  } catch (const mme::Error& e) {
    std::cerr << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "NumericError: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
