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

// End-to-end commands: calibrate, score, eval, ablate, analyze. The `mme`
// executable is a flag parser over these functions, so library callers get
// byte-identical outputs.

#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mme/calibration.hpp"
#include "mme/csv.hpp"
#include "mme/ensemble.hpp"
#include "mme/evaluation.hpp"
#include "mme/scoring.hpp"
#include "mme/tensor_store.hpp"
#include "mme/truncation.hpp"

namespace mme {

// --- detector registry -----------------------------------------------------

inline const std::vector<std::string>& base_detectors() {
  static const std::vector<std::string> names{"msp", "mls", "energy", "maha", "kl",      "vim",
                                              "gen", "she", "nnguide", "fdbd", "pca"};
  return names;
}

inline const std::vector<std::string>& default_detectors() {
  static const std::vector<std::string> names = [] {
    auto v = base_detectors();
    v.insert(v.end(), {"nme+", "co+", "mme"});
    return v;
  }();
  return names;
}

/// A detector token: a scorer name, optionally followed by "@<truncation>"
/// (e.g. "energy@react").
struct DetectorToken {
  std::string scorer;
  Truncation truncation = Truncation::kNone;
  std::string text;
};

inline DetectorToken parse_detector(const std::string& token) {
  DetectorToken t;
  t.text = token;
  const auto at = token.find('@');
  t.scorer = token.substr(0, at);
  if (at != std::string::npos) t.truncation = parse_truncation(token.substr(at + 1));
  const auto& known = default_detectors();
  if (std::find(known.begin(), known.end(), t.scorer) == known.end()) {
    throw ConfigError("unknown detector \"" + token + "\"");
  }
  if (t.truncation != Truncation::kNone && (t.scorer == "mme" || t.scorer == "co+")) {
    throw ConfigError("detector \"" + t.scorer + "\" does not take a truncation suffix");
  }
  return t;
}

/// Whether any requested detector reads the VRA-refit statistics.
inline bool needs_vra_stats(const std::vector<std::string>& detectors) {
  for (const auto& d : detectors) {
    const auto t = parse_detector(d);
    if (t.scorer == "mme" || t.truncation == Truncation::kVra) return true;
  }
  return false;
}

struct ScoringContext {
  const CalibrationStats* raw = nullptr;
  const CalibrationStats* vra = nullptr;
  EnsembleParams ensemble;
  MmeLayout layout;
};

inline ScoreVector compute_detector(const std::string& token, const Matrix& features, const Matrix& logits,
                                    const ScoringContext& ctx) {
  if (ctx.raw == nullptr) throw ConfigError("calibration statistics are required");
  const auto t = parse_detector(token);
  const CalibrationStats& raw = *ctx.raw;

  if (t.scorer == "mme") {
    auto s = mme(features, logits, raw, ctx.vra, ctx.ensemble, ctx.layout);
    s.detector_name = t.text;
    return s;
  }
  if (t.scorer == "co+") {
    auto s = co_plus(predictions(features, logits, raw), ctx.ensemble.lambda);
    s.detector_name = t.text;
    return s;
  }

  const CalibrationStats& stats = detail::stats_for(t.truncation, raw, ctx.vra);
  const auto in = truncated_inputs(t.truncation, features, logits, raw);
  ScoreVector s;
  if (t.scorer == "msp") s = msp(in.logits);
  else if (t.scorer == "mls") s = mls(in.logits);
  else if (t.scorer == "energy") s = energy(in.logits);
  else if (t.scorer == "maha") s = mahalanobis(in.features, stats);
  else if (t.scorer == "kl") s = kl_matching(in.logits, stats);
  else if (t.scorer == "vim") s = vim(in.features, in.logits, stats);
  else if (t.scorer == "gen") s = gen(in.logits);
  else if (t.scorer == "she") s = she(in.features, in.logits, stats);
  else if (t.scorer == "nnguide") s = nnguide(in.features, in.logits, stats);
  else if (t.scorer == "fdbd") s = fdbd(in.features, in.logits, stats);
  else if (t.scorer == "pca") s = pca_score(in.features, stats);
  else if (t.scorer == "nme+") s = nme_plus(in.features, stats, ctx.ensemble.temperature);
  else throw ConfigError("unknown detector \"" + token + "\"");
  s.detector_name = t.text;
  return s;
}

// --- run configuration -----------------------------------------------------

struct AblationGrid {
  std::vector<double> lambdas{1.0, 1.5, 2.0, 4.0};
  std::vector<double> temperatures{0.05, 0.1, 0.5, 1.0};
  std::vector<std::string> studies{"hyper", "truncation", "extras"};
};

struct AnalysisOptions {
  std::vector<std::string> covariance_detectors{"mls", "energy", "vim", "gen", "nnguide", "fdbd"};
  SyntheticSpec prop1;
  std::size_t prop1_trials = 100;
  double prop1_tolerance = 1e-6;
  TruncationFamilySpec hyp1;
  std::size_t hyp1_seeds = 20;
  std::vector<std::string> hyp1_truncations{"react", "vra", "ash", "scale", "dice", "none"};
};

struct RunConfig {
  std::filesystem::path manifest;
  std::filesystem::path stats_dir;
  std::filesystem::path out_dir = "mme_out";
  std::vector<std::string> detectors = default_detectors();
  std::vector<std::string> splits;  // empty = every split
  EnsembleParams ensemble;
  CalibrationConfig calibration;
  double tpr_level = 0.95;
  std::uint64_t seed = 0;
  AblationGrid ablation;
  AnalysisOptions analysis;

  void validate() const {
    ensemble.validate();
    calibration.truncation.validate();
    if (!(tpr_level > 0.0 && tpr_level <= 1.0)) throw ConfigError("tpr_level must lie in (0, 1]");
    for (const auto& d : detectors) parse_detector(d);
  }
};

/// Temperature preset for a benchmark family.
inline double benchmark_temperature(const std::string& benchmark) {
  if (benchmark == "large") return 0.5;
  if (benchmark == "small") return 0.1;
  throw ConfigError("unknown benchmark \"" + benchmark + "\" (expected large or small)");
}

namespace detail {

template <typename T>
std::vector<T> json_list(const nlohmann::json& j, const char* key) {
  if (!j.is_array()) throw SchemaError(std::string("\"") + key + "\" must be an array");
  try {
    return j.get<std::vector<T>>();
  } catch (const nlohmann::json::exception&) {
    throw SchemaError(std::string("\"") + key + "\" has elements of the wrong type");
  }
}

template <typename T>
T json_value(const nlohmann::json& j, const char* key) {
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw SchemaError(std::string("\"") + key + "\" has the wrong type");
  }
}

}  // namespace detail

/// Applies a JSON config document on top of `cfg`. Keys mirror the CLI
/// flags; unknown keys are rejected.
inline void apply_config_json(RunConfig& cfg, const nlohmann::json& doc) {
  using detail::json_list;
  using detail::json_value;
  if (!doc.is_object()) throw SchemaError("config root must be an object");
  static const std::set<std::string> known{"manifest",  "stats",     "out",         "detectors",    "splits",
                                           "temperature", "lambda",  "benchmark",   "seed",         "tpr_level",
                                           "truncation", "subspace_dim", "nn_bank_size", "k_nn", "ablation",
                                           "analysis",  "epsilon"};
  for (const auto& [key, value] : doc.items()) {
    if (!known.count(key)) throw SchemaError("unknown config key \"" + key + "\"");
  }
  if (doc.contains("manifest")) cfg.manifest = json_value<std::string>(doc["manifest"], "manifest");
  if (doc.contains("stats")) cfg.stats_dir = json_value<std::string>(doc["stats"], "stats");
  if (doc.contains("out")) cfg.out_dir = json_value<std::string>(doc["out"], "out");
  if (doc.contains("detectors")) cfg.detectors = json_list<std::string>(doc["detectors"], "detectors");
  if (doc.contains("splits")) cfg.splits = json_list<std::string>(doc["splits"], "splits");
  if (doc.contains("benchmark")) cfg.ensemble.temperature = benchmark_temperature(json_value<std::string>(doc["benchmark"], "benchmark"));
  if (doc.contains("temperature")) cfg.ensemble.temperature = json_value<double>(doc["temperature"], "temperature");
  if (doc.contains("lambda")) cfg.ensemble.lambda = json_value<double>(doc["lambda"], "lambda");
  if (doc.contains("epsilon")) cfg.ensemble.epsilon = json_value<double>(doc["epsilon"], "epsilon");
  if (doc.contains("seed")) {
    cfg.seed = json_value<std::uint64_t>(doc["seed"], "seed");
    cfg.calibration.seed = cfg.seed;
  }
  if (doc.contains("tpr_level")) cfg.tpr_level = json_value<double>(doc["tpr_level"], "tpr_level");
  if (doc.contains("truncation")) cfg.calibration.truncation = truncation_from_json(doc["truncation"], cfg.calibration.truncation);
  if (doc.contains("subspace_dim")) cfg.calibration.subspace_dim = json_value<int>(doc["subspace_dim"], "subspace_dim");
  if (doc.contains("nn_bank_size")) cfg.calibration.nn_bank_size = json_value<long>(doc["nn_bank_size"], "nn_bank_size");
  if (doc.contains("k_nn")) cfg.calibration.k_nn = json_value<int>(doc["k_nn"], "k_nn");
  if (doc.contains("ablation")) {
    const auto& a = doc["ablation"];
    if (!a.is_object()) throw SchemaError("\"ablation\" must be an object");
    if (a.contains("lambdas")) cfg.ablation.lambdas = json_list<double>(a["lambdas"], "lambdas");
    if (a.contains("temperatures")) cfg.ablation.temperatures = json_list<double>(a["temperatures"], "temperatures");
    if (a.contains("studies")) cfg.ablation.studies = json_list<std::string>(a["studies"], "studies");
  }
  if (doc.contains("analysis")) {
    const auto& a = doc["analysis"];
    if (!a.is_object()) throw SchemaError("\"analysis\" must be an object");
    auto& o = cfg.analysis;
    if (a.contains("covariance_detectors")) o.covariance_detectors = json_list<std::string>(a["covariance_detectors"], "covariance_detectors");
    if (a.contains("prop1_trials")) o.prop1_trials = json_value<std::size_t>(a["prop1_trials"], "prop1_trials");
    if (a.contains("prop1_tolerance")) o.prop1_tolerance = json_value<double>(a["prop1_tolerance"], "prop1_tolerance");
    if (a.contains("rho_in")) o.prop1.correlation_in = json_value<double>(a["rho_in"], "rho_in");
    if (a.contains("rho_out")) o.prop1.correlation_out = json_value<double>(a["rho_out"], "rho_out");
    if (a.contains("id_mean")) o.prop1.id_mean = json_list<double>(a["id_mean"], "id_mean");
    if (a.contains("ood_mean")) o.prop1.ood_mean = json_list<double>(a["ood_mean"], "ood_mean");
    if (a.contains("n")) o.prop1.n_id = o.prop1.n_ood = json_value<std::size_t>(a["n"], "n");
    if (a.contains("hyp1_seeds")) o.hyp1_seeds = json_value<std::size_t>(a["hyp1_seeds"], "hyp1_seeds");
    if (a.contains("hyp1_truncations")) o.hyp1_truncations = json_list<std::string>(a["hyp1_truncations"], "hyp1_truncations");
  }
}

inline void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  apply_config_json(cfg, doc);
}

// --- shared helpers --------------------------------------------------------

struct LoadedStats {
  CalibrationStats raw;
  std::optional<CalibrationStats> vra;

  ScoringContext context(const EnsembleParams& params, MmeLayout layout = {}) const {
    return {&raw, vra ? &*vra : nullptr, params, std::move(layout)};
  }
};

inline std::filesystem::path vra_stats_dir(const std::filesystem::path& stats_dir) { return stats_dir / "vra"; }

inline LoadedStats load_run_stats(const RunConfig& cfg) {
  if (cfg.stats_dir.empty()) throw ConfigError("--stats is required");
  LoadedStats s{load_stats(cfg.stats_dir), std::nullopt};
  if (std::filesystem::exists(vra_stats_dir(cfg.stats_dir) / "stats.json")) s.vra = load_stats(vra_stats_dir(cfg.stats_dir));
  return s;
}

inline DatasetManifest load_run_manifest(const RunConfig& cfg) {
  if (cfg.manifest.empty()) throw ConfigError("--manifest is required");
  return load_manifest(cfg.manifest);
}

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

/// Features and logits of a split, widened to float64.
struct SplitArrays {
  Matrix features;
  Matrix logits;
};

inline SplitArrays split_arrays(const Split& s) { return {to_matrix(s.features), to_matrix(s.logits)}; }

/// All id_test rows stacked in split-name order.
inline SplitArrays id_test_arrays(const DatasetManifest& m) {
  const auto tests = m.with_role(SplitRole::kIdTest);
  Eigen::Index rows = 0;
  for (const auto* s : tests) rows += static_cast<Eigen::Index>(s->size());
  SplitArrays out{Matrix(rows, m.feature_dim), Matrix(rows, m.num_classes)};
  Eigen::Index at = 0;
  for (const auto* s : tests) {
    const auto n = static_cast<Eigen::Index>(s->size());
    out.features.middleRows(at, n) = to_matrix(s->features);
    out.logits.middleRows(at, n) = to_matrix(s->logits);
    at += n;
  }
  return out;
}

inline std::string score_file_name(const std::string& token) {
  std::string out;
  for (char c : token) {
    if (c == '+') out += "_plus";
    else if (c == '@') out += "_at_";
    else out += c;
  }
  return out + ".npy";
}

// --- calibrate -------------------------------------------------------------

/// Fits raw statistics (and VRA-refit statistics when a requested detector
/// needs them) and writes them under cfg.stats_dir.
inline LoadedStats cmd_calibrate(const RunConfig& cfg) {
  cfg.validate();
  if (cfg.stats_dir.empty()) throw ConfigError("--stats is required");
  const auto manifest = load_run_manifest(cfg);
  auto calib = cfg.calibration;
  calib.seed = cfg.seed;
  const auto data = gather_id_train(manifest);
  LoadedStats out{calibrate(data.features, data.logits, data.labels, to_matrix(manifest.head_weights),
                            to_vector(manifest.head_bias), calib),
                  std::nullopt};
  if (auto bad = check_invariants(out.raw); !bad.empty()) throw CalibrationError("raw statistics: " + bad.front());
  save_stats(out.raw, cfg.stats_dir);
  if (needs_vra_stats(cfg.detectors)) {
    out.vra = calibrate_truncated(data.features, data.labels, out.raw, calib);
    if (auto bad = check_invariants(*out.vra); !bad.empty()) throw CalibrationError("VRA statistics: " + bad.front());
    save_stats(*out.vra, vra_stats_dir(cfg.stats_dir));
  }
  return out;
}

// --- score -----------------------------------------------------------------

using SplitScores = std::map<std::string, std::vector<ScoreVector>>;

/// Scores every requested split with every requested detector and writes
/// out/scores/<split>/<detector>.npy plus out/scores/scores.json.
inline SplitScores cmd_score(const RunConfig& cfg) {
  cfg.validate();
  const auto manifest = load_run_manifest(cfg);
  const auto stats = load_run_stats(cfg);
  const auto ctx = stats.context(cfg.ensemble);
  const auto root = cfg.out_dir / "scores";
  ensure_dir(root);

  SplitScores result;
  nlohmann::ordered_json index = {{"toolkit_version", kVersion},
                                  {"detectors", cfg.detectors},
                                  {"temperature", cfg.ensemble.temperature},
                                  {"lambda", cfg.ensemble.lambda},
                                  {"splits", nlohmann::ordered_json::object()}};
  for (const auto& split : manifest.splits) {
    if (!cfg.splits.empty() && std::find(cfg.splits.begin(), cfg.splits.end(), split.name) == cfg.splits.end()) continue;
    const auto arrays = split_arrays(split);
    ensure_dir(root / split.name);
    nlohmann::ordered_json files = nlohmann::ordered_json::object();
    for (const auto& det : cfg.detectors) {
      auto s = compute_detector(det, arrays.features, arrays.logits, ctx);
      const auto file = score_file_name(det);
      save_array(from_vector(s.values), root / split.name / file);
      files[det] = split.name + "/" + file;
      result[split.name].push_back(std::move(s));
    }
    index["splits"][split.name] = {{"role", std::string(role_name(split.role))}, {"files", files}};
  }
  for (const auto& name : cfg.splits) {
    if (!manifest.find(name)) throw ConfigError("unknown split \"" + name + "\"");
  }
  const std::string text = index.dump(2) + "\n";
  write_file_bytes(root / "scores.json", std::as_bytes(std::span(text.data(), text.size())));
  return result;
}

// --- eval ------------------------------------------------------------------

struct EvalResult {
  std::vector<DetectionMetrics> rows;  // per detector x OOD split, then averages
  std::map<std::string, double> thresholds;
  CsvTable metrics{{"detector", "ood", "auroc", "fpr95", "v_gap", "n_id", "n_ood"}};
  CsvTable threshold_table{{"detector", "tau", "tpr_level"}};
  CsvTable near_far{{"detector", "near_auroc", "far_auroc"}};
};

/// Metrics of `scorer` on the manifest: ID = all id_test rows, one row per
/// OOD split plus an unweighted average row.
template <typename Scorer>
std::vector<DetectionMetrics> evaluate_manifest(const DatasetManifest& manifest, const std::string& name, Scorer&& scorer,
                                                double tpr_level) {
  const auto id = id_test_arrays(manifest);
  const auto oods = manifest.with_role(SplitRole::kOod);
  if (oods.empty()) throw EvalError("manifest has no OOD split");
  const auto id_scores = scorer(id.features, id.logits).values;
  std::vector<DetectionMetrics> rows;
  DetectionMetrics avg;
  avg.detector_name = name;
  avg.ood_name = "average";
  avg.n_id = id_scores.size();
  for (const auto* split : oods) {
    if (split->size() == 0) throw EvalError("OOD split \"" + split->name + "\" is empty");
    const auto arrays = split_arrays(*split);
    const auto ood_scores = scorer(arrays.features, arrays.logits).values;
    auto m = evaluate_detector(id_scores, ood_scores, name, split->name, tpr_level);
    avg.auroc += m.auroc;
    avg.fpr95 += m.fpr95;
    avg.v_gap += m.v_gap;
    avg.threshold = m.threshold;
    avg.n_ood += m.n_ood;
    rows.push_back(std::move(m));
  }
  const double k = static_cast<double>(oods.size());
  avg.auroc /= k;
  avg.fpr95 /= k;
  avg.v_gap /= k;
  rows.push_back(std::move(avg));
  return rows;
}

inline EvalResult cmd_eval(const RunConfig& cfg) {
  cfg.validate();
  const auto manifest = load_run_manifest(cfg);
  const auto stats = load_run_stats(cfg);
  const auto ctx = stats.context(cfg.ensemble);
  ensure_dir(cfg.out_dir);

  EvalResult r;
  std::map<std::string, std::string> group_of;
  for (const auto* s : manifest.with_role(SplitRole::kOod)) group_of[s->name] = s->group;
  for (const auto& det : cfg.detectors) {
    auto rows = evaluate_manifest(
        manifest, det, [&](const Matrix& f, const Matrix& l) { return compute_detector(det, f, l, ctx); }, cfg.tpr_level);
    double near = 0, far = 0;
    int n_near = 0, n_far = 0;
    for (const auto& m : rows) {
      r.metrics.row().add(m.detector_name).add(m.ood_name).add(m.auroc).add(m.fpr95).add(m.v_gap).add(m.n_id).add(m.n_ood);
      if (m.ood_name == "average") continue;
      if (group_of[m.ood_name] == "near") near += m.auroc, ++n_near;
      if (group_of[m.ood_name] == "far") far += m.auroc, ++n_far;
    }
    r.thresholds[det] = rows.back().threshold;
    r.threshold_table.row().add(det).add(rows.back().threshold).add(cfg.tpr_level);
    if (n_near > 0 && n_far > 0) r.near_far.row().add(det).add(near / n_near).add(far / n_far);
    r.rows.insert(r.rows.end(), rows.begin(), rows.end());
  }
  r.metrics.save(cfg.out_dir / "metrics.csv");
  r.threshold_table.save(cfg.out_dir / "thresholds.csv");
  if (r.near_far.size() > 0) r.near_far.save(cfg.out_dir / "near_far.csv");
  return r;
}

// --- ablate ----------------------------------------------------------------

struct AblationVariant {
  std::string study;
  std::string variant;
  EnsembleParams params;
  MmeLayout layout;
};

inline std::vector<AblationVariant> ablation_variants(const RunConfig& cfg) {
  std::vector<AblationVariant> out;
  for (const auto& study : cfg.ablation.studies) {
    if (study == "hyper") {
      for (double lambda : cfg.ablation.lambdas) {
        for (double t : cfg.ablation.temperatures) {
          EnsembleParams p = cfg.ensemble;
          p.lambda = lambda;
          p.temperature = t;
          out.push_back({study, "lambda=" + format_number(lambda) + " T=" + format_number(t), p, {}});
        }
      }
    } else if (study == "truncation") {
      auto with = [&](const std::string& name, auto mutate) {
        MmeLayout layout;
        mutate(layout);
        out.push_back({study, name, cfg.ensemble, layout});
      };
      with("baseline", [](MmeLayout&) {});
      with("energy:none", [](MmeLayout& l) { l.energy_term = Truncation::kNone; });
      with("energy:vra", [](MmeLayout& l) { l.energy_term = Truncation::kVra; });
      with("vim:none", [](MmeLayout& l) { l.vim_term = Truncation::kNone; });
      with("vim:scale", [](MmeLayout& l) { l.vim_term = Truncation::kScale; });
      with("fdbd:none", [](MmeLayout& l) { l.fdbd_term = Truncation::kNone; });
      with("fdbd:scale", [](MmeLayout& l) { l.fdbd_term = Truncation::kScale; });
      with("pca:none", [](MmeLayout& l) { l.pca_term = Truncation::kNone; });
      with("pca:scale", [](MmeLayout& l) { l.pca_term = Truncation::kScale; });
      with("nme+:scale", [](MmeLayout& l) { l.nme_term = Truncation::kScale; });
      with("nme+:vra", [](MmeLayout& l) { l.nme_term = Truncation::kVra; });
      with("no_co+", [](MmeLayout& l) { l.use_co_plus = false; });
    } else if (study == "extras") {
      out.push_back({study, "none", cfg.ensemble, {}});
      for (const char* extra : {"gen", "nnguide", "she"}) {
        MmeLayout layout;
        layout.extras = {extra};
        out.push_back({study, std::string("+") + extra, cfg.ensemble, layout});
      }
    } else {
      throw ConfigError("unknown ablation study \"" + study + "\" (expected hyper, truncation or extras)");
    }
  }
  return out;
}

struct AblationRow {
  AblationVariant variant;
  DetectionMetrics average;
};

/// One CSV row per ensemble configuration, with metrics averaged over the
/// OOD splits.
inline std::vector<AblationRow> cmd_ablate(const RunConfig& cfg) {
  cfg.validate();
  const auto manifest = load_run_manifest(cfg);
  const auto stats = load_run_stats(cfg);
  ensure_dir(cfg.out_dir);
  CsvTable table({"study", "variant", "lambda", "temperature", "auroc", "fpr95"});
  std::vector<AblationRow> rows;
  for (auto& v : ablation_variants(cfg)) {
    const auto ctx = stats.context(v.params, v.layout);
    auto metrics = evaluate_manifest(
        manifest, "mme", [&](const Matrix& f, const Matrix& l) { return compute_detector("mme", f, l, ctx); }, cfg.tpr_level);
    const auto& avg = metrics.back();
    table.row().add(v.study).add(v.variant).add(v.params.lambda).add(v.params.temperature).add(avg.auroc).add(avg.fpr95);
    rows.push_back({std::move(v), avg});
  }
  table.save(cfg.out_dir / "ablation.csv");
  return rows;
}

// --- analyze ---------------------------------------------------------------

inline CsvTable analyze_consistency(const RunConfig& cfg) {
  const auto manifest = load_run_manifest(cfg);
  const auto stats = load_run_stats(cfg);
  CsvTable t({"split", "role", "n", "consistency_ratio"});
  for (const auto& s : manifest.splits) {
    const auto a = split_arrays(s);
    const auto pairs = predictions(a.features, a.logits, stats.raw);
    t.row().add(s.name).add(std::string(role_name(s.role))).add(pairs.size()).add(consistency_ratio(pairs));
  }
  return t;
}

inline CsvTable analyze_covariance(const RunConfig& cfg) {
  const auto manifest = load_run_manifest(cfg);
  const auto stats = load_run_stats(cfg);
  const auto ctx = stats.context(cfg.ensemble);
  const auto& dets = cfg.analysis.covariance_detectors;
  if (dets.empty()) throw ConfigError("covariance needs at least one detector");
  CsvTable t({"split", "detector_a", "detector_b", "covariance"});
  auto emit = [&](const std::string& split, const Matrix& cov) {
    for (std::size_t a = 0; a < dets.size(); ++a) {
      for (std::size_t b = 0; b < dets.size(); ++b) {
        t.row().add(split).add(dets[a]).add(dets[b]).add(cov(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)));
      }
    }
  };
  auto cov_of = [&](const Matrix& f, const Matrix& l) {
    std::vector<ScoreVector> scores;
    for (const auto& d : dets) scores.push_back(compute_detector(d, f, l, ctx));
    return covariance_matrix(scores);
  };
  const auto id = id_test_arrays(manifest);
  emit("id", cov_of(id.features, id.logits));
  const auto oods = manifest.with_role(SplitRole::kOod);
  Matrix avg = Matrix::Zero(static_cast<Eigen::Index>(dets.size()), static_cast<Eigen::Index>(dets.size()));
  for (const auto* s : oods) {
    const auto a = split_arrays(*s);
    const Matrix cov = cov_of(a.features, a.logits);
    emit(s->name, cov);
    avg += cov;
  }
  if (!oods.empty()) emit("ood_average", avg / static_cast<double>(oods.size()));
  return t;
}

inline CsvTable analyze_prop1(const RunConfig& cfg) {
  auto spec = cfg.analysis.prop1;
  spec.seed = cfg.seed;
  const auto r = proposition1_check(spec, cfg.analysis.prop1_trials, cfg.analysis.prop1_tolerance);
  CsvTable t({"trials", "passes", "pass_rate", "covariance_premise_held", "min_margin", "tolerance", "rho_in", "rho_out",
              "n", "seed"});
  t.row()
      .add(r.trials)
      .add(r.passes)
      .add(r.pass_rate())
      .add(r.covariance_premise_held)
      .add(r.min_margin)
      .add(r.tolerance)
      .add(spec.correlation_in)
      .add(spec.correlation_out)
      .add(spec.n_id)
      .add(std::to_string(r.seed));
  return t;
}

inline CsvTable analyze_hyp1(const RunConfig& cfg) {
  CsvTable t({"seed", "truncation", "auroc_base", "auroc_truncated", "v_gap_base", "v_gap_truncated", "feature_gap_base",
              "feature_gap_truncated", "improved"});
  for (std::size_t k = 0; k < cfg.analysis.hyp1_seeds; ++k) {
    auto spec = cfg.analysis.hyp1;
    spec.seed = cfg.seed + k;
    for (const auto& name : cfg.analysis.hyp1_truncations) {
      const auto r = hypothesis1_check(spec, parse_truncation(name), cfg.calibration.truncation);
      t.row()
          .add(std::to_string(spec.seed))
          .add(std::string(truncation_name(r.truncation)))
          .add(r.auroc_base)
          .add(r.auroc_truncated)
          .add(r.v_gap_base)
          .add(r.v_gap_truncated)
          .add(r.feature_gap_base)
          .add(r.feature_gap_truncated)
          .add(r.improved() ? 1 : 0);
    }
  }
  return t;
}

/// Runs one analysis and writes out/analysis_<which>.csv.
inline CsvTable cmd_analyze(const RunConfig& cfg, const std::string& which) {
  cfg.validate();
  CsvTable t({});
  if (which == "consistency") t = analyze_consistency(cfg);
  else if (which == "covariance") t = analyze_covariance(cfg);
  else if (which == "prop1") t = analyze_prop1(cfg);
  else if (which == "hyp1") t = analyze_hyp1(cfg);
  else throw ConfigError("unknown analysis \"" + which + "\" (expected consistency, covariance, prop1 or hyp1)");
  ensure_dir(cfg.out_dir);
  t.save(cfg.out_dir / ("analysis_" + which + ".csv"));
  return t;
}

}  // namespace mme
