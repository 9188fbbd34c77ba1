#pragma once

#include <string>
#include <utility>
#include <vector>

#include "asyncfm/bench.hpp"
#include "asyncfm/trainer.hpp"

namespace asyncfm {

// Machine-readable report: ordered key/value pairs, tab-separated text.
// Deterministic content only; wall-clock timings go to a sidecar file.
struct EvalReport {
  std::vector<std::pair<std::string, double>> kv;

  void add(const std::string& key, double value) { kv.emplace_back(key, value); }
  double get(const std::string& key) const;
  std::string text() const;
};

// Per-stage wall time accumulated over an evaluation run.
struct StageTimings {
  double sfm_ms = 0.0, rater_ms = 0.0, afm_ms = 0.0;
  std::string text() const;
};

void write_report(const EvalReport& report, const StageTimings* timings,
                  uint64_t config_digest, uint64_t seed, const std::string& path);

// Plain evaluation of one inference mode over episodes.
EvalReport eval_mode(const Backbone<Real>& model, const Rater<Real>* rater,
                     std::span<const Episode> episodes, InferMode mode,
                     const ExperimentConfig& cfg, StageTimings* timings = nullptr);

// Corruption-injection study: SFM, inject, score/mask/regenerate, compare
// the three inference modes plus an oracle mask side by side.
EvalReport self_correction_eval(const Backbone<Real>& model, const Rater<Real>& rater,
                                std::span<const Episode> episodes,
                                const CorruptionSpec& corruption,
                                const ExperimentConfig& cfg,
                                StageTimings* timings = nullptr);

// Seed-matched unified-mask vs all-one-mask training on a data fraction.
// One row per epoch: train loss and held-out masked-velocity MSE for both.
struct EfficiencyCurve {
  uint64_t seed;
  std::vector<double> unified_train, allone_train;
  std::vector<double> unified_val, allone_val;
};

std::vector<EfficiencyCurve> data_efficiency_eval(const ExperimentConfig& cfg,
                                                  const Dataset& data, double fraction,
                                                  int epochs,
                                                  const std::vector<uint64_t>& seeds);

// Held-out masked-velocity MSE under fixed evaluation draws.
double masked_velocity_mse(const Backbone<Real>& model, std::span<const Episode> episodes,
                           uint64_t eval_seed);

void write_efficiency_curves(const std::vector<EfficiencyCurve>& curves,
                             uint64_t config_digest, const std::string& path);

}  // namespace asyncfm
