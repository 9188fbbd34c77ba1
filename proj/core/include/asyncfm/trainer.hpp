#pragma once

#include <functional>
#include <ostream>
#include <span>
#include <vector>

#include "asyncfm/adam.hpp"
#include "asyncfm/backbone.hpp"
#include "asyncfm/bench.hpp"
#include "asyncfm/config.hpp"
#include "asyncfm/rater.hpp"

namespace asyncfm {

// Mask handling in one unified-training step. AllOne reduces the step to
// vanilla synchronous flow matching; AllZero makes every loss term 0.
enum class MaskMode { Sampled, AllOne, AllZero };

enum class InferMode { SfmOnly, Async, RandomMask };

InferMode parse_infer_mode(const std::string& name);
std::string infer_mode_name(InferMode mode);

// One optimizer step over a mini-batch (Algorithm-2 inner loop). Returns
// the batch loss. Draws: per sample y,m from rng.mask (skipped unless
// Sampled), tau from rng.time, noise from rng.noise.
double train_step(Backbone<Real>& model, Adam<Real>& opt,
                  std::span<const Episode* const> batch, RngSet& rng,
                  MaskMode mode = MaskMode::Sampled);

struct TrainCallbackInfo {
  int epoch;
  double train_loss;
};

using EpochCallback = std::function<void(const TrainCallbackInfo&, Backbone<Real>&)>;

// Shuffled mini-batch epochs of train_step. Appends per-epoch mean loss to
// `loss_history` and `epoch<TAB>train<TAB>loss` lines to `log` when given.
void train_backbone_loop(Backbone<Real>& model, std::span<const Episode> data,
                         const TrainSpec& spec, AdamConfig adam_cfg, RngSet& rng,
                         std::vector<double>& loss_history, std::ostream* log,
                         MaskMode mode = MaskMode::Sampled,
                         const EpochCallback& on_epoch = {});

// Fresh model + full training run from the experiment config.
Backbone<Real> train_backbone(std::span<const Episode> data, const ExperimentConfig& cfg,
                              RngSet& rng, std::vector<double>& loss_history,
                              std::ostream* log);

// Synchronous flow matching: all tokens from noise, K uniform Euler steps.
MatR sfm_infer(const Backbone<Real>& model, const ContextCache<Real>& cache,
               const ContextBundle& ctx, RandomSource& noise, int steps);

// Asynchronous flow matching from first-round actions under a mask.
MatR afm_infer(const Backbone<Real>& model, const ContextCache<Real>& cache,
               const ContextBundle& ctx, const MatR& sfm_actions, const TokenMask& mask,
               RandomSource& noise, int steps);

// Batched SFM over many episodes (no KV-cache; used during rater training
// and evaluation sweeps).
std::vector<MatR> sfm_infer_batch(const Backbone<Real>& model,
                                  std::span<const Episode* const> batch,
                                  RandomSource& noise, int steps);

// Trains the rater against pseudo-labels built from frozen-backbone SFM
// errors. The backbone is bit-unchanged afterwards (asserted).
void train_rater_loop(Rater<Real>& rater, const Backbone<Real>& frozen,
                      std::span<const Episode> data, const RaterTrainSpec& spec,
                      int flow_steps, std::vector<double>& loss_history, std::ostream* log);

struct Diagnostics {
  std::vector<double> confidence;
  TokenMask mask;
  MatR sfm_actions;
  double sfm_ms = 0.0, rater_ms = 0.0, afm_ms = 0.0;
  bool rater_invoked = false;
  int cache_rebuilds = 0;
  int afm_rounds_run = 0;
};

// Full episode pipeline: context cache, SFM, then (mode-dependent) rater
// scoring and AFM regeneration. `reusable_cache`, when given, is used if
// its fingerprint matches and rebuilt with a warning otherwise.
MatR infer_episode(const Backbone<Real>& model, const Rater<Real>* rater,
                   const ContextBundle& ctx, InferMode mode, RandomSource& noise,
                   RandomSource& mask_rng, int steps, double threshold, int afm_rounds,
                   Diagnostics* diag = nullptr, ContextCache<Real>* reusable_cache = nullptr);

}  // namespace asyncfm
