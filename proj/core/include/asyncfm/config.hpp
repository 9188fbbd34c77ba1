#pragma once

#include <cstdint>
#include <string>

#include "asyncfm/backbone.hpp"
#include "asyncfm/rater.hpp"

namespace asyncfm {

// Synthetic task family parameters. Ground truth is a pure function of
// (spec, seed): per-episode Fourier (or linear) coefficients drawn from
// task-conditioned distributions, context tokens = coefficients + noise.
struct BenchSpec {
  int num_tasks = 4;
  int L = 8;
  int D = 4;
  int S = 8;
  int d_in = 6;
  int fourier = 3;        // frequency components per action dim
  double sigma_obs = 0.02;
  double amplitude = 0.45;
  double smoothness = 0.6;
  std::string family = "fourier";  // fourier | linear
  uint64_t seed = 7;
  int n_train = 2048;
  int n_val = 256;
  int n_test = 256;

  void validate() const;
};

struct TrainSpec {
  int batch = 64;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.0;
  int epochs = 18;
  uint64_t seed = 1;
  int ckpt_every = 0;  // 0: final checkpoint only
};

struct RaterTrainSpec {
  int batch = 64;
  double lr = 1e-3;
  int epochs = 12;
  int subset = 1024;  // samples per epoch; 0 means the whole train split
  uint64_t seed = 2;
  double alpha = 0.01;
  double beta = 0.98;
  double epsilon = 1e-6;
};

struct FlowSpec {
  int steps = 10;  // uniform integration schedule, delta = 1/steps
};

struct EvalSpec {
  double eps_tube = 0.1;
  int episodes = 200;
  int afm_rounds = 1;
  uint64_t seed = 3;
};

// One declarative document covering every module; unknown keys rejected,
// parse -> serialize round-trips, digest embedded in every artifact.
struct ExperimentConfig {
  BenchSpec bench;
  BackboneConfig backbone;
  RaterConfig rater;
  TrainSpec train;
  RaterTrainSpec rater_train;
  FlowSpec flow;
  EvalSpec eval;

  void validate() const;

  // Canonical JSON (sorted keys, fixed indentation).
  std::string serialize() const;
  static ExperimentConfig parse(const std::string& json_text);
  static ExperimentConfig load_file(const std::string& path);

  uint64_t digest() const;

  // Backbone geometry fields (L, D, S, d_in, num_tasks) mirror the bench
  // spec; this stamps them onto the model config.
  BackboneConfig backbone_full() const;
};

}  // namespace asyncfm
