#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "asyncfm/backbone.hpp"
#include "asyncfm/config.hpp"
#include "asyncfm/rater.hpp"
#include "asyncfm/types.hpp"

namespace asyncfm {

// Versioned binary container: header (magic, version, config digest),
// embedded config document, named float32 tensors, RNG stream states,
// epoch counter and loss history. Round-trips bit-exactly.
struct Checkpoint {
  uint32_t version = 1;
  uint64_t config_digest = 0;
  std::string config_json;
  bool has_rater = false;
  std::vector<std::pair<std::string, MatR>> tensors;
  std::vector<std::pair<std::string, uint64_t>> rng_states;
  int64_t epoch = 0;
  std::vector<double> loss_history;
};

Checkpoint snapshot(const ExperimentConfig& cfg, Backbone<Real>& backbone,
                    Rater<Real>* rater,
                    std::vector<std::pair<std::string, uint64_t>> rng_states,
                    int64_t epoch, std::vector<double> loss_history);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint_file(const std::string& path);

struct LoadedModels {
  ExperimentConfig config;
  Backbone<Real> backbone;
  std::optional<Rater<Real>> rater;
  int64_t epoch = 0;
  std::vector<double> loss_history;
};

LoadedModels restore(const Checkpoint& ckpt);

// Order-sensitive digest of all parameters; used for frozen-model asserts.
uint64_t param_digest(std::vector<ParamRef<Real>> params);

}  // namespace asyncfm
