#pragma once

#include <string>
#include <vector>

#include "asyncfm/config.hpp"
#include "asyncfm/rng.hpp"
#include "asyncfm/types.hpp"

namespace asyncfm {

struct Episode {
  ContextBundle ctx;
  MatR actions;  // L x D, entries in [-1,1]
};

struct Dataset {
  uint64_t spec_digest = 0;
  std::vector<Episode> train, val, test;
};

struct CorruptionSpec {
  std::vector<int> indices;
  double scale = 1.0;
  std::string kind = "gaussian-offset";  // gaussian-offset | replace-with-noise
};

uint64_t bench_digest(const BenchSpec& spec);

// n i.i.d. episodes from the named split stream. Splits drawn from distinct
// streams never share a context.
std::vector<Episode> gen_episodes(const BenchSpec& spec, int n, const std::string& split);

Dataset gen_dataset(const BenchSpec& spec);

MatR corrupt(const MatR& actions, const CorruptionSpec& spec, RandomSource& rng);

// Dataset container: magic, version, spec digest, geometry, three splits.
void save_dataset(const Dataset& ds, const BenchSpec& spec, const std::string& path);
Dataset load_dataset(const std::string& path);

// Episode-level metrics.
double chunk_mse(const MatR& pred, const MatR& gt);
std::vector<double> per_token_mse(const MatR& pred, const MatR& gt);
// Success: every token's RMS error within the tube radius.
bool episode_success(const MatR& pred, const MatR& gt, double eps_tube);

}  // namespace asyncfm
