// Microbenchmarks for the inference-critical paths: uncached vs cached
// forward passes, full SFM episodes and rater scoring.

#include <benchmark/benchmark.h>

#include "asyncfm/backbone.hpp"
#include "asyncfm/bench.hpp"
#include "asyncfm/rater.hpp"
#include "asyncfm/trainer.hpp"

using namespace asyncfm;

namespace {

struct Fixture {
  ExperimentConfig cfg;
  Backbone<Real> model;
  Rater<Real> rater;
  Episode ep;

  Fixture() {
    RandomSource rng(11, "bench.init");
    model.init(cfg.backbone_full(), rng);
    const BackboneConfig bc = cfg.backbone_full();
    rater.init(cfg.rater, bc.d, bc.prefix_len(), bc.L, bc.D, rng);
    ep = gen_episodes(cfg.bench, 1, "bench")[0];
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

void BM_ForwardUncached(benchmark::State& state) {
  auto& f = fixture();
  MatR hidden = f.model.embed_actions(f.ep.actions, 0.5, full_mask(f.model.cfg.L));
  for (auto _ : state) benchmark::DoNotOptimize(f.model.forward(f.ep.ctx, hidden));
}
BENCHMARK(BM_ForwardUncached);

void BM_ForwardCached(benchmark::State& state) {
  auto& f = fixture();
  auto cache = f.model.build_ctx_cache(f.ep.ctx);
  MatR hidden = f.model.embed_actions(f.ep.actions, 0.5, full_mask(f.model.cfg.L));
  for (auto _ : state)
    benchmark::DoNotOptimize(f.model.forward_with_cache(cache, f.ep.ctx, hidden));
}
BENCHMARK(BM_ForwardCached);

void BM_SfmEpisode(benchmark::State& state) {
  auto& f = fixture();
  auto cache = f.model.build_ctx_cache(f.ep.ctx);
  RandomSource noise(3, "bench.noise");
  for (auto _ : state)
    benchmark::DoNotOptimize(sfm_infer(f.model, cache, f.ep.ctx, noise, f.cfg.flow.steps));
}
BENCHMARK(BM_SfmEpisode);

void BM_RaterScore(benchmark::State& state) {
  auto& f = fixture();
  MatR ctx_embed = f.model.embed_context(f.ep.ctx);
  for (auto _ : state) benchmark::DoNotOptimize(f.rater.score(ctx_embed, f.ep.actions));
}
BENCHMARK(BM_RaterScore);

}  // namespace

BENCHMARK_MAIN();
