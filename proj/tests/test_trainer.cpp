#include <doctest.h>

#include <sstream>
#include <vector>

#include "asyncfm/checkpoint.hpp"
#include "asyncfm/flow.hpp"
#include "asyncfm/trainer.hpp"

using namespace asyncfm;

namespace {

ExperimentConfig small_config() {
  return ExperimentConfig::parse(R"({
    "backbone": {"d": 32, "layers": 2, "heads": 2, "ffn": 64},
    "rater": {"d_r": 32, "layers": 2, "heads": 2, "ffn": 64},
    "bench": {"n_train": 64, "n_val": 8, "n_test": 8},
    "train": {"batch": 16, "epochs": 2},
    "rater_train": {"batch": 16, "epochs": 1, "subset": 32}
  })");
}

std::vector<const Episode*> ptrs(const std::vector<Episode>& eps, int n) {
  std::vector<const Episode*> out;
  for (int i = 0; i < n; ++i) out.push_back(&eps[i]);
  return out;
}

}  // namespace

TEST_CASE("mask mode names round-trip") {
  CHECK(parse_infer_mode("sfm-only") == InferMode::SfmOnly);
  CHECK(parse_infer_mode("async") == InferMode::Async);
  CHECK(parse_infer_mode("random-mask") == InferMode::RandomMask);
  for (auto m : {InferMode::SfmOnly, InferMode::Async, InferMode::RandomMask})
    CHECK(parse_infer_mode(infer_mode_name(m)) == m);
  CHECK_THROWS_AS(parse_infer_mode("turbo"), std::invalid_argument);
}

TEST_CASE("an all-zero mask contributes no loss and no update") {
  ExperimentConfig cfg = small_config();
  auto eps = gen_episodes(cfg.bench, 16, "train");
  RngSet rng(3);
  Backbone<Real> model;
  model.init(cfg.backbone_full(), rng.init);
  std::vector<ParamRef<Real>> params;
  model.collect(params);
  Adam<Real> opt(params, AdamConfig{});
  const uint64_t before = param_digest(params);
  double loss = train_step(model, opt, ptrs(eps, 8), rng, MaskMode::AllZero);
  CHECK(loss == 0.0);
  CHECK(param_digest(params) == before);
}

TEST_CASE("training loss trajectories are reproducible and decreasing") {
  ExperimentConfig cfg = small_config();
  auto eps = gen_episodes(cfg.bench, cfg.bench.n_train, "train");
  auto run = [&]() {
    RngSet rng(cfg.train.seed);
    std::vector<double> hist;
    std::ostringstream log;
    Backbone<Real> model;
    model.init(cfg.backbone_full(), rng.init);
    train_backbone_loop(model, eps, cfg.train, AdamConfig{}, rng, hist, &log);
    return std::pair{hist, log.str()};
  };
  auto [h1, l1] = run();
  auto [h2, l2] = run();
  CHECK(h1 == h2);
  CHECK(l1 == l2);
  REQUIRE(h1.size() == 2);
  CHECK(h1.back() < h1.front());
  CHECK(l1.find("0\ttrain\t") != std::string::npos);
  CHECK(l1.find("1\ttrain\t") != std::string::npos);
}

TEST_CASE("unified steps with the all-one mask are vanilla flow matching") {
  // independent vanilla training logic: no mask draws, plain full-chunk
  // velocity MSE and its gradient written out by hand, own update loop
  ExperimentConfig cfg = small_config();
  auto eps = gen_episodes(cfg.bench, 16, "train");
  RngSet rng_a(11), rng_b(11);
  Backbone<Real> unified, vanilla;
  unified.init(cfg.backbone_full(), rng_a.init);
  vanilla.init(cfg.backbone_full(), rng_b.init);

  std::vector<ParamRef<Real>> pa, pb;
  unified.collect(pa);
  vanilla.collect(pb);
  Adam<Real> opt_a(std::vector<ParamRef<Real>>(pa), AdamConfig{});
  Adam<Real> opt_b(std::vector<ParamRef<Real>>(pb), AdamConfig{});

  const int L = cfg.bench.L, D = cfg.bench.D;
  const int B = 8;
  auto batch = ptrs(eps, B);
  const TokenMask ones = full_mask(L);

  for (int step = 0; step < 6; ++step) {
    const double unified_loss = train_step(unified, opt_a, batch, rng_a, MaskMode::AllOne);

    std::vector<VelocityInput<Real>> in(B);
    std::vector<MatR> u(B);
    for (int b = 0; b < B; ++b) {
      const double tau = beta15_inv_cdf(rng_b.time.uniform());
      MatR noise(L, D);
      for (int l = 0; l < L; ++l)
        for (int d = 0; d < D; ++d) noise(l, d) = (Real)rng_b.noise.normal();
      u[b] = noise - batch[b]->actions;
      MatR noisy(L, D);
      for (int l = 0; l < L; ++l)
        noisy.row(l) = batch[b]->actions.row(l) -
                       (Real)tau * (batch[b]->actions.row(l) - noise.row(l));
      in[b] = {&batch[b]->ctx, std::move(noisy), tau, ones};
    }
    BackboneTrainCache<Real> cache;
    MatR v = vanilla.train_forward(std::span<const VelocityInput<Real>>(in), cache);
    double vanilla_loss = 0.0;
    MatR dv(B * L, D);
    for (int b = 0; b < B; ++b) {
      double acc = 0.0;
      for (int l = 0; l < L; ++l)
        for (int d = 0; d < D; ++d) {
          const double diff = (double)v(b * L + l, d) - (double)u[b](l, d);
          acc += diff * diff;
          dv(b * L + l, d) = (Real)(2.0 / ((double)L * D * B)) *
                             (v(b * L + l, d) - u[b](l, d));
        }
      vanilla_loss += acc / ((double)L * D);
    }
    vanilla_loss /= B;
    opt_b.zero_grad();
    vanilla.train_backward(dv, cache);
    opt_b.step();

    INFO("step ", step);
    REQUIRE(vanilla_loss > 0.0);
    CHECK(std::abs(unified_loss - vanilla_loss) / vanilla_loss <= 1e-10);
  }
}

TEST_CASE("sfm respects the cache and afm freezes unmasked tokens") {
  ExperimentConfig cfg = small_config();
  auto eps = gen_episodes(cfg.bench, 2, "train");
  RngSet rng(5);
  Backbone<Real> model;
  model.init(cfg.backbone_full(), rng.init);
  ContextCache<Real> cache = model.build_ctx_cache(eps[0].ctx);

  RandomSource n1(9, "noise"), n2(9, "noise");
  MatR a1 = sfm_infer(model, cache, eps[0].ctx, n1, 10);
  MatR a2 = sfm_infer(model, cache, eps[0].ctx, n2, 10);
  CHECK(a1 == a2);
  CHECK(a1.rows() == cfg.bench.L);
  CHECK(a1.allFinite());

  TokenMask m = empty_mask(cfg.bench.L);
  m[1] = m[3] = 1;
  MatR re = afm_infer(model, cache, eps[0].ctx, a1, m, n1, 10);
  for (int l = 0; l < cfg.bench.L; ++l) {
    if (m[l])
      CHECK(re.row(l) != a1.row(l));
    else
      CHECK(re.row(l) == a1.row(l));
  }
}

TEST_CASE("batched sfm matches the cached episode loop") {
  ExperimentConfig cfg = small_config();
  auto eps = gen_episodes(cfg.bench, 4, "train");
  RngSet rng(5);
  Backbone<Real> model;
  model.init(cfg.backbone_full(), rng.init);
  auto batch = ptrs(eps, 4);
  RandomSource nb(21, "noise");
  auto batched = sfm_infer_batch(model, batch, nb, 10);
  RandomSource ns(21, "noise");
  for (int b = 0; b < 4; ++b) {
    ContextCache<Real> cache = model.build_ctx_cache(eps[b].ctx);
    MatR single = sfm_infer(model, cache, eps[b].ctx, ns, 10);
    CHECK((batched[b] - single).cwiseAbs().maxCoeff() <= 1e-5f);
  }
}

TEST_CASE("rater training leaves the backbone bit-unchanged") {
  ExperimentConfig cfg = small_config();
  auto eps = gen_episodes(cfg.bench, 32, "train");
  RngSet rng(5);
  Backbone<Real> model;
  model.init(cfg.backbone_full(), rng.init);
  std::vector<ParamRef<Real>> params;
  model.collect(params);
  const uint64_t before = param_digest(params);
  Rater<Real> rater;
  rater.init(cfg.rater, cfg.backbone.d, cfg.bench.S + 1, cfg.bench.L, cfg.bench.D, rng.init);
  std::vector<double> hist;
  std::ostringstream log;
  train_rater_loop(rater, model, eps, cfg.rater_train, cfg.flow.steps, hist, &log);
  CHECK(param_digest(params) == before);
  CHECK(hist.size() == 1);
  CHECK(log.str().find("0\trater\t") != std::string::npos);
}

TEST_CASE("episode pipeline modes behave as advertised") {
  ExperimentConfig cfg = small_config();
  auto eps = gen_episodes(cfg.bench, 2, "train");
  RngSet rng(5);
  Backbone<Real> model;
  model.init(cfg.backbone_full(), rng.init);
  Rater<Real> rater;
  rater.init(cfg.rater, cfg.backbone.d, cfg.bench.S + 1, cfg.bench.L, cfg.bench.D, rng.init);

  SUBCASE("sfm-only never touches the rater") {
    RandomSource noise(1, "n"), mrng(1, "m");
    Diagnostics diag;
    MatR out = infer_episode(model, nullptr, eps[0].ctx, InferMode::SfmOnly, noise, mrng, 10,
                             0.5, 1, &diag);
    CHECK_FALSE(diag.rater_invoked);
    CHECK(diag.afm_rounds_run == 0);
    CHECK(out == diag.sfm_actions);
  }

  SUBCASE("async without a rater is an error") {
    RandomSource noise(1, "n"), mrng(1, "m");
    CHECK_THROWS((void)infer_episode(model, nullptr, eps[0].ctx, InferMode::Async, noise,
                                     mrng, 10, 0.5, 1));
  }

  SUBCASE("async scores every token and applies the strict threshold") {
    RandomSource noise(1, "n"), mrng(1, "m");
    Diagnostics diag;
    MatR out = infer_episode(model, &rater, eps[0].ctx, InferMode::Async, noise, mrng, 10,
                             0.5, 1, &diag);
    CHECK(diag.rater_invoked);
    REQUIRE((int)diag.confidence.size() == cfg.bench.L);
    CHECK(diag.mask == build_mask(diag.confidence, 0.5));
    for (int l = 0; l < cfg.bench.L; ++l)
      if (!diag.mask[l]) CHECK(out.row(l) == diag.sfm_actions.row(l));
    if (mask_cardinality(diag.mask) == 0) CHECK(out == diag.sfm_actions);
  }

  SUBCASE("a stale reusable cache is rebuilt and counted") {
    RandomSource noise(1, "n"), mrng(1, "m");
    ContextCache<Real> cache = model.build_ctx_cache(eps[1].ctx);
    Diagnostics diag;
    (void)infer_episode(model, nullptr, eps[0].ctx, InferMode::SfmOnly, noise, mrng, 10, 0.5,
                        1, &diag, &cache);
    CHECK(diag.cache_rebuilds == 1);
    CHECK(cache.fingerprint == context_fingerprint<Real>(eps[0].ctx));
    Diagnostics diag2;
    (void)infer_episode(model, nullptr, eps[0].ctx, InferMode::SfmOnly, noise, mrng, 10, 0.5,
                        1, &diag2, &cache);
    CHECK(diag2.cache_rebuilds == 0);
  }
}
