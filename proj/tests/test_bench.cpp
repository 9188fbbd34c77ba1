#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include <Eigen/Dense>

#include "asyncfm/bench.hpp"

using namespace asyncfm;

namespace {

BenchSpec tiny_spec() {
  BenchSpec s;
  s.n_train = 32;
  s.n_val = 8;
  s.n_test = 8;
  return s;
}

}  // namespace

TEST_CASE("generation is a pure function of spec and split") {
  BenchSpec s = tiny_spec();
  auto a = gen_episodes(s, 16, "train");
  auto b = gen_episodes(s, 16, "train");
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].ctx.task_id == b[i].ctx.task_id);
    CHECK(a[i].ctx.state_tokens == b[i].ctx.state_tokens);
    CHECK(a[i].actions == b[i].actions);
  }
}

TEST_CASE("splits come from distinct streams") {
  BenchSpec s = tiny_spec();
  auto train = gen_episodes(s, 8, "train");
  auto val = gen_episodes(s, 8, "val");
  for (size_t i = 0; i < train.size(); ++i)
    CHECK(train[i].ctx.state_tokens != val[i].ctx.state_tokens);
}

TEST_CASE("actions stay inside [-1,1] and shapes match the generator config") {
  BenchSpec s = tiny_spec();
  for (const char* family : {"fourier", "linear"}) {
    s.family = family;
    auto eps = gen_episodes(s, 64, "train");
    for (const auto& ep : eps) {
      CHECK(ep.actions.rows() == s.L);
      CHECK(ep.actions.cols() == s.D);
      CHECK(ep.ctx.state_tokens.rows() == s.S);
      CHECK(ep.ctx.state_tokens.cols() == s.d_in);
      CHECK(ep.ctx.task_id >= 0);
      CHECK(ep.ctx.task_id < s.num_tasks);
      CHECK(ep.actions.cwiseAbs().maxCoeff() <= 1.0f);
    }
  }
}

TEST_CASE("different tasks give different action statistics") {
  BenchSpec s = tiny_spec();
  s.sigma_obs = 0.0;
  auto eps = gen_episodes(s, 256, "train");
  // episodes sharing a task and context must share actions; across tasks the
  // frequency content differs, so at least two episodes must disagree
  bool any_diff = false;
  for (size_t i = 1; i < eps.size(); ++i)
    if (eps[i].actions != eps[0].actions) any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("noise-free linear family is solvable by least squares") {
  // with sigma_obs = 0 the context rows encode the coefficients exactly, so
  // a per-task linear map context -> actions must fit to machine precision
  BenchSpec s = tiny_spec();
  s.family = "linear";
  s.sigma_obs = 0.0;
  auto eps = gen_episodes(s, 128, "train");
  for (int task = 0; task < s.num_tasks; ++task) {
    std::vector<const Episode*> mine;
    for (const auto& ep : eps)
      if (ep.ctx.task_id == task) mine.push_back(&ep);
    if (mine.size() < 8) continue;
    const int n = (int)mine.size();
    Eigen::MatrixXd X(n, s.S * s.d_in + 1), Y(n, s.L * s.D);
    for (int i = 0; i < n; ++i) {
      for (int r = 0; r < s.S; ++r)
        for (int c = 0; c < s.d_in; ++c)
          X(i, r * s.d_in + c) = mine[i]->ctx.state_tokens(r, c);
      X(i, s.S * s.d_in) = 1.0;
      for (int r = 0; r < s.L; ++r)
        for (int c = 0; c < s.D; ++c) Y(i, r * s.D + c) = mine[i]->actions(r, c);
    }
    Eigen::MatrixXd W = X.colPivHouseholderQr().solve(Y);
    double resid = (X * W - Y).cwiseAbs().maxCoeff();
    CHECK(resid < 1e-4);
  }
}

TEST_CASE("corruption touches exactly the requested rows") {
  BenchSpec s = tiny_spec();
  auto eps = gen_episodes(s, 4, "train");
  RandomSource rng(99, "corrupt");
  CorruptionSpec cs;
  cs.indices = {2, 5};
  cs.scale = 1.0;
  for (const char* kind : {"gaussian-offset", "replace-with-noise"}) {
    cs.kind = kind;
    MatR out = corrupt(eps[0].actions, cs, rng);
    for (int l = 0; l < s.L; ++l) {
      bool hit = (l == 2 || l == 5);
      if (hit)
        CHECK(out.row(l) != eps[0].actions.row(l));
      else
        CHECK(out.row(l) == eps[0].actions.row(l));
    }
  }
}

TEST_CASE("corruption error grows with scale") {
  BenchSpec s = tiny_spec();
  auto eps = gen_episodes(s, 1, "train");
  CorruptionSpec cs;
  cs.indices = {3};
  double prev = 0.0;
  for (double scale : {0.25, 1.0, 4.0}) {
    cs.scale = scale;
    double acc = 0.0;
    for (int rep = 0; rep < 64; ++rep) {
      RandomSource rng((uint64_t)rep + 1, "corrupt");
      MatR out = corrupt(eps[0].actions, cs, rng);
      acc += per_token_mse(out, eps[0].actions)[3];
    }
    acc /= 64.0;
    CHECK(acc > prev);
    prev = acc;
  }
}

TEST_CASE("chunk mse is the mean of per-token mses") {
  BenchSpec s = tiny_spec();
  auto eps = gen_episodes(s, 4, "train");
  MatR noisy = eps[0].actions;
  RandomSource rng(5, "perturb");
  for (int l = 0; l < noisy.rows(); ++l)
    for (int d = 0; d < noisy.cols(); ++d) noisy(l, d) += (Real)(0.1 * rng.normal());
  auto per = per_token_mse(noisy, eps[0].actions);
  double mean = 0.0;
  for (double v : per) mean += v;
  mean /= (double)per.size();
  CHECK(chunk_mse(noisy, eps[0].actions) == doctest::Approx(mean).epsilon(1e-12));
  CHECK(chunk_mse(eps[0].actions, eps[0].actions) == 0.0);
}

TEST_CASE("episode success follows the tube radius") {
  MatR gt = MatR::Zero(4, 2);
  MatR pred = gt;
  CHECK(episode_success(pred, gt, 0.1));
  pred(2, 0) = 0.5f;  // per-token MSE of row 2 = 0.25/2 = 0.125
  CHECK_FALSE(episode_success(pred, gt, 0.1));
  CHECK(episode_success(pred, gt, 0.15));
}

TEST_CASE("dataset file round-trips bit-exactly with matching digest") {
  BenchSpec s = tiny_spec();
  Dataset ds = gen_dataset(s);
  CHECK(ds.spec_digest == bench_digest(s));
  const std::string path = "test_bench_roundtrip.afmd";
  save_dataset(ds, s, path);
  Dataset back = load_dataset(path);
  CHECK(back.spec_digest == ds.spec_digest);
  REQUIRE(back.train.size() == ds.train.size());
  REQUIRE(back.val.size() == ds.val.size());
  REQUIRE(back.test.size() == ds.test.size());
  for (size_t i = 0; i < ds.train.size(); ++i) {
    CHECK(back.train[i].ctx.task_id == ds.train[i].ctx.task_id);
    CHECK(back.train[i].ctx.state_tokens == ds.train[i].ctx.state_tokens);
    CHECK(back.train[i].actions == ds.train[i].actions);
  }
  std::filesystem::remove(path);
}

TEST_CASE("dataset loader rejects garbage") {
  const std::string path = "test_bench_garbage.afmd";
  {
    FILE* f = fopen(path.c_str(), "wb");
    REQUIRE(f);
    const char junk[] = "not a dataset";
    fwrite(junk, 1, sizeof(junk), f);
    fclose(f);
  }
  CHECK_THROWS(load_dataset(path));
  std::filesystem::remove(path);
}

TEST_CASE("spec digest reacts to every generative field") {
  BenchSpec base = tiny_spec();
  uint64_t d0 = bench_digest(base);
  auto differs = [&](BenchSpec s) { CHECK(bench_digest(s) != d0); };
  {
    BenchSpec s = base;
    s.seed += 1;
    differs(s);
  }
  {
    BenchSpec s = base;
    s.sigma_obs = 0.05;
    differs(s);
  }
  {
    BenchSpec s = base;
    s.family = "linear";
    differs(s);
  }
  {
    BenchSpec s = base;
    s.num_tasks = 5;
    differs(s);
  }
}
