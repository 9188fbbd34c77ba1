#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "asyncfm/rater.hpp"
#include "asyncfm/rng.hpp"

using namespace asyncfm;

namespace {

RaterConfig tiny_cfg() {
  RaterConfig c;
  c.d_r = 16;
  c.layers = 2;
  c.heads = 2;
  c.ffn = 32;
  return c;
}

constexpr int kCtx = 5, kL = 4, kD = 3, kBackboneD = 12;

template <class S>
Matrix<S> rand_mat(int r, int cc, RandomSource& rng) {
  Matrix<S> m(r, cc);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < cc; ++j) m(i, j) = (S)rng.normal();
  return m;
}

}  // namespace

TEST_CASE("confidence targets fit the worked example") {
  PseudoLabels lab = pseudo_labels({0.0, 0.5, 1.0});
  REQUIRE(lab.q.size() == 3);
  CHECK(lab.q[0] == doctest::Approx(0.99).epsilon(1e-9));
  CHECK(lab.q[1] == doctest::Approx(0.500000).epsilon(1e-5));
  CHECK(lab.q[2] == doctest::Approx(0.010001).epsilon(1e-4));
}

TEST_CASE("constant error vector maps to the top of the label range") {
  PseudoLabels lab = pseudo_labels({0.3, 0.3, 0.3, 0.3});
  for (double q : lab.q) CHECK(q == doctest::Approx(0.99).epsilon(1e-9));
}

TEST_CASE("labels stay inside [1-a-b, 1-a] and reverse the error order") {
  RandomSource rng(4, "e");
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> e(8);
    for (double& v : e) v = rng.uniform() * 2.0;
    PseudoLabels lab = pseudo_labels(e);
    for (double q : lab.q) {
      CHECK(q >= 1.0 - 0.01 - 0.98 - 1e-12);
      CHECK(q <= 1.0 - 0.01 + 1e-12);
    }
    for (size_t i = 0; i < e.size(); ++i)
      for (size_t j = 0; j < e.size(); ++j)
        if (e[i] < e[j]) CHECK(lab.q[i] >= lab.q[j]);
  }
}

TEST_CASE("invalid error vectors are rejected") {
  CHECK_THROWS_AS(pseudo_labels({}), std::invalid_argument);
  CHECK_THROWS_AS(pseudo_labels({0.1, -0.2}), std::invalid_argument);
  CHECK_THROWS_AS(pseudo_labels({0.1, std::nan("")}), std::invalid_argument);
  CHECK_THROWS_AS(pseudo_labels({0.1, 0.2}, 0.01, 0.98, 0.0), std::invalid_argument);
}

TEST_CASE("masking is strictly below threshold") {
  TokenMask m = build_mask({0.4, 0.5, 0.6}, 0.5);
  CHECK(m == TokenMask{1, 0, 0});
  CHECK(build_mask({0.9, 0.95}, 0.5) == empty_mask(2));
  CHECK(build_mask({0.1, 0.2}, 0.5) == full_mask(2));
  CHECK_THROWS_AS(build_mask({0.5}, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(build_mask({0.5}, 1.0), std::invalid_argument);
}

TEST_CASE("lower thresholds never mask more tokens") {
  RandomSource rng(7, "p");
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> p(10);
    for (double& v : p) v = rng.uniform();
    int prev = 0;
    for (double T : {0.1, 0.3, 0.5, 0.7, 0.9}) {
      int k = mask_cardinality(build_mask(p, T));
      CHECK(k >= prev);
      prev = k;
    }
  }
}

TEST_CASE("rating loss matches a hand computation") {
  // deviations (0.7, -0.7, 0, 0) -> mean of squares = 0.98/4 = 0.245
  PseudoLabels lab;
  lab.q = {0.1, 0.9, 0.5, 0.5};
  CHECK(rater_loss({0.8, 0.2, 0.5, 0.5}, lab) == doctest::Approx(0.245).epsilon(1e-12));
  PseudoLabels extremes;
  extremes.q = {0.99, 0.01};
  CHECK(rater_loss({0.5, 0.5}, extremes) == doctest::Approx(0.2401).epsilon(1e-12));
  CHECK_THROWS_AS(rater_loss({0.5}, lab), std::invalid_argument);
}

TEST_CASE("per-token error is the D-averaged squared distance") {
  Matrix<double> a(2, 2), b(2, 2);
  a << 1.0, 0.0, 0.5, 0.5;
  b << 0.0, 0.0, 0.5, 0.5;
  auto e = per_token_error(a, b);
  CHECK(e[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(e[1] == 0.0);
  Matrix<double> bad(3, 2);
  CHECK_THROWS_AS(per_token_error(a, bad), std::invalid_argument);
}

TEST_CASE("scoring an uninitialized rater is an error") {
  Rater<Real> r;
  CHECK_THROWS_AS((void)r.score(MatR::Zero(kCtx, kBackboneD), MatR::Zero(kL, kD)),
                  std::logic_error);
}

TEST_CASE("scores are per-token sigmoids and depend on both inputs") {
  Rater<Real> r;
  RandomSource init(9, "init");
  r.init(tiny_cfg(), kBackboneD, kCtx, kL, kD, init);
  RandomSource rng(1, "x");
  MatR ctx = rand_mat<Real>(kCtx, kBackboneD, rng);
  MatR act = rand_mat<Real>(kL, kD, rng);
  auto p = r.score(ctx, act);
  REQUIRE((int)p.size() == kL);
  for (double v : p) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  CHECK(p == r.score(ctx, act));
  MatR act2 = act;
  act2(1, 0) += 1.0f;
  CHECK(p != r.score(ctx, act2));
  MatR ctx2 = ctx;
  ctx2(0, 0) += 1.0f;
  CHECK(p != r.score(ctx2, act));
  CHECK_THROWS_AS((void)r.score(ctx, MatR::Zero(kL + 1, kD)), std::invalid_argument);
  CHECK_THROWS_AS((void)r.score(MatR::Zero(kCtx, kBackboneD + 1), act), std::invalid_argument);
}

TEST_CASE("batched scoring equals one sample at a time") {
  Rater<Real> r;
  RandomSource init(9, "init");
  r.init(tiny_cfg(), kBackboneD, kCtx, kL, kD, init);
  RandomSource rng(2, "x");
  std::vector<RaterTrainItem<Real>> batch(3);
  for (auto& it : batch) {
    it.ctx_embed = rand_mat<Real>(kCtx, kBackboneD, rng);
    it.actions = rand_mat<Real>(kL, kD, rng);
  }
  RaterTrainCache<Real> c;
  MatR probs = r.batch_forward(std::span<const RaterTrainItem<Real>>(batch), c);
  REQUIRE(probs.rows() == 3 * kL);
  for (int b = 0; b < 3; ++b) {
    auto p = r.score(batch[b].ctx_embed, batch[b].actions);
    for (int l = 0; l < kL; ++l)
      CHECK(probs(b * kL + l, 0) == doctest::Approx(p[l]).epsilon(1e-5));
  }
}

TEST_CASE("rater gradients agree with finite differences") {
  Rater<double> r;
  RandomSource init(31, "init");
  r.init(tiny_cfg(), kBackboneD, kCtx, kL, kD, init);
  RandomSource rng(3, "x");
  std::vector<RaterTrainItem<double>> batch(2);
  for (auto& it : batch) {
    it.ctx_embed = rand_mat<double>(kCtx, kBackboneD, rng);
    it.actions = rand_mat<double>(kL, kD, rng);
  }
  Matrix<double> w = rand_mat<double>(2 * kL, 1, rng);
  auto objective = [&]() {
    RaterTrainCache<double> c;
    Matrix<double> p = r.batch_forward(std::span<const RaterTrainItem<double>>(batch), c);
    return (p.array() * w.array()).sum();
  };
  std::vector<ParamRef<double>> params;
  r.collect(params);
  for (auto& p : params) p.g->setZero();
  {
    RaterTrainCache<double> c;
    (void)r.batch_forward(std::span<const RaterTrainItem<double>>(batch), c);
    r.batch_backward(w, c);
  }
  RandomSource pick(6, "pick");
  const double h = 1e-6;
  for (const auto& p : params) {
    for (int rep = 0; rep < 3; ++rep) {
      int i = (int)pick.uniform_index((uint64_t)p.w->rows());
      int j = (int)pick.uniform_index((uint64_t)p.w->cols());
      const double saved = (*p.w)(i, j);
      (*p.w)(i, j) = saved + h;
      const double up = objective();
      (*p.w)(i, j) = saved - h;
      const double dn = objective();
      (*p.w)(i, j) = saved;
      const double fd = (up - dn) / (2 * h);
      const double an = (*p.g)(i, j);
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
      INFO(p.name, " (", i, ",", j, ") fd=", fd, " an=", an);
      const bool ok = std::abs(fd - an) / denom <= 1e-4 || std::abs(fd - an) <= 1e-7;
      CHECK(ok);
    }
  }
}
