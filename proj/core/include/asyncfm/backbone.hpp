#pragma once

#include <span>
#include <stdexcept>

#include "asyncfm/digest.hpp"
#include "asyncfm/nn.hpp"
#include "asyncfm/types.hpp"

namespace asyncfm {

struct BackboneConfig {
  int d = 128;
  int layers = 4;
  int heads = 4;
  int ffn = 512;
  int L = 8;
  int D = 4;
  int S = 8;
  int d_in = 6;
  int num_tasks = 4;

  int seq_len() const { return S + 1 + L; }
  int prefix_len() const { return S + 1; }

  void validate() const {
    if (d <= 0 || layers <= 0 || heads <= 0 || ffn <= 0 || L <= 0 || D <= 0 ||
        S <= 0 || d_in <= 0 || num_tasks <= 0)
      throw std::invalid_argument("BackboneConfig: all dimensions must be positive");
    if (d % heads != 0)
      throw std::invalid_argument("BackboneConfig: d must be divisible by heads");
  }
};

// Sinusoidal encoding of per-token flow times: row l encodes the scalar
// t_l as (sin(t w_0), cos(t w_0), sin(t w_1), ...) with the usual
// geometric frequency ladder. t = 0 maps to (0, 1, 0, 1, ...).
template <class S>
Matrix<S> sinusoidal_embed(const std::vector<double>& t, int d) {
  Matrix<S> e(static_cast<int>(t.size()), d);
  for (size_t l = 0; l < t.size(); ++l) {
    if (t[l] < 0.0 || t[l] > 1.0)
      throw std::invalid_argument("sinusoidal_embed: entries must lie in [0,1]");
    for (int i = 0; i < d / 2; ++i) {
      const double w = std::pow(10000.0, -2.0 * i / d);
      e(static_cast<int>(l), 2 * i) = static_cast<S>(std::sin(t[l] * w));
      e(static_cast<int>(l), 2 * i + 1) = static_cast<S>(std::cos(t[l] * w));
    }
    if (d % 2) e(static_cast<int>(l), d - 1) = static_cast<S>(std::sin(t[l]));
  }
  return e;
}

template <class S>
uint64_t context_fingerprint(const ContextBundle& ctx) {
  uint64_t h = fnv1a(&ctx.task_id, sizeof(ctx.task_id));
  h = fnv1a(ctx.state_tokens.data(), sizeof(Real) * ctx.state_tokens.size(), h);
  return h;
}

// Context KV-cache plus the fingerprint of the context it was built from.
template <class S>
struct ContextCache {
  PrefixCache<S> prefix;
  uint64_t fingerprint = 0;
};

// Per-sample activations the training backward pass needs.
template <class S>
struct EmbedCache {
  Matrix<S> state_in;   // S x d_in
  int task_id = 0;
  Matrix<S> noisy;      // L x D
  Matrix<S> hcat;       // L x 2d
  Matrix<S> t1;         // pre-gelu hidden
  Matrix<S> tg;         // post-gelu hidden
};

template <class S>
struct BackboneTrainCache {
  std::vector<EmbedCache<S>> samples;
  TrunkCache<S> trunk;
  Matrix<S> head_in;  // (B*L) x d
};

// One training sample as seen by the velocity model: context plus the
// asynchronous noisy chunk and the (tau, mask) pair that produced it.
template <class S>
struct VelocityInput {
  const ContextBundle* ctx;
  Matrix<S> noisy;
  double tau;
  TokenMask mask;
};

// The velocity-field model V_theta: asynchronous time embedding, a small
// pre-norm transformer over [context || action] tokens with a prefix
// attention mask, and a linear velocity head on the action positions.
template <class S>
class Backbone {
 public:
  BackboneConfig cfg;
  Matrix<S> task_embed;  // num_tasks x d
  Matrix<S> gtask;
  Linear<S> state_proj;  // d_in -> d
  Linear<S> act_proj;    // D -> d
  Linear<S> time_fc1;    // 2d -> d
  Linear<S> time_fc2;    // d -> d
  Transformer<S> trunk;
  Linear<S> head;  // d -> D

  void init(const BackboneConfig& config, RandomSource& rng) {
    cfg = config;
    cfg.validate();
    task_embed = normal_matrix<S>(cfg.num_tasks, cfg.d, rng, 0.02);
    gtask = Matrix<S>::Zero(cfg.num_tasks, cfg.d);
    state_proj.init(cfg.d_in, cfg.d, rng);
    act_proj.init(cfg.D, cfg.d, rng);
    time_fc1.init(2 * cfg.d, cfg.d, rng);
    time_fc2.init(cfg.d, cfg.d, rng);
    trunk.init(cfg.d, cfg.layers, cfg.heads, cfg.ffn, cfg.seq_len(), cfg.prefix_len(), rng);
    head.init(cfg.d, cfg.D, rng);
  }

  // Token embeddings of the context prefix: task-id token then projected
  // state tokens. This is also what the confidence rater consumes.
  Matrix<S> embed_context(const ContextBundle& ctx) const {
    if (ctx.task_id < 0 || ctx.task_id >= cfg.num_tasks)
      throw std::invalid_argument("embed_context: task_id out of range");
    if (ctx.state_tokens.rows() != cfg.S || ctx.state_tokens.cols() != cfg.d_in)
      throw std::invalid_argument("embed_context: state token shape mismatch");
    Matrix<S> e(cfg.prefix_len(), cfg.d);
    e.row(0) = task_embed.row(ctx.task_id);
    e.bottomRows(cfg.S) = state_proj.forward(ctx.state_tokens.template cast<S>());
    return e;
  }

  // Asynchronous time embedding: concat [S(tau*m) | P(noisy)], then a
  // 2-layer MLP down to width d.
  Matrix<S> embed_actions(const Matrix<S>& noisy, double tau, const TokenMask& mask,
                          EmbedCache<S>* cache = nullptr) const {
    if (noisy.rows() != cfg.L || noisy.cols() != cfg.D)
      throw std::invalid_argument("embed_actions: chunk shape mismatch");
    if (static_cast<int>(mask.size()) != cfg.L)
      throw std::invalid_argument("embed_actions: mask length mismatch");
    std::vector<double> t(cfg.L);
    for (int l = 0; l < cfg.L; ++l) t[l] = mask[l] ? tau : 0.0;
    Matrix<S> hcat(cfg.L, 2 * cfg.d);
    hcat.leftCols(cfg.d) = sinusoidal_embed<S>(t, cfg.d);
    hcat.rightCols(cfg.d) = act_proj.forward(noisy);
    Matrix<S> t1 = time_fc1.forward(hcat);
    Matrix<S> tg = gelu(t1);
    Matrix<S> out = time_fc2.forward(tg);
    if (cache) {
      cache->noisy = noisy;
      cache->hcat = hcat;
      cache->t1 = t1;
      cache->tg = tg;
    }
    return out;
  }

  // Uncached single-sample forward. Runs the same prefix-then-suffix path
  // as the cached variant so the two agree bit for bit; the batched
  // training forward is the independent full-sequence computation.
  Matrix<S> forward(const ContextBundle& ctx, const Matrix<S>& action_hidden) const {
    PrefixCache<S> pc = trunk.build_prefix(embed_context(ctx));
    return head.forward(trunk.forward_suffix(pc, action_hidden));
  }

  Matrix<S> forward_full_seq(const ContextBundle& ctx, const Matrix<S>& action_hidden) const {
    Matrix<S> x(cfg.seq_len(), cfg.d);
    x.topRows(cfg.prefix_len()) = embed_context(ctx);
    x.bottomRows(cfg.L) = action_hidden;
    TrunkCache<S> tc;
    Matrix<S> y = trunk.forward(x, 1, tc);
    return head.forward(y.bottomRows(cfg.L));
  }

  ContextCache<S> build_ctx_cache(const ContextBundle& ctx) const {
    ContextCache<S> cc;
    cc.prefix = trunk.build_prefix(embed_context(ctx));
    cc.fingerprint = context_fingerprint<S>(ctx);
    return cc;
  }

  Matrix<S> forward_with_cache(const ContextCache<S>& cache, const ContextBundle& ctx,
                               const Matrix<S>& action_hidden) const {
    if (cache.fingerprint != context_fingerprint<S>(ctx))
      throw StaleCacheError("forward_with_cache: cache built for a different context");
    Matrix<S> y = trunk.forward_suffix(cache.prefix, action_hidden);
    return head.forward(y);
  }

  // Batched training forward. Returns B stacked L x D velocity blocks.
  Matrix<S> train_forward(std::span<const VelocityInput<S>> batch,
                          BackboneTrainCache<S>& c) const {
    const int B = static_cast<int>(batch.size());
    const int T = cfg.seq_len();
    c.samples.assign(B, {});
    Matrix<S> x(B * T, cfg.d);
    for (int b = 0; b < B; ++b) {
      auto& ec = c.samples[b];
      ec.state_in = batch[b].ctx->state_tokens.template cast<S>();
      ec.task_id = batch[b].ctx->task_id;
      x.middleRows(b * T, cfg.prefix_len()) = embed_context(*batch[b].ctx);
      x.middleRows(b * T + cfg.prefix_len(), cfg.L) =
          embed_actions(batch[b].noisy, batch[b].tau, batch[b].mask, &ec);
    }
    Matrix<S> y = trunk.forward(x, B, c.trunk);
    c.head_in.resize(B * cfg.L, cfg.d);
    for (int b = 0; b < B; ++b)
      c.head_in.middleRows(b * cfg.L, cfg.L) = y.middleRows(b * T + cfg.prefix_len(), cfg.L);
    return head.forward(c.head_in);
  }

  // dv is B stacked L x D gradient blocks. Accumulates into all grads.
  void train_backward(const Matrix<S>& dv, BackboneTrainCache<S>& c) {
    const int B = static_cast<int>(c.samples.size());
    const int T = cfg.seq_len();
    Matrix<S> d_head_in = head.backward(c.head_in, dv);
    Matrix<S> dy = Matrix<S>::Zero(B * T, cfg.d);
    for (int b = 0; b < B; ++b)
      dy.middleRows(b * T + cfg.prefix_len(), cfg.L) = d_head_in.middleRows(b * cfg.L, cfg.L);
    Matrix<S> dx = trunk.backward(dy, c.trunk);
    for (int b = 0; b < B; ++b) {
      auto& ec = c.samples[b];
      // action-embed path
      Matrix<S> d_act = dx.middleRows(b * T + cfg.prefix_len(), cfg.L);
      Matrix<S> d_tg = time_fc2.backward(ec.tg, d_act);
      Matrix<S> d_t1 = gelu_grad(ec.t1, d_tg);
      Matrix<S> d_hcat = time_fc1.backward(ec.hcat, d_t1);
      act_proj.backward(ec.noisy, d_hcat.rightCols(cfg.d));
      // context path
      gtask.row(ec.task_id) += dx.row(b * T);
      state_proj.backward(ec.state_in, dx.middleRows(b * T + 1, cfg.S));
    }
  }

  void collect(std::vector<ParamRef<S>>& out) {
    out.push_back({"backbone.task_embed", &task_embed, &gtask});
    state_proj.collect("backbone.state_proj", out);
    act_proj.collect("backbone.act_proj", out);
    time_fc1.collect("backbone.time_fc1", out);
    time_fc2.collect("backbone.time_fc2", out);
    trunk.collect("backbone.trunk", out);
    head.collect("backbone.head", out);
  }
};

}  // namespace asyncfm
