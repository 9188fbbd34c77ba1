#include "asyncfm/trainer.hpp"

#include <chrono>
#include <iostream>

#include "asyncfm/checkpoint.hpp"
#include "asyncfm/flow.hpp"

namespace asyncfm {
namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

MatR draw_noise(RandomSource& rng, int L, int D) {
  MatR n(L, D);
  for (int l = 0; l < L; ++l)
    for (int j = 0; j < D; ++j) n(l, j) = static_cast<Real>(rng.normal());
  return n;
}

}  // namespace

InferMode parse_infer_mode(const std::string& name) {
  if (name == "sfm-only") return InferMode::SfmOnly;
  if (name == "async") return InferMode::Async;
  if (name == "random-mask") return InferMode::RandomMask;
  throw std::invalid_argument("unknown inference mode '" + name + "'");
}

std::string infer_mode_name(InferMode mode) {
  switch (mode) {
    case InferMode::SfmOnly: return "sfm-only";
    case InferMode::Async: return "async";
    case InferMode::RandomMask: return "random-mask";
  }
  return "?";
}

double train_step(Backbone<Real>& model, Adam<Real>& opt,
                  std::span<const Episode* const> batch, RngSet& rng, MaskMode mode) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const int B = static_cast<int>(batch.size());
  const int L = model.cfg.L;
  const int D = model.cfg.D;
  std::vector<VelocityInput<Real>> inputs(B);
  std::vector<MatR> gt_vel(B);
  for (int b = 0; b < B; ++b) {
    const Episode& ep = *batch[b];
    TokenMask m;
    switch (mode) {
      case MaskMode::Sampled: m = sample_mask(rng.mask, L); break;
      case MaskMode::AllOne: m = full_mask(L); break;
      case MaskMode::AllZero: m = empty_mask(L); break;
    }
    const double tau = sample_time(rng.time);
    MatR n = draw_noise(rng.noise, L, D);
    gt_vel[b] = gt_velocity(ep.actions, n);
    inputs[b] = {&ep.ctx, interp_path(ep.actions, n, tau, m), tau, std::move(m)};
  }
  BackboneTrainCache<Real> cache;
  MatR v = model.train_forward(inputs, cache);
  double loss = 0.0;
  MatR dv = MatR::Zero(B * L, D);
  for (int b = 0; b < B; ++b) {
    const TokenMask& m = inputs[b].mask;
    const int k = mask_cardinality(m);
    loss += masked_loss<Real>(v.middleRows(b * L, L), gt_vel[b], m);
    if (k == 0) continue;
    const Real w = static_cast<Real>(2.0 / (static_cast<double>(k) * D * B));
    for (int l = 0; l < L; ++l)
      if (m[l])
        dv.row(b * L + l) = w * (v.row(b * L + l) - gt_vel[b].row(l));
  }
  loss /= B;
  if (!std::isfinite(loss))
    throw NumericError("train_step: non-finite loss (batch of " + std::to_string(B) + ")");
  opt.zero_grad();
  model.train_backward(dv, cache);
  opt.step();
  return loss;
}

void train_backbone_loop(Backbone<Real>& model, std::span<const Episode> data,
                         const TrainSpec& spec, AdamConfig adam_cfg, RngSet& rng,
                         std::vector<double>& loss_history, std::ostream* log,
                         MaskMode mode, const EpochCallback& on_epoch) {
  if (data.empty()) throw std::invalid_argument("train_backbone: empty dataset");
  std::vector<ParamRef<Real>> params;
  model.collect(params);
  Adam<Real> opt(std::move(params), adam_cfg);
  std::vector<const Episode*> order(data.size());
  for (size_t i = 0; i < data.size(); ++i) order[i] = &data[i];
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    // Fisher-Yates from the data stream
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.data.uniform_index(i)]);
    double loss_sum = 0.0;
    int steps = 0;
    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(spec.batch)) {
      const size_t n = std::min<size_t>(spec.batch, order.size() - at);
      loss_sum += train_step(model, opt, {order.data() + at, n}, rng, mode);
      ++steps;
    }
    const double mean = loss_sum / steps;
    loss_history.push_back(mean);
    if (log) *log << epoch << "\ttrain\t" << mean << "\n";
    if (on_epoch) on_epoch({epoch, mean}, model);
  }
}

Backbone<Real> train_backbone(std::span<const Episode> data, const ExperimentConfig& cfg,
                              RngSet& rng, std::vector<double>& loss_history,
                              std::ostream* log) {
  Backbone<Real> model;
  model.init(cfg.backbone_full(), rng.init);
  AdamConfig adam{cfg.train.lr, cfg.train.beta1, cfg.train.beta2, 1e-8,
                  cfg.train.weight_decay};
  train_backbone_loop(model, data, cfg.train, adam, rng, loss_history, log);
  return model;
}

MatR afm_infer(const Backbone<Real>& model, const ContextCache<Real>& cache,
               const ContextBundle& ctx, const MatR& sfm_actions, const TokenMask& mask,
               RandomSource& noise, int steps) {
  MatR state = async_init(sfm_actions, mask, noise);
  return integrate(std::move(state), mask, steps, [&](const MatR& s, double tau) {
    return model.forward_with_cache(cache, ctx, model.embed_actions(s, tau, mask));
  });
}

MatR sfm_infer(const Backbone<Real>& model, const ContextCache<Real>& cache,
               const ContextBundle& ctx, RandomSource& noise, int steps) {
  const MatR zero = MatR::Zero(model.cfg.L, model.cfg.D);
  return afm_infer(model, cache, ctx, zero, full_mask(model.cfg.L), noise, steps);
}

std::vector<MatR> sfm_infer_batch(const Backbone<Real>& model,
                                  std::span<const Episode* const> batch,
                                  RandomSource& noise, int steps) {
  const int B = static_cast<int>(batch.size());
  const int L = model.cfg.L;
  const int D = model.cfg.D;
  const TokenMask ones = full_mask(L);
  std::vector<MatR> state(B);
  for (int b = 0; b < B; ++b) state[b] = draw_noise(noise, L, D);
  const double delta = 1.0 / steps;
  double tau = 1.0;
  BackboneTrainCache<Real> cache;  // forward-only scratch
  for (int k = 0; k < steps; ++k) {
    std::vector<VelocityInput<Real>> inputs(B);
    for (int b = 0; b < B; ++b) inputs[b] = {&batch[b]->ctx, state[b], tau, ones};
    MatR v = model.train_forward(inputs, cache);
    for (int b = 0; b < B; ++b)
      state[b] = euler_step<Real>(state[b], v.middleRows(b * L, L), delta, ones);
    tau = std::max(0.0, tau - delta);
  }
  return state;
}

void train_rater_loop(Rater<Real>& rater, const Backbone<Real>& frozen,
                      std::span<const Episode> data, const RaterTrainSpec& spec,
                      int flow_steps, std::vector<double>& loss_history, std::ostream* log) {
  if (data.empty()) throw std::invalid_argument("train_rater: empty dataset");
  const uint64_t frozen_digest = [&] {
    std::vector<ParamRef<Real>> p;
    const_cast<Backbone<Real>&>(frozen).collect(p);
    return param_digest(std::move(p));
  }();
  std::vector<ParamRef<Real>> params;
  rater.collect(params);
  Adam<Real> opt(std::move(params), AdamConfig{spec.lr, 0.9, 0.999, 1e-8, 0.0});
  RandomSource data_rng(spec.seed, "rater.data");
  RandomSource noise_rng(spec.seed, "rater.noise");
  const int L = frozen.cfg.L;
  std::vector<const Episode*> order(data.size());
  for (size_t i = 0; i < data.size(); ++i) order[i] = &data[i];
  const size_t use = spec.subset > 0 ? std::min<size_t>(spec.subset, order.size()) : order.size();
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[data_rng.uniform_index(i)]);
    double loss_sum = 0.0;
    int steps = 0;
    for (size_t at = 0; at < use; at += static_cast<size_t>(spec.batch)) {
      const size_t n = std::min<size_t>(spec.batch, use - at);
      std::span<const Episode* const> batch{order.data() + at, n};
      // frozen SFM predictions with fresh per-sample noise
      std::vector<MatR> sfm = sfm_infer_batch(frozen, batch, noise_rng, flow_steps);
      std::vector<RaterTrainItem<Real>> items(n);
      std::vector<PseudoLabels> labels(n);
      for (size_t b = 0; b < n; ++b) {
        items[b] = {frozen.embed_context(batch[b]->ctx), sfm[b]};
        labels[b] = pseudo_labels(per_token_error(sfm[b], batch[b]->actions), spec.alpha,
                                  spec.beta, spec.epsilon);
      }
      RaterTrainCache<Real> cache;
      MatR p = rater.batch_forward(items, cache);
      double loss = 0.0;
      MatR dp(p.rows(), 1);
      const double w = 2.0 / (static_cast<double>(n) * L);
      for (size_t b = 0; b < n; ++b) {
        for (int l = 0; l < L; ++l) {
          const double diff = static_cast<double>(p(static_cast<Eigen::Index>(b) * L + l, 0)) -
                              labels[b].q[static_cast<size_t>(l)];
          loss += diff * diff;
          dp(static_cast<Eigen::Index>(b) * L + l, 0) = static_cast<Real>(w * diff);
        }
      }
      loss /= static_cast<double>(n) * L;
      if (!std::isfinite(loss)) throw NumericError("train_rater: non-finite loss");
      opt.zero_grad();
      rater.batch_backward(dp, cache);
      opt.step();
      loss_sum += loss;
      ++steps;
    }
    const double mean = loss_sum / steps;
    loss_history.push_back(mean);
    if (log) *log << epoch << "\trater\t" << mean << "\n";
  }
  std::vector<ParamRef<Real>> p;
  const_cast<Backbone<Real>&>(frozen).collect(p);
  if (param_digest(std::move(p)) != frozen_digest)
    throw std::logic_error("train_rater: frozen backbone was modified");
}

MatR infer_episode(const Backbone<Real>& model, const Rater<Real>* rater,
                   const ContextBundle& ctx, InferMode mode, RandomSource& noise,
                   RandomSource& mask_rng, int steps, double threshold, int afm_rounds,
                   Diagnostics* diag, ContextCache<Real>* reusable_cache) {
  Diagnostics local;
  Diagnostics& d = diag ? *diag : local;
  ContextCache<Real> fresh;
  const ContextCache<Real>* cache = &fresh;
  auto t0 = Clock::now();
  if (reusable_cache && reusable_cache->fingerprint == context_fingerprint<Real>(ctx)) {
    cache = reusable_cache;
  } else {
    if (reusable_cache) {
      std::cerr << "[asyncfm] warning: stale context cache, rebuilding\n";
      ++d.cache_rebuilds;
    }
    fresh = model.build_ctx_cache(ctx);
    if (reusable_cache) *reusable_cache = fresh;
  }

  // The context cache is produced by the synchronous pass and only reused by
  // the later stages, so its build cost belongs to the synchronous bucket.
  MatR actions = sfm_infer(model, *cache, ctx, noise, steps);
  d.sfm_actions = actions;
  d.sfm_ms += ms_since(t0);

  for (int round = 0; round < afm_rounds; ++round) {
    TokenMask m;
    if (mode == InferMode::SfmOnly) {
      break;
    } else if (mode == InferMode::Async) {
      if (!rater || !rater->initialized())
        throw std::logic_error("infer_episode: async mode requires a trained rater");
      t0 = Clock::now();
      d.confidence = rater->score(model.embed_context(ctx), actions);
      d.rater_invoked = true;
      m = build_mask(d.confidence, threshold);
      d.rater_ms += ms_since(t0);
    } else {  // RandomMask: each token masked with probability 1/2
      m = sample_mask_with_y(0.5, mask_rng, model.cfg.L);
    }
    d.mask = m;
    if (mask_cardinality(m) == 0) break;  // empty mask: AFM is a no-op
    t0 = Clock::now();
    actions = afm_infer(model, *cache, ctx, actions, m, noise, steps);
    d.afm_ms += ms_since(t0);
    ++d.afm_rounds_run;
  }
  if (d.mask.empty()) d.mask = empty_mask(model.cfg.L);
  return actions;
}

}  // namespace asyncfm
