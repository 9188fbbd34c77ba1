#include "asyncfm/evals.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>

#include "asyncfm/digest.hpp"
#include "asyncfm/flow.hpp"
#include "asyncfm/rater.hpp"
#include "asyncfm/threads.hpp"

namespace asyncfm {
namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string hex64(uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Low 32 bits of a chunk fingerprint, representable exactly as a double so
// it can live in the key/value report.
double chunk_fingerprint(const MatR& m, uint64_t h) {
  h = fnv1a(m.data(), sizeof(Real) * static_cast<size_t>(m.size()), h);
  return static_cast<double>(h & 0xffffffffull);
}

}  // namespace

double EvalReport::get(const std::string& key) const {
  for (const auto& [k, v] : kv)
    if (k == key) return v;
  throw std::out_of_range("EvalReport: no key '" + key + "'");
}

std::string EvalReport::text() const {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "\t" + fmt(v) + "\n";
  return out;
}

std::string StageTimings::text() const {
  std::string out;
  out += "sfm_ms\t" + fmt(sfm_ms) + "\n";
  out += "afm_ms\t" + fmt(afm_ms) + "\n";
  out += "rater_ms\t" + fmt(rater_ms) + "\n";
  return out;
}

void write_report(const EvalReport& report, const StageTimings* timings,
                  uint64_t config_digest, uint64_t seed, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("report: cannot write " + path);
  os << "# asyncfm report v1\n";
  os << "config_digest\t" << hex64(config_digest) << "\n";
  os << "seed\t" << seed << "\n";
  os << report.text();
  if (!os) throw std::runtime_error("report: write failed for " + path);
  if (timings) {
    // Wall-clock data is intentionally kept out of the main report so
    // reruns stay byte-identical.
    std::ofstream ts(path + ".timings.txt");
    ts << timings->text();
  }
}

EvalReport eval_mode(const Backbone<Real>& model, const Rater<Real>* rater,
                     std::span<const Episode> episodes, InferMode mode,
                     const ExperimentConfig& cfg, StageTimings* timings) {
  const int L = model.cfg.L;
  struct Slot {
    double mse = 0.0;
    std::vector<double> tok;
    bool success = false;
    int mask_card = 0;
    bool rater_invoked = false;
    double conf = 0.0;
    MatR sfm;
    Diagnostics d;
  };
  std::vector<Slot> slots(episodes.size());
  parallel_for(episodes.size(), [&](size_t i) {
    RandomSource noise(cfg.eval.seed, "eval.noise." + std::to_string(i));
    RandomSource mask_rng(cfg.eval.seed, "eval.mask." + std::to_string(i));
    Slot& s = slots[i];
    MatR actions = infer_episode(model, rater, episodes[i].ctx, mode, noise, mask_rng,
                                 cfg.flow.steps, cfg.rater.threshold, cfg.eval.afm_rounds,
                                 &s.d);
    s.mse = chunk_mse(actions, episodes[i].actions);
    s.tok = per_token_mse(actions, episodes[i].actions);
    s.success = episode_success(actions, episodes[i].actions, cfg.eval.eps_tube);
    s.mask_card = mask_cardinality(s.d.mask);
    s.rater_invoked = s.d.rater_invoked;
    for (double p : s.d.confidence) s.conf += p;
    s.sfm = s.d.sfm_actions;
  });
  double mse_sum = 0.0;
  std::vector<double> token_mse_sum(L, 0.0);
  int successes = 0;
  double mask_sum = 0.0;
  double conf_sum = 0.0;
  int rater_calls = 0;
  uint64_t sfm_h = kFnvOffset;
  StageTimings tm;
  for (const Slot& s : slots) {
    mse_sum += s.mse;
    for (int l = 0; l < L; ++l) token_mse_sum[l] += s.tok[static_cast<size_t>(l)];
    successes += s.success ? 1 : 0;
    mask_sum += s.mask_card;
    if (s.rater_invoked) {
      ++rater_calls;
      conf_sum += s.conf;
    }
    sfm_h = fnv1a(s.sfm.data(), sizeof(Real) * static_cast<size_t>(s.sfm.size()), sfm_h);
    tm.sfm_ms += s.d.sfm_ms;
    tm.rater_ms += s.d.rater_ms;
    tm.afm_ms += s.d.afm_ms;
  }
  const double n = static_cast<double>(episodes.size());
  EvalReport r;
  r.add("episodes", n);
  r.add("chunk_mse", mse_sum / n);
  r.add("success_rate", successes / n);
  r.add("mean_mask_cardinality", mask_sum / n);
  r.add("rater_calls", rater_calls);
  if (rater_calls > 0) r.add("mean_confidence", conf_sum / (rater_calls * L));
  for (int l = 0; l < L; ++l)
    r.add("token_mse." + std::to_string(l), token_mse_sum[l] / n);
  r.add("sfm_fingerprint", static_cast<double>(sfm_h & 0xffffffffull));
  if (timings) *timings = tm;
  return r;
}

EvalReport self_correction_eval(const Backbone<Real>& model, const Rater<Real>& rater,
                                std::span<const Episode> episodes,
                                const CorruptionSpec& corruption,
                                const ExperimentConfig& cfg, StageTimings* timings) {
  const int L = model.cfg.L;
  const int steps = cfg.flow.steps;
  const double T = cfg.rater.threshold;
  RandomSource idx_rng(cfg.eval.seed, "selfcorr.index");
  RandomSource corr_rng(cfg.eval.seed, "selfcorr.noise");
  RandomSource afm_rng(cfg.eval.seed, "selfcorr.afm");
  RandomSource rm_rng(cfg.eval.seed, "selfcorr.randmask");
  int detected = 0, corrupted_tokens = 0, false_masks = 0, clean_tokens = 0;
  double mse_before = 0.0, mse_after = 0.0, mse_oracle = 0.0;
  int succ_full = 0, succ_random = 0, succ_sfm = 0, succ_oracle = 0, recovered = 0;
  double mask_sum = 0.0;
  StageTimings tm;
  using Clock = std::chrono::steady_clock;
  auto ms = [](Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
  };
  for (size_t i = 0; i < episodes.size(); ++i) {
    const Episode& ep = episodes[i];
    RandomSource sfm_rng(cfg.eval.seed, "selfcorr.sfm." + std::to_string(i));
    ContextCache<Real> cache = model.build_ctx_cache(ep.ctx);
    auto t0 = Clock::now();
    MatR sfm = sfm_infer(model, cache, ep.ctx, sfm_rng, steps);
    tm.sfm_ms += ms(t0);

    CorruptionSpec cs = corruption;
    if (cs.indices.empty()) cs.indices = {static_cast<int>(idx_rng.uniform_index(L))};
    MatR corrupted = corrupt(sfm, cs, corr_rng);

    t0 = Clock::now();
    std::vector<double> p = rater.score(model.embed_context(ep.ctx), corrupted);
    TokenMask m = build_mask(p, T);
    tm.rater_ms += ms(t0);
    mask_sum += mask_cardinality(m);
    for (int l = 0; l < L; ++l) {
      const bool is_corrupted =
          std::find(cs.indices.begin(), cs.indices.end(), l) != cs.indices.end();
      if (is_corrupted) {
        ++corrupted_tokens;
        detected += m[l];
      } else {
        ++clean_tokens;
        false_masks += m[l];
      }
    }

    t0 = Clock::now();
    MatR full = mask_cardinality(m) > 0
                    ? afm_infer(model, cache, ep.ctx, corrupted, m, afm_rng, steps)
                    : corrupted;
    TokenMask rm = sample_mask_with_y(0.5, rm_rng, L);
    MatR random_out = mask_cardinality(rm) > 0
                          ? afm_infer(model, cache, ep.ctx, corrupted, rm, afm_rng, steps)
                          : corrupted;
    TokenMask om = empty_mask(L);
    for (int idx : cs.indices) om[idx] = 1;
    MatR oracle_out = afm_infer(model, cache, ep.ctx, corrupted, om, afm_rng, steps);
    tm.afm_ms += ms(t0);

    auto tok_before = per_token_mse(corrupted, ep.actions);
    auto tok_after = per_token_mse(full, ep.actions);
    auto tok_oracle = per_token_mse(oracle_out, ep.actions);
    for (int idx : cs.indices) {
      mse_before += tok_before[static_cast<size_t>(idx)];
      mse_after += tok_after[static_cast<size_t>(idx)];
      mse_oracle += tok_oracle[static_cast<size_t>(idx)];
    }
    const bool sfm_ok = episode_success(corrupted, ep.actions, cfg.eval.eps_tube);
    const bool full_ok = episode_success(full, ep.actions, cfg.eval.eps_tube);
    succ_sfm += sfm_ok;
    succ_full += full_ok;
    succ_random += episode_success(random_out, ep.actions, cfg.eval.eps_tube);
    succ_oracle += episode_success(oracle_out, ep.actions, cfg.eval.eps_tube);
    recovered += (!sfm_ok && full_ok) ? 1 : 0;
  }
  const double n = static_cast<double>(episodes.size());
  EvalReport r;
  r.add("episodes", n);
  r.add("corruption_scale", corruption.scale);
  r.add("detection_rate", corrupted_tokens ? static_cast<double>(detected) / corrupted_tokens : 0.0);
  r.add("false_mask_rate", clean_tokens ? static_cast<double>(false_masks) / clean_tokens : 0.0);
  r.add("corrupted_token_mse_before", mse_before / corrupted_tokens);
  r.add("corrupted_token_mse_after", mse_after / corrupted_tokens);
  r.add("corrupted_token_mse_oracle", mse_oracle / corrupted_tokens);
  r.add("success_rate.async", succ_full / n);
  r.add("success_rate.random-mask", succ_random / n);
  r.add("success_rate.sfm-only", succ_sfm / n);
  r.add("success_rate.oracle", succ_oracle / n);
  r.add("recovery_rate", recovered / n);
  r.add("mean_mask_cardinality", mask_sum / n);
  if (timings) *timings = tm;
  return r;
}

double masked_velocity_mse(const Backbone<Real>& model, std::span<const Episode> episodes,
                           uint64_t eval_seed) {
  RandomSource mask_rng(eval_seed, "valmse.mask");
  RandomSource time_rng(eval_seed, "valmse.time");
  RandomSource noise_rng(eval_seed, "valmse.noise");
  const int L = model.cfg.L;
  const int D = model.cfg.D;
  std::vector<VelocityInput<Real>> inputs(episodes.size());
  std::vector<MatR> gt(episodes.size());
  for (size_t i = 0; i < episodes.size(); ++i) {
    TokenMask m = sample_mask(mask_rng, L);
    const double tau = sample_time(time_rng);
    MatR n(L, D);
    for (int l = 0; l < L; ++l)
      for (int j = 0; j < D; ++j) n(l, j) = static_cast<Real>(noise_rng.normal());
    gt[i] = gt_velocity(episodes[i].actions, n);
    inputs[i] = {&episodes[i].ctx, interp_path(episodes[i].actions, n, tau, m), tau,
                 std::move(m)};
  }
  double loss = 0.0;
  constexpr size_t kChunk = 64;
  BackboneTrainCache<Real> cache;
  for (size_t at = 0; at < inputs.size(); at += kChunk) {
    const size_t n = std::min(kChunk, inputs.size() - at);
    MatR v = model.train_forward({inputs.data() + at, n}, cache);
    for (size_t b = 0; b < n; ++b)
      loss += masked_loss<Real>(v.middleRows(static_cast<Eigen::Index>(b) * L, L), gt[at + b],
                                inputs[at + b].mask);
  }
  return loss / static_cast<double>(inputs.size());
}

std::vector<EfficiencyCurve> data_efficiency_eval(const ExperimentConfig& cfg,
                                                  const Dataset& data, double fraction,
                                                  int epochs,
                                                  const std::vector<uint64_t>& seeds) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("data_efficiency_eval: fraction must lie in (0,1]");
  const size_t n = std::max<size_t>(
      1, static_cast<size_t>(fraction * static_cast<double>(data.train.size())));
  std::span<const Episode> subset{data.train.data(), n};
  std::vector<EfficiencyCurve> curves;
  for (uint64_t seed : seeds) {
    EfficiencyCurve curve;
    curve.seed = seed;
    for (MaskMode mode : {MaskMode::Sampled, MaskMode::AllOne}) {
      RngSet rng(seed);
      Backbone<Real> model;
      model.init(cfg.backbone_full(), rng.init);
      TrainSpec spec = cfg.train;
      spec.epochs = epochs;
      std::vector<double>& train_curve =
          mode == MaskMode::Sampled ? curve.unified_train : curve.allone_train;
      std::vector<double>& val_curve =
          mode == MaskMode::Sampled ? curve.unified_val : curve.allone_val;
      AdamConfig adam{spec.lr, spec.beta1, spec.beta2, 1e-8, spec.weight_decay};
      train_backbone_loop(model, subset, spec, adam, rng, train_curve, nullptr, mode,
                          [&](const TrainCallbackInfo&, Backbone<Real>& m) {
                            val_curve.push_back(
                                masked_velocity_mse(m, data.val, cfg.eval.seed));
                          });
    }
    curves.push_back(std::move(curve));
  }
  return curves;
}

void write_efficiency_curves(const std::vector<EfficiencyCurve>& curves,
                             uint64_t config_digest, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("curves: cannot write " + path);
  os << "# asyncfm data-efficiency curves v1\n";
  os << "# config_digest " << hex64(config_digest) << "\n";
  os << "# epoch";
  for (const auto& c : curves)
    os << " s" << c.seed << ":unified_train s" << c.seed << ":allone_train s" << c.seed
       << ":unified_val s" << c.seed << ":allone_val";
  os << "\n";
  const size_t epochs = curves.empty() ? 0 : curves[0].unified_train.size();
  for (size_t e = 0; e < epochs; ++e) {
    os << e;
    for (const auto& c : curves)
      os << " " << fmt(c.unified_train[e]) << " " << fmt(c.allone_train[e]) << " "
         << fmt(c.unified_val[e]) << " " << fmt(c.allone_val[e]);
    os << "\n";
  }
  if (!os) throw std::runtime_error("curves: write failed for " + path);
}

}  // namespace asyncfm
