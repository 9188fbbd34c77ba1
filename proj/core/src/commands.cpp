#include "asyncfm/commands.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "asyncfm/checkpoint.hpp"
#include "asyncfm/evals.hpp"
#include "asyncfm/trainer.hpp"

namespace asyncfm {
namespace {

std::string hex64(uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void check_digest(uint64_t expected, uint64_t found, const std::string& what) {
  if (expected != found)
    throw std::runtime_error(what + ": digest mismatch: expected " + hex64(expected) +
                             " found " + hex64(found));
}

// Dataset + config pair with the bench digest verified.
Dataset load_checked_dataset(const ExperimentConfig& cfg, const std::string& data_path) {
  Dataset ds = load_dataset(data_path);
  check_digest(bench_digest(cfg.bench), ds.spec_digest, "dataset " + data_path);
  return ds;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  return os;
}

}  // namespace

std::string resolve_out_path(const std::string& path) {
  const char* base = std::getenv("ASYNCFM_OUT");
  if (!base || !*base) return path;
  std::filesystem::path p(path);
  if (p.is_absolute()) return path;
  return (std::filesystem::path(base) / p).string();
}

void cmd_gen_data(const std::string& config_path, const std::string& out_path) {
  ExperimentConfig cfg = ExperimentConfig::load_file(config_path);
  Dataset ds = gen_dataset(cfg.bench);
  save_dataset(ds, cfg.bench, resolve_out_path(out_path));
}

void cmd_train(const std::string& config_path, const std::string& data_path,
               const std::string& out_ckpt) {
  ExperimentConfig cfg = ExperimentConfig::load_file(config_path);
  Dataset ds = load_checked_dataset(cfg, data_path);
  const std::string ckpt_path = resolve_out_path(out_ckpt);
  std::ofstream log = open_out(ckpt_path + ".log");
  RngSet rng(cfg.train.seed);
  Backbone<Real> model;
  model.init(cfg.backbone_full(), rng.init);
  AdamConfig adam{cfg.train.lr, cfg.train.beta1, cfg.train.beta2, 1e-8,
                  cfg.train.weight_decay};
  std::vector<double> history;
  EpochCallback periodic;
  if (cfg.train.ckpt_every > 0) {
    periodic = [&](const TrainCallbackInfo& info, Backbone<Real>& m) {
      if ((info.epoch + 1) % cfg.train.ckpt_every != 0) return;
      save_checkpoint(snapshot(cfg, m, nullptr, rng.states(), info.epoch + 1, history),
                      ckpt_path + ".epoch" + std::to_string(info.epoch + 1));
    };
  }
  train_backbone_loop(model, ds.train, cfg.train, adam, rng, history, &log,
                      MaskMode::Sampled, periodic);
  save_checkpoint(snapshot(cfg, model, nullptr, rng.states(), cfg.train.epochs, history),
                  ckpt_path);
}

void cmd_train_rater(const std::string& config_path, const std::string& data_path,
                     const std::string& backbone_ckpt, const std::string& out_ckpt) {
  ExperimentConfig cfg = ExperimentConfig::load_file(config_path);
  Checkpoint bc = load_checkpoint_file(backbone_ckpt);
  check_digest(cfg.digest(), bc.config_digest, "checkpoint " + backbone_ckpt);
  LoadedModels models = restore(bc);
  Dataset ds = load_checked_dataset(cfg, data_path);
  const std::string ckpt_path = resolve_out_path(out_ckpt);
  std::ofstream log = open_out(ckpt_path + ".log");
  Rater<Real> rater;
  RandomSource init_rng(cfg.rater_train.seed, "rater.init");
  const BackboneConfig bcfg = cfg.backbone_full();
  rater.init(cfg.rater, bcfg.d, bcfg.prefix_len(), bcfg.L, bcfg.D, init_rng);
  std::vector<double> history;
  train_rater_loop(rater, models.backbone, ds.train, cfg.rater_train, cfg.flow.steps,
                   history, &log);
  save_checkpoint(snapshot(cfg, models.backbone, &rater,
                           {{"rater.init", init_rng.counter()}}, cfg.rater_train.epochs,
                           history),
                  ckpt_path);
}

void cmd_infer(const std::string& ckpt_path, const std::string& data_path, int episode_index,
               const std::string& mode, const std::string& out_path) {
  LoadedModels models = restore(load_checkpoint_file(ckpt_path));
  Dataset ds = load_checked_dataset(models.config, data_path);
  if (episode_index < 0 || static_cast<size_t>(episode_index) >= ds.test.size())
    throw std::invalid_argument("episode index out of range (test split has " +
                                std::to_string(ds.test.size()) + " episodes)");
  const Episode& ep = ds.test[static_cast<size_t>(episode_index)];
  const ExperimentConfig& cfg = models.config;
  RandomSource noise(cfg.eval.seed, "eval.noise." + std::to_string(episode_index));
  RandomSource mask_rng(cfg.eval.seed, "eval.mask." + std::to_string(episode_index));
  Diagnostics d;
  MatR actions = infer_episode(models.backbone, models.rater ? &*models.rater : nullptr,
                               ep.ctx, parse_infer_mode(mode), noise, mask_rng,
                               cfg.flow.steps, cfg.rater.threshold, cfg.eval.afm_rounds, &d);
  EvalReport r;
  r.add("episode", episode_index);
  r.add("chunk_mse", chunk_mse(actions, ep.actions));
  r.add("success", episode_success(actions, ep.actions, cfg.eval.eps_tube) ? 1.0 : 0.0);
  r.add("rater_invoked", d.rater_invoked ? 1.0 : 0.0);
  r.add("afm_rounds_run", d.afm_rounds_run);
  r.add("mask_cardinality", mask_cardinality(d.mask));
  for (size_t l = 0; l < d.confidence.size(); ++l)
    r.add("confidence." + std::to_string(l), d.confidence[l]);
  for (size_t l = 0; l < d.mask.size(); ++l)
    r.add("mask." + std::to_string(l), d.mask[l]);
  for (Eigen::Index l = 0; l < actions.rows(); ++l)
    for (Eigen::Index j = 0; j < actions.cols(); ++j)
      r.add("action." + std::to_string(l) + "." + std::to_string(j), actions(l, j));
  StageTimings tm{d.sfm_ms, d.rater_ms, d.afm_ms};
  write_report(r, &tm, cfg.digest(), cfg.eval.seed, resolve_out_path(out_path));
}

void cmd_eval(const std::string& ckpt_path, const std::string& data_path,
              const std::string& mode, const std::string& out_path) {
  LoadedModels models = restore(load_checkpoint_file(ckpt_path));
  Dataset ds = load_checked_dataset(models.config, data_path);
  const size_t n = std::min<size_t>(models.config.eval.episodes, ds.test.size());
  StageTimings tm;
  EvalReport r = eval_mode(models.backbone, models.rater ? &*models.rater : nullptr,
                           {ds.test.data(), n}, parse_infer_mode(mode), models.config, &tm);
  write_report(r, &tm, models.config.digest(), models.config.eval.seed,
               resolve_out_path(out_path));
}

void cmd_self_correct(const std::string& ckpt_path, const std::string& data_path,
                      double scale, const std::string& kind, const std::vector<int>& indices,
                      const std::string& out_path) {
  LoadedModels models = restore(load_checkpoint_file(ckpt_path));
  if (!models.rater) throw std::runtime_error("self-correct requires a rater checkpoint");
  Dataset ds = load_checked_dataset(models.config, data_path);
  const size_t n = std::min<size_t>(models.config.eval.episodes, ds.test.size());
  CorruptionSpec cs{indices, scale, kind};
  StageTimings tm;
  EvalReport r = self_correction_eval(models.backbone, *models.rater, {ds.test.data(), n},
                                      cs, models.config, &tm);
  write_report(r, &tm, models.config.digest(), models.config.eval.seed,
               resolve_out_path(out_path));
}

void cmd_data_efficiency(const std::string& config_path, double fraction, int epochs,
                         const std::vector<uint64_t>& seeds, const std::string& out_path) {
  ExperimentConfig cfg = ExperimentConfig::load_file(config_path);
  Dataset ds = gen_dataset(cfg.bench);
  auto curves = data_efficiency_eval(cfg, ds, fraction, epochs, seeds);
  write_efficiency_curves(curves, cfg.digest(), resolve_out_path(out_path));
}

}  // namespace asyncfm
