#include "asyncfm/checkpoint.hpp"

#include <fstream>
#include <map>

#include "asyncfm/binio.hpp"
#include "asyncfm/digest.hpp"

namespace asyncfm {
namespace {

constexpr uint32_t kCkptMagic = 0x4b4d4641;  // "AFMK"
constexpr uint32_t kCkptVersion = 1;

void append_tensors(std::vector<ParamRef<Real>> params,
                    std::vector<std::pair<std::string, MatR>>& out) {
  for (auto& p : params) out.emplace_back(p.name, *p.w);
}

void load_tensors(const std::vector<std::pair<std::string, MatR>>& tensors,
                  std::vector<ParamRef<Real>> params, const std::string& prefix) {
  std::map<std::string, const MatR*> by_name;
  for (const auto& [name, t] : tensors)
    if (name.rfind(prefix, 0) == 0) by_name[name] = &t;
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end())
      throw std::runtime_error("checkpoint: missing tensor " + p.name);
    if (it->second->rows() != p.w->rows() || it->second->cols() != p.w->cols())
      throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
    *p.w = *it->second;
    by_name.erase(it);
  }
  if (!by_name.empty())
    throw std::runtime_error("checkpoint: unknown tensor " + by_name.begin()->first);
}

}  // namespace

Checkpoint snapshot(const ExperimentConfig& cfg, Backbone<Real>& backbone, Rater<Real>* rater,
                    std::vector<std::pair<std::string, uint64_t>> rng_states, int64_t epoch,
                    std::vector<double> loss_history) {
  Checkpoint c;
  c.config_json = cfg.serialize();
  c.config_digest = cfg.digest();
  c.rng_states = std::move(rng_states);
  c.epoch = epoch;
  c.loss_history = std::move(loss_history);
  std::vector<ParamRef<Real>> params;
  backbone.collect(params);
  append_tensors(params, c.tensors);
  if (rater) {
    c.has_rater = true;
    std::vector<ParamRef<Real>> rparams;
    rater->collect(rparams);
    append_tensors(rparams, c.tensors);
  }
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path);
  write_pod<uint32_t>(os, kCkptMagic);
  write_pod<uint32_t>(os, kCkptVersion);
  write_pod<uint64_t>(os, ckpt.config_digest);
  write_string(os, ckpt.config_json);
  write_pod<uint8_t>(os, ckpt.has_rater ? 1 : 0);
  write_pod<uint32_t>(os, static_cast<uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    write_string(os, name);
    write_pod<uint32_t>(os, 2);  // rank
    write_pod<uint64_t>(os, static_cast<uint64_t>(t.rows()));
    write_pod<uint64_t>(os, static_cast<uint64_t>(t.cols()));
    write_floats(os, t.data(), static_cast<size_t>(t.size()));
  }
  write_pod<uint32_t>(os, static_cast<uint32_t>(ckpt.rng_states.size()));
  for (const auto& [name, counter] : ckpt.rng_states) {
    write_string(os, name);
    write_pod<uint64_t>(os, counter);
  }
  write_pod<int64_t>(os, ckpt.epoch);
  write_pod<uint32_t>(os, static_cast<uint32_t>(ckpt.loss_history.size()));
  for (double v : ckpt.loss_history) write_pod<double>(os, v);
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  if (read_pod<uint32_t>(is) != kCkptMagic)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  Checkpoint c;
  c.version = read_pod<uint32_t>(is);
  if (c.version != kCkptVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(c.version));
  c.config_digest = read_pod<uint64_t>(is);
  c.config_json = read_string(is);
  c.has_rater = read_pod<uint8_t>(is) != 0;
  const uint32_t n = read_pod<uint32_t>(is);
  c.tensors.resize(n);
  for (auto& [name, t] : c.tensors) {
    name = read_string(is);
    const uint32_t rank = read_pod<uint32_t>(is);
    if (rank != 2) throw std::runtime_error("checkpoint: unsupported tensor rank");
    const auto rows = read_pod<uint64_t>(is);
    const auto cols = read_pod<uint64_t>(is);
    t.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    read_floats(is, t.data(), static_cast<size_t>(t.size()));
  }
  const uint32_t r = read_pod<uint32_t>(is);
  c.rng_states.resize(r);
  for (auto& [name, counter] : c.rng_states) {
    name = read_string(is);
    counter = read_pod<uint64_t>(is);
  }
  c.epoch = read_pod<int64_t>(is);
  const uint32_t h = read_pod<uint32_t>(is);
  c.loss_history.resize(h);
  for (double& v : c.loss_history) v = read_pod<double>(is);
  return c;
}

LoadedModels restore(const Checkpoint& ckpt) {
  LoadedModels m;
  m.config = ExperimentConfig::parse(ckpt.config_json);
  if (ckpt.config_digest != m.config.digest())
    throw std::runtime_error("checkpoint: config digest mismatch");
  RandomSource scratch(0, "restore");
  m.backbone.init(m.config.backbone_full(), scratch);
  std::vector<ParamRef<Real>> params;
  m.backbone.collect(params);
  load_tensors(ckpt.tensors, std::move(params), "backbone.");
  if (ckpt.has_rater) {
    m.rater.emplace();
    const BackboneConfig bc = m.config.backbone_full();
    m.rater->init(m.config.rater, bc.d, bc.prefix_len(), bc.L, bc.D, scratch);
    std::vector<ParamRef<Real>> rparams;
    m.rater->collect(rparams);
    load_tensors(ckpt.tensors, std::move(rparams), "rater.");
  }
  m.epoch = ckpt.epoch;
  m.loss_history = ckpt.loss_history;
  return m;
}

uint64_t param_digest(std::vector<ParamRef<Real>> params) {
  uint64_t h = kFnvOffset;
  for (auto& p : params) {
    h = fnv1a(p.name, h);
    h = fnv1a(p.w->data(), sizeof(Real) * static_cast<size_t>(p.w->size()), h);
  }
  return h;
}

}  // namespace asyncfm
