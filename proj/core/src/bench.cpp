#include "asyncfm/bench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "asyncfm/binio.hpp"
#include "asyncfm/digest.hpp"

namespace asyncfm {
namespace {

constexpr uint32_t kDatasetMagic = 0x444d4641;  // "AFMD"
constexpr uint32_t kDatasetVersion = 1;

// Task-conditioned frequency ladder: component j of task t oscillates at
// f = (j+1) * (1 + t/(2*num_tasks)) cycles over the chunk. The last task
// is a deliberate stress task: triple frequency and no harmonic damping
// (see task_smoothness), so the policy keeps making large errors on it no
// matter how long it trains. That keeps the error distribution the
// confidence rater sees during training heavy-tailed, the way long-horizon
// failures do for real manipulation policies.
double frequency(int component, int task, int num_tasks) {
  if (num_tasks > 1 && task == num_tasks - 1) return (component + 1) * 3.0;
  return (component + 1) * (1.0 + 0.5 * task / num_tasks);
}

// Non-stress tasks spread over a mild difficulty ramp: early tasks damp
// high harmonics hard (near-sinusoidal curves), later ones less so.
double task_smoothness(double smoothness, int task, int num_tasks) {
  if (num_tasks > 1 && task == num_tasks - 1) return std::min(1.0, smoothness * 1.65);
  const int span = std::max(1, num_tasks - 2);
  return smoothness * (0.55 + 0.35 * static_cast<double>(task) / span);
}

Episode gen_fourier_episode(const BenchSpec& spec, RandomSource& rng) {
  Episode ep;
  ep.ctx.task_id = static_cast<int>(rng.uniform_index(spec.num_tasks));
  const int F = spec.fourier;
  // Coefficients (x_j, y_j) per action dim; sin/cos form keeps the
  // context -> action map linear given the task, hence learnable.
  MatR coef(spec.D, 2 * F);
  for (int dd = 0; dd < spec.D; ++dd) {
    double norm = 0.0;
    for (int j = 0; j < F; ++j) {
      const double damp =
          spec.amplitude *
          std::pow(task_smoothness(spec.smoothness, ep.ctx.task_id, spec.num_tasks), j);
      coef(dd, 2 * j) = static_cast<Real>(damp * rng.normal());
      coef(dd, 2 * j + 1) = static_cast<Real>(damp * rng.normal());
    }
    for (int j = 0; j < F; ++j)
      norm += std::hypot(coef(dd, 2 * j), coef(dd, 2 * j + 1));
    const Real scale = static_cast<Real>(spec.amplitude * 0.9 / (norm + 1e-9));
    coef.row(dd) *= scale;
  }
  ep.actions.resize(spec.L, spec.D);
  for (int l = 0; l < spec.L; ++l) {
    const double u = spec.L > 1 ? static_cast<double>(l) / (spec.L - 1) : 0.0;
    for (int dd = 0; dd < spec.D; ++dd) {
      double v = 0.0;
      for (int j = 0; j < F; ++j) {
        const double w = 2.0 * M_PI * frequency(j, ep.ctx.task_id, spec.num_tasks) * u;
        v += coef(dd, 2 * j) * std::sin(w) + coef(dd, 2 * j + 1) * std::cos(w);
      }
      ep.actions(l, dd) = static_cast<Real>(v);
    }
  }
  // Context rows 0..D-1 carry the (noisy) coefficients; spare rows are
  // pure observation noise.
  ep.ctx.state_tokens = MatR::Zero(spec.S, spec.d_in);
  ep.ctx.state_tokens.topLeftCorner(spec.D, 2 * F) = coef;
  for (int r = 0; r < spec.S; ++r)
    for (int c = 0; c < spec.d_in; ++c)
      ep.ctx.state_tokens(r, c) += static_cast<Real>(spec.sigma_obs * rng.normal());
  return ep;
}

Episode gen_linear_episode(const BenchSpec& spec, RandomSource& rng) {
  Episode ep;
  ep.ctx.task_id = static_cast<int>(rng.uniform_index(spec.num_tasks));
  MatR coef(spec.D, 2);  // offset, slope
  for (int dd = 0; dd < spec.D; ++dd) {
    double c0 = spec.amplitude * rng.normal();
    double c1 = spec.amplitude * rng.normal();
    const double norm = std::abs(c0) + std::abs(c1) + 1e-9;
    coef(dd, 0) = static_cast<Real>(0.9 * c0 / norm);
    coef(dd, 1) = static_cast<Real>(0.9 * c1 / norm);
  }
  ep.actions.resize(spec.L, spec.D);
  for (int l = 0; l < spec.L; ++l) {
    const double u = spec.L > 1 ? 2.0 * l / (spec.L - 1) - 1.0 : 0.0;
    for (int dd = 0; dd < spec.D; ++dd)
      ep.actions(l, dd) = coef(dd, 0) + static_cast<Real>(u) * coef(dd, 1);
  }
  ep.ctx.state_tokens = MatR::Zero(spec.S, spec.d_in);
  ep.ctx.state_tokens.topLeftCorner(spec.D, 2) = coef;
  for (int r = 0; r < spec.S; ++r)
    for (int c = 0; c < spec.d_in; ++c)
      ep.ctx.state_tokens(r, c) += static_cast<Real>(spec.sigma_obs * rng.normal());
  return ep;
}

void write_split(std::ostream& os, const std::string& name,
                 const std::vector<Episode>& eps) {
  write_string(os, name);
  write_pod<uint64_t>(os, eps.size());
  for (const auto& ep : eps) {
    write_pod<uint32_t>(os, static_cast<uint32_t>(ep.ctx.task_id));
    write_floats(os, ep.ctx.state_tokens.data(), static_cast<size_t>(ep.ctx.state_tokens.size()));
    write_floats(os, ep.actions.data(), static_cast<size_t>(ep.actions.size()));
  }
}

std::vector<Episode> read_split(std::istream& is, const std::string& want, int S, int d_in,
                                int L, int D) {
  const std::string name = read_string(is);
  if (name != want) throw std::runtime_error("dataset: expected split '" + want + "', found '" + name + "'");
  const uint64_t n = read_pod<uint64_t>(is);
  std::vector<Episode> eps(n);
  for (auto& ep : eps) {
    ep.ctx.task_id = static_cast<int>(read_pod<uint32_t>(is));
    ep.ctx.state_tokens.resize(S, d_in);
    read_floats(is, ep.ctx.state_tokens.data(), static_cast<size_t>(ep.ctx.state_tokens.size()));
    ep.actions.resize(L, D);
    read_floats(is, ep.actions.data(), static_cast<size_t>(ep.actions.size()));
  }
  return eps;
}

}  // namespace

uint64_t bench_digest(const BenchSpec& spec) {
  uint64_t h = kFnvOffset;
  h = fnv1a(&spec.num_tasks, sizeof(spec.num_tasks), h);
  h = fnv1a(&spec.L, sizeof(spec.L), h);
  h = fnv1a(&spec.D, sizeof(spec.D), h);
  h = fnv1a(&spec.S, sizeof(spec.S), h);
  h = fnv1a(&spec.d_in, sizeof(spec.d_in), h);
  h = fnv1a(&spec.fourier, sizeof(spec.fourier), h);
  h = fnv1a(&spec.sigma_obs, sizeof(spec.sigma_obs), h);
  h = fnv1a(&spec.amplitude, sizeof(spec.amplitude), h);
  h = fnv1a(&spec.smoothness, sizeof(spec.smoothness), h);
  h = fnv1a(spec.family, h);
  h = fnv1a(&spec.seed, sizeof(spec.seed), h);
  h = fnv1a(&spec.n_train, sizeof(spec.n_train), h);
  h = fnv1a(&spec.n_val, sizeof(spec.n_val), h);
  h = fnv1a(&spec.n_test, sizeof(spec.n_test), h);
  return h;
}

std::vector<Episode> gen_episodes(const BenchSpec& spec, int n, const std::string& split) {
  spec.validate();
  RandomSource rng(spec.seed, "bench." + split);
  std::vector<Episode> eps;
  eps.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    eps.push_back(spec.family == "linear" ? gen_linear_episode(spec, rng)
                                          : gen_fourier_episode(spec, rng));
  return eps;
}

Dataset gen_dataset(const BenchSpec& spec) {
  Dataset ds;
  ds.spec_digest = bench_digest(spec);
  ds.train = gen_episodes(spec, spec.n_train, "train");
  ds.val = gen_episodes(spec, spec.n_val, "val");
  ds.test = gen_episodes(spec, spec.n_test, "test");
  return ds;
}

MatR corrupt(const MatR& actions, const CorruptionSpec& spec, RandomSource& rng) {
  if (spec.kind != "gaussian-offset" && spec.kind != "replace-with-noise")
    throw std::invalid_argument("corrupt: unknown kind '" + spec.kind + "'");
  if (spec.scale < 0.0) throw std::invalid_argument("corrupt: scale must be >= 0");
  MatR out = actions;
  for (int idx : spec.indices) {
    if (idx < 0 || idx >= actions.rows())
      throw std::invalid_argument("corrupt: token index out of range");
    for (Eigen::Index j = 0; j < actions.cols(); ++j) {
      const Real draw = static_cast<Real>(spec.scale * rng.normal());
      out(idx, j) = spec.kind == "gaussian-offset" ? out(idx, j) + draw : draw;
    }
  }
  return out;
}

void save_dataset(const Dataset& ds, const BenchSpec& spec, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("dataset: cannot write " + path);
  write_pod<uint32_t>(os, kDatasetMagic);
  write_pod<uint32_t>(os, kDatasetVersion);
  write_pod<uint64_t>(os, ds.spec_digest);
  write_pod<uint32_t>(os, static_cast<uint32_t>(spec.S));
  write_pod<uint32_t>(os, static_cast<uint32_t>(spec.d_in));
  write_pod<uint32_t>(os, static_cast<uint32_t>(spec.L));
  write_pod<uint32_t>(os, static_cast<uint32_t>(spec.D));
  write_split(os, "train", ds.train);
  write_split(os, "val", ds.val);
  write_split(os, "test", ds.test);
  if (!os) throw std::runtime_error("dataset: write failed for " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("dataset: cannot open " + path);
  if (read_pod<uint32_t>(is) != kDatasetMagic)
    throw std::runtime_error("dataset: bad magic in " + path);
  const uint32_t version = read_pod<uint32_t>(is);
  if (version != kDatasetVersion)
    throw std::runtime_error("dataset: unsupported version " + std::to_string(version));
  Dataset ds;
  ds.spec_digest = read_pod<uint64_t>(is);
  const int S = static_cast<int>(read_pod<uint32_t>(is));
  const int d_in = static_cast<int>(read_pod<uint32_t>(is));
  const int L = static_cast<int>(read_pod<uint32_t>(is));
  const int D = static_cast<int>(read_pod<uint32_t>(is));
  ds.train = read_split(is, "train", S, d_in, L, D);
  ds.val = read_split(is, "val", S, d_in, L, D);
  ds.test = read_split(is, "test", S, d_in, L, D);
  return ds;
}

double chunk_mse(const MatR& pred, const MatR& gt) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < pred.size(); ++i)
    acc += (static_cast<double>(pred(i)) - gt(i)) * (static_cast<double>(pred(i)) - gt(i));
  return acc / static_cast<double>(pred.size());
}

std::vector<double> per_token_mse(const MatR& pred, const MatR& gt) {
  std::vector<double> e(pred.rows());
  for (Eigen::Index l = 0; l < pred.rows(); ++l) {
    double acc = 0.0;
    for (Eigen::Index j = 0; j < pred.cols(); ++j) {
      const double d = static_cast<double>(pred(l, j)) - gt(l, j);
      acc += d * d;
    }
    e[static_cast<size_t>(l)] = acc / static_cast<double>(pred.cols());
  }
  return e;
}

bool episode_success(const MatR& pred, const MatR& gt, double eps_tube) {
  // "error" here is the same per-token MSE the rater labels use.
  for (double e : per_token_mse(pred, gt))
    if (e > eps_tube) return false;
  return true;
}

}  // namespace asyncfm
