#pragma once

#include <span>
#include <stdexcept>

#include "asyncfm/nn.hpp"
#include "asyncfm/types.hpp"

namespace asyncfm {

struct RaterConfig {
  int d_r = 128;
  int layers = 4;
  int heads = 4;
  int ffn = 512;
  double threshold = 0.5;  // confidence threshold T

  void validate() const {
    if (d_r <= 0 || layers <= 0 || heads <= 0 || ffn <= 0)
      throw std::invalid_argument("RaterConfig: geometry must be positive");
    if (d_r % heads != 0)
      throw std::invalid_argument("RaterConfig: d_r must be divisible by heads");
    if (!(threshold > 0.0 && threshold < 1.0))
      throw std::invalid_argument("RaterConfig: threshold must lie in (0,1)");
  }
};

struct PseudoLabels {
  std::vector<double> q;
  double alpha = 0.01, beta = 0.98, epsilon = 1e-6;
};

// Per-token MSE of first-round actions against ground truth, averaged over
// the D action dims so the scale is D-free.
template <class S>
std::vector<double> per_token_error(const Matrix<S>& sfm_actions,
                                    const Matrix<S>& gt_actions) {
  if (sfm_actions.rows() != gt_actions.rows() || sfm_actions.cols() != gt_actions.cols())
    throw std::invalid_argument("per_token_error: shape mismatch");
  std::vector<double> e(sfm_actions.rows());
  for (Eigen::Index l = 0; l < sfm_actions.rows(); ++l) {
    double acc = 0.0;
    for (Eigen::Index j = 0; j < sfm_actions.cols(); ++j) {
      const double d = static_cast<double>(sfm_actions(l, j)) - static_cast<double>(gt_actions(l, j));
      acc += d * d;
    }
    e[static_cast<size_t>(l)] = acc / static_cast<double>(sfm_actions.cols());
  }
  return e;
}

// Min-max confidence targets: q_l = 1 - alpha - beta*(e_l - min)/(max - min + eps).
// Monotone non-increasing in e_l; range [1-alpha-beta, 1-alpha].
inline PseudoLabels pseudo_labels(const std::vector<double>& e, double alpha = 0.01,
                                  double beta = 0.98, double epsilon = 1e-6) {
  if (e.empty()) throw std::invalid_argument("pseudo_labels: empty error vector");
  if (!(epsilon > 0.0)) throw std::invalid_argument("pseudo_labels: epsilon must be positive");
  double lo = e[0], hi = e[0];
  for (double v : e) {
    if (!(v >= 0.0) || !std::isfinite(v))
      throw std::invalid_argument("pseudo_labels: errors must be finite and nonnegative");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  PseudoLabels out;
  out.alpha = alpha;
  out.beta = beta;
  out.epsilon = epsilon;
  out.q.resize(e.size());
  for (size_t l = 0; l < e.size(); ++l)
    out.q[l] = 1.0 - alpha - beta * (e[l] - lo) / (hi - lo + epsilon);
  return out;
}

// Eq-style thresholding: mask exactly the tokens with p_l strictly below T.
inline TokenMask build_mask(const std::vector<double>& p, double T) {
  if (!(T > 0.0 && T < 1.0)) throw std::invalid_argument("build_mask: T must lie in (0,1)");
  TokenMask m(p.size());
  for (size_t l = 0; l < p.size(); ++l) m[l] = p[l] < T ? 1 : 0;
  return m;
}

inline double rater_loss(const std::vector<double>& p, const PseudoLabels& labels) {
  if (p.size() != labels.q.size()) throw std::invalid_argument("rater_loss: length mismatch");
  double acc = 0.0;
  for (size_t l = 0; l < p.size(); ++l) {
    const double d = p[l] - labels.q[l];
    acc += d * d;
  }
  return acc / static_cast<double>(p.size());
}

template <class S>
struct RaterTrainItem {
  Matrix<S> ctx_embed;  // (S+1) x d backbone input-layer embeddings
  Matrix<S> actions;    // L x D first-round actions
};

template <class S>
struct RaterTrainCache {
  TrunkCache<S> trunk;
  std::vector<Matrix<S>> ctx_in;   // per-sample ctx embeddings
  std::vector<Matrix<S>> act_in;   // per-sample actions
  Matrix<S> head_in;               // (B*L) x d_r
  Matrix<S> logits;                // (B*L) x 1
  Matrix<S> probs;                 // (B*L) x 1
  int L = 0;
};

// Confidence rater: projects backbone context embeddings and first-round
// action tokens into its own width, runs a full-attention transformer, and
// rates each action token through a linear head + sigmoid.
template <class S>
class Rater {
 public:
  RaterConfig cfg;
  int backbone_d = 0, L = 0, D = 0, ctx_len = 0;
  Linear<S> ctx_proj;  // backbone_d -> d_r
  Linear<S> act_proj;  // D -> d_r
  Transformer<S> trunk;
  Linear<S> head;  // d_r -> 1

  bool initialized() const { return backbone_d > 0; }

  void init(const RaterConfig& config, int backbone_width, int ctx_positions, int chunk_len,
            int action_dim, RandomSource& rng) {
    cfg = config;
    cfg.validate();
    backbone_d = backbone_width;
    ctx_len = ctx_positions;
    L = chunk_len;
    D = action_dim;
    ctx_proj.init(backbone_d, cfg.d_r, rng);
    act_proj.init(D, cfg.d_r, rng);
    // prefix 0: full attention over every position
    trunk.init(cfg.d_r, cfg.layers, cfg.heads, cfg.ffn, ctx_len + L, 0, rng);
    head.init(cfg.d_r, 1, rng);
  }

  std::vector<double> score(const Matrix<S>& ctx_embed, const Matrix<S>& actions) const {
    if (!initialized()) throw std::logic_error("Rater::score: parameters not initialized");
    RaterTrainItem<S> item{ctx_embed, actions};
    RaterTrainCache<S> c;
    Matrix<S> probs = batch_forward({&item, 1}, c);
    std::vector<double> p(L);
    for (int l = 0; l < L; ++l) p[static_cast<size_t>(l)] = static_cast<double>(probs(l, 0));
    return p;
  }

  // Returns (B*L) x 1 sigmoid confidences.
  Matrix<S> batch_forward(std::span<const RaterTrainItem<S>> batch, RaterTrainCache<S>& c) const {
    const int B = static_cast<int>(batch.size());
    const int T = ctx_len + L;
    c.ctx_in.assign(B, {});
    c.act_in.assign(B, {});
    c.L = L;
    Matrix<S> x(B * T, cfg.d_r);
    for (int b = 0; b < B; ++b) {
      if (batch[b].ctx_embed.rows() != ctx_len || batch[b].ctx_embed.cols() != backbone_d)
        throw std::invalid_argument("Rater: context embedding shape mismatch");
      if (batch[b].actions.rows() != L || batch[b].actions.cols() != D)
        throw std::invalid_argument("Rater: action chunk shape mismatch");
      c.ctx_in[b] = batch[b].ctx_embed;
      c.act_in[b] = batch[b].actions;
      x.middleRows(b * T, ctx_len) = ctx_proj.forward(batch[b].ctx_embed);
      x.middleRows(b * T + ctx_len, L) = act_proj.forward(batch[b].actions);
    }
    Matrix<S> y = trunk.forward(x, B, c.trunk);
    c.head_in.resize(B * L, cfg.d_r);
    for (int b = 0; b < B; ++b)
      c.head_in.middleRows(b * L, L) = y.middleRows(b * T + ctx_len, L);
    c.logits = head.forward(c.head_in);
    c.probs = c.logits.unaryExpr([](S v) { return S(1) / (S(1) + std::exp(-v)); });
    return c.probs;
  }

  // dp is (B*L) x 1, gradient wrt the sigmoid outputs.
  void batch_backward(const Matrix<S>& dp, RaterTrainCache<S>& c) {
    const int B = static_cast<int>(c.ctx_in.size());
    const int T = ctx_len + L;
    Matrix<S> dlogits =
        dp.cwiseProduct(c.probs.cwiseProduct(Matrix<S>::Ones(c.probs.rows(), 1) - c.probs));
    Matrix<S> d_head_in = head.backward(c.head_in, dlogits);
    Matrix<S> dy = Matrix<S>::Zero(B * T, cfg.d_r);
    for (int b = 0; b < B; ++b)
      dy.middleRows(b * T + ctx_len, L) = d_head_in.middleRows(b * L, L);
    Matrix<S> dx = trunk.backward(dy, c.trunk);
    for (int b = 0; b < B; ++b) {
      ctx_proj.backward(c.ctx_in[b], dx.middleRows(b * T, ctx_len));
      act_proj.backward(c.act_in[b], dx.middleRows(b * T + ctx_len, L));
    }
  }

  void collect(std::vector<ParamRef<S>>& out) {
    ctx_proj.collect("rater.ctx_proj", out);
    act_proj.collect("rater.act_proj", out);
    trunk.collect("rater.trunk", out);
    head.collect("rater.head", out);
  }
};

}  // namespace asyncfm
