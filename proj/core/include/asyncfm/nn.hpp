#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "asyncfm/rng.hpp"
#include "asyncfm/types.hpp"

namespace asyncfm {

// Named view into a parameter tensor and its gradient accumulator. The
// optimizer, checkpoint writer and gradient checker all walk the same list,
// so enumeration order is part of the reproducibility contract.
template <class S>
struct ParamRef {
  std::string name;
  Matrix<S>* w;
  Matrix<S>* g;
};

template <class S>
Matrix<S> normal_matrix(int rows, int cols, RandomSource& rng, double stddev) {
  Matrix<S> m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = static_cast<S>(stddev * rng.normal());
  return m;
}

// ---------------------------------------------------------------------------
// Linear

template <class S>
struct Linear {
  Matrix<S> w;  // in x out
  Matrix<S> b;  // 1 x out
  Matrix<S> gw, gb;

  // Scaled-normal weights (std 1/sqrt(fan_in)), zero biases.
  void init(int in, int out, RandomSource& rng) {
    w = normal_matrix<S>(in, out, rng, 1.0 / std::sqrt(static_cast<double>(in)));
    b = Matrix<S>::Zero(1, out);
    gw = Matrix<S>::Zero(in, out);
    gb = Matrix<S>::Zero(1, out);
  }

  Matrix<S> forward(const Matrix<S>& x) const {
    return (x * w).rowwise() + b.row(0);
  }

  // Accumulates parameter grads, returns grad wrt the input.
  Matrix<S> backward(const Matrix<S>& x, const Matrix<S>& dy) {
    gw.noalias() += x.transpose() * dy;
    gb += dy.colwise().sum();
    return dy * w.transpose();
  }

  void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    out.push_back({prefix + ".w", &w, &gw});
    out.push_back({prefix + ".b", &b, &gb});
  }
};

// ---------------------------------------------------------------------------
// LayerNorm

template <class S>
struct LayerNormCache {
  Matrix<S> xhat;
  Vector<S> rstd;
};

template <class S>
struct LayerNorm {
  Matrix<S> gamma, beta;  // 1 x d
  Matrix<S> ggamma, gbeta;

  void init(int d) {
    gamma = Matrix<S>::Ones(1, d);
    beta = Matrix<S>::Zero(1, d);
    ggamma = Matrix<S>::Zero(1, d);
    gbeta = Matrix<S>::Zero(1, d);
  }

  Matrix<S> forward(const Matrix<S>& x, LayerNormCache<S>& c) const {
    const auto n = x.rows();
    const auto d = x.cols();
    c.xhat.resize(n, d);
    c.rstd.resize(n);
    Matrix<S> y(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      const S mu = x.row(i).mean();
      const S var = (x.row(i).array() - mu).square().mean();
      const S rstd = S(1) / std::sqrt(var + S(1e-5));
      c.rstd(i) = rstd;
      c.xhat.row(i) = (x.row(i).array() - mu) * rstd;
      y.row(i) = c.xhat.row(i).cwiseProduct(gamma.row(0)) + beta.row(0);
    }
    return y;
  }

  Matrix<S> backward(const Matrix<S>& dy, const LayerNormCache<S>& c) {
    const auto n = dy.rows();
    const auto d = dy.cols();
    Matrix<S> dx(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Array<S, 1, Eigen::Dynamic> dxhat =
          dy.row(i).cwiseProduct(gamma.row(0)).array();
      const S m1 = dxhat.mean();
      const S m2 = (dxhat * c.xhat.row(i).array()).mean();
      dx.row(i) = (c.rstd(i) * (dxhat - m1 - c.xhat.row(i).array() * m2)).matrix();
      ggamma.row(0) += dy.row(i).cwiseProduct(c.xhat.row(i));
      gbeta.row(0) += dy.row(i);
    }
    return dx;
  }

  void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    out.push_back({prefix + ".gamma", &gamma, &ggamma});
    out.push_back({prefix + ".beta", &beta, &gbeta});
  }
};

// ---------------------------------------------------------------------------
// GELU (tanh form)

template <class S>
Matrix<S> gelu(const Matrix<S>& x) {
  const S c = static_cast<S>(std::sqrt(2.0 / M_PI));
  return x.unaryExpr([c](S v) {
    return S(0.5) * v * (S(1) + std::tanh(c * (v + S(0.044715) * v * v * v)));
  });
}

template <class S>
Matrix<S> gelu_grad(const Matrix<S>& x, const Matrix<S>& dy) {
  const S c = static_cast<S>(std::sqrt(2.0 / M_PI));
  Matrix<S> dx(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const S v = x(i);
    const S t = std::tanh(c * (v + S(0.044715) * v * v * v));
    const S dt = (S(1) - t * t) * c * (S(1) + S(3) * S(0.044715) * v * v);
    dx(i) = dy(i) * (S(0.5) * (S(1) + t) + S(0.5) * v * dt);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Multi-head attention with a prefix mask: rows below `prefix` attend only
// within the prefix, rows at or above it attend to every position. prefix=0
// is plain full attention. Keeping the prefix blind to the suffix is what
// makes the context KV-cache exact.

template <class S>
struct AttentionCache {
  Matrix<S> x, q, k, v, o;
  std::vector<Matrix<S>> attn;  // B*heads entries, T x T
  int B = 1, T = 0, prefix = 0;
};

// Per-layer cached keys/values of the context prefix.
template <class S>
struct LayerKV {
  Matrix<S> k, v;  // P x d
};

template <class S>
struct Attention {
  int heads = 1;
  Linear<S> wq, wk, wv, wo;

  void init(int d, int n_heads, RandomSource& rng) {
    heads = n_heads;
    wq.init(d, d, rng);
    wk.init(d, d, rng);
    wv.init(d, d, rng);
    wo.init(d, d, rng);
  }

  Matrix<S> forward(const Matrix<S>& x, int B, int T, int prefix,
                    AttentionCache<S>& c) const {
    const int d = static_cast<int>(x.cols());
    const int dh = d / heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    c.x = x;
    c.q = wq.forward(x);
    c.k = wk.forward(x);
    c.v = wv.forward(x);
    c.o.resize(x.rows(), d);
    c.attn.assign(static_cast<size_t>(B) * heads, {});
    c.B = B;
    c.T = T;
    c.prefix = prefix;
    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < heads; ++h) {
        auto qh = c.q.block(b * T, h * dh, T, dh);
        auto kh = c.k.block(b * T, h * dh, T, dh);
        auto vh = c.v.block(b * T, h * dh, T, dh);
        Matrix<S> scores = qh * kh.transpose() * scale;
        if (prefix > 0)
          scores.topRightCorner(std::min(prefix, T), std::max(0, T - prefix))
              .setConstant(-std::numeric_limits<S>::infinity());
        Matrix<S>& a = c.attn[static_cast<size_t>(b) * heads + h];
        a = softmax_rows(scores);
        c.o.block(b * T, h * dh, T, dh).noalias() = a * vh;
      }
    }
    return wo.forward(c.o);
  }

  Matrix<S> backward(const Matrix<S>& dy, AttentionCache<S>& c) {
    const int d = static_cast<int>(c.x.cols());
    const int dh = d / heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    Matrix<S> d_o = wo.backward(c.o, dy);
    Matrix<S> dq = Matrix<S>::Zero(c.x.rows(), d);
    Matrix<S> dk = Matrix<S>::Zero(c.x.rows(), d);
    Matrix<S> dv = Matrix<S>::Zero(c.x.rows(), d);
    for (int b = 0; b < c.B; ++b) {
      for (int h = 0; h < heads; ++h) {
        const Matrix<S>& a = c.attn[static_cast<size_t>(b) * heads + h];
        auto qh = c.q.block(b * c.T, h * dh, c.T, dh);
        auto kh = c.k.block(b * c.T, h * dh, c.T, dh);
        auto vh = c.v.block(b * c.T, h * dh, c.T, dh);
        Matrix<S> doh = d_o.block(b * c.T, h * dh, c.T, dh);
        Matrix<S> da = doh * vh.transpose();
        dv.block(b * c.T, h * dh, c.T, dh).noalias() += a.transpose() * doh;
        Matrix<S> ds(c.T, c.T);
        for (int r = 0; r < c.T; ++r) {
          const S dot = da.row(r).cwiseProduct(a.row(r)).sum();
          ds.row(r) = a.row(r).array() * (da.row(r).array() - dot);
        }
        dq.block(b * c.T, h * dh, c.T, dh).noalias() += ds * kh * scale;
        dk.block(b * c.T, h * dh, c.T, dh).noalias() += ds.transpose() * qh * scale;
      }
    }
    Matrix<S> dx = wq.backward(c.x, dq);
    dx += wk.backward(c.x, dk);
    dx += wv.backward(c.x, dv);
    return dx;
  }

  // Prefix-only pass: prefix rows attending among themselves. Stores this
  // layer's keys/values for later suffix passes.
  Matrix<S> forward_prefix(const Matrix<S>& x, LayerKV<S>& kv) const {
    AttentionCache<S> c;
    Matrix<S> y = forward(x, 1, static_cast<int>(x.rows()), 0, c);
    kv.k = c.k;
    kv.v = c.v;
    return y;
  }

  // Suffix rows attend to cached prefix keys/values plus each other.
  Matrix<S> forward_suffix(const Matrix<S>& x, const LayerKV<S>& kv) const {
    const int d = static_cast<int>(x.cols());
    const int dh = d / heads;
    const int Ts = static_cast<int>(x.rows());
    const int P = static_cast<int>(kv.k.rows());
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    Matrix<S> q = wq.forward(x);
    Matrix<S> k(P + Ts, d), v(P + Ts, d);
    k.topRows(P) = kv.k;
    v.topRows(P) = kv.v;
    k.bottomRows(Ts) = wk.forward(x);
    v.bottomRows(Ts) = wv.forward(x);
    Matrix<S> o(Ts, d);
    for (int h = 0; h < heads; ++h) {
      Matrix<S> scores = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose() * scale;
      o.middleCols(h * dh, dh).noalias() = softmax_rows(scores) * v.middleCols(h * dh, dh);
    }
    return wo.forward(o);
  }

  void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    wq.collect(prefix + ".wq", out);
    wk.collect(prefix + ".wk", out);
    wv.collect(prefix + ".wv", out);
    wo.collect(prefix + ".wo", out);
  }

  static Matrix<S> softmax_rows(const Matrix<S>& scores) {
    Matrix<S> a(scores.rows(), scores.cols());
    for (Eigen::Index r = 0; r < scores.rows(); ++r) {
      const S mx = scores.row(r).maxCoeff();
      Eigen::Array<S, 1, Eigen::Dynamic> e = (scores.row(r).array() - mx).exp();
      a.row(r) = (e / e.sum()).matrix();
    }
    return a;
  }
};

// ---------------------------------------------------------------------------
// Pre-norm transformer block: x + attn(ln1(x)), then h + ffn(ln2(h)).

template <class S>
struct BlockCache {
  LayerNormCache<S> ln1, ln2;
  AttentionCache<S> attn;
  Matrix<S> h, b2, f1, g;
};

template <class S>
struct Block {
  LayerNorm<S> ln1, ln2;
  Attention<S> attn;
  Linear<S> fc1, fc2;

  void init(int d, int heads, int ffn, RandomSource& rng) {
    ln1.init(d);
    ln2.init(d);
    attn.init(d, heads, rng);
    fc1.init(d, ffn, rng);
    fc2.init(ffn, d, rng);
  }

  Matrix<S> forward(const Matrix<S>& x, int B, int T, int prefix, BlockCache<S>& c) const {
    Matrix<S> a = ln1.forward(x, c.ln1);
    c.h = x + attn.forward(a, B, T, prefix, c.attn);
    c.b2 = ln2.forward(c.h, c.ln2);
    c.f1 = fc1.forward(c.b2);
    c.g = gelu(c.f1);
    return c.h + fc2.forward(c.g);
  }

  Matrix<S> backward(const Matrix<S>& dy, BlockCache<S>& c) {
    Matrix<S> dg = fc2.backward(c.g, dy);
    Matrix<S> df1 = gelu_grad(c.f1, dg);
    Matrix<S> dh = dy + ln2.backward(fc1.backward(c.b2, df1), c.ln2);
    Matrix<S> da = attn.backward(dh, c.attn);
    return dh + ln1.backward(da, c.ln1);
  }

  Matrix<S> forward_prefix(const Matrix<S>& x, LayerKV<S>& kv) const {
    LayerNormCache<S> lc1, lc2;
    Matrix<S> a = ln1.forward(x, lc1);
    Matrix<S> h = x + attn.forward_prefix(a, kv);
    Matrix<S> b2 = ln2.forward(h, lc2);
    return h + fc2.forward(gelu(fc1.forward(b2)));
  }

  Matrix<S> forward_suffix(const Matrix<S>& x, const LayerKV<S>& kv) const {
    LayerNormCache<S> lc1, lc2;
    Matrix<S> a = ln1.forward(x, lc1);
    Matrix<S> h = x + attn.forward_suffix(a, kv);
    Matrix<S> b2 = ln2.forward(h, lc2);
    return h + fc2.forward(gelu(fc1.forward(b2)));
  }

  void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    ln1.collect(prefix + ".ln1", out);
    attn.collect(prefix + ".attn", out);
    ln2.collect(prefix + ".ln2", out);
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

// ---------------------------------------------------------------------------
// Transformer trunk: learned absolute position embeddings over `seq`
// positions, a stack of pre-norm blocks, final LayerNorm.

template <class S>
struct TrunkCache {
  std::vector<BlockCache<S>> blocks;
  LayerNormCache<S> final_ln;
  int B = 1, T = 0;
};

// Cached prefix state for one context; one LayerKV per block.
template <class S>
struct PrefixCache {
  std::vector<LayerKV<S>> layers;
  uint64_t fingerprint = 0;
  int prefix_len = 0;
};

template <class S>
struct Transformer {
  int seq = 0, prefix_len = 0;
  Matrix<S> pos;  // seq x d
  Matrix<S> gpos;
  std::vector<Block<S>> blocks;
  LayerNorm<S> final_ln;

  void init(int d, int layers, int heads, int ffn, int seq_len, int prefix,
            RandomSource& rng) {
    seq = seq_len;
    prefix_len = prefix;
    pos = normal_matrix<S>(seq_len, d, rng, 0.02);
    gpos = Matrix<S>::Zero(seq_len, d);
    blocks.assign(layers, {});
    for (auto& b : blocks) b.init(d, heads, ffn, rng);
    final_ln.init(d);
  }

  // X is B stacked blocks of `seq` rows (token embeddings, no positions).
  Matrix<S> forward(const Matrix<S>& x, int B, TrunkCache<S>& c) const {
    const int T = seq;
    Matrix<S> h = x;
    for (int b = 0; b < B; ++b) h.middleRows(b * T, T) += pos;
    c.blocks.resize(blocks.size());
    c.B = B;
    c.T = T;
    for (size_t i = 0; i < blocks.size(); ++i) {
      h = blocks[i].forward(h, B, T, prefix_len, c.blocks[i]);
      if (!h.allFinite())
        throw NumericError("non-finite activations in block " + std::to_string(i));
    }
    return final_ln.forward(h, c.final_ln);
  }

  Matrix<S> backward(const Matrix<S>& dy, TrunkCache<S>& c) {
    Matrix<S> d = final_ln.backward(dy, c.final_ln);
    for (size_t i = blocks.size(); i-- > 0;) d = blocks[i].backward(d, c.blocks[i]);
    for (int b = 0; b < c.B; ++b) gpos += d.middleRows(b * c.T, c.T);
    return d;
  }

  // Run the context prefix once, collecting each layer's keys/values.
  PrefixCache<S> build_prefix(const Matrix<S>& ctx_embed) const {
    PrefixCache<S> pc;
    pc.prefix_len = prefix_len;
    pc.layers.resize(blocks.size());
    Matrix<S> h = ctx_embed + pos.topRows(prefix_len);
    for (size_t i = 0; i < blocks.size(); ++i) {
      h = blocks[i].forward_prefix(h, pc.layers[i]);
      if (!h.allFinite())
        throw NumericError("non-finite activations in block " + std::to_string(i));
    }
    return pc;
  }

  Matrix<S> forward_suffix(const PrefixCache<S>& pc, const Matrix<S>& suffix_embed) const {
    Matrix<S> h = suffix_embed + pos.bottomRows(seq - prefix_len);
    for (size_t i = 0; i < blocks.size(); ++i) {
      h = blocks[i].forward_suffix(h, pc.layers[i]);
      if (!h.allFinite())
        throw NumericError("non-finite activations in block " + std::to_string(i));
    }
    LayerNormCache<S> lc;
    return final_ln.forward(h, lc);
  }

  void collect(const std::string& name, std::vector<ParamRef<S>>& out) {
    out.push_back({name + ".pos", &pos, &gpos});
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(name + ".block" + std::to_string(i), out);
    final_ln.collect(name + ".final_ln", out);
  }
};

}  // namespace asyncfm
