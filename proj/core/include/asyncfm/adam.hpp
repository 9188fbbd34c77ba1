#pragma once

#include <cmath>
#include <vector>

#include "asyncfm/nn.hpp"

namespace asyncfm {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// AdamW over a fixed parameter list. Moment buffers are indexed by position
// in the list, so the list must not change between steps.
template <class S>
class Adam {
 public:
  Adam(std::vector<ParamRef<S>> params, AdamConfig cfg)
      : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto& p : params_) {
      m_.push_back(Matrix<S>::Zero(p.w->rows(), p.w->cols()));
      v_.push_back(Matrix<S>::Zero(p.w->rows(), p.w->cols()));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.g->setZero();
  }

  void step() {
    ++t_;
    const S bc1 = static_cast<S>(1.0 - std::pow(cfg_.beta1, t_));
    const S bc2 = static_cast<S>(1.0 - std::pow(cfg_.beta2, t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Matrix<S>& w = *params_[i].w;
      const Matrix<S>& g = *params_[i].g;
      m_[i] = static_cast<S>(cfg_.beta1) * m_[i] + static_cast<S>(1.0 - cfg_.beta1) * g;
      v_[i] = static_cast<S>(cfg_.beta2) * v_[i] +
              static_cast<S>(1.0 - cfg_.beta2) * g.cwiseProduct(g);
      Matrix<S> mhat = m_[i] / bc1;
      Matrix<S> vhat = v_[i] / bc2;
      if (cfg_.weight_decay != 0.0)
        w -= static_cast<S>(cfg_.lr * cfg_.weight_decay) * w;
      w.array() -= static_cast<S>(cfg_.lr) * mhat.array() /
                   (vhat.array().sqrt() + static_cast<S>(cfg_.eps));
    }
  }

  const std::vector<ParamRef<S>>& params() const { return params_; }

 private:
  std::vector<ParamRef<S>> params_;
  AdamConfig cfg_;
  std::vector<Matrix<S>> m_, v_;
  long t_ = 0;
};

}  // namespace asyncfm
