#pragma once

#include <cmath>
#include <vector>

#include "medprompt/autodiff.hpp"

namespace medprompt {

template <typename Scalar>
struct AdamConfig {
  Scalar lr = Scalar(1e-4);
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar eps = Scalar(1e-8);
};

/// Adam with bias correction. step() consumes the gradients currently held by
/// the parameters; clearing them afterwards is the caller's job.
template <typename Scalar>
class Adam {
 public:
  Adam(std::vector<Parameter<Scalar>*> params, AdamConfig<Scalar> cfg)
      : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (Parameter<Scalar>* p : params_) {
      m_.push_back(Tensor<Scalar>::zeros(p->value.shape()));
      v_.push_back(Tensor<Scalar>::zeros(p->value.shape()));
    }
  }

  void step() {
    ++t_;
    const Scalar bc1 = Scalar(1) - std::pow(cfg_.beta1, Scalar(t_));
    const Scalar bc2 = Scalar(1) - std::pow(cfg_.beta2, Scalar(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto g = params_[i]->grad.array();
      auto m = m_[i].array();
      auto v = v_[i].array();
      m = cfg_.beta1 * m + (Scalar(1) - cfg_.beta1) * g;
      v = cfg_.beta2 * v + (Scalar(1) - cfg_.beta2) * g.square();
      params_[i]->value.array() -=
          cfg_.lr * (m / bc1) / ((v / bc2).sqrt() + cfg_.eps);
    }
  }

  uint64_t steps_taken() const { return t_; }
  const AdamConfig<Scalar>& config() const { return cfg_; }
  AdamConfig<Scalar>& config() { return cfg_; }
  size_t slot_count() const { return params_.size(); }
  const Tensor<Scalar>& m(size_t i) const { return m_[i]; }
  const Tensor<Scalar>& v(size_t i) const { return v_[i]; }

  // Checkpoint restore.
  void restore(uint64_t t, std::vector<Tensor<Scalar>> m, std::vector<Tensor<Scalar>> v) {
    check(m.size() == params_.size() && v.size() == params_.size(),
          "adam restore: slot count mismatch: ", m.size(), "/", v.size(), " vs ",
          params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      check(m[i].shape() == params_[i]->value.shape() &&
                v[i].shape() == params_[i]->value.shape(),
            "adam restore: slot ", i, " shape mismatch for ", params_[i]->name);
    }
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  std::vector<Parameter<Scalar>*> params_;
  AdamConfig<Scalar> cfg_;
  std::vector<Tensor<Scalar>> m_, v_;
  uint64_t t_ = 0;
};

}  // namespace medprompt
