#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "pcg/tensor.hpp"

namespace pcg::ad {

struct AdamConfig {
  double lr = 0.0002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction over a fixed parameter list.
template <class T>
class AdamT {
 public:
  AdamT(std::vector<TensorPtr<T>> params, AdamConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i]->size(), T(0));
      v_[i].assign(params_[i]->size(), T(0));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  void step() {
    ++step_count_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      if (!p.grad.empty() && p.grad.size() != p.value.size())
        throw std::invalid_argument("adam: grad shape mismatch for " + p.name);
      const std::size_t n = p.value.size();
      for (std::size_t k = 0; k < n; ++k) {
        const double g = p.grad.empty() ? 0.0 : static_cast<double>(p.grad[k]);
        m_[i][k] = static_cast<T>(cfg_.beta1 * m_[i][k] + (1.0 - cfg_.beta1) * g);
        v_[i][k] = static_cast<T>(cfg_.beta2 * v_[i][k] + (1.0 - cfg_.beta2) * g * g);
        const double mhat = m_[i][k] / bc1;
        const double vhat = v_[i][k] / bc2;
        p.value[k] -= static_cast<T>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

  std::int64_t step_count() const { return step_count_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<TensorPtr<T>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  std::int64_t step_count_ = 0;
};

using Adam = AdamT<float>;

}  // namespace pcg::ad
