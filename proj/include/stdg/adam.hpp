#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "stdg/params.hpp"
#include "stdg/tensor.hpp"

namespace stdg {

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over a ParamRegistry. Moment tensors mirror the
/// parameter shapes; the step counter advances by one per update.
class Adam {
 public:
  Adam(const ParamRegistry& params, AdamConfig cfg = {}) : cfg_(cfg) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_.push_back(Tensor::zeros(params.value_at(i).shape));
      v_.push_back(Tensor::zeros(params.value_at(i).shape));
    }
  }

  std::uint64_t step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  const Tensor& first_moment(std::size_t i) const { return m_[i]; }
  const Tensor& second_moment(std::size_t i) const { return v_[i]; }

  /// One update over all parameters; grads are positional, matching the
  /// registry. Rejects non-finite gradients naming the parameter.
  void step(ParamRegistry& params, const std::vector<Tensor>& grads) {
    require(grads.size() == params.size(), "adam: gradient count mismatch");
    for (std::size_t i = 0; i < grads.size(); ++i) {
      require(grads[i].shape == params.value_at(i).shape,
              "adam: gradient shape mismatch for " + params.name_at(i));
      for (double g : grads[i].data)
        require(std::isfinite(g), "adam: non-finite gradient for " + params.name_at(i));
    }
    t_ += 1;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < grads.size(); ++i) {
      Tensor& p = params.value_at(i);
      const std::vector<double>& g = grads[i].data;
      std::vector<double>& m = m_[i].data;
      std::vector<double>& v = v_[i].data;
      for (std::size_t j = 0; j < g.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        p.data[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::uint64_t t_ = 0;
};

}  // namespace stdg
