#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "genrec/tensor.hpp"

namespace genrec::nn {

// Linear warmup from 0 over the first ceil(warmup_fraction * total) steps,
// constant afterwards.
struct WarmupSchedule {
  std::size_t total_steps = 0;
  std::size_t warmup_steps = 0;
  double base_lr = 1e-5;

  static WarmupSchedule with_fraction(std::size_t total_steps, double base_lr, double warmup_fraction = 0.05) {
    WarmupSchedule s;
    s.total_steps = total_steps;
    s.base_lr = base_lr;
    // Guard against 0.05 * 1000 = 50.000000000000007 rounding up to 51.
    const double raw = warmup_fraction * double(total_steps);
    s.warmup_steps = std::size_t(std::ceil(raw - 1e-9));
    if (s.warmup_steps > total_steps) s.warmup_steps = total_steps;
    return s;
  }

  double lr_at(std::size_t step) const {
    if (warmup_steps == 0 || step >= warmup_steps) return base_lr;
    return base_lr * double(step) / double(warmup_steps);
  }
};

struct AdamWOptions {
  double lr = 1e-5;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
  // Reject non-finite gradients before updating.
  bool checked = true;
};

template <class T>
class AdamW {
 public:
  AdamW(std::vector<Parameter<T>*> params, AdamWOptions opts = {}) : params_(std::move(params)), opts_(opts) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.shape);
      v_.emplace_back(p->value.shape);
    }
  }

  std::size_t step_count() const noexcept { return step_; }
  const AdamWOptions& options() const noexcept { return opts_; }
  const Tensor<T>& first_moment(std::size_t i) const { return m_.at(i); }
  const Tensor<T>& second_moment(std::size_t i) const { return v_.at(i); }

  // One update with learning rate `lr_t`; decay is decoupled:
  //   p <- p - lr_t * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
  void step(double lr_t) {
    if (opts_.checked) {
      for (auto* p : params_)
        if (!p->grad.all_finite()) throw Error("adamw: non-finite gradient in parameter " + p->name);
    }
    double clip = 1.0;
    if (opts_.clip_norm > 0) {
      double sq = 0;
      for (auto* p : params_)
        for (T g : p->grad.data) sq += double(g) * double(g);
      const double norm = std::sqrt(sq);
      if (norm > opts_.clip_norm) clip = opts_.clip_norm / norm;
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, double(step_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, double(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        const double g = double(p.grad.data[k]) * clip;
        const double mk = opts_.beta1 * double(m.data[k]) + (1.0 - opts_.beta1) * g;
        const double vk = opts_.beta2 * double(v.data[k]) + (1.0 - opts_.beta2) * g * g;
        m.data[k] = T(mk);
        v.data[k] = T(vk);
        const double mhat = mk / bc1;
        const double vhat = vk / bc2;
        const double w = double(p.value.data[k]);
        p.value.data[k] = T(w - lr_t * (mhat / (std::sqrt(vhat) + opts_.eps) + opts_.weight_decay * w));
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

 private:
  std::vector<Parameter<T>*> params_;
  AdamWOptions opts_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  std::size_t step_ = 0;
};

}  // namespace genrec::nn
