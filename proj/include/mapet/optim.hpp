#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "mapet/errors.hpp"
#include "mapet/params.hpp"

namespace mapet {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// Decoupled weight decay: p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps).
// Decay applies only to parameters flagged with `decay`.
template <typename S>
class AdamW {
 public:
  AdamW(const ParameterSet<S>& params, AdamWConfig cfg) : cfg_(cfg), m_(params), v_(params) {}

  std::size_t steps() const { return t_; }

  // lr_scale[i] multiplies the learning rate of parameter i (empty = all 1).
  // Entries with `frozen` set are skipped.
  void step(ParameterSet<S>& params, const Gradients<S>& grads, double lr, const std::vector<double>& lr_scale = {},
            const std::vector<bool>& frozen = {}) {
    detail::check(grads.grads.size() == params.size(), "AdamW: gradient count does not match parameters");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!frozen.empty() && frozen[i]) continue;
      auto& p = params[i];
      const double plr = lr * (lr_scale.empty() ? 1.0 : lr_scale[i]);
      const double decay = p.decay ? 1.0 - plr * cfg_.weight_decay : 1.0;
      auto* w = p.value.data();
      const auto* g = grads.grads[i].data();
      auto* m = m_.grads[i].data();
      auto* v = v_.grads[i].data();
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        const double gk = double(g[k]);
        m[k] = S(cfg_.beta1 * double(m[k]) + (1.0 - cfg_.beta1) * gk);
        v[k] = S(cfg_.beta2 * double(v[k]) + (1.0 - cfg_.beta2) * gk * gk);
        const double mhat = double(m[k]) / bc1, vhat = double(v[k]) / bc2;
        w[k] = S(double(w[k]) * decay - plr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

 private:
  AdamWConfig cfg_;
  Gradients<S> m_, v_;
  std::size_t t_ = 0;
};

// Linear warmup from warmup_lr to base_lr, then cosine decay to min_lr.
struct CosineSchedule {
  double base_lr = 1.5e-3;
  double min_lr = 1e-5;
  double warmup_lr = 1e-6;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;

  double at(std::size_t step) const {
    if (step < warmup_steps)
      return warmup_lr + (base_lr - warmup_lr) * double(step) / double(warmup_steps);
    if (total_steps <= warmup_steps) return base_lr;
    const double progress = std::min(1.0, double(step - warmup_steps) / double(total_steps - warmup_steps));
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
  }
};

// Scales all gradients so their global L2 norm is at most max_norm (0 = off).
// Returns the norm before clipping.
template <typename S>
double clip_grad_norm(Gradients<S>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads.grads)
    for (auto v : g.values()) sq += double(v) * double(v);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) grads.scale(S(max_norm / (norm + 1e-6)));
  return norm;
}

// decay^(depth - layer) per parameter, depth = deepest layer index in the set.
// decay = 1 disables it.
template <typename S>
std::vector<double> layer_decay_scales(const ParameterSet<S>& params, double decay) {
  int depth = 0;
  for (const auto& p : params) depth = std::max(depth, p.layer);
  std::vector<double> out;
  for (const auto& p : params) out.push_back(std::pow(decay, double(depth - p.layer)));
  return out;
}

}  // namespace mapet
