#include "fpeft/optim.hpp"

#include <cmath>
#include <numbers>

namespace fpeft::inline FPEFT_PRECISION_NS {

void adamw_step(ParameterStore& store, const GradMap& grads, AdamState& state, double lr, const AdamWConfig& cfg) {
  for (const auto& [name, p] : store) {
    if (!p.trainable) continue;
    auto g = grads.find(name);
    if (g == grads.end()) continue;
    for (Real x : g->second.data())
      if (!std::isfinite(static_cast<double>(x))) throw NumericError("non-finite gradient for " + name);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t), c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, p] : store) {
    if (!p.trainable) continue;
    auto g = grads.find(name);
    const Tensor* grad = g == grads.end() ? nullptr : &g->second;
    if (grad && grad->shape() != p.value.shape())
      throw ShapeError("gradient for " + name + " has shape " + shape_str(grad->shape()));
    auto [mi, m_new] = state.m.try_emplace(name, Tensor(p.value.shape()));
    auto [vi, v_new] = state.v.try_emplace(name, Tensor(p.value.shape()));
    Tensor& m = mi->second;
    Tensor& v = vi->second;
    for (std::int64_t i = 0; i < p.value.size(); ++i) {
      const double gi = grad ? static_cast<double>((*grad)[i]) : 0.0;
      double th = static_cast<double>(p.value[i]);
      th -= lr * cfg.weight_decay * th;
      const double mi_ = cfg.beta1 * static_cast<double>(m[i]) + (1 - cfg.beta1) * gi;
      const double vi_ = cfg.beta2 * static_cast<double>(v[i]) + (1 - cfg.beta2) * gi * gi;
      m[i] = static_cast<Real>(mi_);
      v[i] = static_cast<Real>(vi_);
      th -= lr * (mi_ / c1) / (std::sqrt(vi_ / c2) + cfg.eps);
      if (!std::isfinite(th)) throw NumericError("non-finite update for " + name);
      p.value[i] = static_cast<Real>(th);
    }
  }
}

double cosine_lr(double lr, std::uint64_t t, std::uint64_t total) {
  if (total == 0 || t >= total) return 0.0;
  return lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total)));
}

}  // namespace fpeft
