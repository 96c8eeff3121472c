#include "s2a/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace s2a {

AdamW::AdamW(const ParamStore& store, AdamWConfig cfg) : cfg_(cfg) {
  for (const auto& p : store.all()) {
    if (!p->trainable) continue;
    Slot s;
    s.p = p;
    s.m.assign(static_cast<size_t>(p->value->size()), 0.0);
    s.v.assign(static_cast<size_t>(p->value->size()), 0.0);
    slots_.push_back(std::move(s));
  }
}

void AdamW::step(const Tape& tape, const GradStore& grads, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (Slot& s : slots_) {
    const Tensor* g = nullptr;
    if (auto id = tape.find_param_node(s.p->value.get()); id && grads.has(*id)) {
      g = &grads.get(*id);
      if (g->shape != s.p->value->shape) {
        throw std::runtime_error("optim: gradient shape mismatch for " + s.p->name);
      }
      for (float gi : g->data) {
        if (!std::isfinite(gi)) {
          throw std::runtime_error("optim: non-finite gradient in " + s.p->name);
        }
      }
    }
    Tensor& w = *s.p->value;
    for (size_t i = 0; i < s.m.size(); ++i) {
      const double gi = g ? static_cast<double>(g->data[i]) : 0.0;
      s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * gi;
      s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      double upd = mhat / (std::sqrt(vhat) + cfg_.eps);
      if (!s.p->no_decay) upd += cfg_.weight_decay * static_cast<double>(w.data[i]);
      w.data[i] = static_cast<float>(static_cast<double>(w.data[i]) - lr * upd);
    }
  }
}

double warmup_cosine_lr(int64_t step, int64_t total_steps, int64_t warmup_steps, double base_lr) {
  if (total_steps <= 0) throw std::invalid_argument("warmup_cosine_lr: total_steps must be > 0");
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  const double denom = static_cast<double>(std::max<int64_t>(1, total_steps - warmup_steps));
  const double progress =
      std::clamp(static_cast<double>(step - warmup_steps) / denom, 0.0, 1.0);
  return 0.5 * base_lr * (1.0 + std::cos(3.14159265358979323846 * progress));
}

}  // namespace s2a
