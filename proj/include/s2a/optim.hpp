#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "s2a/modules.hpp"
#include "s2a/tape.hpp"

namespace s2a {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Decoupled-decay Adam over the trainable subset of a ParamStore. Moments are
// kept in double; decay skips params flagged no_decay (biases, norm scales).
class AdamW {
 public:
  AdamW(const ParamStore& store, AdamWConfig cfg);

  // One update. Gradients are looked up on the tape by parameter storage;
  // a parameter without a gradient this step just decays its moments.
  void step(const Tape& tape, const GradStore& grads, double lr);

  int64_t steps_taken() const { return t_; }

 private:
  struct Slot {
    std::shared_ptr<Param> p;
    std::vector<double> m, v;
  };
  std::vector<Slot> slots_;
  AdamWConfig cfg_;
  int64_t t_ = 0;
};

// Linear warmup to base_lr, then cosine decay to zero at total_steps.
// `step` is zero-based.
double warmup_cosine_lr(int64_t step, int64_t total_steps, int64_t warmup_steps, double base_lr);

}  // namespace s2a
