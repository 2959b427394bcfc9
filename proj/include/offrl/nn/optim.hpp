#pragma once

#include "offrl/nn/tensor.hpp"

#include <functional>

namespace offrl::nn {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Decoupled (AdamW-style) decay; 0 gives plain Adam.
  double weight_decay = 0.0;
};

/// One Adam update with bias correction on every trainable parameter.
/// Throws if no trainable parameter received a gradient since zero_grad().
void adam_step(ParamStore& store, double lr, const AdamConfig& cfg = {});

/// Cosine decay from base_lr to min_lr over total_steps; constant when
/// total_steps == 0.
struct CosineSchedule {
  double base_lr = 1e-4;
  long long total_steps = 0;
  double min_lr = 0.0;

  double at(long long step) const;
};

/// Scales all trainable gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(ParamStore& store, double max_norm);

/// Builds a scalar loss from the parameters in `store` on the given tape.
using LossFn = std::function<Var(Tape&, ParamStore&)>;

/// Central-difference check of backward() against `loss`.
///
/// Returns the largest elementwise |fd - bp| / max(|fd| + |bp|, 1e-6 * max(1, |f|))
/// over all trainable parameters. The floor scales with the loss value f
/// because the rounding error of a central difference does; without it an
/// exactly-zero gradient reports one ulp of f divided by 2h as its error.
double finite_difference_check(const LossFn& loss, ParamStore& store, double h = 1e-5);

}  // namespace offrl::nn
