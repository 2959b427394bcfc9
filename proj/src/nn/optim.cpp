#include "offrl/nn/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace offrl::nn {

void adam_step(ParamStore& store, double lr, const AdamConfig& cfg) {
  bool any = false;
  for (const auto& [name, p] : store) any = any || (p.trainable && p.has_grad);
  if (!any) throw std::logic_error("adam_step: no gradients populated; call backward() first");

  store.step += 1;
  const double t = static_cast<double>(store.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, p] : store) {
    if (!p.trainable) continue;
    if (p.adam_m.size() == 0) {
      p.adam_m = Matrix::Zero(p.value.rows(), p.value.cols());
      p.adam_v = Matrix::Zero(p.value.rows(), p.value.cols());
    }
    p.adam_m = cfg.beta1 * p.adam_m + (1.0 - cfg.beta1) * p.grad;
    p.adam_v = cfg.beta2 * p.adam_v + (1.0 - cfg.beta2) * p.grad.cwiseProduct(p.grad);
    if (cfg.weight_decay != 0.0) p.value *= (1.0 - lr * cfg.weight_decay);
    p.value.array() -= lr * (p.adam_m.array() / bc1) / ((p.adam_v.array() / bc2).sqrt() + cfg.eps);
  }
}

double CosineSchedule::at(long long step) const {
  if (total_steps <= 0) return base_lr;
  const double frac = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * frac));
}

double clip_grad_norm(ParamStore& store, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, p] : store) {
    if (p.trainable) sq += p.grad.squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto& [name, p] : store) {
      if (p.trainable) p.grad *= s;
    }
  }
  return norm;
}

double finite_difference_check(const LossFn& loss, ParamStore& store, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_difference_check: h must be positive");
  store.zero_grad();
  double f0 = 0.0;
  {
    Tape tape;
    Var l = loss(tape, store);
    f0 = l.scalar();
    tape.backward(l);
  }
  const double floor = 1e-6 * std::max(1.0, std::abs(f0));
  auto eval = [&]() {
    Tape tape(false);
    return loss(tape, store).scalar();
  };
  double worst = 0.0;
  for (auto& [name, p] : store) {
    if (!p.trainable) continue;
    for (Index k = 0; k < p.value.size(); ++k) {
      double& x = p.value.data()[k];
      const double saved = x;
      x = saved + h;
      const double fp = eval();
      x = saved - h;
      const double fm = eval();
      x = saved;
      const double fd = (fp - fm) / (2.0 * h);
      const double bp = p.grad.data()[k];
      const double rel = std::abs(fd - bp) / std::max(std::abs(fd) + std::abs(bp), floor);
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace offrl::nn
