#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "dualprec/error.hpp"

namespace dualprec {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moments and step count of one parameter tensor. Each tensor advances its
/// own step count, so a tensor left out of an update keeps its state.
template <class T>
struct AdamSlot {
  std::vector<T> m;
  std::vector<T> v;
  std::int64_t step = 0;

  friend bool operator==(const AdamSlot&, const AdamSlot&) = default;
};

template <class T>
struct ParamRef {
  std::span<T> value;
  std::span<const T> grad;
  AdamSlot<T>* slot;
};

template <class T>
void adam_step(std::span<T> param, std::span<const T> grad, AdamSlot<T>& slot, double lr,
               const AdamHyper& hyper = {}) {
  if (param.size() != grad.size()) {
    throw Error(ErrorCode::ShapeMismatch, "gradient does not match parameter");
  }
  if (slot.m.size() != param.size()) {
    slot.m.assign(param.size(), T{0});
    slot.v.assign(param.size(), T{0});
  }
  ++slot.step;
  const double t = static_cast<double>(slot.step);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);
  const T b1 = static_cast<T>(hyper.beta1), b2 = static_cast<T>(hyper.beta2);
  const T step_size = static_cast<T>(lr / c1);
  const T inv_sqrt_c2 = static_cast<T>(1.0 / std::sqrt(c2));
  const T eps = static_cast<T>(hyper.eps);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    slot.m[i] = b1 * slot.m[i] + (T{1} - b1) * g;
    slot.v[i] = b2 * slot.v[i] + (T{1} - b2) * g * g;
    param[i] -= step_size * slot.m[i] / (std::sqrt(slot.v[i]) * inv_sqrt_c2 + eps);
  }
}

/// Applies one Adam step to every member of the group. Parameters outside the
/// group are untouched, including their moments.
template <class T>
void apply_updates(std::span<const ParamRef<T>> group, double lr, const AdamHyper& hyper = {}) {
  for (const ParamRef<T>& p : group) adam_step(p.value, p.grad, *p.slot, lr, hyper);
}

}  // namespace dualprec
