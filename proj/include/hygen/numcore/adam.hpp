#pragma once

#include <cstdint>

#include "hygen/numcore/params.hpp"

namespace hygen {

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moments per parameter name plus the shared step counter.
struct AdamState {
  ParamBundle m;
  ParamBundle v;
  std::int64_t t = 0;
};

/// Bias-corrected Adam update of every entry named in `grads`; other entries are left alone.
void adam_step(ParamBundle& params, const ParamBundle& grads, AdamState& state,
               const AdamConfig& config);

/// Scales `grads` in place so their global L2 norm is at most `max_norm`; returns the
/// norm before scaling.
double clip_grad_norm(ParamBundle& grads, double max_norm);

}  // namespace hygen
