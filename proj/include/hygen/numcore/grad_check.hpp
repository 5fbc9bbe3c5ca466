#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "hygen/numcore/tape.hpp"

namespace hygen {

/// Builds a scalar loss on `tape`, binding parameters from `params` with Tape::param.
using LossBuilder = std::function<Var(Tape& tape, const ParamBundle& params)>;

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t entries_checked = 0;
  std::string worst_entry;
};

/// Compares tape gradients with central finite differences. The relative error of one entry
/// is |analytic - numeric| / max(|analytic|, |numeric|, 1e-6). Bundles with more than
/// `max_entries` entries are checked on a seeded random sample.
GradCheckResult grad_check(const LossBuilder& loss, const ParamBundle& params, double step = 1e-5,
                           std::size_t max_entries = 10000, std::uint64_t seed = 0);

}  // namespace hygen
