#include "hygen/numcore/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace hygen {
namespace {

double evaluate(const LossBuilder& loss, const ParamBundle& params) {
  Tape tape;
  const double v = loss(tape, params).scalar();
  if (!std::isfinite(v)) throw ValidityError("grad_check: non-finite loss");
  return v;
}

}  // namespace

GradCheckResult grad_check(const LossBuilder& loss, const ParamBundle& params, double step,
                           std::size_t max_entries, std::uint64_t seed) {
  ParamBundle analytic;
  {
    Tape tape;
    Var l = loss(tape, params);
    if (!std::isfinite(l.scalar())) throw ValidityError("grad_check: non-finite loss");
    tape.backward(l);
    analytic = tape.gradients(params);
  }

  struct Entry {
    std::size_t param;
    Eigen::Index index;
  };
  std::vector<Entry> entries;
  for (std::size_t p = 0; p < params.names().size(); ++p) {
    const auto n = params.at(params.names()[p]).size();
    for (Eigen::Index i = 0; i < n; ++i) entries.push_back({p, i});
  }
  if (entries.size() > max_entries) {
    Rng rng(seed);
    std::shuffle(entries.begin(), entries.end(), rng);
    entries.resize(max_entries);
  }

  ParamBundle probe = params;
  GradCheckResult result;
  for (const auto& e : entries) {
    const auto& name = params.names()[e.param];
    double& w = probe.at(name).data()[e.index];
    const double orig = w;
    w = orig + step;
    const double up = evaluate(loss, probe);
    w = orig - step;
    const double down = evaluate(loss, probe);
    w = orig;
    const double numeric = (up - down) / (2 * step);
    const double a = analytic.at(name).data()[e.index];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > result.max_rel_error || result.worst_entry.empty()) {
      result.max_rel_error = std::max(result.max_rel_error, rel);
      if (rel >= result.max_rel_error) result.worst_entry = name + "[" + std::to_string(e.index) + "]";
    }
    ++result.entries_checked;
  }
  return result;
}

}  // namespace hygen
