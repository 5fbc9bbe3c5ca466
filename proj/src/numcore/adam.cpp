#include "hygen/numcore/adam.hpp"

#include <cmath>

namespace hygen {

void adam_step(ParamBundle& params, const ParamBundle& grads, AdamState& state,
               const AdamConfig& config) {
  for (const auto& name : grads.names()) {
    const Matrix& g = grads.at(name);
    const Matrix& p = params.at(name);
    if (g.rows() != p.rows() || g.cols() != p.cols()) {
      throw DimensionError("adam_step: gradient " + shape_string(g.rows(), g.cols()) +
                           " for parameter " + name + " " + shape_string(p.rows(), p.cols()));
    }
    if (!state.m.contains(name)) {
      state.m.add(name, Matrix::Zero(p.rows(), p.cols()));
      state.v.add(name, Matrix::Zero(p.rows(), p.cols()));
    } else if (state.m.at(name).rows() != p.rows() || state.m.at(name).cols() != p.cols()) {
      throw DimensionError("adam_step: optimizer state shape differs for " + name);
    }
  }
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (const auto& name : grads.names()) {
    const Matrix& g = grads.at(name);
    Matrix& m = state.m.at(name);
    Matrix& v = state.v.at(name);
    Matrix& p = params.at(name);
    m = config.beta1 * m + (1.0 - config.beta1) * g;
    v = config.beta2 * v + (1.0 - config.beta2) * g.cwiseProduct(g);
    p.array() -= config.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + config.eps);
  }
}

double clip_grad_norm(ParamBundle& grads, double max_norm) {
  double sq = 0;
  for (const auto& name : grads.names()) sq += grads.at(name).squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const double s = max_norm / norm;
    for (const auto& name : grads.names()) grads.at(name) *= s;
  }
  return norm;
}

}  // namespace hygen
