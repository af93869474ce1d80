#pragma once

// Rectified flow matching: Z_t = (1 - t) Z_0 + t eps, target velocity eps - Z_0,
// and an Euler sampler from t = 1 to t = 0 with classifier-free guidance.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "moc/autodiff.hpp"
#include "moc/model.hpp"

namespace moc {

struct FlowBatch {
  Tensor z0;
  Tensor eps;
  double t = 0.0;
  Tensor zt;
  Tensor target;
};

// One t shared by every component of the sample.
inline FlowBatch make_flow_batch(const Tensor& z0, Rng& rng, std::optional<double> forced_t = std::nullopt) {
  z0.check_finite("clean latents");
  FlowBatch b;
  b.z0 = z0;
  b.t = forced_t ? *forced_t : uniform01(rng);
  require(b.t >= 0.0 && b.t <= 1.0, "t must lie in [0, 1]");
  b.eps = randn(z0.shape(), rng);
  b.zt = Tensor(z0.shape());
  b.target = Tensor(z0.shape());
  for (std::size_t i = 0; i < z0.size(); ++i) {
    b.zt[i] = (1.0 - b.t) * z0[i] + b.t * b.eps[i];
    b.target[i] = b.eps[i] - z0[i];
  }
  return b;
}

inline Var fm_loss(const Var& pred, const Var& target) {
  if (pred.value().size() != target.value().size()) throw Error("fm_loss: shape mismatch");
  return mse(pred, target);
}

inline double fm_loss(const Tensor& pred, const Tensor& target) {
  if (pred.size() != target.size()) throw Error("fm_loss: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - target[i]) * (pred[i] - target[i]);
  return s / static_cast<double>(pred.size());
}

// Velocity field used by the sampler. `routing` is empty on the first call of
// a step and is then filled; later calls in the same step must reuse it.
using VelocityModel =
    std::function<Tensor(const Tensor& z, double t, bool conditional, std::vector<RoutingDecision>& routing)>;

inline VelocityModel model_velocity(const ParamStore& ps, const ModelConfig& cfg, std::size_t n, Condition cond,
                                    std::vector<std::size_t> ids) {
  return [&ps, &cfg, n, cond = std::move(cond), ids = std::move(ids)](
             const Tensor& z, double t, bool conditional, std::vector<RoutingDecision>& routing) {
    Condition c = cond;
    c.is_null = c.is_null || !conditional;
    if (routing.empty())
      return predict_velocity(ps, cfg, z, n, t, c, ids, RoutingPolicy::deterministic(), &routing);
    return predict_velocity(ps, cfg, z, n, t, c, ids, RoutingPolicy::replay(routing));
  };
}

struct SampleOptions {
  std::size_t steps = 50;
  double cfg_scale = 4.0;
};

// Euler integration Z <- Z - dt * v, dt = 1/steps, from pure noise at t = 1.
// Guided velocity v_u + s (v_c - v_u), with both branches sharing the routing
// computed by the conditional branch. s == 1 uses v_c directly.
inline Tensor sample(const VelocityModel& model, const std::vector<std::size_t>& shape, const SampleOptions& opt,
                     Rng& rng) {
  require(opt.steps >= 1, "sampler needs at least one step");
  require(std::isfinite(opt.cfg_scale), "cfg scale must be finite");
  Tensor z = randn(shape, rng);
  const double dt = 1.0 / static_cast<double>(opt.steps);
  for (std::size_t s = 0; s < opt.steps; ++s) {
    const double t = 1.0 - static_cast<double>(s) * dt;
    std::vector<RoutingDecision> routing;
    Tensor v = model(z, t, true, routing);
    if (opt.cfg_scale != 1.0) {
      const Tensor vu = model(z, t, false, routing);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = vu[i] + opt.cfg_scale * (v[i] - vu[i]);
    }
    for (std::size_t i = 0; i < z.size(); ++i) z[i] -= dt * v[i];
    if (!z.all_finite()) throw Error("non-finite sampler state at step " + std::to_string(s));
  }
  return z;
}

}  // namespace moc
