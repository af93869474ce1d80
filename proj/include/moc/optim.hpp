#pragma once

#include <cmath>
#include <map>
#include <string>

#include "moc/autodiff.hpp"

namespace moc {

// Adam with decoupled weight decay.
class AdamW {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  explicit AdamW(Options opt) : opt_(opt) {}

  void step(ParamStore& ps) {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : ps.params()) {
      const Tensor& g = ps.grad(name);
      auto [it, fresh] = state_.try_emplace(name);
      if (fresh) it->second = {Tensor(p.shape()), Tensor(p.shape())};
      Tensor& m = it->second.m;
      Tensor& v = it->second.v;
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g[i];
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g[i] * g[i];
        p[i] -= opt_.lr * opt_.weight_decay * p[i];
        p[i] -= opt_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt_.eps);
      }
    }
  }

  std::size_t steps() const { return t_; }
  Options& options() { return opt_; }

 private:
  struct Moments {
    Tensor m, v;
  };
  Options opt_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

// Rescales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
inline double clip_grad_norm(ParamStore& ps, double max_norm) {
  double sq = 0.0;
  for (const auto& name : ps.names())
    for (double g : ps.grad(name).values()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (const auto& name : ps.names())
      for (double& g : ps.grad(name).values()) g *= s;
  }
  return norm;
}

}  // namespace moc
