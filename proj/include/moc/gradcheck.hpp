#pragma once

#include <functional>
#include <string>
#include <vector>

#include "moc/autodiff.hpp"

namespace moc {

using LossFn = std::function<Var(Tape&, const ParamStore&)>;

struct GradCheckOptions {
  double eps = 1e-6;
  // 0 checks every entry; otherwise a seeded random subset per parameter.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 0;
  // Restrict to parameter names containing one of these substrings.
  std::vector<std::string> only;
  // Denominator floor of the relative error; entries whose analytic and
  // numeric values are both far below it are compared absolutely.
  double floor = 1e-8;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
};

inline double eval_loss(const LossFn& loss_fn, const ParamStore& params) {
  Tape tape(false);
  const double v = loss_fn(tape, params).value()[0];
  if (!std::isfinite(v)) throw Error("non-finite loss in gradient check");
  return v;
}

// Compares reverse-mode gradients with central differences
// (f(x+eps) - f(x-eps)) / 2eps. Relative error per entry is
// |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
inline GradCheckResult grad_check(const LossFn& loss_fn, ParamStore& params, const GradCheckOptions& opt) {
  require(opt.eps >= 1e-7 && opt.eps <= 1e-3, "grad_check: eps must lie in [1e-7, 1e-3]");
  params.zero_grad();
  {
    Tape tape(true);
    Var loss = loss_fn(tape, params);
    tape.backward(loss);
    tape.accumulate_grads(params);
  }
  GradCheckResult res;
  Rng rng(opt.seed);
  for (const auto& name : params.names()) {
    if (!opt.only.empty()) {
      bool keep = false;
      for (const auto& s : opt.only) keep = keep || name.find(s) != std::string::npos;
      if (!keep) continue;
    }
    Tensor& p = params.at(name);
    std::vector<std::size_t> idx(p.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (opt.max_entries_per_param && idx.size() > opt.max_entries_per_param) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_entries_per_param);
    }
    const Tensor& g = params.grad(name);
    for (std::size_t i : idx) {
      const double orig = p[i];
      p[i] = orig + opt.eps;
      const double fp = eval_loss(loss_fn, params);
      p[i] = orig - opt.eps;
      const double fm = eval_loss(loss_fn, params);
      p[i] = orig;
      const double fd = (fp - fm) / (2.0 * opt.eps);
      const double err = std::abs(g[i] - fd) / std::max(opt.floor, std::abs(g[i]) + std::abs(fd));
      ++res.entries_checked;
      if (err > res.max_rel_error || res.worst_param.empty()) {
        res.max_rel_error = std::max(res.max_rel_error, err);
        if (err >= res.max_rel_error) {
          res.worst_param = name;
          res.worst_index = i;
          res.worst_analytic = g[i];
          res.worst_numeric = fd;
        }
      }
    }
  }
  return res;
}

inline double grad_check(const LossFn& loss_fn, ParamStore& params, double eps) {
  GradCheckOptions opt;
  opt.eps = eps;
  return grad_check(loss_fn, params, opt).max_rel_error;
}

}  // namespace moc
