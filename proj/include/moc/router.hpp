#pragma once

// Component router: per-head importance between anchor tokens, then top-k
// (inference) or importance-proportional sampling without replacement
// (training) of the components that contribute full tokens.

#include <algorithm>
#include <memory>
#include <string>
#include <vector>

#include "moc/autodiff.hpp"

namespace moc {

enum class RouterActivation { sigmoid, softmax };
enum class RoutingMode { deterministic, stochastic };

// scores(h, i, j): importance of component j for component i under head h.
// The diagonal is never read.
struct ImportanceMatrix {
  std::size_t heads = 0;
  std::size_t n = 0;
  Tensor scores;  // (heads * n) x n

  double operator()(std::size_t h, std::size_t i, std::size_t j) const { return scores[(h * n + i) * n + j]; }
  std::ptrdiff_t flat_index(std::size_t h, std::size_t i, std::size_t j) const {
    return static_cast<std::ptrdiff_t>((h * n + i) * n + j);
  }
};

struct RoutingDecision {
  std::size_t heads = 0;
  std::size_t n = 0;
  std::size_t k = 0;
  RoutingMode mode = RoutingMode::deterministic;
  std::vector<std::vector<std::size_t>> selected;  // [h * n + i], ascending

  const std::vector<std::size_t>& at(std::size_t h, std::size_t i) const { return selected[h * n + i]; }
  bool operator==(const RoutingDecision&) const = default;
};

// k = clamp(round(fraction * N), 1, N - 1); 0 when N == 1.
inline std::size_t default_k(std::size_t n, double fraction = 0.25) {
  if (n <= 1) return 0;
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  return std::clamp<std::size_t>(k, 1, n - 1);
}

inline void init_router_params(ParamStore& ps, const std::string& prefix, std::size_t D, Rng& rng) {
  const double ws = 1.0 / std::sqrt(static_cast<double>(D));
  ps.add(prefix + ".wq", randn({D, D}, rng, ws));
  ps.add(prefix + ".wk", randn({D, D}, rng, ws));
}

// anchors: N x D. Returns (heads * N) x N scores. Sigmoid activation gives
// every entry independently; softmax normalises each row over j != i.
inline Var importance_scores(const Var& anchors, const ParamStore& ps, const std::string& prefix,
                             std::size_t heads, RouterActivation act = RouterActivation::sigmoid) {
  Tape& t = anchors.tape();
  const std::size_t n = anchors.rows(), D = anchors.cols();
  require(n >= 1, "router needs at least one component");
  if (heads == 0 || D % heads != 0) throw Error("router width not divisible by head count");
  const std::size_t dk = D / heads;
  Var q = matmul(anchors, t.param(ps, prefix + ".wq"));
  Var k = matmul(anchors, t.param(ps, prefix + ".wk"));
  std::vector<Var> per_head;
  per_head.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h)
    per_head.push_back(scale(matmul_nt(slice_cols(q, h * dk, (h + 1) * dk), slice_cols(k, h * dk, (h + 1) * dk)),
                             1.0 / std::sqrt(static_cast<double>(dk))));
  Var logits = heads == 1 ? per_head.front() : concat_rows(per_head);
  if (act == RouterActivation::sigmoid) return sigmoid(logits);
  auto offdiag = std::make_shared<std::vector<std::uint8_t>>(heads * n * n, 1);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) (*offdiag)[(h * n + i) * n + i] = 0;
  return softmax_rows(logits, offdiag);
}

inline ImportanceMatrix to_importance(const Var& scores, std::size_t heads) {
  const std::size_t n = scores.cols();
  require(scores.rows() == heads * n, "importance: shape mismatch");
  return {heads, n, scores.value()};
}

inline ImportanceMatrix importance_scores(const Tensor& anchors, const ParamStore& ps, std::size_t heads,
                                          RouterActivation act = RouterActivation::sigmoid,
                                          const std::string& prefix = "router") {
  Tape tape(false);
  return to_importance(importance_scores(tape.constant(anchors), ps, prefix, heads, act), heads);
}

// Indices of the k largest scores among candidates; ties go to the smaller index.
inline std::vector<std::size_t> top_k(std::span<const double> scores, std::span<const std::size_t> candidates,
                                      std::size_t k) {
  std::vector<std::size_t> c(candidates.begin(), candidates.end());
  k = std::min(k, c.size());
  std::partial_sort(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(k), c.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  c.resize(k);
  std::sort(c.begin(), c.end());
  return c;
}

inline RoutingDecision route_deterministic(const ImportanceMatrix& o, std::size_t k) {
  RoutingDecision d{o.heads, o.n, std::min(k, o.n ? o.n - 1 : 0), RoutingMode::deterministic, {}};
  d.selected.resize(o.heads * o.n);
  std::vector<std::size_t> cand;
  for (std::size_t h = 0; h < o.heads; ++h)
    for (std::size_t i = 0; i < o.n; ++i) {
      cand.clear();
      for (std::size_t j = 0; j < o.n; ++j)
        if (j != i) cand.push_back(j);
      std::span<const double> row(o.scores.data() + (h * o.n + i) * o.n, o.n);
      d.selected[h * o.n + i] = top_k(row, cand, k);
    }
  return d;
}

// Sequential draws without replacement, each proportional to the weight of
// the remaining candidates. Falls back to uniform if the remaining mass is 0.
inline std::vector<std::size_t> sample_without_replacement(std::span<const double> weights,
                                                           std::vector<std::size_t> candidates, std::size_t k,
                                                           Rng& rng) {
  require(k <= candidates.size(), "cannot draw more components than candidates");
  std::vector<std::size_t> out;
  out.reserve(k);
  for (std::size_t draw = 0; draw < k; ++draw) {
    double total = 0.0;
    for (auto c : candidates) total += std::max(0.0, weights[c]);
    std::size_t pick = candidates.size() - 1;
    if (total > 0.0) {
      const double u = uniform01(rng) * total;
      double acc = 0.0;
      for (std::size_t m = 0; m < candidates.size(); ++m) {
        acc += std::max(0.0, weights[candidates[m]]);
        if (u < acc) {
          pick = m;
          break;
        }
      }
    } else {
      pick = std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng);
    }
    out.push_back(candidates[pick]);
    candidates.erase(candidates.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline RoutingDecision route_stochastic(const ImportanceMatrix& o, std::size_t k, Rng& rng) {
  require(o.n == 0 || k <= o.n - 1, "stochastic routing requires k <= N - 1");
  RoutingDecision d{o.heads, o.n, k, RoutingMode::stochastic, {}};
  d.selected.resize(o.heads * o.n);
  for (std::size_t h = 0; h < o.heads; ++h)
    for (std::size_t i = 0; i < o.n; ++i) {
      std::vector<std::size_t> cand;
      for (std::size_t j = 0; j < o.n; ++j)
        if (j != i) cand.push_back(j);
      std::span<const double> row(o.scores.data() + (h * o.n + i) * o.n, o.n);
      d.selected[h * o.n + i] = sample_without_replacement(row, std::move(cand), k, rng);
    }
  return d;
}

// Stochastic routing with one stream per (head, component) keyed by the
// component's ID index, and candidates visited in ID order. Permuting the
// components together with their IDs permutes the decision accordingly.
inline RoutingDecision route_stochastic_keyed(const ImportanceMatrix& o, std::size_t k, std::uint64_t seed,
                                              std::span<const std::size_t> ids) {
  require(ids.size() == o.n, "routing: one ID per component is required");
  require(o.n == 0 || k <= o.n - 1, "stochastic routing requires k <= N - 1");
  RoutingDecision d{o.heads, o.n, k, RoutingMode::stochastic, {}};
  d.selected.resize(o.heads * o.n);
  for (std::size_t h = 0; h < o.heads; ++h)
    for (std::size_t i = 0; i < o.n; ++i) {
      std::vector<std::size_t> cand;
      for (std::size_t j = 0; j < o.n; ++j)
        if (j != i) cand.push_back(j);
      std::sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) { return ids[a] < ids[b]; });
      Rng rng(derive_seed(seed, {h, ids[i]}));
      std::span<const double> row(o.scores.data() + (h * o.n + i) * o.n, o.n);
      d.selected[h * o.n + i] = sample_without_replacement(row, std::move(cand), k, rng);
    }
  return d;
}

// Routing with nothing selected (full-token routing disabled).
inline RoutingDecision route_none(std::size_t heads, std::size_t n) {
  RoutingDecision d{heads, n, 0, RoutingMode::deterministic, {}};
  d.selected.assign(heads * n, {});
  return d;
}

}  // namespace moc
