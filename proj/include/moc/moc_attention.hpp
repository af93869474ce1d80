#pragma once

// Mixture-of-Components global attention. Component i's queries are all of
// its tokens; its keys/values are its own vecset tokens (ungated) followed,
// for every other component j in ascending order, by j's full vecset tokens
// when j is routed to i and by j's compressed tokens otherwise. Keys of
// segment j are scaled by the importance o(i, j) of the head in question.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "moc/attention.hpp"
#include "moc/local_block.hpp"
#include "moc/router.hpp"
#include "moc/tokens.hpp"

namespace moc {

struct MocOptions {
  GainTarget gate_target = GainTarget::key;
  bool use_compressed_context = true;
  bool use_routing = true;
};

// L + kL + (N - k - 1) * ceil(L / sigma)
inline std::size_t context_length(std::size_t n, std::size_t L, std::size_t k, std::size_t sigma) {
  require(n >= 1, "context_length: N must be >= 1");
  if (k >= n) throw Error("context_length: k must be smaller than N");
  return L + k * L + (n - k - 1) * compressed_count(L, sigma);
}

enum class SegmentKind { own, full, compressed };

struct KeyProvenance {
  std::size_t component = 0;
  SegmentKind kind = SegmentKind::own;
  std::size_t row = 0;  // row in the flattened token matrix
};

struct AttentionContext {
  std::size_t component = 0;
  std::size_t head = 0;
  std::vector<std::size_t> key_rows;
  std::vector<std::ptrdiff_t> gain_index;  // into the importance scores; -1 = ungated
  std::vector<double> gains;
  std::vector<KeyProvenance> provenance;

  std::size_t size() const { return key_rows.size(); }
};

inline std::size_t head_slot(std::size_t heads_available, std::size_t h) {
  return heads_available == 1 ? 0 : h;
}

inline void validate_selection(const std::vector<std::size_t>& sel, std::size_t i, std::size_t n) {
  for (std::size_t a = 0; a < sel.size(); ++a) {
    require(sel[a] < n, "routing index out of range");
    if (sel[a] == i) throw Error("duplicate component in context");
    for (std::size_t b = a + 1; b < sel.size(); ++b)
      if (sel[a] == sel[b]) throw Error("duplicate component in context");
  }
}

inline AttentionContext assemble_context(std::size_t i, std::size_t h, const TokenLayout& layout,
                                         const ImportanceMatrix& o, const RoutingDecision& routing,
                                         const MocOptions& opt = {}) {
  const std::size_t n = layout.components;
  require(i < n, "assemble_context: component out of range");
  require(o.n == n && routing.n == n, "assemble_context: routing does not match component count");
  const std::size_t oh = head_slot(o.heads, h), rh = head_slot(routing.heads, h);
  require(oh < o.heads && rh < routing.heads, "assemble_context: head out of range");
  const auto& sel = routing.at(rh, i);
  validate_selection(sel, i, n);

  AttentionContext ctx;
  ctx.component = i;
  ctx.head = h;
  const std::size_t reserve = layout.L * (1 + sel.size()) + (n - 1) * layout.Np;
  ctx.key_rows.reserve(reserve);
  ctx.gain_index.reserve(reserve);
  ctx.gains.reserve(reserve);
  ctx.provenance.reserve(reserve);
  auto push = [&](std::size_t row, std::size_t comp, SegmentKind kind, std::ptrdiff_t gi, double g) {
    ctx.key_rows.push_back(row);
    ctx.gain_index.push_back(gi);
    ctx.gains.push_back(g);
    ctx.provenance.push_back({comp, kind, row});
  };
  for (std::size_t l = 0; l < layout.L; ++l) push(layout.z_row(i, l), i, SegmentKind::own, -1, 1.0);
  std::size_t s = 0;
  for (std::size_t j = 0; j < n; ++j) {
    if (j == i) continue;
    while (s < sel.size() && sel[s] < j) ++s;
    const bool full = s < sel.size() && sel[s] == j;
    const std::ptrdiff_t gi = o.flat_index(oh, i, j);
    const double g = o(oh, i, j);
    if (full) {
      for (std::size_t l = 0; l < layout.L; ++l) push(layout.z_row(j, l), j, SegmentKind::full, gi, g);
    } else if (opt.use_compressed_context) {
      for (std::size_t m = 0; m < layout.Np; ++m) push(layout.p_row(j, m), j, SegmentKind::compressed, gi, g);
    }
  }
  return ctx;
}

inline std::shared_ptr<const AttentionPlan> moc_attention_plan(const TokenLayout& layout, const ImportanceMatrix& o,
                                                               const RoutingDecision& routing, std::size_t heads,
                                                               std::size_t D, const MocOptions& opt) {
  require(heads >= 1 && D % heads == 0, "model width must be divisible by the head count");
  auto plan = std::make_shared<AttentionPlan>();
  plan->heads = heads;
  plan->scale = 1.0 / std::sqrt(static_cast<double>(D / heads));
  plan->target = opt.gate_target;
  plan->groups.reserve(layout.components * heads);
  for (std::size_t i = 0; i < layout.components; ++i) {
    const auto rows = layout.component_rows(i);
    for (std::size_t h = 0; h < heads; ++h) {
      AttentionContext ctx = assemble_context(i, h, layout, o, routing, opt);
      for (double g : ctx.gains)
        if (!(g > 0.0) || !std::isfinite(g)) throw Error("attention gain must be finite and > 0");
      AttentionGroup g;
      g.head = h;
      g.query_rows = rows;
      g.key_rows = std::move(ctx.key_rows);
      g.gain_index = std::move(ctx.gain_index);
      plan->groups.push_back(std::move(g));
    }
  }
  return plan;
}

// Attention sub-layer on modulated tokens h; scores is the differentiable
// importance tensor matching `o`.
inline Var moc_attention(const Var& h, const Var& scores, const ImportanceMatrix& o, const RoutingDecision& routing,
                         const TokenLayout& layout, const ParamStore& ps, const std::string& prefix,
                         std::size_t heads, const MocOptions& opt = {}) {
  require(h.rows() == layout.total(), "moc attention: token count does not match layout");
  require(scores.value().size() == o.scores.size(), "moc attention: importance shape mismatch");
  const Projections p = project_qkv(h, ps, prefix);
  auto plan = moc_attention_plan(layout, o, routing, heads, h.cols(), opt);
  return output_projection(grouped_attention(p.q, p.k, p.v, std::move(plan), scores), ps, prefix);
}

inline Tensor moc_attention_forward(const Tensor& h, const ImportanceMatrix& o, const RoutingDecision& routing,
                                    const TokenLayout& layout, const ParamStore& ps, const std::string& prefix,
                                    std::size_t heads, const MocOptions& opt = {}) {
  Tape tape(false);
  Var scores = tape.constant(o.scores);
  return moc_attention(tape.constant(h), scores, o, routing, layout, ps, prefix, heads, opt).value();
}

// Slowest, most literal evaluation of the same sub-layer: per (head,
// component) the routed token matrices r_ij are built explicitly, projected,
// gated and attended with scalar loops. Used as an oracle.
inline Tensor dense_reference(const Tensor& h, const ImportanceMatrix& o, const RoutingDecision& routing,
                              const TokenLayout& layout, const ParamStore& ps, const std::string& prefix,
                              std::size_t heads, const MocOptions& opt = {}) {
  const std::size_t n = layout.components, L = layout.L, Np = layout.Np, T = layout.per_component();
  const std::size_t D = h.cols(), dh = D / heads;
  const Tensor& wq = ps.at(prefix + ".attn.wq");
  const Tensor& wk = ps.at(prefix + ".attn.wk");
  const Tensor& wv = ps.at(prefix + ".attn.wv");
  const Tensor& wo = ps.at(prefix + ".attn.wo");
  const Tensor& bq = ps.at(prefix + ".attn.bq");
  const Tensor& bk = ps.at(prefix + ".attn.bk");
  const Tensor& bv = ps.at(prefix + ".attn.bv");
  const Tensor& bo = ps.at(prefix + ".attn.bo");

  auto project = [&](const std::vector<const double*>& rows, const Tensor& w, const Tensor& b) {
    std::vector<std::vector<double>> out(rows.size(), std::vector<double>(D));
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t c = 0; c < D; ++c) {
        double s = b[c];
        for (std::size_t e = 0; e < D; ++e) s += rows[r][e] * w(e, c);
        out[r][c] = s;
      }
    return out;
  };
  auto row_ptr = [&](std::size_t row) { return h.data() + row * D; };

  Tensor concat = Tensor::matrix(n * T, D);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<const double*> xi;
    for (std::size_t r = 0; r < T; ++r) xi.push_back(row_ptr(i * T + r));
    const auto qi = project(xi, wq, bq);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t oh = head_slot(o.heads, hd), rh = head_slot(routing.heads, hd);
      const auto& sel = routing.at(rh, i);
      validate_selection(sel, i, n);
      std::vector<std::vector<double>> keys, values;
      auto append = [&](const std::vector<const double*>& r, double gain) {
        auto kk = project(r, wk, bk);
        auto vv = project(r, wv, bv);
        for (std::size_t a = 0; a < r.size(); ++a) {
          if (opt.gate_target == GainTarget::key)
            for (auto& x : kk[a]) x *= gain;
          else
            for (auto& x : vv[a]) x *= gain;
          keys.push_back(std::move(kk[a]));
          values.push_back(std::move(vv[a]));
        }
      };
      std::vector<const double*> own;
      for (std::size_t l = 0; l < L; ++l) own.push_back(row_ptr(i * T + l));
      append(own, 1.0);
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const bool full = std::find(sel.begin(), sel.end(), j) != sel.end();
        std::vector<const double*> r;
        if (full) {
          for (std::size_t l = 0; l < L; ++l) r.push_back(row_ptr(j * T + l));
        } else if (opt.use_compressed_context) {
          for (std::size_t m = 0; m < Np; ++m) r.push_back(row_ptr(j * T + L + m));
        }
        if (r.empty()) continue;
        const double g = o(oh, i, j);
        if (!(g > 0.0)) throw Error("attention gain must be finite and > 0");
        append(r, g);
      }
      const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
      for (std::size_t qr = 0; qr < T; ++qr) {
        std::vector<double> logits(keys.size());
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t kk = 0; kk < keys.size(); ++kk) {
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[qr][hd * dh + c] * keys[kk][hd * dh + c];
          logits[kk] = s * sc;
          mx = std::max(mx, logits[kk]);
        }
        double z = 0.0;
        for (auto& v : logits) z += (v = std::exp(v - mx));
        for (std::size_t c = 0; c < dh; ++c) {
          double acc = 0.0;
          for (std::size_t kk = 0; kk < keys.size(); ++kk) acc += logits[kk] / z * values[kk][hd * dh + c];
          concat(i * T + qr, hd * dh + c) = acc;
        }
      }
    }
  }
  Tensor out = Tensor::matrix(n * T, D);
  for (std::size_t r = 0; r < n * T; ++r)
    for (std::size_t c = 0; c < D; ++c) {
      double s = bo[c];
      for (std::size_t e = 0; e < D; ++e) s += concat(r, e) * wo(e, c);
      out(r, c) = s;
    }
  return out;
}

// Dense baseline: every vecset token attends to every vecset token of every
// component, ungated. Compressed and anchor rows receive no attention output.
inline Var dense_global_attention(const Var& h, const TokenLayout& layout, const ParamStore& ps,
                                  const std::string& prefix, std::size_t heads) {
  require(h.rows() == layout.total(), "dense attention: token count does not match layout");
  const Projections p = project_qkv(h, ps, prefix);
  auto plan = std::make_shared<AttentionPlan>();
  plan->heads = heads;
  plan->scale = 1.0 / std::sqrt(static_cast<double>(h.cols() / heads));
  const auto zr = layout.all_z_rows();
  for (std::size_t hd = 0; hd < heads; ++hd) {
    AttentionGroup g;
    g.head = hd;
    g.query_rows = zr;
    g.key_rows = zr;
    plan->groups.push_back(std::move(g));
  }
  return output_projection(grouped_attention(p.q, p.k, p.v, std::move(plan)), ps, prefix);
}

struct RouterOptions {
  RouterActivation activation = RouterActivation::sigmoid;
  bool multi_head = true;
  double k_fraction = 0.25;
};

using RouteFn = std::function<RoutingDecision(const ImportanceMatrix&, std::size_t k)>;

struct GlobalBlockResult {
  Var x;
  ImportanceMatrix importance;
  RoutingDecision routing;
};

// Global block: importance from the modulated anchor tokens, routing via
// `route`, then MoC attention inside the standard modulated block.
inline GlobalBlockResult global_block_forward(const Var& x, const Var& cond, const TokenLayout& layout,
                                              const ParamStore& ps, const std::string& prefix, std::size_t heads,
                                              const MocOptions& moc, const RouterOptions& ro, const RouteFn& route) {
  GlobalBlockResult res;
  const std::size_t rheads = ro.multi_head ? heads : 1;
  res.x = transformer_block(x, cond, ps, prefix, [&](const Var& h) {
    Var anchors = gather_rows(h, layout.anchor_rows());
    Var scores = importance_scores(anchors, ps, prefix + ".router", rheads, ro.activation);
    res.importance = to_importance(scores, rheads);
    const std::size_t k = moc.use_routing ? default_k(layout.components, ro.k_fraction) : 0;
    res.routing = moc.use_routing ? route(res.importance, k) : route_none(rheads, layout.components);
    return moc_attention(h, scores, res.importance, res.routing, layout, ps, prefix, heads, moc);
  });
  return res;
}

}  // namespace moc
