#pragma once

#include <functional>
#include <memory>
#include <string>

#include "moc/attention.hpp"
#include "moc/autodiff.hpp"
#include "moc/tokens.hpp"

namespace moc {

// Partially blocked mask over one component's L + Np + 1 tokens:
//   vecset rows    -> vecset columns only
//   compressed rows -> vecset and compressed columns
//   anchor row      -> everything
inline Mask build_local_mask(std::size_t L, std::size_t Np) {
  require(L >= 1 && Np >= 1, "local mask needs L >= 1 and Np >= 1");
  const std::size_t T = L + Np + 1;
  Mask m(T, T, false);
  for (std::size_t r = 0; r < T; ++r) {
    const std::size_t visible = r < L ? L : (r < L + Np ? L + Np : T);
    for (std::size_t c = 0; c < visible; ++c) m.set(r, c, true);
  }
  return m;
}

// Standard pre-norm DiT block with adaptive shift/scale/gate modulation.
// Parameters under `prefix`:
//   ada.w, ada.b          D x 6D modulation head (zero-initialised)
//   attn.{wq,wk,wv,wo}, attn.{bq,bk,bv,bo}
//   ffn.{w1,b1,w2,b2}     hidden width 4D
inline void init_block_params(ParamStore& ps, const std::string& prefix, std::size_t D, Rng& rng) {
  const double ws = 1.0 / std::sqrt(static_cast<double>(D));
  ps.add(prefix + ".ada.w", Tensor::matrix(D, 6 * D));
  ps.add(prefix + ".ada.b", Tensor::matrix(1, 6 * D));
  for (const char* n : {"wq", "wk", "wv", "wo"}) ps.add(prefix + ".attn." + n, randn({D, D}, rng, ws));
  for (const char* n : {"bq", "bk", "bv", "bo"}) ps.add(prefix + ".attn." + n, Tensor::matrix(1, D));
  ps.add(prefix + ".ffn.w1", randn({D, 4 * D}, rng, ws));
  ps.add(prefix + ".ffn.b1", Tensor::matrix(1, 4 * D));
  ps.add(prefix + ".ffn.w2", randn({4 * D, D}, rng, 0.5 / std::sqrt(static_cast<double>(D))));
  ps.add(prefix + ".ffn.b2", Tensor::matrix(1, D));
}

struct Modulation {
  Var shift1, scale1, gate1, shift2, scale2, gate2;
};

inline Modulation block_modulation(const Var& cond, const ParamStore& ps, const std::string& prefix) {
  Tape& tape = cond.tape();
  const std::size_t D = cond.cols();
  Var mod = linear(gelu(cond), tape.param(ps, prefix + ".ada.w"), tape.param(ps, prefix + ".ada.b"));
  require(mod.cols() == 6 * D, "modulation width mismatch");
  auto part = [&](std::size_t k) { return gather(mod, {0}, k * D, (k + 1) * D); };
  return {part(0), part(1), part(2), part(3), part(4), part(5)};
}

inline Var modulate(const Var& x, const Var& shift, const Var& scale) {
  return add_row(mul_row(layer_norm(x), add_scalar(scale, 1.0)), shift);
}

struct Projections {
  Var q, k, v;
};

inline Projections project_qkv(const Var& h, const ParamStore& ps, const std::string& prefix) {
  Tape& t = h.tape();
  auto p = [&](const char* w, const char* b) {
    return linear(h, t.param(ps, prefix + ".attn." + w), t.param(ps, prefix + ".attn." + b));
  };
  return {p("wq", "bq"), p("wk", "bk"), p("wv", "bv")};
}

inline Var output_projection(const Var& a, const ParamStore& ps, const std::string& prefix) {
  Tape& t = a.tape();
  return linear(a, t.param(ps, prefix + ".attn.wo"), t.param(ps, prefix + ".attn.bo"));
}

// Attention sub-layer: takes the modulated tokens, returns the attention
// output after the output projection.
using AttentionFn = std::function<Var(const Var& h)>;

inline Var transformer_block(const Var& x, const Var& cond, const ParamStore& ps, const std::string& prefix,
                             const AttentionFn& attend) {
  Tape& t = x.tape();
  const Modulation m = block_modulation(cond, ps, prefix);
  Var h = modulate(x, m.shift1, m.scale1);
  Var y = add(x, mul_row(attend(h), m.gate1));
  Var h2 = modulate(y, m.shift2, m.scale2);
  Var f = linear(gelu(linear(h2, t.param(ps, prefix + ".ffn.w1"), t.param(ps, prefix + ".ffn.b1"))),
                 t.param(ps, prefix + ".ffn.w2"), t.param(ps, prefix + ".ffn.b2"));
  return add(y, mul_row(f, m.gate2));
}

// Multi-head masked self-attention restricted to each component's own tokens.
inline std::shared_ptr<const AttentionPlan> local_attention_plan(const TokenLayout& layout, std::size_t heads,
                                                                 std::size_t D) {
  require(heads >= 1 && D % heads == 0, "model width must be divisible by the head count");
  auto mask = std::make_shared<const Mask>(build_local_mask(layout.L, layout.Np));
  auto plan = std::make_shared<AttentionPlan>();
  plan->heads = heads;
  plan->scale = 1.0 / std::sqrt(static_cast<double>(D / heads));
  for (std::size_t i = 0; i < layout.components; ++i) {
    const auto rows = layout.component_rows(i);
    for (std::size_t h = 0; h < heads; ++h) {
      AttentionGroup g;
      g.head = h;
      g.query_rows = rows;
      g.key_rows = rows;
      g.mask = mask;
      plan->groups.push_back(std::move(g));
    }
  }
  return plan;
}

inline Var local_attention(const Var& h, const TokenLayout& layout, const ParamStore& ps,
                           const std::string& prefix, std::size_t heads) {
  require(h.rows() == layout.total(), "local block: token count does not match layout");
  const Projections p = project_qkv(h, ps, prefix);
  return output_projection(grouped_attention(p.q, p.k, p.v, local_attention_plan(layout, heads, h.cols())), ps,
                           prefix);
}

// x: all components' tokens (layout.total() x D); cond: 1 x D timestep+condition.
inline Var local_block_forward(const Var& x, const Var& cond, const TokenLayout& layout, const ParamStore& ps,
                               const std::string& prefix, std::size_t heads) {
  require(x.rows() == layout.total(), "local block: token count does not match layout");
  require(cond.cols() == x.cols() && cond.rows() == 1, "local block: modulation width mismatch");
  return transformer_block(x, cond, ps, prefix,
                           [&](const Var& h) { return local_attention(h, layout, ps, prefix, heads); });
}

// Single-component convenience on packed tokens.
inline PackedTokens local_block_forward(const PackedTokens& x, const Tensor& cond, const ParamStore& ps,
                                        const std::string& prefix, std::size_t heads) {
  Tape tape(false);
  TokenLayout layout(1, x.L, x.Np);
  Var out = local_block_forward(tape.constant(x.tokens), tape.constant(cond), layout, ps, prefix, heads);
  return {out.value(), x.L, x.Np, x.id_index};
}

}  // namespace moc
