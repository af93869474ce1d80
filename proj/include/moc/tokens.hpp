#pragma once

// Per-component input sequences x_i = [z_i ; p_i ; anchor_i]. Compressed tokens
// p_i and the anchor are produced by cross-attention from shared learnable
// queries onto the component's own vecset tokens; every token of x_i then
// receives the component's ID embedding.

#include <algorithm>
#include <memory>
#include <span>
#include <vector>

#include "moc/attention.hpp"
#include "moc/autodiff.hpp"

namespace moc {

inline constexpr std::size_t kIdCodebookSize = 50;

// N_p = ceil(L / sigma).
inline std::size_t compressed_count(std::size_t L, std::size_t sigma) {
  require(L >= 1, "empty component");
  require(sigma >= 1, "compression ratio must be >= 1");
  return (L + sigma - 1) / sigma;
}

// Row layout of the flattened token matrix: component i occupies rows
// [i*T, (i+1)*T) with z in [0, L), p in [L, L+Np) and the anchor at L+Np.
struct TokenLayout {
  std::size_t components = 0;
  std::size_t L = 0;
  std::size_t Np = 0;

  TokenLayout() = default;
  TokenLayout(std::size_t n, std::size_t l, std::size_t np) : components(n), L(l), Np(np) {
    require(l >= 1, "empty component");
    require(np >= 1, "at least one compressed token is required");
  }

  std::size_t per_component() const { return L + Np + 1; }
  std::size_t total() const { return components * per_component(); }
  std::size_t base(std::size_t i) const { return i * per_component(); }
  std::size_t z_row(std::size_t i, std::size_t l) const { return base(i) + l; }
  std::size_t p_row(std::size_t i, std::size_t m) const { return base(i) + L + m; }
  std::size_t anchor_row(std::size_t i) const { return base(i) + L + Np; }

  std::vector<std::size_t> component_rows(std::size_t i) const {
    std::vector<std::size_t> r(per_component());
    std::iota(r.begin(), r.end(), base(i));
    return r;
  }
  std::vector<std::size_t> z_rows(std::size_t i) const {
    std::vector<std::size_t> r(L);
    std::iota(r.begin(), r.end(), base(i));
    return r;
  }
  std::vector<std::size_t> p_rows(std::size_t i) const {
    std::vector<std::size_t> r(Np);
    std::iota(r.begin(), r.end(), base(i) + L);
    return r;
  }
  std::vector<std::size_t> all_z_rows() const {
    std::vector<std::size_t> r;
    r.reserve(components * L);
    for (std::size_t i = 0; i < components; ++i)
      for (std::size_t l = 0; l < L; ++l) r.push_back(z_row(i, l));
    return r;
  }
  std::vector<std::size_t> anchor_rows() const {
    std::vector<std::size_t> r(components);
    for (std::size_t i = 0; i < components; ++i) r[i] = anchor_row(i);
    return r;
  }
};

struct Segments {
  std::size_t z_begin = 0, z_end = 0;
  std::size_t p_begin = 0, p_end = 0;
  std::size_t anchor = 0;
};

// One component's packed sequence.
struct PackedTokens {
  Tensor tokens;  // (L + Np + 1) x D
  std::size_t L = 0;
  std::size_t Np = 0;
  std::size_t id_index = 0;

  Segments segments() const { return {0, L, L, L + Np, L + Np}; }
  std::size_t width() const { return tokens.cols(); }
};

struct ComponentSplit {
  std::span<const double> z, p, anchor;
  std::size_t width = 0;
};

inline ComponentSplit split_component(const PackedTokens& x) {
  const std::size_t w = x.width();
  require(x.tokens.rows() == x.L + x.Np + 1, "packed tokens: length does not match segments");
  std::span<const double> all = x.tokens.values();
  return {all.subspan(0, x.L * w), all.subspan(x.L * w, x.Np * w), all.subspan((x.L + x.Np) * w, w), w};
}

inline Tensor concat_split(const ComponentSplit& s) {
  std::vector<double> data;
  data.reserve(s.z.size() + s.p.size() + s.anchor.size());
  data.insert(data.end(), s.z.begin(), s.z.end());
  data.insert(data.end(), s.p.begin(), s.p.end());
  data.insert(data.end(), s.anchor.begin(), s.anchor.end());
  const std::size_t rows = data.size() / s.width;
  return Tensor({rows, s.width}, std::move(data));
}

// Distinct ID indices drawn uniformly without replacement.
inline std::vector<std::size_t> assign_id_embeddings(std::size_t n, Rng& rng,
                                                     std::size_t codebook_size = kIdCodebookSize) {
  if (n > codebook_size) throw Error("component count exceeds ID codebook");
  std::vector<std::size_t> pool(codebook_size);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, codebook_size - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(n);
  return pool;
}

// Packer parameters: shared learnable queries, anchor query, and single-head
// full-width Q/K/V projections.
inline void init_packer_params(ParamStore& ps, std::size_t D, std::size_t Np, Rng& rng,
                               const std::string& prefix = "pack") {
  const double ws = 1.0 / std::sqrt(static_cast<double>(D));
  ps.add(prefix + ".queries", randn({Np, D}, rng, 0.5));
  ps.add(prefix + ".anchor", randn({1, D}, rng, 0.5));
  ps.add(prefix + ".wq", randn({D, D}, rng, ws));
  ps.add(prefix + ".wk", randn({D, D}, rng, ws));
  ps.add(prefix + ".wv", randn({D, D}, rng, ws));
}

inline void init_id_codebook(ParamStore& ps, std::size_t D, Rng& rng, const std::string& name = "ids.codebook",
                             std::size_t codebook_size = kIdCodebookSize) {
  ps.add(name, randn({codebook_size, D}, rng, 0.5));
}

// Packs every component at once. z holds N*L rows (component-major); the
// result holds N*(Np+1) rows: Np compressed tokens then the anchor, per component.
inline Var pack_components(const Var& z, std::size_t n, std::size_t L, const ParamStore& ps,
                           const std::string& prefix = "pack") {
  Tape& tape = z.tape();
  require(L >= 1, "empty component");
  require(z.rows() == n * L, "pack_components: row count mismatch");
  Var queries = tape.param(ps, prefix + ".queries");
  const std::size_t Np = queries.rows();
  const std::size_t D = z.cols();
  Var all_q = concat_rows({queries, tape.param(ps, prefix + ".anchor")});
  Var qp = matmul(all_q, tape.param(ps, prefix + ".wq"));
  // Repeat the shared query projections once per component.
  std::vector<std::size_t> rep;
  rep.reserve(n * (Np + 1));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t m = 0; m <= Np; ++m) rep.push_back(m);
  Var q = gather_rows(qp, std::move(rep));
  Var k = matmul(z, tape.param(ps, prefix + ".wk"));
  Var v = matmul(z, tape.param(ps, prefix + ".wv"));

  auto plan = std::make_shared<AttentionPlan>();
  plan->heads = 1;
  plan->scale = 1.0 / std::sqrt(static_cast<double>(D));
  for (std::size_t i = 0; i < n; ++i) {
    AttentionGroup g;
    g.query_rows.resize(Np + 1);
    std::iota(g.query_rows.begin(), g.query_rows.end(), i * (Np + 1));
    g.key_rows.resize(L);
    std::iota(g.key_rows.begin(), g.key_rows.end(), i * L);
    plan->groups.push_back(std::move(g));
  }
  return grouped_attention(q, k, v, std::move(plan));
}

struct PackResult {
  Tensor p;       // Np x D
  Tensor anchor;  // 1 x D
};

inline PackResult pack_component(const Tensor& z_i, const ParamStore& ps, const std::string& prefix = "pack") {
  if (z_i.rows() == 0) throw Error("empty component");
  Tape tape(false);
  Var packed = pack_components(tape.constant(z_i), 1, z_i.rows(), ps, prefix);
  const std::size_t Np = packed.rows() - 1;
  const std::size_t D = packed.cols();
  const Tensor& pv = packed.value();
  PackResult r{Tensor::matrix(Np, D), Tensor::matrix(1, D)};
  std::copy_n(pv.data(), Np * D, r.p.data());
  std::copy_n(pv.data() + Np * D, D, r.anchor.data());
  return r;
}

// Interleaves vecset and packed tokens into the layout above and adds each
// component's ID embedding to all of its tokens.
inline Var build_input_tokens(const Var& z, const Var& packed, const TokenLayout& layout,
                              std::span<const std::size_t> ids, const ParamStore& ps,
                              const std::string& codebook = "ids.codebook") {
  Tape& tape = z.tape();
  const std::size_t n = layout.components, L = layout.L, Np = layout.Np;
  require(ids.size() == n, "one ID index per component is required");
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b) require(ids[a] != ids[b], "ID indices must be distinct");
  Var stacked = concat_rows({z, packed});
  std::vector<std::size_t> order;
  std::vector<std::size_t> id_rows;
  order.reserve(layout.total());
  id_rows.reserve(layout.total());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t l = 0; l < L; ++l) order.push_back(i * L + l);
    for (std::size_t m = 0; m <= Np; ++m) order.push_back(n * L + i * (Np + 1) + m);
    id_rows.insert(id_rows.end(), layout.per_component(), ids[i]);
  }
  Var x = gather_rows(stacked, std::move(order));
  Var cb = tape.param(ps, codebook);
  for (auto id : ids) require(id < cb.rows(), "ID index out of codebook range");
  return add(x, gather_rows(cb, std::move(id_rows)));
}

inline PackedTokens component_tokens(const Tensor& x, const TokenLayout& layout, std::size_t i,
                                     std::size_t id_index) {
  const std::size_t T = layout.per_component(), D = x.cols();
  PackedTokens out{Tensor::matrix(T, D), layout.L, layout.Np, id_index};
  std::copy_n(x.data() + layout.base(i) * D, T * D, out.tokens.data());
  return out;
}

}  // namespace moc
