#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "moc/tokens.hpp"
#include "oracle.hpp"

using namespace moc;

namespace {

ParamStore packer(std::size_t D, std::size_t Np, std::uint64_t seed) {
  Rng rng(seed);
  ParamStore ps;
  init_packer_params(ps, D, Np, rng);
  return ps;
}

}  // namespace

TEST(Layout, CompressedCountUsesCeiling) {
  EXPECT_EQ(compressed_count(512, 8), 64u);
  EXPECT_EQ(TokenLayout(1, 512, compressed_count(512, 8)).per_component(), 577u);
  EXPECT_EQ(compressed_count(7, 8), 1u);
  EXPECT_EQ(TokenLayout(1, 7, compressed_count(7, 8)).per_component(), 9u);
  EXPECT_EQ(compressed_count(33, 8), 5u);
}

TEST(Layout, SplitLengthsAndRoundTrip) {
  Rng rng(1);
  PackedTokens x{randn({7, 3}, rng), 4, 2, 11};
  const Segments s = x.segments();
  EXPECT_EQ(s.z_end - s.z_begin, 4u);
  EXPECT_EQ(s.p_end - s.p_begin, 2u);
  EXPECT_EQ(s.anchor, 6u);
  const ComponentSplit sp = split_component(x);
  EXPECT_EQ(sp.z.size() / 3, 4u);
  EXPECT_EQ(sp.p.size() / 3, 2u);
  EXPECT_EQ(sp.anchor.size() / 3, 1u);
  const Tensor back = concat_split(sp);
  EXPECT_EQ(back.shape(), x.tokens.shape());
  EXPECT_EQ(back.storage(), x.tokens.storage());
}

TEST(Layout, RowIndexingIsComponentMajor) {
  const TokenLayout lay(3, 4, 2);
  EXPECT_EQ(lay.total(), 21u);
  EXPECT_EQ(lay.z_row(1, 0), 7u);
  EXPECT_EQ(lay.p_row(1, 1), 12u);
  EXPECT_EQ(lay.anchor_row(2), 20u);
  std::vector<std::size_t> seen;
  for (std::size_t i = 0; i < 3; ++i) {
    for (auto r : lay.z_rows(i)) seen.push_back(r);
    for (auto r : lay.p_rows(i)) seen.push_back(r);
    seen.push_back(lay.anchor_row(i));
  }
  std::sort(seen.begin(), seen.end());
  std::vector<std::size_t> all(21);
  std::iota(all.begin(), all.end(), std::size_t{0});
  EXPECT_EQ(seen, all);
}

TEST(Packing, IdenticalRowsWithIdentityValuesGiveThatRow) {
  const std::size_t D = 5, L = 6;
  ParamStore ps = packer(D, 3, 2);
  ps.at("pack.wq") = Tensor::matrix(D, D);
  ps.at("pack.wk") = Tensor::matrix(D, D);
  Tensor eye = Tensor::matrix(D, D);
  for (std::size_t i = 0; i < D; ++i) eye(i, i) = 1.0;
  ps.at("pack.wv") = eye;
  const std::vector<double> v = {0.3, -1.2, 2.0, 0.0, 0.7};
  Tensor z = Tensor::matrix(L, D);
  for (std::size_t r = 0; r < L; ++r)
    for (std::size_t c = 0; c < D; ++c) z(r, c) = v[c];
  const PackResult r = pack_component(z, ps);
  for (std::size_t m = 0; m < 3; ++m)
    for (std::size_t c = 0; c < D; ++c) EXPECT_NEAR(r.p(m, c), v[c], 1e-15);
  for (std::size_t c = 0; c < D; ++c) EXPECT_NEAR(r.anchor[c], v[c], 1e-15);
}

TEST(Packing, InvariantToRowOrder) {
  Rng rng(3);
  const ParamStore ps = packer(6, 2, 4);
  const Tensor z = randn({8, 6}, rng);
  std::vector<std::size_t> perm(8);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  const PackResult a = pack_component(z, ps), b = pack_component(oracle::rows(z, perm), ps);
  EXPECT_LT(max_abs_diff(a.p, b.p), 1e-13);
  EXPECT_LT(max_abs_diff(a.anchor, b.anchor), 1e-13);
}

TEST(Packing, MatchesThreeMatmulOracle) {
  const std::size_t L = 8, D = 4, Np = compressed_count(L, 4);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed + 100);
    const ParamStore ps = packer(D, Np, seed);
    const Tensor z = randn({L, D}, rng);
    const PackResult r = pack_component(z, ps);
    Tensor queries = Tensor::matrix(Np + 1, D);
    std::copy_n(ps.at("pack.queries").data(), Np * D, queries.data());
    std::copy_n(ps.at("pack.anchor").data(), D, queries.data() + Np * D);
    const Tensor ref = oracle::softmax_attention(oracle::linear(queries, ps.at("pack.wq")),
                                                 oracle::linear(z, ps.at("pack.wk")),
                                                 oracle::linear(z, ps.at("pack.wv")), nullptr, {},
                                                 1.0 / std::sqrt(static_cast<double>(D)));
    for (std::size_t m = 0; m < Np; ++m)
      for (std::size_t c = 0; c < D; ++c) EXPECT_NEAR(r.p(m, c), ref(m, c), 1e-10);
    for (std::size_t c = 0; c < D; ++c) EXPECT_NEAR(r.anchor[c], ref(Np, c), 1e-10);
  }
}

TEST(Packing, ComponentsDoNotLeak) {
  Rng rng(5);
  const std::size_t n = 3, L = 5, D = 4, Np = 2;
  const ParamStore ps = packer(D, Np, 6);
  Tensor z = randn({n * L, D}, rng);
  Tape t(false);
  const Tensor before = pack_components(t.constant(z), n, L, ps).value();
  for (std::size_t r = 2 * L; r < 3 * L; ++r)
    for (std::size_t c = 0; c < D; ++c) z(r, c) += 10.0 * uniform01(rng);
  const Tensor after = pack_components(t.constant(z), n, L, ps).value();
  for (std::size_t k = 0; k < 2 * (Np + 1) * D; ++k) EXPECT_EQ(before[k], after[k]);
  EXPECT_GT(max_abs_diff(before, after), 0.0);
  // Per-component packing equals the batched path.
  Tensor z0 = Tensor::matrix(L, D);
  std::copy_n(z.data(), L * D, z0.data());
  const PackResult single = pack_component(z0, ps);
  for (std::size_t k = 0; k < Np * D; ++k) EXPECT_NEAR(single.p[k], before[k], 1e-14);
}

TEST(Packing, EmptyComponentIsAnError) {
  const ParamStore ps = packer(4, 2, 7);
  try {
    pack_component(Tensor::matrix(0, 4), ps);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "empty component");
  }
}

TEST(Ids, FullDrawIsAPermutation) {
  Rng rng(8);
  auto ids = assign_id_embeddings(50, rng);
  std::sort(ids.begin(), ids.end());
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(ids[i], i);
}

TEST(Ids, SingleAndDeterministic) {
  Rng a(9), b(9);
  const auto one = assign_id_embeddings(1, a);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_LT(one[0], 50u);
  Rng c(9);
  EXPECT_EQ(assign_id_embeddings(6, b), assign_id_embeddings(6, c));
}

TEST(Ids, TooManyComponents) {
  Rng rng(10);
  try {
    assign_id_embeddings(51, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "component count exceeds ID codebook");
  }
}

TEST(Ids, DistinctAndUniformOverSeeds) {
  const std::size_t draws = 10000, n = 4;
  std::vector<double> freq(50, 0.0);
  for (std::size_t s = 0; s < draws; ++s) {
    Rng rng(derive_seed(1234, {s}));
    auto ids = assign_id_embeddings(n, rng);
    std::vector<std::size_t> sorted = ids;
    std::sort(sorted.begin(), sorted.end());
    ASSERT_EQ(std::adjacent_find(sorted.begin(), sorted.end()), sorted.end());
    for (auto id : ids) freq[id] += 1.0 / static_cast<double>(draws);
  }
  const double p = static_cast<double>(n) / 50.0;
  const double bound = 3.0 * std::sqrt(p * (1.0 - p) / static_cast<double>(draws));
  for (std::size_t i = 0; i < 50; ++i) EXPECT_NEAR(freq[i], p, bound) << "index " << i;
}

TEST(InputTokens, IdEmbeddingAddedToEveryTokenOfItsComponent) {
  Rng rng(11);
  const std::size_t n = 3, L = 4, D = 6, Np = 2;
  ParamStore ps = packer(D, Np, 12);
  init_id_codebook(ps, D, rng);
  const TokenLayout lay(n, L, Np);
  const Tensor z = randn({n * L, D}, rng);
  const std::vector<std::size_t> ids = {7, 0, 42};
  Tape t(false);
  Var zv = t.constant(z);
  Var packed = pack_components(zv, n, L, ps);
  const Tensor x = build_input_tokens(zv, packed, lay, ids, ps).value();
  const Tensor& cb = ps.at("ids.codebook");
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t c = 0; c < D; ++c)
        EXPECT_DOUBLE_EQ(x(lay.z_row(i, l), c), z(i * L + l, c) + cb(ids[i], c));
    for (std::size_t m = 0; m <= Np; ++m)
      for (std::size_t c = 0; c < D; ++c)
        EXPECT_DOUBLE_EQ(x(lay.base(i) + L + m, c), packed.value()(i * (Np + 1) + m, c) + cb(ids[i], c));
    const PackedTokens comp = component_tokens(x, lay, i, ids[i]);
    EXPECT_EQ(comp.tokens.rows(), L + Np + 1);
    EXPECT_EQ(comp.id_index, ids[i]);
  }
  EXPECT_THROW(build_input_tokens(zv, packed, lay, std::vector<std::size_t>{1, 1, 2}, ps), Error);
}
