#include <gtest/gtest.h>

#include <filesystem>

#include "moc/checkpoint.hpp"
#include "moc/flow.hpp"
#include "moc/gradcheck.hpp"
#include "moc/run.hpp"
#include "oracle.hpp"

using namespace moc;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.heads = 2;
  c.block_pairs = 1;
  c.L = 8;
  c.sigma = 4;
  c.d_latent = 4;
  c.cond_grid = 4;
  return c;
}

Tensor random_layout(std::size_t grid, Rng& rng) {
  Tensor t = Tensor::matrix(1, grid * grid);
  for (auto& v : t.values()) v = uniform01(rng) < 0.3 ? 1.0 : 0.0;
  return t;
}

ParamStore randomized(const ModelConfig& c, std::uint64_t seed, double stddev = 0.3) {
  ParamStore ps = init_model_params(c, seed);
  Rng rng(seed + 1);
  oracle::randomize(ps, rng, stddev);
  return ps;
}

}  // namespace

TEST(Model, ZeroVelocityAtInitialisation) {
  ModelConfig c;
  c.L = 32;
  const ParamStore ps = init_model_params(c, 1);
  Rng rng(2);
  const Tensor z = randn({4, 32, 8}, rng);
  const std::vector<std::size_t> ids = {3, 9, 0, 41};
  const Tensor v = predict_velocity(ps, c, z, 4, 0.7, {random_layout(8, rng), false}, ids);
  EXPECT_EQ(v.shape(), (std::vector<std::size_t>{4, 32, 8}));
  for (double x : v.values()) EXPECT_EQ(x, 0.0);
}

TEST(Model, ForwardIsTheCompositionOfItsStages) {
  const ModelConfig c = [] {
    ModelConfig m = small_config();
    m.block_pairs = 2;
    return m;
  }();
  const ParamStore ps = randomized(c, 3);
  Rng rng(4);
  const Tensor z = randn({3, c.L, c.d_latent}, rng);
  const Condition cond{random_layout(c.cond_grid, rng), false};
  const std::vector<std::size_t> ids = {5, 1, 30};
  Tape t(false);
  const ForwardResult r = forward(t, ps, c, z, 3, 0.4, cond, ids);

  Tape t2(false);
  ModelInputs in = embed_inputs(t2, ps, c, z, 3, 0.4, cond, ids);
  Var x = in.tokens;
  for (std::size_t b = 0; b < 2; ++b) {
    x = local_block_forward(x, in.cond, in.layout, ps, local_prefix(b), c.heads);
    x = global_block_forward(x, in.cond, in.layout, ps, global_prefix(b), c.heads, c.moc(), c.router(),
                             [](const ImportanceMatrix& o, std::size_t k) { return route_deterministic(o, k); })
            .x;
  }
  const Tensor manual = readout(x, in.cond, in.layout, ps).value();
  EXPECT_EQ(r.velocity.value().storage(), manual.storage());
  ASSERT_EQ(r.routing.size(), 2u);
  EXPECT_EQ(r.routing[0].k, default_k(3));
}

TEST(Model, ConditionEncoding) {
  const ModelConfig c = small_config();
  const ParamStore ps = randomized(c, 5);
  Rng rng(6);
  const Tensor layout = random_layout(c.cond_grid, rng);
  const Tensor got = encode_condition({layout, false}, ps);
  Tensor ref = oracle::linear(layout, ps.at("cond.w"), &ps.at("cond.b"));
  for (auto& v : ref.values()) v = oracle::gelu(v);
  EXPECT_LT(max_abs_diff(got, ref), 1e-12);
  const Tensor null_a = encode_condition({layout, true}, ps);
  const Tensor null_b = encode_condition({random_layout(c.cond_grid, rng), true}, ps);
  EXPECT_EQ(null_a.storage(), null_b.storage());
  EXPECT_EQ(null_a.storage(), ps.at("cond.null").storage());
  EXPECT_THROW(encode_condition({Tensor::matrix(1, 5), false}, ps), Error);
}

TEST(Model, ClassifierFreeDropout) {
  const Condition c{Tensor::matrix(1, 4), false};
  Rng a(7);
  for (int i = 0; i < 1000; ++i) {
    EXPECT_FALSE(cfg_dropout(c, 0.0, a).is_null);
    EXPECT_TRUE(cfg_dropout(c, 1.0, a).is_null);
  }
  const std::size_t draws = 10000;
  std::size_t dropped = 0;
  Rng b(8);
  for (std::size_t i = 0; i < draws; ++i) dropped += cfg_dropout(c, 0.1, b).is_null;
  EXPECT_NEAR(static_cast<double>(dropped) / draws, 0.1, 0.009);
  EXPECT_THROW(cfg_dropout(c, 1.5, b), Error);
}

TEST(Model, EveryAblationCombinationRuns) {
  Rng rng(9);
  const Tensor z = randn({4, 8, 4}, rng);
  const Tensor layout = random_layout(4, rng);
  const std::vector<std::size_t> ids = {2, 7, 11, 4};
  for (unsigned bits = 0; bits < 64; ++bits) {
    ModelConfig c = small_config();
    c.activation = bits & 1 ? RouterActivation::softmax : RouterActivation::sigmoid;
    c.gate_target = bits & 2 ? GainTarget::value : GainTarget::key;
    c.load_balance = bits & 4;
    c.multi_head_routing = bits & 8;
    c.use_routing = bits & 16;
    c.use_compressed_context = bits & 32;
    const ParamStore ps = randomized(c, 10 + bits);
    Tape t(true);
    const ForwardResult r = forward(t, ps, c, z, 4, 0.5, {layout, false}, ids, RoutingPolicy::stochastic(bits));
    EXPECT_EQ(r.velocity.rows(), 32u) << bits;
    EXPECT_TRUE(r.velocity.value().all_finite()) << bits;
    EXPECT_EQ(r.importance[0].heads, c.multi_head_routing ? 2u : 1u);
    for (const auto& sel : r.routing[0].selected) EXPECT_EQ(sel.size(), c.use_routing ? 1u : 0u);
  }
}

TEST(Model, EndToEndGradientCheck) {
  ModelConfig c = small_config();
  const ParamStore base = randomized(c, 20, 0.25);
  Rng rng(21);
  const Tensor z0 = randn({4, c.L, c.d_latent}, rng);
  const FlowBatch fb = make_flow_batch(z0, rng, 0.37);
  const Condition cond{random_layout(c.cond_grid, rng), false};
  const std::vector<std::size_t> ids = {0, 12, 5, 33};
  std::vector<RoutingDecision> routing;
  predict_velocity(base, c, fb.zt, 4, fb.t, cond, ids, RoutingPolicy::deterministic(), &routing);
  ParamStore ps = base;
  const LossFn loss = [&](Tape& t, const ParamStore& p) {
    const ForwardResult r = forward(t, p, c, fb.zt, 4, fb.t, cond, ids, RoutingPolicy::replay(routing));
    return fm_loss(r.velocity, t.constant(fb.target.reshaped({4 * c.L, c.d_latent})));
  };
  GradCheckOptions opt;
  opt.max_entries_per_param = 6;
  opt.eps = 1e-5;
  // Local key biases have exactly zero gradient; the floor keeps their
  // round-off differences from dominating the ratio.
  opt.floor = 1e-6;
  const auto r = grad_check(loss, ps, opt);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_param << "[" << r.worst_index << "] " << r.worst_analytic << " vs "
                                   << r.worst_numeric;
  EXPECT_GT(r.entries_checked, 100u);
}

TEST(Model, PermutationEquivariance) {
  ModelConfig c = small_config();
  c.block_pairs = 2;
  const ParamStore ps = randomized(c, 30);
  Rng rng(31);
  const std::size_t n = 5, L = c.L, Dl = c.d_latent;
  const Condition cond{random_layout(c.cond_grid, rng), false};
  for (int trial = 0; trial < 3; ++trial) {
    const Tensor z = randn({n, L, Dl}, rng);
    std::vector<std::size_t> ids = {4, 17, 2, 40, 9};
    std::vector<std::size_t> perm = {0, 1, 2, 3, 4};
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor zp({n, L, Dl});
    std::vector<std::size_t> idp(n);
    for (std::size_t a = 0; a < n; ++a) {
      std::copy_n(z.data() + perm[a] * L * Dl, L * Dl, zp.data() + a * L * Dl);
      idp[a] = ids[perm[a]];
    }
    for (auto policy : {RoutingPolicy::deterministic(), RoutingPolicy::stochastic(77)}) {
      const Tensor v = predict_velocity(ps, c, z, n, 0.6, cond, ids, policy);
      const Tensor vp = predict_velocity(ps, c, zp, n, 0.6, cond, idp, policy);
      double err = 0.0;
      for (std::size_t a = 0; a < n; ++a)
        for (std::size_t e = 0; e < L * Dl; ++e)
          err = std::max(err, std::abs(vp[a * L * Dl + e] - v[perm[a] * L * Dl + e]));
      EXPECT_LT(err, 1e-8);
    }
  }
}

TEST(Model, InputValidation) {
  const ModelConfig c = small_config();
  const ParamStore ps = init_model_params(c, 40);
  Rng rng(41);
  const Condition cond{random_layout(c.cond_grid, rng), false};
  EXPECT_THROW(predict_velocity(ps, c, randn({2, 7, 4}, rng), 2, 0.5, cond, std::vector<std::size_t>{0, 1}), Error);
  Tensor bad = randn({2, 8, 4}, rng);
  bad[3] = std::nan("");
  EXPECT_THROW(predict_velocity(ps, c, bad, 2, 0.5, cond, std::vector<std::size_t>{0, 1}), Error);
  ModelConfig odd = c;
  odd.heads = 3;
  EXPECT_THROW(init_model_params(odd, 1), Error);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const ModelConfig c = small_config();
  ParamStore ps = randomized(c, 50);
  round_to_f32(ps);
  const auto dir = std::filesystem::temp_directory_path() / "moc_test_checkpoint";
  std::filesystem::create_directories(dir);
  const std::string cfg = default_run_config().dump();
  save_checkpoint(dir / "model.ckpt", ps, cfg);
  const Checkpoint ck = load_checkpoint(dir / "model.ckpt");
  EXPECT_EQ(ck.config_json, cfg);
  ASSERT_EQ(ck.params.names(), ps.names());
  for (const auto& name : ps.names()) {
    EXPECT_EQ(ck.params.at(name).shape(), ps.at(name).shape()) << name;
    EXPECT_EQ(ck.params.at(name).storage(), ps.at(name).storage()) << name;
  }
  Rng rng(51);
  const Tensor z = randn({3, c.L, c.d_latent}, rng);
  const Condition cond{random_layout(c.cond_grid, rng), false};
  const std::vector<std::size_t> ids = {1, 2, 3};
  EXPECT_EQ(predict_velocity(ps, c, z, 3, 0.2, cond, ids).storage(),
            predict_velocity(ck.params, c, z, 3, 0.2, cond, ids).storage());

  nlohmann::json other = default_run_config();
  other["model"]["d_model"] = 32;
  EXPECT_THROW(check_checkpoint_matches(ck, other), Error);
  EXPECT_NO_THROW(check_checkpoint_matches(ck, default_run_config()));
  std::filesystem::remove_all(dir);
  EXPECT_THROW(load_checkpoint(dir / "model.ckpt"), Error);
}
