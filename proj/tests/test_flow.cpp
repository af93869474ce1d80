#include <gtest/gtest.h>

#include "moc/flow.hpp"
#include "moc/gradcheck.hpp"
#include "moc/run.hpp"

using namespace moc;

namespace {

// The sampler's first draw is its starting noise; a copy of the generator
// reproduces it.
Tensor starting_noise(const std::vector<std::size_t>& shape, const Rng& rng) {
  Rng copy = rng;
  return randn(shape, copy);
}

}  // namespace

TEST(FlowBatch, Endpoints) {
  Rng rng(1);
  const Tensor z0 = randn({2, 3, 4}, rng);
  const FlowBatch a = make_flow_batch(z0, rng, 0.0);
  EXPECT_EQ(a.zt.storage(), z0.storage());
  const FlowBatch b = make_flow_batch(z0, rng, 1.0);
  EXPECT_EQ(b.zt.storage(), b.eps.storage());
  for (std::size_t i = 0; i < z0.size(); ++i) EXPECT_EQ(b.target[i], b.eps[i] - z0[i]);
  EXPECT_THROW(make_flow_batch(z0, rng, 1.5), Error);
}

TEST(FlowBatch, QuarterExample) {
  Rng rng(2);
  const FlowBatch b = make_flow_batch(Tensor({2, 2, 2}), rng, 0.25);
  // With Z_0 = 0 the interpolant is a quarter of the noise and the target is the noise.
  for (std::size_t i = 0; i < b.zt.size(); ++i) {
    EXPECT_DOUBLE_EQ(b.zt[i], 0.25 * b.eps[i]);
    EXPECT_EQ(b.target[i], b.eps[i]);
  }
}

TEST(FlowBatch, SharedTimestepAndNoiseStatistics) {
  Rng rng(3);
  const Tensor z0 = randn({4, 64, 8}, rng);
  const FlowBatch b = make_flow_batch(z0, rng);
  EXPECT_GE(b.t, 0.0);
  EXPECT_LE(b.t, 1.0);
  for (std::size_t i = 0; i < z0.size(); ++i) EXPECT_NEAR(b.zt[i], (1.0 - b.t) * z0[i] + b.t * b.eps[i], 1e-15);
  double m = 0.0, v = 0.0;
  for (double e : b.eps.values()) m += e / b.eps.size();
  for (double e : b.eps.values()) v += (e - m) * (e - m) / b.eps.size();
  EXPECT_NEAR(m, 0.0, 0.1);
  EXPECT_NEAR(v, 1.0, 0.1);
  Tensor bad = z0;
  bad[0] = INFINITY;
  EXPECT_THROW(make_flow_batch(bad, rng), Error);
}

TEST(FmLoss, Examples) {
  Rng rng(4);
  const Tensor t = randn({3, 5}, rng);
  EXPECT_EQ(fm_loss(t, t), 0.0);
  Tensor p = t;
  for (auto& v : p.values()) v += 1.0;
  EXPECT_DOUBLE_EQ(fm_loss(p, t), 1.0);
  EXPECT_THROW(fm_loss(Tensor({2, 2}), Tensor({3})), Error);
  Tape tape(false);
  EXPECT_THROW(fm_loss(tape.constant(Tensor({2, 2})), tape.constant(Tensor({5}))), Error);
}

TEST(FmLoss, GradientMatchesClosedFormAndDifferences) {
  Rng rng(5);
  ParamStore ps;
  ps.add("pred", randn({4, 6}, rng));
  const Tensor target = randn({4, 6}, rng);
  const LossFn f = [&](Tape& t, const ParamStore& p) { return fm_loss(t.param(p, "pred"), t.constant(target)); };
  Tape t(true);
  t.backward(f(t, ps));
  t.accumulate_grads(ps);
  for (std::size_t i = 0; i < target.size(); ++i)
    EXPECT_NEAR(ps.grad("pred")[i], 2.0 * (ps.at("pred")[i] - target[i]) / 24.0, 1e-15);
  EXPECT_LT(grad_check(f, ps, 1e-6), 1e-8);
}

TEST(Sampler, ConstantFieldIsIntegratedExactly) {
  const std::vector<std::size_t> shape = {3, 4, 2};
  Rng src(6);
  const Tensor target = randn(shape, src);
  for (std::size_t steps : {1, 7, 50}) {
    Rng rng(7 + steps);
    const Tensor eps = starting_noise(shape, rng);
    Tensor v = eps;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= target[i];
    const VelocityModel m = [&](const Tensor&, double, bool, std::vector<RoutingDecision>&) { return v; };
    const Tensor z = sample(m, shape, {steps, 3.0}, rng);
    EXPECT_LT(max_abs_diff(z, target), 1e-12) << steps;
  }
}

TEST(Sampler, GuidanceScaleOneIsConditionalOnly) {
  const std::vector<std::size_t> shape = {2, 3, 2};
  const VelocityModel guided = [](const Tensor& z, double t, bool cond, std::vector<RoutingDecision>&) {
    Tensor v = z;
    for (auto& x : v.values()) x = cond ? 0.5 * x + t : -x;
    return v;
  };
  int calls = 0;
  const VelocityModel cond_only = [&](const Tensor& z, double t, bool, std::vector<RoutingDecision>& r) {
    ++calls;
    return guided(z, t, true, r);
  };
  Rng a(8), b(8);
  EXPECT_EQ(sample(guided, shape, {10, 1.0}, a).storage(), sample(cond_only, shape, {10, 1.0}, b).storage());
  EXPECT_EQ(calls, 10);
}

TEST(Sampler, SingleStepAlgebra) {
  const std::vector<std::size_t> shape = {2, 2, 3};
  const VelocityModel m = [](const Tensor& z, double t, bool cond, std::vector<RoutingDecision>&) {
    Tensor v = z;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = cond ? std::sin(z[i]) * t : 0.3 * z[i] - 0.1;
    return v;
  };
  Rng rng(9);
  const Tensor eps = starting_noise(shape, rng);
  const double s = 2.5;
  const Tensor z = sample(m, shape, {1, s}, rng);
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double vc = std::sin(eps[i]), vu = 0.3 * eps[i] - 0.1;
    EXPECT_NEAR(z[i], eps[i] - (vu + s * (vc - vu)), 1e-14);
  }
}

TEST(Sampler, DeterministicAndErrors) {
  const std::vector<std::size_t> shape = {2, 2, 2};
  const VelocityModel m = [](const Tensor& z, double, bool, std::vector<RoutingDecision>&) { return z; };
  Rng a(10), b(10);
  EXPECT_EQ(sample(m, shape, {5, 4.0}, a).storage(), sample(m, shape, {5, 4.0}, b).storage());
  EXPECT_THROW(sample(m, shape, {0, 4.0}, a), Error);
  const VelocityModel blowup = [](const Tensor& z, double t, bool, std::vector<RoutingDecision>&) {
    Tensor v = z;
    if (t < 0.75) v[0] = NAN;
    return v;
  };
  try {
    sample(blowup, shape, {4, 1.0}, a);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "non-finite sampler state at step 2");
  }
}

TEST(Sampler, GuidanceBranchesShareRouting) {
  ModelConfig c;
  c.d_model = 16;
  c.heads = 2;
  c.block_pairs = 1;
  c.L = 4;
  c.sigma = 2;
  c.d_latent = 4;
  c.cond_grid = 2;
  ParamStore ps = init_model_params(c, 11);
  Rng rng(12);
  for (auto& [_, t] : ps.params())
    for (double& v : t.values()) v = 0.3 * std::normal_distribution<double>()(rng);
  const std::vector<std::size_t> ids = {0, 1, 2, 3, 4};
  const VelocityModel vm = model_velocity(ps, c, 5, Condition{Tensor({1, 4}, std::vector<double>{1, 0, 0, 1}), false}, ids);
  std::vector<RoutingDecision> routing;
  const Tensor z = randn({5, 4, 4}, rng);
  vm(z, 0.5, true, routing);
  // A later call in the same step must use the routing it is handed.
  ASSERT_EQ(routing.size(), 1u);
  for (std::size_t r = 0; r < routing[0].selected.size(); ++r) routing[0].selected[r] = {r % 5 == 0 ? 1u : 0u};
  const Tensor replayed = vm(z, 0.5, false, routing);
  std::vector<RoutingDecision> fresh;
  const Tensor own = vm(z, 0.5, false, fresh);
  EXPECT_GT(max_abs_diff(replayed, own), 0.0);
}

TEST(Training, LossDecreasesAndIsReproducible) {
  nlohmann::json c = default_run_config();
  for (const char* o : {"model.d_model=16", "model.heads=2", "model.block_pairs=1", "data.points=8", "train.steps=200",
                        "moc.sigma=4", "train.lr=0.003"})
    apply_override(c, o);
  const TrainResult a = train(c);
  ASSERT_EQ(a.losses.size(), 200u);
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 50; ++i) first += a.losses[i] / 50.0;
  for (std::size_t i = 150; i < 200; ++i) last += a.losses[i] / 50.0;
  EXPECT_LT(last, 0.8 * first);
  const TrainResult b = train(c);
  EXPECT_EQ(a.losses, b.losses);
}
