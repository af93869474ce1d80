#pragma once

// Compositional diffusion transformer: latent in-projection, cross-attention
// packing, ID embeddings, alternating local / MoC-global blocks and a
// zero-initialised velocity readout of the vecset tokens.

#include <optional>
#include <string>
#include <vector>

#include "moc/local_block.hpp"
#include "moc/moc_attention.hpp"
#include "moc/router.hpp"
#include "moc/tokens.hpp"

namespace moc {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t block_pairs = 4;
  std::size_t L = 32;
  std::size_t sigma = 8;
  double k_fraction = 0.25;
  std::size_t codebook_size = kIdCodebookSize;
  std::size_t d_latent = 8;
  std::size_t cond_grid = 8;
  RouterActivation activation = RouterActivation::sigmoid;
  GainTarget gate_target = GainTarget::key;
  bool load_balance = true;
  bool multi_head_routing = true;
  bool use_routing = true;
  bool use_compressed_context = true;

  std::size_t Np() const { return compressed_count(L, sigma); }
  MocOptions moc() const { return {gate_target, use_compressed_context, use_routing}; }
  RouterOptions router() const { return {activation, multi_head_routing, k_fraction}; }

  void validate() const {
    require(d_model >= 2 && d_model % 2 == 0, "d_model must be even");
    require(heads >= 1 && d_model % heads == 0, "d_model must be divisible by heads");
    require(block_pairs >= 1, "at least one block pair is required");
    require(L >= 1, "L must be >= 1");
    require(sigma >= 1, "sigma must be >= 1");
    require(k_fraction > 0.0 && k_fraction <= 1.0, "k_fraction must lie in (0, 1]");
    require(codebook_size >= 1, "codebook size must be >= 1");
    require(d_latent >= 1, "latent width must be >= 1");
    require(cond_grid >= 1, "condition grid must be >= 1");
  }
};

inline std::string local_prefix(std::size_t pair) { return "blocks." + std::to_string(pair) + ".local"; }
inline std::string global_prefix(std::size_t pair) { return "blocks." + std::to_string(pair) + ".global"; }

inline ParamStore init_model_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ParamStore ps;
  const std::size_t D = cfg.d_model, G = cfg.cond_grid * cfg.cond_grid;
  ps.add("in.w", randn({cfg.d_latent, D}, rng, 1.0 / std::sqrt(static_cast<double>(cfg.d_latent))));
  ps.add("in.b", Tensor::matrix(1, D));
  init_packer_params(ps, D, cfg.Np(), rng);
  init_id_codebook(ps, D, rng, "ids.codebook", cfg.codebook_size);
  ps.add("time.w1", randn({D, D}, rng, 1.0 / std::sqrt(static_cast<double>(D))));
  ps.add("time.b1", Tensor::matrix(1, D));
  ps.add("time.w2", randn({D, D}, rng, 1.0 / std::sqrt(static_cast<double>(D))));
  ps.add("time.b2", Tensor::matrix(1, D));
  ps.add("cond.w", randn({G, D}, rng, 1.0 / std::sqrt(static_cast<double>(G))));
  ps.add("cond.b", Tensor::matrix(1, D));
  ps.add("cond.null", randn({1, D}, rng, 0.5));
  for (std::size_t b = 0; b < cfg.block_pairs; ++b) {
    init_block_params(ps, local_prefix(b), D, rng);
    init_block_params(ps, global_prefix(b), D, rng);
    init_router_params(ps, global_prefix(b) + ".router", D, rng);
  }
  ps.add("final.ada.w", Tensor::matrix(D, 2 * D));
  ps.add("final.ada.b", Tensor::matrix(1, 2 * D));
  ps.add("out.w", Tensor::matrix(D, cfg.d_latent));
  ps.add("out.b", Tensor::matrix(1, cfg.d_latent));
  return ps;
}

// Coarse layout grid (flattened G*G occupancy) plus the classifier-free
// guidance null flag. A null condition maps to a learned constant.
struct Condition {
  Tensor layout;
  bool is_null = false;
};

inline Var encode_condition(Tape& tape, const Condition& c, const ParamStore& ps) {
  if (c.is_null) return tape.param(ps, "cond.null");
  const Tensor& w = ps.at("cond.w");
  require(c.layout.size() == w.rows(), "condition layout size does not match the model");
  return gelu(linear(tape.constant(c.layout.reshaped({1, c.layout.size()})), tape.param(ps, "cond.w"),
                     tape.param(ps, "cond.b")));
}

inline Tensor encode_condition(const Condition& c, const ParamStore& ps) {
  Tape tape(false);
  return encode_condition(tape, c, ps).value();
}

inline Condition cfg_dropout(const Condition& c, double p_drop, Rng& rng) {
  require(p_drop >= 0.0 && p_drop <= 1.0, "p_drop must lie in [0, 1]");
  Condition out = c;
  // Always consume one draw so the stream does not depend on p_drop.
  const double u = uniform01(rng);
  if (u < p_drop) out.is_null = true;
  return out;
}

inline Tensor timestep_features(double t, std::size_t D) {
  Tensor f = Tensor::matrix(1, D);
  const std::size_t half = D / 2;
  for (std::size_t k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
    f[k] = std::cos(1000.0 * t * freq);
    f[half + k] = std::sin(1000.0 * t * freq);
  }
  return f;
}

inline Var timestep_embedding(Tape& tape, double t, const ParamStore& ps) {
  const std::size_t D = ps.at("time.w1").rows();
  Var f = tape.constant(timestep_features(t, D));
  Var h = gelu(linear(f, tape.param(ps, "time.w1"), tape.param(ps, "time.b1")));
  return linear(h, tape.param(ps, "time.w2"), tape.param(ps, "time.b2"));
}

struct RoutingPolicy {
  enum class Kind { deterministic, stochastic, fixed };
  Kind kind = Kind::deterministic;
  std::uint64_t seed = 0;
  const std::vector<RoutingDecision>* fixed = nullptr;

  static RoutingPolicy deterministic() { return {}; }
  static RoutingPolicy stochastic(std::uint64_t s) { return {Kind::stochastic, s, nullptr}; }
  static RoutingPolicy replay(const std::vector<RoutingDecision>& d) { return {Kind::fixed, 0, &d}; }
};

struct ForwardResult {
  Var velocity;  // (N * L) x d_latent, component-major
  std::vector<RoutingDecision> routing;
  std::vector<ImportanceMatrix> importance;
};

struct ModelInputs {
  TokenLayout layout;
  Var tokens;  // after packing and ID embeddings
  Var cond;    // 1 x D, timestep + condition
};

// z_t: N x L x d_latent (or (N*L) x d_latent).
inline ModelInputs embed_inputs(Tape& tape, const ParamStore& ps, const ModelConfig& cfg, const Tensor& z_t,
                                std::size_t n, double t, const Condition& cond, std::span<const std::size_t> ids) {
  require(n >= 1, "at least one component is required");
  if (n > cfg.codebook_size) throw Error("component count exceeds ID codebook");
  require(z_t.size() == n * cfg.L * cfg.d_latent, "latent shape does not match the model configuration");
  z_t.check_finite("model input latents");
  require(std::isfinite(t), "non-finite timestep");
  ModelInputs in;
  in.layout = TokenLayout(n, cfg.L, cfg.Np());
  Var z = tape.constant(z_t.reshaped({n * cfg.L, cfg.d_latent}));
  Var zh = linear(z, tape.param(ps, "in.w"), tape.param(ps, "in.b"));
  Var packed = pack_components(zh, n, cfg.L, ps);
  in.tokens = build_input_tokens(zh, packed, in.layout, ids, ps);
  in.cond = add(timestep_embedding(tape, t, ps), encode_condition(tape, cond, ps));
  return in;
}

inline RouteFn make_route_fn(const ModelConfig& cfg, const RoutingPolicy& policy, std::size_t block,
                             std::span<const std::size_t> ids) {
  return [&cfg, policy, block, ids](const ImportanceMatrix& o, std::size_t k) -> RoutingDecision {
    switch (policy.kind) {
      case RoutingPolicy::Kind::fixed:
        require(policy.fixed && block < policy.fixed->size(), "replayed routing has too few blocks");
        return (*policy.fixed)[block];
      case RoutingPolicy::Kind::stochastic:
        if (cfg.load_balance) return route_stochastic_keyed(o, k, derive_seed(policy.seed, {block}), ids);
        return route_deterministic(o, k);
      case RoutingPolicy::Kind::deterministic:
        break;
    }
    return route_deterministic(o, k);
  };
}

inline Var readout(const Var& x, const Var& cond, const TokenLayout& layout, const ParamStore& ps) {
  Tape& tape = x.tape();
  const std::size_t D = x.cols();
  Var mod = linear(gelu(cond), tape.param(ps, "final.ada.w"), tape.param(ps, "final.ada.b"));
  Var shift = gather(mod, {0}, 0, D), scl = gather(mod, {0}, D, 2 * D);
  Var z = gather_rows(x, layout.all_z_rows());
  return linear(modulate(z, shift, scl), tape.param(ps, "out.w"), tape.param(ps, "out.b"));
}

inline ForwardResult forward(Tape& tape, const ParamStore& ps, const ModelConfig& cfg, const Tensor& z_t,
                             std::size_t n, double t, const Condition& cond, std::span<const std::size_t> ids,
                             const RoutingPolicy& policy = RoutingPolicy::deterministic()) {
  ModelInputs in = embed_inputs(tape, ps, cfg, z_t, n, t, cond, ids);
  ForwardResult res;
  Var x = in.tokens;
  for (std::size_t b = 0; b < cfg.block_pairs; ++b) {
    x = local_block_forward(x, in.cond, in.layout, ps, local_prefix(b), cfg.heads);
    GlobalBlockResult g = global_block_forward(x, in.cond, in.layout, ps, global_prefix(b), cfg.heads, cfg.moc(),
                                               cfg.router(), make_route_fn(cfg, policy, b, ids));
    x = g.x;
    res.routing.push_back(std::move(g.routing));
    res.importance.push_back(std::move(g.importance));
  }
  res.velocity = readout(x, in.cond, in.layout, ps);
  return res;
}

// Inference convenience: returns the velocity as an N x L x d_latent tensor.
inline Tensor predict_velocity(const ParamStore& ps, const ModelConfig& cfg, const Tensor& z_t, std::size_t n,
                               double t, const Condition& cond, std::span<const std::size_t> ids,
                               const RoutingPolicy& policy = RoutingPolicy::deterministic(),
                               std::vector<RoutingDecision>* routing_out = nullptr) {
  Tape tape(false);
  ForwardResult r = forward(tape, ps, cfg, z_t, n, t, cond, ids, policy);
  if (routing_out) *routing_out = r.routing;
  Tensor v = r.velocity.value().reshaped({n, cfg.L, cfg.d_latent});
  v.check_finite("model output");
  return v;
}

}  // namespace moc
