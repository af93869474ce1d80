#pragma once

// End-to-end pipelines over a run configuration: training on synthetic
// scenes, guided sampling, point-set evaluation and the A-G ablation sweep.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "moc/checkpoint.hpp"
#include "moc/config.hpp"
#include "moc/flow.hpp"
#include "moc/model.hpp"
#include "moc/optim.hpp"
#include "moc/synth.hpp"

namespace moc {

struct DataConfig {
  std::size_t n = 4, L = 32, dim = 3, grid = 8;
  std::size_t train_scenes = 0;  // 0: a fresh scene every step
  std::uint64_t train_seed = 1000;
  std::size_t eval_scenes = 16;
  std::uint64_t eval_seed = 900000;
  std::uint64_t codec_seed = 7;
  std::size_t iou_resolution = 0;  // 0: default for dim

  std::size_t resolution() const { return iou_resolution ? iou_resolution : default_iou_resolution(dim); }
};

inline DataConfig data_config(const nlohmann::json& c) {
  DataConfig d;
  const auto& j = c.at("data");
  d.n = j.at("n_components").get<std::size_t>();
  d.L = j.at("points").get<std::size_t>();
  d.dim = j.at("dim").get<std::size_t>();
  d.grid = c.at("/model/cond_grid"_json_pointer).get<std::size_t>();
  d.train_scenes = j.at("train_scenes").get<std::size_t>();
  d.train_seed = j.at("train_seed").get<std::uint64_t>();
  d.eval_scenes = j.at("eval_scenes").get<std::size_t>();
  d.eval_seed = j.at("eval_seed").get<std::uint64_t>();
  d.codec_seed = j.at("codec_seed").get<std::uint64_t>();
  d.iou_resolution = j.at("iou_resolution").get<std::size_t>();
  if (d.dim != 2 && d.dim != 3) throw UsageError("data.dim must be 2 or 3");
  if (d.n < 2 || d.n > 50) throw UsageError("data.n_components must lie in [2, 50]");
  return d;
}

inline Scene train_scene(const DataConfig& d, std::size_t index) {
  const std::size_t k = d.train_scenes ? index % d.train_scenes : index;
  return gen_scene(derive_seed(d.train_seed, {k}), d.n, d.L, d.dim, d.grid);
}

inline std::vector<Scene> eval_scenes(const DataConfig& d) {
  std::vector<Scene> out;
  for (std::size_t i = 0; i < d.eval_scenes; ++i)
    out.push_back(gen_scene(derive_seed(d.eval_seed, {i}), d.n, d.L, d.dim, d.grid));
  return out;
}

struct TrainOptions {
  std::size_t steps = 2000;
  std::size_t batch = 1;
  double clip = 1.0;
  double p_drop = 0.1;
  std::size_t log_every = 1;
  AdamW::Options adam;
};

inline TrainOptions train_options(const nlohmann::json& c) {
  TrainOptions t;
  const auto& j = c.at("train");
  t.steps = j.at("steps").get<std::size_t>();
  t.batch = j.at("batch").get<std::size_t>();
  t.clip = j.at("clip").get<double>();
  t.log_every = j.at("log_every").get<std::size_t>();
  t.adam.lr = j.at("lr").get<double>();
  t.adam.weight_decay = j.at("weight_decay").get<double>();
  t.p_drop = c.at("/flow/p_drop"_json_pointer).get<double>();
  if (t.batch < 1) throw UsageError("train.batch must be >= 1");
  if (t.log_every < 1) throw UsageError("train.log_every must be >= 1");
  if (!(t.p_drop >= 0.0 && t.p_drop <= 1.0)) throw UsageError("flow.p_drop must lie in [0, 1]");
  return t;
}

struct TrainResult {
  ParamStore params;
  std::vector<double> losses;  // one per optimizer step
};

// Mean of the last `window` losses ending at 1-based step `step`.
inline double smoothed_loss(const std::vector<double>& losses, std::size_t step, std::size_t window = 50) {
  require(step >= 1 && step <= losses.size(), "smoothed_loss: step out of range");
  const std::size_t lo = step > window ? step - window : 0;
  double s = 0.0;
  for (std::size_t i = lo; i < step; ++i) s += losses[i];
  return s / static_cast<double>(step - lo);
}

// Stream layout: parameters from derive_seed(seed, {1}); all per-step
// randomness (latent tags, t, noise, CFG dropout, IDs, routing) from one
// generator seeded with derive_seed(seed, {2}).
inline TrainResult train(const nlohmann::json& c, std::ostream* log = nullptr) {
  const ModelConfig mc = model_config(c);
  const DataConfig dc = data_config(c);
  const TrainOptions to = train_options(c);
  const std::uint64_t seed = c.at("seed").get<std::uint64_t>();
  if (dc.n > mc.codebook_size) throw UsageError("data.n_components exceeds model.codebook_size");

  TrainResult res;
  res.params = init_model_params(mc, derive_seed(seed, {1}));
  ParamStore& ps = res.params;
  AdamW opt(to.adam);
  const ToyCodec codec(dc.dim, mc.d_latent, dc.codec_seed);
  Rng rng(derive_seed(seed, {2}));
  const double inv_batch = 1.0 / static_cast<double>(to.batch);

  for (std::size_t step = 1; step <= to.steps; ++step) {
    ps.zero_grad();
    double loss_value = 0.0;
    for (std::size_t b = 0; b < to.batch; ++b) {
      const Scene sc = train_scene(dc, (step - 1) * to.batch + b);
      const Tensor z0 = scene_latents(sc, codec, rng);
      const FlowBatch fb = make_flow_batch(z0, rng);
      const Condition cond = cfg_dropout(Condition{sc.spec.layout, false}, to.p_drop, rng);
      const auto ids = assign_id_embeddings(dc.n, rng, mc.codebook_size);
      const std::uint64_t route_seed = rng();
      Tape tape(true);
      ForwardResult r = forward(tape, ps, mc, fb.zt, dc.n, fb.t, cond, ids, RoutingPolicy::stochastic(route_seed));
      Var loss = scale(fm_loss(r.velocity, tape.constant(fb.target.reshaped({dc.n * dc.L, mc.d_latent}))), inv_batch);
      tape.backward(loss);
      tape.accumulate_grads(ps);
      loss_value += loss.value()[0];
    }
    const double gnorm = clip_grad_norm(ps, to.clip);
    opt.step(ps);
    res.losses.push_back(loss_value);
    if (log && (step % to.log_every == 0 || step == to.steps)) {
      char line[128];
      std::snprintf(line, sizeof line, "step=%zu loss=%.9g grad_norm=%.6g\n", step, loss_value, gnorm);
      *log << line;
      log->flush();
    }
  }
  return res;
}

struct SampleSettings {
  std::size_t steps = 50;
  double cfg_scale = 4.0;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

// Runs fn(0..n-1) on up to `threads` workers with a static interleaved
// split; every index writes only its own output, so results do not depend
// on the thread count.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline SampleSettings sample_settings(const nlohmann::json& c) {
  SampleSettings s;
  s.steps = c.at("/flow/steps"_json_pointer).get<std::size_t>();
  s.cfg_scale = c.at("/flow/cfg_scale"_json_pointer).get<double>();
  s.seed = c.at("seed").get<std::uint64_t>();
  if (s.steps < 1) throw UsageError("flow.steps must be >= 1");
  return s;
}

// One generated scene per reference scene, conditioned on its layout grid.
// A null `ps` samples with the zero velocity field (the untrained model).
inline std::vector<Scene> sample_scenes(const ParamStore* ps, const ModelConfig& mc, const DataConfig& dc,
                                        const std::vector<Scene>& refs, const SampleSettings& st) {
  const ToyCodec codec(dc.dim, mc.d_latent, dc.codec_seed);
  std::vector<Scene> out(refs.size());
  parallel_for(refs.size(), st.threads, [&](std::size_t s) {
    const Scene& ref = refs[s];
    const std::size_t n = ref.components.size();
    Rng rng(derive_seed(st.seed, {3, s}));
    const auto ids = assign_id_embeddings(n, rng, mc.codebook_size);
    VelocityModel vm;
    if (ps) {
      vm = model_velocity(*ps, mc, n, Condition{ref.spec.layout, false}, ids);
    } else {
      vm = [](const Tensor& z, double, bool, std::vector<RoutingDecision>&) { return Tensor(z.shape()); };
    }
    const Tensor z = sample(vm, {n, mc.L, mc.d_latent}, SampleOptions{st.steps, st.cfg_scale}, rng);
    out[s].spec = ref.spec;
    out[s].components = decode_scene(z, codec);
  });
  return out;
}

struct EvalMetrics {
  double chamfer = 0.0;
  double f_010 = 0.0;
  double f_005 = 0.0;
  double self_iou = 0.0;
  std::size_t scenes = 0;

  nlohmann::json to_json() const {
    return {{"chamfer", chamfer}, {"fscore@0.1", f_010}, {"fscore@0.05", f_005}, {"self_iou", self_iou},
            {"scenes", scenes}};
  }
};

// Scene-averaged metrics on fused point sets; self-IoU is measured on the
// generated components only.
inline EvalMetrics evaluate(const std::vector<Scene>& generated, const std::vector<Scene>& reference,
                            std::size_t iou_resolution) {
  require(!generated.empty(), "nothing to evaluate");
  if (generated.size() != reference.size()) throw Error("generated and reference scene counts differ");
  EvalMetrics m;
  for (std::size_t s = 0; s < generated.size(); ++s) {
    const Tensor a = fuse(generated[s].components), b = fuse(reference[s].components);
    m.chamfer += chamfer(a, b);
    m.f_010 += fscore(a, b, 0.1);
    m.f_005 += fscore(a, b, 0.05);
    m.self_iou += generated[s].components.size() >= 2 ? self_iou(generated[s].components, iou_resolution) : 0.0;
  }
  const double k = static_cast<double>(generated.size());
  m.chamfer /= k;
  m.f_010 /= k;
  m.f_005 /= k;
  m.self_iou /= k;
  m.scenes = generated.size();
  return m;
}

// Table 3 rows. Each label switches one mechanism off relative to G.
struct AblationSpec {
  std::string label;
  std::string description;
  std::vector<std::string> overrides;
};

inline std::vector<AblationSpec> ablation_specs() {
  return {
      {"A", "no routing (compressed context only)", {"moc.use_routing=false"}},
      {"B", "no compressed context", {"moc.use_compressed_context=false"}},
      {"C", "gates on values", {"moc.gate_target=value"}},
      {"D", "softmax router activation", {"router.activation=softmax"}},
      {"E", "no load balancing", {"router.load_balance=false"}},
      {"F", "single-head routing", {"router.multi_head=false"}},
      {"G", "full method", {}},
  };
}

struct AblationRow {
  std::string label;
  std::string description;
  double final_loss = 0.0;  // smoothed over the last 50 steps
  EvalMetrics metrics;
};

inline std::vector<AblationRow> run_ablation(const nlohmann::json& base, std::ostream* progress = nullptr) {
  std::vector<AblationRow> rows;
  for (const auto& spec : ablation_specs()) {
    nlohmann::json c = base;
    for (const auto& o : spec.overrides) apply_override(c, o);
    const ModelConfig mc = model_config(c);
    const DataConfig dc = data_config(c);
    TrainResult tr = train(c);
    const auto refs = eval_scenes(dc);
    const auto gen = sample_scenes(&tr.params, mc, dc, refs, sample_settings(c));
    AblationRow row{spec.label, spec.description, 0.0, evaluate(gen, refs, dc.resolution())};
    row.final_loss = tr.losses.empty() ? 0.0 : smoothed_loss(tr.losses, tr.losses.size());
    if (progress) *progress << "ablation " << row.label << " done: loss=" << row.final_loss
                            << " chamfer=" << row.metrics.chamfer << "\n";
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "label,description,final_loss,chamfer,fscore@0.1,fscore@0.05,self_iou\n" << std::setprecision(6);
  for (const auto& r : rows)
    os << r.label << ",\"" << r.description << "\"," << r.final_loss << ',' << r.metrics.chamfer << ','
       << r.metrics.f_010 << ',' << r.metrics.f_005 << ',' << r.metrics.self_iou << '\n';
  return os.str();
}

// The part of a run config a checkpoint must agree with to be loadable.
inline nlohmann::json architecture_of(const nlohmann::json& c) {
  return {{"model", c.at("model")},
          {"moc", c.at("moc")},
          {"router", c.at("router")},
          {"points", c.at("/data/points"_json_pointer)}};
}

inline void check_checkpoint_matches(const Checkpoint& ck, const nlohmann::json& c) {
  const nlohmann::json stored = nlohmann::json::parse(ck.config_json, nullptr, false);
  if (stored.is_discarded() || !stored.is_object()) throw Error("checkpoint config is not valid JSON");
  if (architecture_of(stored) != architecture_of(c))
    throw Error("checkpoint/config mismatch: model, moc, router or data.points differ");
}

}  // namespace moc
