// moc: command-line front end for training, sampling, evaluation, the
// ablation sweep and the attention benchmark.
//
// Exit codes: 0 ok, 1 usage error, 2 runtime error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "moc/moc.hpp"

namespace fs = std::filesystem;
using namespace moc;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> sets;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON run configuration");
  app->add_option("--seed", c.seed, "Override the run seed");
  app->add_option("--out", c.out, "Output directory");
  app->add_option("--set", c.sets, "Override a config value, e.g. --set train.lr=0.002")->take_all();
}

nlohmann::json resolve(const Common& c) {
  std::optional<fs::path> file;
  if (!c.config.empty()) file = c.config;
  nlohmann::json cfg = load_run_config(file, c.sets);
  if (c.seed) cfg["seed"] = *c.seed;
  if (!c.out.empty()) cfg["out"] = c.out;
  return cfg;
}

std::size_t thread_count() {
  const char* env = std::getenv("MOC_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw UsageError("MOC_THREADS must be a positive integer");
  return static_cast<std::size_t>(v);
}

fs::path out_dir(const nlohmann::json& cfg) {
  const fs::path dir = cfg.at("out").get<std::string>();
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  if (!os) throw Error("cannot write " + p.string());
  os << text;
  if (!os) throw Error("failed writing " + p.string());
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw UsageError("cannot open " + p.string());
  nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
  if (j.is_discarded()) throw UsageError("not valid JSON: " + p.string());
  return j;
}

int cmd_gen_data(const Common& c, std::size_t train_count) {
  const nlohmann::json cfg = resolve(c);
  const DataConfig dc = data_config(cfg);
  const fs::path dir = out_dir(cfg);
  std::vector<Scene> train;
  for (std::size_t i = 0; i < train_count; ++i) train.push_back(train_scene(dc, i));
  write_dataset(dir / "train.bin", train);
  write_dataset(dir / "eval.bin", eval_scenes(dc));
  std::cout << "wrote " << train_count << " training and " << dc.eval_scenes << " evaluation scenes to " << dir
            << "\n";
  return 0;
}

int cmd_train(const Common& c, std::optional<std::size_t> steps) {
  nlohmann::json cfg = resolve(c);
  if (steps) cfg["train"]["steps"] = *steps;
  const fs::path dir = out_dir(cfg);
  write_text(dir / "config.json", cfg.dump(2) + "\n");
  std::ofstream log(dir / "metrics.log");
  if (!log) throw Error("cannot write " + (dir / "metrics.log").string());
  const TrainResult r = train(cfg, &log);
  save_checkpoint(dir / "model.ckpt", r.params, cfg.dump());
  const std::size_t n = r.losses.size();
  std::cout << "trained " << n << " steps; smoothed loss " << smoothed_loss(r.losses, n) << "; checkpoint "
            << (dir / "model.ckpt").string() << "\n";
  return 0;
}

// Config of a run directory, with command-line overrides layered on top.
nlohmann::json run_config(const fs::path& run, const Common& c) {
  nlohmann::json cfg = read_json(run / "config.json");
  for (const auto& s : c.sets) apply_override(cfg, s);
  if (c.seed) cfg["seed"] = *c.seed;
  if (!c.out.empty()) cfg["out"] = c.out;
  return cfg;
}

int cmd_sample(const Common& c, const std::string& run, const std::string& output, bool zero,
               std::optional<std::size_t> steps, std::optional<double> cfg_scale) {
  nlohmann::json cfg = c.config.empty() ? run_config(run, c) : resolve(c);
  if (steps) cfg["flow"]["steps"] = *steps;
  if (cfg_scale) cfg["flow"]["cfg_scale"] = *cfg_scale;
  const ModelConfig mc = model_config(cfg);
  const DataConfig dc = data_config(cfg);
  SampleSettings st = sample_settings(cfg);
  st.threads = thread_count();
  std::optional<Checkpoint> ck;
  if (!zero) {
    ck = load_checkpoint(fs::path(run) / "model.ckpt");
    check_checkpoint_matches(*ck, cfg);
  }
  const auto refs = eval_scenes(dc);
  const auto scenes = sample_scenes(ck ? &ck->params : nullptr, mc, dc, refs, st);
  const fs::path dest = output.empty() ? fs::path(run) / "samples.bin" : fs::path(output);
  if (dest.has_parent_path()) fs::create_directories(dest.parent_path());
  write_dataset(dest, scenes);
  std::cout << "wrote " << scenes.size() << " sampled scenes to " << dest.string() << "\n";
  return 0;
}

int cmd_eval(const Common& c, const std::string& samples, const std::string& reference, const std::string& output) {
  const nlohmann::json cfg = resolve(c);
  const DataConfig dc = data_config(cfg);
  const auto gen = read_dataset(samples);
  const auto ref = reference.empty() ? eval_scenes(dc) : read_dataset(reference);
  const std::size_t dim = gen.empty() ? dc.dim : gen.front().spec.dim;
  const std::size_t res = dc.iou_resolution ? dc.iou_resolution : default_iou_resolution(dim);
  const nlohmann::json j = evaluate(gen, ref, res).to_json();
  std::cout << j.dump() << "\n";
  if (!output.empty()) write_text(output, j.dump(2) + "\n");
  return 0;
}

int cmd_ablate(const Common& c) {
  const nlohmann::json cfg = resolve(c);
  const fs::path dir = out_dir(cfg);
  const auto rows = run_ablation(cfg, &std::cerr);
  const std::string table = ablation_table(rows);
  write_text(dir / "ablation.csv", table);
  std::cout << table;
  return 0;
}

int cmd_bench(const Common& c, const std::string& grid_file, std::size_t repeats, std::size_t warmup) {
  const nlohmann::json cfg = resolve(c);
  std::vector<BenchPoint> grid;
  if (grid_file.empty()) {
    for (std::size_t n : {4, 8, 16, 32}) grid.push_back({n, 256, default_k(n), 8, 64, 4});
  } else {
    std::ifstream is(grid_file);
    if (!is) throw UsageError("cannot open grid " + grid_file);
    grid = parse_grid(is);
    if (grid.empty()) throw UsageError("grid file has no entries: " + grid_file);
  }
  BenchOptions opt;
  opt.repeats = repeats;
  opt.warmup = warmup;
  opt.seed = cfg.at("seed").get<std::uint64_t>();
  if (opt.repeats < 5 || opt.warmup < 2) throw UsageError("bench needs --repeats >= 5 and --warmup >= 2");
  const BenchReport rep = bench_attention(grid, opt);
  const fs::path dir = out_dir(cfg);
  write_text(dir / "bench.csv", rep.to_csv());
  write_text(dir / "bench.json", rep.to_json().dump(2) + "\n");
  write_text(dir / "bench.dat", rep.to_gnuplot());
  std::cout << rep.to_csv();
  for (const auto& r : rep.rows)
    if (r.timer_warning) std::cerr << "warning: timer resolution is coarse for " << r.method << " N=" << r.point.N << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture-of-Components attention: toy compositional flow model"};
  app.require_subcommand(1);

  Common common;
  std::size_t train_count = 64;
  std::optional<std::size_t> steps, sample_steps;
  std::optional<double> cfg_scale;
  std::string run = ".", output, samples, reference, grid;
  bool zero = false;
  std::size_t repeats = 9, warmup = 2;

  auto* gen = app.add_subcommand("gen-data", "Write synthetic training and evaluation scenes");
  add_common(gen, common);
  gen->add_option("--count", train_count, "Number of training scenes to write");

  auto* tr = app.add_subcommand("train", "Train a model and write a run directory");
  add_common(tr, common);
  tr->add_option("--steps", steps, "Optimizer steps (overrides train.steps)");

  auto* sm = app.add_subcommand("sample", "Sample one scene per evaluation layout from a trained run");
  add_common(sm, common);
  sm->add_option("--run", run, "Run directory holding config.json and model.ckpt");
  sm->add_option("--output", output, "Output dataset file (default <run>/samples.bin)");
  sm->add_option("--steps", sample_steps, "Euler steps (overrides flow.steps)");
  sm->add_option("--cfg-scale", cfg_scale, "Guidance scale (overrides flow.cfg_scale)");
  sm->add_flag("--zero-velocity", zero, "Sample with the untrained zero-velocity model");

  auto* ev = app.add_subcommand("eval", "Chamfer, F-score and self-IoU of sampled scenes");
  add_common(ev, common);
  ev->add_option("--samples", samples, "Dataset file of generated scenes")->required();
  ev->add_option("--reference", reference, "Dataset file of reference scenes (default: evaluation split)");
  ev->add_option("--output", output, "Write metrics JSON here");

  auto* ab = app.add_subcommand("ablate", "Train and evaluate the A-G ablation configurations");
  add_common(ab, common);

  auto* be = app.add_subcommand("bench", "Time local, routing and global attention against the dense baseline");
  add_common(be, common);
  be->add_option("--grid", grid, "Grid file with N,L,k,sigma,D,H lines (k may be auto)");
  be->add_option("--repeats", repeats, "Timed repeats per phase");
  be->add_option("--warmup", warmup, "Untimed warmup runs per phase");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    thread_count();
    if (gen->parsed()) return cmd_gen_data(common, train_count);
    if (tr->parsed()) return cmd_train(common, steps);
    if (sm->parsed()) return cmd_sample(common, run, output, zero, sample_steps, cfg_scale);
    if (ev->parsed()) return cmd_eval(common, samples, reference, output);
    if (ab->parsed()) return cmd_ablate(common);
    if (be->parsed()) return cmd_bench(common, grid, repeats, warmup);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
