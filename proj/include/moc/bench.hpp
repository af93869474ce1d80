#pragma once

// Global-attention cost accounting and wall-clock phase breakdown of MoC
// attention against a dense all-to-all baseline over the same tokens.

#include <chrono>
#include <functional>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "moc/local_block.hpp"
#include "moc/moc_attention.hpp"
#include "moc/router.hpp"

namespace moc {

struct BenchPoint {
  std::size_t N = 4, L = 256, k = 1, sigma = 8, D = 64, H = 4;
};

// Multiply-adds counted as 2 FLOPs.
//   dense attention      = 2 * (N L)^2 * D * 2          (scores + weighted sum)
//   moc attention        = 2 * N (L + Np + 1) * L_global * D * 2
//   moc routing          = 2 * N^2 * D                   (anchor dot products, all heads)
//                        + 2 * 2 * N * D^2               (router query/key projections)
struct FlopEstimate {
  std::size_t moc_kv = 0;
  std::size_t dense_kv = 0;
  double moc_attention = 0.0;
  double moc_routing = 0.0;
  double dense = 0.0;

  double moc_total() const { return moc_attention + moc_routing; }
  double score_ratio() const { return moc_attention / dense; }
};

inline FlopEstimate flop_estimate(const BenchPoint& p) {
  require(p.N >= 1 && p.L >= 1 && p.D >= 1 && p.H >= 1, "flop_estimate: invalid configuration");
  const double N = static_cast<double>(p.N), L = static_cast<double>(p.L), D = static_cast<double>(p.D);
  FlopEstimate f;
  f.moc_kv = context_length(p.N, p.L, p.k, p.sigma);
  f.dense_kv = p.N * p.L;
  const double q = L + static_cast<double>(compressed_count(p.L, p.sigma)) + 1.0;
  f.dense = 2.0 * (N * L) * (N * L) * D * 2.0;
  f.moc_attention = 2.0 * N * q * static_cast<double>(f.moc_kv) * D * 2.0;
  f.moc_routing = 2.0 * N * N * D + 2.0 * 2.0 * N * D * D;
  return f;
}

struct PhaseStats {
  double median_ms = 0.0;
  double iqr_ms = 0.0;
};

inline PhaseStats summarize(std::vector<double> ms) {
  require(!ms.empty(), "no timings");
  std::sort(ms.begin(), ms.end());
  auto q = [&](double f) {
    const double pos = f * static_cast<double>(ms.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, ms.size() - 1);
    return ms[lo] + (pos - static_cast<double>(lo)) * (ms[hi] - ms[lo]);
  };
  return {q(0.5), q(0.75) - q(0.25)};
}

struct BenchRow {
  std::string method;
  BenchPoint point;
  std::size_t kv_length = 0;
  std::size_t kv_expected = 0;
  double flops_global_block = 0.0;
  PhaseStats local, routing, global, total;
  std::size_t repeats = 0;
  bool timer_warning = false;
};

struct BenchReport {
  std::vector<BenchRow> rows;

  const BenchRow* find(const std::string& method, std::size_t N) const {
    for (const auto& r : rows)
      if (r.method == method && r.point.N == N) return &r;
    return nullptr;
  }

  // Median global-attention wall time, moc over dense, per grid point.
  std::vector<std::pair<std::size_t, double>> global_ratios() const {
    std::vector<std::pair<std::size_t, double>> out;
    for (const auto& r : rows) {
      if (r.method != "moc") continue;
      for (const auto& d : rows)
        if (d.method == "dense" && d.point.N == r.point.N && d.point.L == r.point.L && d.point.D == r.point.D &&
            d.point.H == r.point.H)
          out.emplace_back(r.point.N, r.global.median_ms / d.global.median_ms);
    }
    return out;
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "method,N,L,k,sigma,D,H,kv_length,flops_global_block,wall_ms_local,wall_ms_routing,wall_ms_global,"
          "wall_ms_total,repeats,dispersion,timer_warning\n";
    os << std::setprecision(10);
    for (const auto& r : rows)
      os << r.method << ',' << r.point.N << ',' << r.point.L << ',' << r.point.k << ',' << r.point.sigma << ','
         << r.point.D << ',' << r.point.H << ',' << r.kv_length << ',' << r.flops_global_block << ','
         << r.local.median_ms << ',' << r.routing.median_ms << ',' << r.global.median_ms << ','
         << r.total.median_ms << ',' << r.repeats << ',' << r.global.iqr_ms << ',' << (r.timer_warning ? 1 : 0)
         << '\n';
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) {
      auto phase = [](const PhaseStats& p) { return nlohmann::json{{"median_ms", p.median_ms}, {"iqr_ms", p.iqr_ms}}; };
      j.push_back({{"method", r.method},
                   {"N", r.point.N},
                   {"L", r.point.L},
                   {"k", r.point.k},
                   {"sigma", r.point.sigma},
                   {"D", r.point.D},
                   {"H", r.point.H},
                   {"kv_length", r.kv_length},
                   {"flops_global_block", r.flops_global_block},
                   {"local", phase(r.local)},
                   {"routing", phase(r.routing)},
                   {"global", phase(r.global)},
                   {"total", phase(r.total)},
                   {"repeats", r.repeats},
                   {"timer_warning", r.timer_warning}});
    }
    nlohmann::json ratios = nlohmann::json::array();
    for (const auto& [n, ratio] : global_ratios()) ratios.push_back({{"N", n}, {"moc_over_dense_global", ratio}});
    return {{"rows", j}, {"global_ratios", ratios}};
  }

  // Two columns, N and the moc/dense global-attention ratio.
  std::string to_gnuplot() const {
    std::ostringstream os;
    os << "# N moc_over_dense_global\n" << std::setprecision(8);
    for (const auto& [n, ratio] : global_ratios()) os << n << ' ' << ratio << '\n';
    return os.str();
  }
};

// Grid file: one "N,L,k,sigma,D,H" per line; k may be "auto" (25% of N).
// Blank lines, '#' comments and a non-numeric header line are skipped.
inline std::vector<BenchPoint> parse_grid(std::istream& is) {
  std::vector<BenchPoint> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      cell.erase(0, cell.find_first_not_of(" \t\r"));
      cell.erase(cell.find_last_not_of(" \t\r") + 1);
      f.push_back(cell);
    }
    if (!f.empty() && !f[0].empty() && !std::isdigit(static_cast<unsigned char>(f[0][0]))) continue;
    if (f.size() != 6) throw Error("grid line " + std::to_string(lineno) + ": expected N,L,k,sigma,D,H");
    try {
      BenchPoint p;
      p.N = std::stoul(f[0]);
      p.L = std::stoul(f[1]);
      p.k = f[2] == "auto" ? default_k(p.N) : std::stoul(f[2]);
      p.sigma = std::stoul(f[3]);
      p.D = std::stoul(f[4]);
      p.H = std::stoul(f[5]);
      out.push_back(p);
    } catch (const std::logic_error&) {
      throw Error("grid line " + std::to_string(lineno) + ": not a number");
    }
  }
  return out;
}

struct BenchOptions {
  std::size_t repeats = 9;
  std::size_t warmup = 2;
  std::uint64_t seed = 0;
};

namespace detail {

// Round-robin over the phases within each repeat, so slow drift in machine
// state affects every phase alike.
inline std::vector<std::vector<double>> time_interleaved(const std::vector<std::function<void()>>& phases,
                                                         std::size_t repeats, std::size_t warmup) {
  for (std::size_t w = 0; w < warmup; ++w)
    for (const auto& f : phases) f();
  std::vector<std::vector<double>> ms(phases.size());
  for (std::size_t r = 0; r < repeats; ++r)
    for (std::size_t p = 0; p < phases.size(); ++p) {
      const auto t0 = std::chrono::steady_clock::now();
      phases[p]();
      const auto t1 = std::chrono::steady_clock::now();
      ms[p].push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
  return ms;
}

inline bool coarse_timer(const PhaseStats& p) {
  const double tick_ms = 1e3 * static_cast<double>(std::chrono::steady_clock::period::num) /
                         static_cast<double>(std::chrono::steady_clock::period::den);
  return p.median_ms > 0.0 && tick_ms > 0.01 * p.median_ms;
}

}  // namespace detail

// Times, per grid point, the local attention sub-layer (shared by both
// methods), the routing procedure (moc only) and the global attention
// sub-layer, on identical random tokens.
inline BenchReport bench_attention(const std::vector<BenchPoint>& grid, const BenchOptions& opt) {
  require(opt.repeats >= 5, "bench needs at least 5 repeats");
  require(opt.warmup >= 2, "bench needs at least 2 warmup runs");
  BenchReport rep;
  for (const auto& p : grid) {
    require(p.H >= 1 && p.D % p.H == 0, "bench: D must be divisible by H");
    const std::size_t Np = compressed_count(p.L, p.sigma);
    const TokenLayout layout(p.N, p.L, Np);
    Rng rng(derive_seed(opt.seed, {p.N, p.L, p.D}));
    ParamStore ps;
    init_block_params(ps, "local", p.D, rng);
    init_block_params(ps, "global", p.D, rng);
    init_router_params(ps, "global.router", p.D, rng);
    const Tensor h = randn({layout.total(), p.D}, rng);
    const FlopEstimate fe = flop_estimate(p);

    ImportanceMatrix o;
    RoutingDecision routing;
    Tensor scores;
    auto run_local = [&] {
      Tape t(false);
      (void)local_attention(t.constant(h), layout, ps, "local", p.H);
    };
    auto run_routing = [&] {
      Tape t(false);
      Var anchors = gather_rows(t.constant(h), layout.anchor_rows());
      o = to_importance(importance_scores(anchors, ps, "global.router", p.H), p.H);
      routing = route_deterministic(o, p.k);
    };
    run_routing();
    std::size_t measured_kv = 0;
    for (std::size_t i = 0; i < p.N; ++i)
      for (std::size_t hd = 0; hd < p.H; ++hd) {
        const std::size_t sz = assemble_context(i, hd, layout, o, routing).size();
        if (measured_kv && sz != measured_kv) throw Error("bench: context sizes differ across components");
        measured_kv = sz;
      }
    auto run_moc = [&] {
      Tape t(false);
      (void)moc_attention(t.constant(h), t.constant(o.scores), o, routing, layout, ps, "global", p.H);
    };
    auto run_dense = [&] {
      Tape t(false);
      (void)dense_global_attention(t.constant(h), layout, ps, "global", p.H);
    };

    const auto timed = detail::time_interleaved({run_local, run_routing, run_moc, run_dense}, opt.repeats, opt.warmup);
    const auto& local_ms = timed[0];
    const auto& routing_ms = timed[1];
    const auto& moc_ms = timed[2];
    const auto& dense_ms = timed[3];

    auto totals = [&](const std::vector<double>& g, bool with_routing) {
      std::vector<double> t(g.size());
      for (std::size_t r = 0; r < g.size(); ++r) t[r] = local_ms[r] + (with_routing ? routing_ms[r] : 0.0) + g[r];
      return t;
    };

    BenchRow m;
    m.method = "moc";
    m.point = p;
    m.kv_length = measured_kv;
    m.kv_expected = fe.moc_kv;
    m.flops_global_block = fe.moc_total();
    m.local = summarize(local_ms);
    m.routing = summarize(routing_ms);
    m.global = summarize(moc_ms);
    m.total = summarize(totals(moc_ms, true));
    m.repeats = opt.repeats;
    m.timer_warning = detail::coarse_timer(m.routing) || detail::coarse_timer(m.global);

    BenchRow d;
    d.method = "dense";
    d.point = p;
    d.kv_length = layout.all_z_rows().size();
    d.kv_expected = fe.dense_kv;
    d.flops_global_block = fe.dense;
    d.local = m.local;
    d.routing = {};
    d.global = summarize(dense_ms);
    d.total = summarize(totals(dense_ms, false));
    d.repeats = opt.repeats;
    d.timer_warning = detail::coarse_timer(d.global);

    rep.rows.push_back(std::move(m));
    rep.rows.push_back(std::move(d));
  }
  return rep;
}

}  // namespace moc
