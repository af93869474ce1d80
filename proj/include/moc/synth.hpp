#pragma once

// Synthetic compositional scenes: N non-overlapping primitive components
// sampled as point sets, a fixed orthonormal latent codec, farthest point
// sampling and point-set metrics (Chamfer, F-score, pairwise voxel IoU).

#include <array>
#include <bit>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "moc/core.hpp"

namespace moc {

enum class ShapeKind : std::uint8_t { box = 0, ball = 1, ring = 2 };

inline const char* to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::box: return "box";
    case ShapeKind::ball: return "ball";
    case ShapeKind::ring: return "ring";
  }
  return "?";
}

struct SceneSpec {
  std::size_t n = 0;
  std::size_t L = 0;
  std::size_t dim = 3;
  std::size_t grid = 8;
  std::uint64_t seed = 0;
  std::vector<ShapeKind> kinds;
  std::vector<std::vector<double>> centers;
  std::vector<std::vector<double>> extents;  // half sizes per axis
  Tensor layout;                             // grid*grid occupancy, row = y cell, col = x cell
};

struct Scene {
  std::vector<Tensor> components;  // each L x dim
  SceneSpec spec;
};

namespace detail {

inline bool boxes_separated(const std::vector<double>& ca, const std::vector<double>& ea,
                            const std::vector<double>& cb, const std::vector<double>& eb, double gap) {
  for (std::size_t d = 0; d < ca.size(); ++d)
    if (std::abs(ca[d] - cb[d]) >= ea[d] + eb[d] + gap) return true;
  return false;
}

inline void sample_shape(ShapeKind kind, const std::vector<double>& c, const std::vector<double>& e,
                         std::size_t L, Rng& rng, Tensor& out) {
  const std::size_t dim = c.size();
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (std::size_t p = 0; p < L; ++p) {
    std::array<double, 3> x{0, 0, 0};
    switch (kind) {
      case ShapeKind::box: {
        // Uniform on the boundary: pick a face with probability proportional to its area.
        std::array<double, 3> area{};
        double tot = 0.0;
        for (std::size_t d = 0; d < dim; ++d) {
          double a = 1.0;
          for (std::size_t o = 0; o < dim; ++o)
            if (o != d) a *= e[o];
          area[d] = a;
          tot += a;
        }
        double r = uniform01(rng) * tot;
        std::size_t face = dim - 1;
        for (std::size_t d = 0; d < dim; ++d) {
          if (r < area[d]) {
            face = d;
            break;
          }
          r -= area[d];
        }
        for (std::size_t d = 0; d < dim; ++d) x[d] = u(rng) * e[d];
        x[face] = (uniform01(rng) < 0.5 ? -1.0 : 1.0) * e[face];
        break;
      }
      case ShapeKind::ball: {
        if (dim == 3) {
          double nrm = 0.0;
          for (std::size_t d = 0; d < 3; ++d) nrm += (x[d] = nd(rng)) * x[d];
          nrm = std::sqrt(nrm);
          for (std::size_t d = 0; d < 3; ++d) x[d] = x[d] / nrm * e[d];
        } else {
          // Filled disk.
          const double a = 2.0 * M_PI * uniform01(rng), rr = std::sqrt(uniform01(rng));
          x[0] = rr * std::cos(a) * e[0];
          x[1] = rr * std::sin(a) * e[1];
        }
        break;
      }
      case ShapeKind::ring: {
        const double a = 2.0 * M_PI * uniform01(rng);
        x[0] = std::cos(a) * e[0];
        x[1] = std::sin(a) * e[1];
        if (dim == 3) x[2] = 0.15 * u(rng) * e[2];
        break;
      }
    }
    for (std::size_t d = 0; d < dim; ++d) out(p, d) = c[d] + x[d];
  }
}

}  // namespace detail

// Separation between component bounding boxes; exceeds one voxel at resolution 32.
inline constexpr double kComponentGap = 0.07;

inline Tensor layout_grid(const SceneSpec& s) {
  const std::size_t G = s.grid;
  Tensor g({G * G});
  const double cell = 2.0 / static_cast<double>(G);
  for (std::size_t i = 0; i < s.n; ++i) {
    const double x0 = s.centers[i][0] - s.extents[i][0], x1 = s.centers[i][0] + s.extents[i][0];
    const double y0 = s.centers[i][1] - s.extents[i][1], y1 = s.centers[i][1] + s.extents[i][1];
    for (std::size_t gy = 0; gy < G; ++gy)
      for (std::size_t gx = 0; gx < G; ++gx) {
        const double cx0 = -1.0 + cell * static_cast<double>(gx), cy0 = -1.0 + cell * static_cast<double>(gy);
        if (x1 > cx0 && x0 < cx0 + cell && y1 > cy0 && y0 < cy0 + cell) g[gy * G + gx] = 1.0;
      }
  }
  return g;
}

inline Scene gen_scene(std::uint64_t seed, std::size_t n, std::size_t L, std::size_t dim, std::size_t grid = 8) {
  require(n >= 2 && n <= 50, "scene component count must lie in [2, 50]");
  require(dim == 2 || dim == 3, "scene dimension must be 2 or 3");
  require(L >= 1, "components need at least one point");
  Rng rng(seed);
  Scene sc;
  SceneSpec& s = sc.spec;
  s.n = n;
  s.L = L;
  s.dim = dim;
  s.grid = grid;
  s.seed = seed;
  const double per_axis = std::ceil(std::pow(static_cast<double>(n), 1.0 / static_cast<double>(dim)) - 1e-9);
  const double cell = 2.0 / per_axis;
  for (std::size_t i = 0; i < n; ++i) {
    const auto kind = static_cast<ShapeKind>(std::uniform_int_distribution<int>(0, 2)(rng));
    const double r = cell * (0.2 + 0.1 * uniform01(rng));
    std::vector<double> e(dim);
    for (std::size_t d = 0; d < dim; ++d) e[d] = kind == ShapeKind::box ? r * (0.6 + 0.4 * uniform01(rng)) : r;
    bool placed = false;
    std::vector<double> c(dim);
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      for (std::size_t d = 0; d < dim; ++d)
        c[d] = std::uniform_real_distribution<double>(-1.0 + e[d], 1.0 - e[d])(rng);
      placed = true;
      for (std::size_t j = 0; j < i && placed; ++j)
        placed = detail::boxes_separated(c, e, s.centers[j], s.extents[j], kComponentGap);
    }
    if (!placed) throw Error("scene too crowded");
    s.kinds.push_back(kind);
    s.centers.push_back(c);
    s.extents.push_back(e);
  }
  for (std::size_t i = 0; i < n; ++i) {
    Tensor pts = Tensor::matrix(L, dim);
    detail::sample_shape(s.kinds[i], s.centers[i], s.extents[i], L, rng, pts);
    sc.components.push_back(std::move(pts));
  }
  s.layout = layout_grid(s);
  return sc;
}

inline Tensor fuse(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "no point sets to fuse");
  const std::size_t dim = parts.front().cols();
  std::vector<double> all;
  for (const auto& p : parts) {
    require(p.cols() == dim, "point dimension mismatch");
    all.insert(all.end(), p.values().begin(), p.values().end());
  }
  const std::size_t rows = all.size() / dim;
  return Tensor({rows, dim}, std::move(all));
}

struct FpsResult {
  std::vector<std::size_t> indices;
  Tensor points;
};

// Greedy max-min selection; ties go to the smaller index.
inline FpsResult fps(const Tensor& points, std::size_t n, std::size_t start_index = 0) {
  const std::size_t L = points.rows(), dim = points.cols();
  if (n > L) throw Error("fps: cannot select more points than available");
  require(n == 0 || start_index < L, "fps: start index out of range");
  FpsResult r;
  r.points = Tensor::matrix(n, dim);
  if (n == 0) return r;
  std::vector<double> best(L, std::numeric_limits<double>::infinity());
  std::vector<bool> taken(L, false);
  std::size_t cur = start_index;
  for (std::size_t s = 0; s < n; ++s) {
    r.indices.push_back(cur);
    taken[cur] = true;
    for (std::size_t d = 0; d < dim; ++d) r.points(s, d) = points(cur, d);
    std::size_t next = L;
    double far = -1.0;
    for (std::size_t p = 0; p < L; ++p) {
      double d2 = 0.0;
      for (std::size_t d = 0; d < dim; ++d) d2 += (points(p, d) - points(cur, d)) * (points(p, d) - points(cur, d));
      best[p] = std::min(best[p], d2);
      if (!taken[p] && best[p] > far) {
        far = best[p];
        next = p;
      }
    }
    cur = next;
  }
  return r;
}

// Fixed linear lift of (coordinates, per-point tag) into d_latent dimensions
// through a matrix with orthonormal columns; decoding reads the coordinate
// subspace back with its transpose.
class ToyCodec {
 public:
  ToyCodec(std::size_t dim, std::size_t d_latent, std::uint64_t seed, double tag_scale = 0.5)
      : dim_(dim), d_latent_(d_latent), tag_scale_(tag_scale) {
    require(d_latent >= dim + 1, "latent width must exceed the point dimension");
    Rng rng(seed);
    MatRM g(static_cast<Eigen::Index>(d_latent), static_cast<Eigen::Index>(dim + 1));
    std::normal_distribution<double> nd(0.0, 1.0);
    for (Eigen::Index r = 0; r < g.rows(); ++r)
      for (Eigen::Index c = 0; c < g.cols(); ++c) g(r, c) = nd(rng);
    Eigen::HouseholderQR<MatRM> qr(g);
    lift_ = qr.householderQ() * MatRM::Identity(g.rows(), g.cols());
  }

  std::size_t dim() const { return dim_; }
  std::size_t d_latent() const { return d_latent_; }
  const MatRM& lift() const { return lift_; }

  // points: L x dim -> L x d_latent. Tags are drawn from rng, U(-s, s).
  Tensor encode(const Tensor& points, Rng& rng) const {
    require(points.cols() == dim_, "codec: point dimension mismatch");
    const std::size_t L = points.rows();
    MatRM in(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(dim_ + 1));
    for (std::size_t p = 0; p < L; ++p) {
      for (std::size_t d = 0; d < dim_; ++d) in(p, d) = points(p, d);
      in(p, dim_) = tag_scale_ * (2.0 * uniform01(rng) - 1.0);
    }
    return from_matrix(in * lift_.transpose());
  }

  Tensor decode(const Tensor& latents) const {
    require(latents.cols() == d_latent_, "codec: latent width mismatch");
    return from_matrix(latents.mat() * lift_.leftCols(static_cast<Eigen::Index>(dim_)));
  }

  // Operator norm of the decode map, by power iteration on M^T M.
  double decode_norm(std::size_t iters = 200) const {
    const MatRM m = lift_.leftCols(static_cast<Eigen::Index>(dim_)).transpose();  // dim x d_latent
    Eigen::VectorXd v = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(d_latent_));
    double lambda = 0.0;
    for (std::size_t k = 0; k < iters; ++k) {
      Eigen::VectorXd w = m.transpose() * (m * v);
      lambda = w.norm();
      if (lambda == 0.0) return 0.0;
      v = w / lambda;
    }
    return std::sqrt(lambda);
  }

 private:
  std::size_t dim_, d_latent_;
  double tag_scale_;
  MatRM lift_;
};

// N x L x d_latent latents of a scene.
inline Tensor scene_latents(const Scene& sc, const ToyCodec& codec, Rng& rng) {
  const std::size_t n = sc.components.size(), L = sc.spec.L, Dl = codec.d_latent();
  Tensor z({n, L, Dl});
  for (std::size_t i = 0; i < n; ++i) {
    Tensor e = codec.encode(sc.components[i], rng);
    std::copy(e.values().begin(), e.values().end(), z.data() + i * L * Dl);
  }
  return z;
}

inline std::vector<Tensor> decode_scene(const Tensor& z, const ToyCodec& codec) {
  const std::size_t n = z.shape()[0], L = z.shape()[1], Dl = z.shape()[2];
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor zi = Tensor::matrix(L, Dl);
    std::copy_n(z.data() + i * L * Dl, L * Dl, zi.data());
    out.push_back(codec.decode(zi));
  }
  return out;
}

namespace detail {

inline double nearest(const Tensor& a, std::size_t i, const Tensor& b) {
  const std::size_t dim = a.cols();
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < b.rows(); ++j) {
    double d2 = 0.0;
    for (std::size_t d = 0; d < dim; ++d) d2 += (a(i, d) - b(j, d)) * (a(i, d) - b(j, d));
    best = std::min(best, d2);
  }
  return std::sqrt(best);
}

inline void check_pair(const Tensor& a, const Tensor& b) {
  if (a.rows() == 0 || b.rows() == 0) throw Error("point set is empty");
  require(a.cols() == b.cols(), "point dimension mismatch");
}

}  // namespace detail

// 0.5 * (mean_a min_b |a-b| + mean_b min_a |b-a|), Euclidean distances.
inline double chamfer(const Tensor& a, const Tensor& b) {
  detail::check_pair(a, b);
  double sa = 0.0, sb = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) sa += detail::nearest(a, i, b);
  for (std::size_t j = 0; j < b.rows(); ++j) sb += detail::nearest(b, j, a);
  return 0.5 * (sa / static_cast<double>(a.rows()) + sb / static_cast<double>(b.rows()));
}

inline double fscore(const Tensor& a, const Tensor& b, double tau) {
  detail::check_pair(a, b);
  require(tau > 0.0, "fscore threshold must be > 0");
  std::size_t pa = 0, rb = 0;
  for (std::size_t i = 0; i < a.rows(); ++i) pa += detail::nearest(a, i, b) <= tau;
  for (std::size_t j = 0; j < b.rows(); ++j) rb += detail::nearest(b, j, a) <= tau;
  const double p = static_cast<double>(pa) / static_cast<double>(a.rows());
  const double r = static_cast<double>(rb) / static_cast<double>(b.rows());
  return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

// Sorted occupied voxel ids on a resolution^dim grid over [-1, 1]^dim.
inline std::vector<std::uint64_t> voxelize(const Tensor& pts, std::size_t resolution) {
  std::vector<std::uint64_t> ids;
  ids.reserve(pts.rows());
  for (std::size_t p = 0; p < pts.rows(); ++p) {
    std::uint64_t id = 0;
    for (std::size_t d = 0; d < pts.cols(); ++d) {
      const double f = (pts(p, d) + 1.0) * 0.5 * static_cast<double>(resolution);
      const auto v = static_cast<std::int64_t>(std::floor(std::clamp(f, 0.0, static_cast<double>(resolution) - 0.5)));
      id = id * resolution + static_cast<std::uint64_t>(v);
    }
    ids.push_back(id);
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

inline double voxel_iou(const std::vector<std::uint64_t>& a, const std::vector<std::uint64_t>& b) {
  std::vector<std::uint64_t> inter;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
  const double uni = static_cast<double>(a.size() + b.size() - inter.size());
  return uni == 0.0 ? 0.0 : static_cast<double>(inter.size()) / uni;
}

// Mean over unordered component pairs of voxel IoU.
inline double self_iou(const std::vector<Tensor>& comps, std::size_t resolution) {
  require(comps.size() >= 2, "self IoU needs at least two components");
  std::vector<std::vector<std::uint64_t>> vox;
  for (const auto& c : comps) {
    vox.push_back(voxelize(c, resolution));
    if (vox.back().empty()) throw Error("component voxelizes to the empty set");
  }
  double s = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < vox.size(); ++i)
    for (std::size_t j = i + 1; j < vox.size(); ++j, ++pairs) s += voxel_iou(vox[i], vox[j]);
  return s / static_cast<double>(pairs);
}

inline std::size_t default_iou_resolution(std::size_t dim) { return dim == 3 ? 64 : 256; }

// Dataset records, little-endian, concatenated:
//   u32 N, u32 L, u32 dim, u32 G, u64 seed, G*G u8 layout, N*L*dim f32 coordinates
namespace detail {

template <typename T>
void put_le(std::ostream& os, T v) {
  for (std::size_t b = 0; b < sizeof(T); ++b) os.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * b)) & 0xFF));
}

template <typename T>
T get_le(std::istream& is) {
  std::uint64_t v = 0;
  for (std::size_t b = 0; b < sizeof(T); ++b) {
    const int c = is.get();
    if (c == EOF) throw Error("dataset record truncated");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * b);
  }
  return static_cast<T>(v);
}

}  // namespace detail

inline void write_scene(std::ostream& os, const std::vector<Tensor>& comps, const SceneSpec& spec) {
  const std::size_t n = comps.size(), L = comps.front().rows(), dim = comps.front().cols(), G = spec.grid;
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(n));
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(L));
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(dim));
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(G));
  detail::put_le<std::uint64_t>(os, spec.seed);
  require(spec.layout.size() == G * G, "layout grid size mismatch");
  for (double v : spec.layout.values()) os.put(v != 0.0 ? 1 : 0);
  for (const auto& c : comps) {
    require(c.rows() == L && c.cols() == dim, "components must share L and dim");
    for (double v : c.values()) detail::put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
}

inline void write_dataset(const std::filesystem::path& path, const std::vector<Scene>& scenes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write dataset " + path.string());
  for (const auto& s : scenes) write_scene(os, s.components, s.spec);
  if (!os) throw Error("failed writing dataset " + path.string());
}

// Reads records back. Only N, L, dim, grid, seed, layout and points are stored.
inline std::vector<Scene> read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open dataset " + path.string());
  std::vector<Scene> out;
  while (is.peek() != EOF) {
    Scene sc;
    SceneSpec& s = sc.spec;
    s.n = detail::get_le<std::uint32_t>(is);
    s.L = detail::get_le<std::uint32_t>(is);
    s.dim = detail::get_le<std::uint32_t>(is);
    s.grid = detail::get_le<std::uint32_t>(is);
    s.seed = detail::get_le<std::uint64_t>(is);
    s.layout = Tensor({s.grid * s.grid});
    for (auto& v : s.layout.values()) v = detail::get_le<std::uint8_t>(is);
    for (std::size_t i = 0; i < s.n; ++i) {
      Tensor c = Tensor::matrix(s.L, s.dim);
      for (auto& v : c.values()) v = std::bit_cast<float>(detail::get_le<std::uint32_t>(is));
      sc.components.push_back(std::move(c));
    }
    out.push_back(std::move(sc));
  }
  return out;
}

}  // namespace moc
