#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "moc/synth.hpp"

using namespace moc;

namespace {

Tensor pts(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t dim = rows.begin()->size();
  Tensor t = Tensor::matrix(rows.size(), dim);
  std::size_t r = 0;
  for (const auto& row : rows) {
    std::size_t c = 0;
    for (double v : row) t(r, c++) = v;
    ++r;
  }
  return t;
}

double brute_chamfer(const Tensor& a, const Tensor& b) {
  auto dir = [](const Tensor& x, const Tensor& y) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      double best = INFINITY;
      for (std::size_t j = 0; j < y.rows(); ++j) {
        double d = 0.0;
        for (std::size_t k = 0; k < x.cols(); ++k) d += (x(i, k) - y(j, k)) * (x(i, k) - y(j, k));
        best = std::min(best, std::sqrt(d));
      }
      s += best;
    }
    return s / static_cast<double>(x.rows());
  };
  return 0.5 * (dir(a, b) + dir(b, a));
}

}  // namespace

TEST(Scene, DeterministicShapesAndBounds) {
  for (std::size_t dim : {2, 3}) {
    const Scene a = gen_scene(5, 6, 32, dim), b = gen_scene(5, 6, 32, dim);
    ASSERT_EQ(a.components.size(), 6u);
    for (std::size_t i = 0; i < 6; ++i) {
      EXPECT_EQ(a.components[i].storage(), b.components[i].storage());
      EXPECT_EQ(a.components[i].rows(), 32u);
      EXPECT_EQ(a.components[i].cols(), dim);
      for (double v : a.components[i].values()) {
        EXPECT_GE(v, -1.0);
        EXPECT_LE(v, 1.0);
      }
    }
    EXPECT_EQ(a.spec.layout.storage(), b.spec.layout.storage());
    EXPECT_NE(gen_scene(6, 6, 32, dim).components[0].storage(), a.components[0].storage());
  }
}

TEST(Scene, ComponentsAreDisjoint) {
  for (std::uint64_t seed = 0; seed < 20; ++seed)
    for (std::size_t dim : {2, 3}) {
      const Scene s = gen_scene(seed, 2 + seed % 7, 64, dim);
      EXPECT_EQ(self_iou(s.components, 32), 0.0) << seed << " " << dim;
    }
}

TEST(Scene, LayoutGridIsConsistentWithCenters) {
  const Scene s = gen_scene(3, 4, 16, 2);
  const std::size_t G = s.spec.grid;
  ASSERT_EQ(s.spec.layout.size(), G * G);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto cell = [&](double v) {
      return static_cast<std::size_t>(std::clamp((v + 1.0) / 2.0 * static_cast<double>(G), 0.0, G - 0.5));
    };
    EXPECT_EQ(s.spec.layout[cell(s.spec.centers[i][1]) * G + cell(s.spec.centers[i][0])], 1.0);
  }
  double occupied = 0.0;
  for (double v : s.spec.layout.values()) occupied += v;
  EXPECT_LT(occupied, static_cast<double>(G * G));
}

TEST(Scene, Errors) {
  EXPECT_THROW(gen_scene(1, 1, 8, 2), Error);
  EXPECT_THROW(gen_scene(1, 51, 8, 2), Error);
  // Rejection placement gives up on this seed at the component limit.
  try {
    gen_scene(88, 50, 8, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "scene too crowded");
  }
}

TEST(Fps, Examples) {
  const Tensor sq = pts({{0, 0}, {0, 1}, {1, 0}, {1, 1}});
  const FpsResult r = fps(sq, 2, 0);
  EXPECT_EQ(r.indices, (std::vector<std::size_t>{0, 3}));
  EXPECT_EQ(r.points(1, 0), 1.0);
  EXPECT_EQ(r.points(1, 1), 1.0);
  const FpsResult all = fps(sq, 4, 2);
  EXPECT_EQ(all.indices.front(), 2u);
  EXPECT_EQ(std::set<std::size_t>(all.indices.begin(), all.indices.end()).size(), 4u);
  EXPECT_THROW(fps(sq, 5, 0), Error);
}

TEST(Fps, DuplicatesAreNotReselected) {
  Rng rng(1);
  const Tensor base = rand_uniform({4, 3}, rng, -1.0, 1.0);
  Tensor dup = Tensor::matrix(8, 3);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 3; ++c) dup(r, c) = base(r % 4, c);
  const FpsResult f = fps(dup, 4, 0);
  std::set<std::vector<double>> seen;
  for (std::size_t r = 0; r < 4; ++r) seen.insert({f.points(r, 0), f.points(r, 1), f.points(r, 2)});
  EXPECT_EQ(seen.size(), 4u);
}

TEST(Fps, MaxMinProperty) {
  Rng rng(2);
  const Tensor p = rand_uniform({30, 2}, rng, -1.0, 1.0);
  const FpsResult f = fps(p, 10, 5);
  for (std::size_t s = 1; s < 10; ++s) {
    auto mindist = [&](std::size_t q) {
      double best = INFINITY;
      for (std::size_t t = 0; t < s; ++t) {
        const std::size_t a = f.indices[t];
        best = std::min(best, std::hypot(p(q, 0) - p(a, 0), p(q, 1) - p(a, 1)));
      }
      return best;
    };
    const double chosen = mindist(f.indices[s]);
    for (std::size_t q = 0; q < 30; ++q) EXPECT_LE(mindist(q), chosen + 1e-15);
  }
}

TEST(Metrics, ChamferExamples) {
  const Tensor a = pts({{0, 0}}), b = pts({{1, 0}});
  EXPECT_EQ(chamfer(a, b), 1.0);
  EXPECT_EQ(chamfer(a, a), 0.0);
  EXPECT_THROW(chamfer(Tensor::matrix(0, 2), a), Error);
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = randn({5, 3}, rng), y = randn({5, 3}, rng);
    EXPECT_NEAR(chamfer(x, y), brute_chamfer(x, y), 1e-15);
    EXPECT_EQ(chamfer(x, y), chamfer(y, x));
  }
}

TEST(Metrics, FscoreExamples) {
  EXPECT_EQ(fscore(pts({{0, 0}}), pts({{0, 0.2}}), 0.1), 0.0);
  EXPECT_EQ(fscore(pts({{0, 0}, {0, 0.05}}), pts({{0, 0}}), 0.1), 1.0);
  Rng rng(4);
  const Tensor x = randn({20, 2}, rng), y = randn({15, 2}, rng);
  EXPECT_EQ(fscore(x, x, 0.05), 1.0);
  EXPECT_DOUBLE_EQ(fscore(x, y, 0.3), fscore(y, x, 0.3));
  EXPECT_THROW(fscore(x, y, 0.0), Error);
}

TEST(Metrics, SelfIou) {
  // Voxel ids {1,2} and {2,3} on a 1D-like slice of a 4x4 grid.
  const double h = 0.25;  // centre offset inside a 0.5-wide cell
  auto at = [&](std::size_t cx) { return -1.0 + 0.5 * static_cast<double>(cx) + h; };
  const Tensor a = pts({{-1.0 + h, at(1)}, {-1.0 + h, at(2)}});
  const Tensor b = pts({{-1.0 + h, at(2)}, {-1.0 + h, at(3)}});
  EXPECT_EQ(voxelize(a, 4), (std::vector<std::uint64_t>{1, 2}));
  EXPECT_DOUBLE_EQ(self_iou({a, b}, 4), 1.0 / 3.0);
  EXPECT_EQ(self_iou({a, a}, 4), 1.0);
  EXPECT_DOUBLE_EQ(self_iou({a, b, a}, 4), self_iou({b, a, a}, 4));
  EXPECT_THROW(self_iou({a}, 4), Error);
  EXPECT_EQ(default_iou_resolution(3), 64u);
  EXPECT_EQ(default_iou_resolution(2), 256u);
}

TEST(Codec, RoundTripLocalityAndNormBound) {
  const ToyCodec codec(3, 8, 7);
  Rng rng(5);
  const Tensor p = rand_uniform({40, 3}, rng, -1.0, 1.0);
  const Tensor z = codec.encode(p, rng);
  EXPECT_EQ(z.cols(), 8u);
  EXPECT_LT(max_abs_diff(codec.decode(z), p), 1e-10);
  // Token i depends only on point i (tags aside): change one point, only its row moves.
  Tensor q = p;
  q(7, 1) += 0.3;
  Rng r1(6), r2(6);
  const Tensor za = codec.encode(p, r1), zb = codec.encode(q, r2);
  for (std::size_t r = 0; r < 40; ++r)
    for (std::size_t c = 0; c < 8; ++c) {
      if (r != 7) {
        EXPECT_EQ(za(r, c), zb(r, c));
      }
    }
  EXPECT_GT(max_abs_diff(za, zb), 0.1);
  const double norm = codec.decode_norm();
  EXPECT_NEAR(norm, 1.0, 1e-9);  // orthonormal columns
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor d = randn({40, 8}, rng, 0.01);
    Tensor zp = z;
    for (std::size_t i = 0; i < z.size(); ++i) zp[i] += d[i];
    const Tensor dp = codec.decode(zp), d0 = codec.decode(z);
    for (std::size_t r = 0; r < 40; ++r) {
      double dn = 0.0, cn = 0.0;
      for (std::size_t c = 0; c < 8; ++c) dn += d(r, c) * d(r, c);
      for (std::size_t c = 0; c < 3; ++c) cn += (dp(r, c) - d0(r, c)) * (dp(r, c) - d0(r, c));
      EXPECT_LE(std::sqrt(cn), norm * std::sqrt(dn) + 1e-12);
    }
  }
  EXPECT_THROW(ToyCodec(3, 3, 1), Error);
}

TEST(Codec, SceneLatentsRoundTrip) {
  const ToyCodec codec(2, 8, 9);
  const Scene s = gen_scene(10, 4, 16, 2);
  Rng rng(11);
  const Tensor z = scene_latents(s, codec, rng);
  EXPECT_EQ(z.shape(), (std::vector<std::size_t>{4, 16, 8}));
  const auto back = decode_scene(z, codec);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_LT(max_abs_diff(back[i], s.components[i]), 1e-10);
}

TEST(Dataset, WriteReadRoundTrip) {
  std::vector<Scene> scenes = {gen_scene(1, 3, 8, 2), gen_scene(2, 5, 8, 3)};
  const auto path = std::filesystem::temp_directory_path() / "moc_test_dataset.bin";
  write_dataset(path, scenes);
  EXPECT_EQ(std::filesystem::file_size(path),
            (24 + 64 + 3 * 8 * 2 * 4) + (24 + 64 + 5 * 8 * 3 * 4));
  const auto back = read_dataset(path);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t s = 0; s < 2; ++s) {
    EXPECT_EQ(back[s].spec.seed, scenes[s].spec.seed);
    EXPECT_EQ(back[s].spec.layout.storage(), scenes[s].spec.layout.storage());
    for (std::size_t i = 0; i < scenes[s].components.size(); ++i)
      for (std::size_t k = 0; k < scenes[s].components[i].size(); ++k)
        EXPECT_EQ(back[s].components[i][k], static_cast<double>(static_cast<float>(scenes[s].components[i][k])));
  }
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  EXPECT_THROW(read_dataset(path), Error);
  std::filesystem::remove(path);
}

TEST(Fuse, ConcatenatesParts) {
  const Tensor f = fuse({pts({{1, 2}}), pts({{3, 4}, {5, 6}})});
  EXPECT_EQ(f.rows(), 3u);
  EXPECT_EQ(f(2, 1), 6.0);
  EXPECT_THROW(fuse({}), Error);
}
