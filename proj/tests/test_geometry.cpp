#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "doctest.h"
#include "pointrnn/errors.hpp"
#include "pointrnn/geometry.hpp"
#include "support.hpp"

using namespace pointrnn;
using testing::random_cloud;
using testing::sq_dist;

namespace {

// Full sort per query, ties to the lower index.
std::vector<std::size_t> knn_oracle(const Tensor& q, std::size_t i, const Tensor& ref,
                                    std::size_t k) {
  std::vector<std::size_t> order(ref.dim(0));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return sq_dist(q, i, ref, a) < sq_dist(q, i, ref, b);
  });
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < k; ++j) out.push_back(order[j < order.size() ? j : 0]);
  return out;
}

std::set<std::size_t> radius_oracle(const Tensor& q, std::size_t i, const Tensor& ref, double r) {
  std::set<std::size_t> out;
  for (std::size_t j = 0; j < ref.dim(0); ++j)
    if (sq_dist(q, i, ref, j) <= r * r) out.insert(j);
  return out;
}

// Independent greedy reimplementation: recompute every min-distance from scratch.
std::vector<std::size_t> fps_oracle(const Tensor& c, std::size_t m, std::size_t start) {
  std::vector<std::size_t> chosen{start};
  while (chosen.size() < m) {
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < c.dim(0); ++i) {
      if (std::find(chosen.begin(), chosen.end(), i) != chosen.end()) continue;
      double d = std::numeric_limits<double>::infinity();
      for (std::size_t s : chosen) d = std::min(d, sq_dist(c, i, c, s));
      if (d > best_d) {
        best_d = d;
        best = i;
      }
    }
    chosen.push_back(best);
  }
  return chosen;
}

std::vector<std::size_t> row_of(const NeighborTable& t, std::size_t i) {
  return {t.indices.begin() + static_cast<std::ptrdiff_t>(i * t.k),
          t.indices.begin() + static_cast<std::ptrdiff_t>((i + 1) * t.k)};
}

}  // namespace

TEST_CASE("knn picks nearest with lower-index ties") {
  Tensor q = Tensor::matrix({{1.9, 0, 0}});
  Tensor ref = Tensor::matrix({{0, 0, 0}, {2, 0, 0}, {5, 0, 0}});
  NeighborTable t = knn_query(q, ref, 2);
  CHECK(row_of(t, 0) == std::vector<std::size_t>{1, 0});
  CHECK(t.displacements[0] == doctest::Approx(-0.1));

  NeighborTable self = knn_query(ref, ref, 1);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(self.index(i, 0) == i);
    CHECK(self.displacements[i * 3] == 0.0);
  }

  Tensor tie = Tensor::matrix({{1, 0, 0}, {-1, 0, 0}});
  NeighborTable tt = knn_query(Tensor::matrix({{0, 0, 0}}), tie, 2);
  CHECK(row_of(tt, 0) == std::vector<std::size_t>{0, 1});
}

TEST_CASE("knn with fewer references pads with the nearest") {
  Tensor ref = Tensor::matrix({{0, 0, 0}, {3, 0, 0}});
  NeighborTable t = knn_query(Tensor::matrix({{2.5, 0, 0}}), ref, 4);
  CHECK(row_of(t, 0) == std::vector<std::size_t>{1, 0, 1, 1});
  for (std::size_t j = 0; j < 4; ++j) CHECK(t.is_valid(0, j));
  CHECK_THROWS_AS(knn_query(Tensor::matrix({{0, 0, 0}}), Tensor({0, 3}), 1), ContractError);
  CHECK_THROWS_AS(knn_query(ref, ref, 0), ContractError);
}

TEST_CASE("knn matches exhaustive sort") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor q = random_cloud(50, rng);
    Tensor ref = random_cloud(200, rng);
    NeighborTable t = knn_query(q, ref, 8);
    for (std::size_t i = 0; i < 50; ++i) {
      REQUIRE(row_of(t, i) == knn_oracle(q, i, ref, 8));
      for (std::size_t j = 0; j < 8; ++j)
        for (std::size_t a = 0; a < 3; ++a)
          CHECK(t.displacements[(i * 8 + j) * 3 + a] == q.at(i, a) - ref.at(t.index(i, j), a));
    }
  }
}

TEST_CASE("knn is equivariant under reference relabeling") {
  std::mt19937_64 rng(12);
  Tensor q = random_cloud(20, rng);
  Tensor ref = random_cloud(40, rng);
  auto perm = testing::random_permutation(40, rng);
  Tensor shuffled = testing::permute_rows(ref, perm);
  NeighborTable a = knn_query(q, ref, 5);
  NeighborTable b = knn_query(q, shuffled, 5);
  for (std::size_t i = 0; i < 20; ++i)
    for (std::size_t j = 0; j < 5; ++j) CHECK(perm[b.index(i, j)] == a.index(i, j));
}

TEST_CASE("ball query padding and fallback") {
  Rng rng(1);
  Tensor origin = Tensor::matrix({{0, 0, 0}});
  NeighborTable t = ball_query(origin, Tensor::matrix({{0.5, 0, 0}, {2, 0, 0}}), 1.0, 2, rng);
  CHECK(row_of(t, 0) == std::vector<std::size_t>{0, 0});
  CHECK(t.is_valid(0, 0));
  CHECK_FALSE(t.is_valid(0, 1));
  CHECK(t.fallback[0] == 0);

  Tensor far = Tensor::matrix({{5, 0, 0}, {0, 5, 0}, {0, 0, 4.9}, {-5, 0, 0}});
  NeighborTable f = ball_query(origin, far, 1.0, 4, rng);
  CHECK(f.fallback[0] == 1);
  CHECK(row_of(f, 0) == std::vector<std::size_t>{2, 2, 2, 2});

  CHECK_THROWS_AS(ball_query(origin, far, 0.0, 4, rng), ContractError);
  CHECK_THROWS_AS(ball_query(origin, far, -1.0, 4, rng), ContractError);
}

TEST_CASE("ball query boundary is inclusive") {
  Rng rng(1);
  NeighborTable t =
      ball_query(Tensor::matrix({{0, 0, 0}}), Tensor::matrix({{0, 0, 2}}), 2.0, 1, rng);
  CHECK(t.fallback[0] == 0);
}

TEST_CASE("ball query selections lie in the brute-force member set") {
  std::mt19937_64 gen(21);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor q = random_cloud(30, gen);
    Tensor ref = random_cloud(80, gen);
    const double r = 0.2 + 0.1 * (trial % 8);
    const std::size_t k = 1 + trial % 9;
    Rng rng(trial);
    NeighborTable t = ball_query(q, ref, r, k, rng);
    for (std::size_t i = 0; i < 30; ++i) {
      auto members = radius_oracle(q, i, ref, r);
      auto row = row_of(t, i);
      if (members.empty()) {
        CHECK(t.fallback[i] == 1);
        CHECK(row == std::vector<std::size_t>(k, knn_oracle(q, i, ref, 1)[0]));
        continue;
      }
      CHECK(t.fallback[i] == 0);
      std::set<std::size_t> valid;
      for (std::size_t j = 0; j < k; ++j) {
        CHECK(members.count(row[j]) == 1);
        if (t.is_valid(i, j)) valid.insert(row[j]);
      }
      CHECK(valid.size() == std::min(k, members.size()));
      if (members.size() <= k) CHECK(valid == members);
    }
  }
}

TEST_CASE("first_k sampling takes the lowest members") {
  Rng rng(3);
  Tensor ref = Tensor::matrix({{0.1, 0, 0}, {5, 0, 0}, {0.2, 0, 0}, {0.3, 0, 0}, {0.4, 0, 0}});
  BallQueryOptions opt;
  opt.sampling = BallSampling::first_k;
  NeighborTable t = ball_query(Tensor::matrix({{0, 0, 0}}), ref, 1.0, 3, rng, opt);
  CHECK(row_of(t, 0) == std::vector<std::size_t>{0, 2, 3});
}

TEST_CASE("uniform ball sampling is seeded") {
  std::mt19937_64 gen(5);
  Tensor q = random_cloud(10, gen);
  Tensor ref = random_cloud(100, gen);
  Rng a(9), b(9);
  CHECK(ball_query(q, ref, 1.0, 4, a).indices == ball_query(q, ref, 1.0, 4, b).indices);
}

TEST_CASE("grid accelerator agrees with the exhaustive scan") {
  std::mt19937_64 gen(31);
  for (int trial = 0; trial < 30; ++trial) {
    Tensor q = random_cloud(40, gen, 3.0);
    Tensor ref = random_cloud(120, gen, 3.0);
    const double r = 0.3 + 0.2 * (trial % 5);
    BallQueryOptions grid;
    grid.use_grid = true;
    for (auto s : {BallSampling::uniform, BallSampling::first_k}) {
      BallQueryOptions plain;
      plain.sampling = grid.sampling = s;
      Rng a(trial), b(trial);
      NeighborTable x = ball_query(q, ref, r, 6, a, plain);
      NeighborTable y = ball_query(q, ref, r, 6, b, grid);
      CHECK(x.indices == y.indices);
      CHECK(x.valid == y.valid);
      CHECK(x.fallback == y.fallback);
    }
  }
}

TEST_CASE("ball member sets are invariant to reference permutation") {
  std::mt19937_64 gen(41);
  Tensor q = random_cloud(15, gen);
  Tensor ref = random_cloud(60, gen);
  auto perm = testing::random_permutation(60, gen);
  Tensor shuffled = testing::permute_rows(ref, perm);
  Rng a(1), b(2);
  NeighborTable x = ball_query(q, ref, 0.5, 64, a);
  NeighborTable y = ball_query(q, shuffled, 0.5, 64, b);
  for (std::size_t i = 0; i < 15; ++i) {
    std::set<std::size_t> sx, sy;
    for (std::size_t j = 0; j < 64; ++j) {
      if (x.is_valid(i, j)) sx.insert(x.index(i, j));
      if (y.is_valid(i, j)) sy.insert(perm[y.index(i, j)]);
    }
    if (x.fallback[i]) {
      CHECK(y.fallback[i] == 1);
      continue;
    }
    CHECK(sx == sy);
  }
}

TEST_CASE("farthest point sampling") {
  Tensor pts = Tensor::matrix({{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {10, 0, 0}});
  CHECK(farthest_point_sample(pts, 2) == std::vector<std::size_t>{0, 3});
  auto all = farthest_point_sample(pts, 4);
  std::vector<std::size_t> sorted = all;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK(farthest_point_sample(pts, 1, 2) == std::vector<std::size_t>{2});
  CHECK_THROWS_AS(farthest_point_sample(pts, 5), ContractError);
  CHECK_THROWS_AS(farthest_point_sample(pts, 0), ContractError);
  CHECK_THROWS_AS(farthest_point_sample(pts, 2, 4), ContractError);

  Tensor dup = Tensor::matrix({{0, 0, 0}, {0, 0, 0}, {0, 0, 0}});
  auto d = farthest_point_sample(dup, 3);
  CHECK(std::set<std::size_t>(d.begin(), d.end()).size() == 3);
}

TEST_CASE("farthest point sampling matches the greedy oracle") {
  std::mt19937_64 gen(51);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor c = random_cloud(64, gen);
    const std::size_t start = trial % 64;
    CHECK(farthest_point_sample(c, 16, start) == fps_oracle(c, 16, start));
  }
}

TEST_CASE("farthest point sampling is translation invariant") {
  Tensor c(Shape{32, 3});
  for (std::size_t i = 0; i < 32; ++i)
    for (std::size_t a = 0; a < 3; ++a) c.at(i, a) = double((i * 7 + a * 13) % 17) * 0.25;
  Tensor shifted = c;
  for (std::size_t i = 0; i < 32; ++i) {
    shifted.at(i, 0) += 8.0;
    shifted.at(i, 1) -= 4.0;
    shifted.at(i, 2) += 2.0;
  }
  CHECK(farthest_point_sample(c, 12) == farthest_point_sample(shifted, 12));
}

TEST_CASE("group_features gathers through the table") {
  std::mt19937_64 gen(61);
  Tensor feats = testing::random_tensor({5, 4}, gen);
  NeighborTable id;
  id.rows = 5;
  id.k = 1;
  id.indices = {0, 1, 2, 3, 4};
  id.valid.assign(5, 1);
  id.fallback.assign(5, 0);
  CHECK(group_features(id, feats).reshaped({5, 4}) == feats);

  NeighborTable t;
  t.rows = 3;
  t.k = 4;
  std::uniform_int_distribution<std::size_t> pick(0, 4);
  for (std::size_t e = 0; e < 12; ++e) t.indices.push_back(pick(gen));
  Tensor g = group_features(t, feats);
  CHECK(g.shape() == Shape{3, 4, 4});
  for (std::size_t e = 0; e < 12; ++e)
    for (std::size_t c = 0; c < 4; ++c) CHECK(g[e * 4 + c] == feats.at(t.indices[e], c));

  t.indices[5] = 5;
  CHECK_THROWS_AS(group_features(t, feats), ContractError);
}

TEST_CASE("inverse distance interpolation") {
  Tensor src = Tensor::matrix({{0, 0, 0}, {2, 0, 0}, {100, 0, 0}});
  Tensor f = Tensor::matrix({{1, 10}, {3, 20}, {50, 60}});

  Tensor at_src = inverse_distance_interpolate(Tensor::matrix({{2, 0, 0}}), src, f);
  CHECK(at_src[0] == doctest::Approx(3).epsilon(1e-6));
  CHECK(at_src[1] == doctest::Approx(20).epsilon(1e-6));

  Tensor mid = inverse_distance_interpolate(Tensor::matrix({{1, 0, 0}}), src, f);
  const double w1 = 1.0 / (1.0 + 1e-8), w3 = 1.0 / (99.0 + 1e-8);
  const double total = 2 * w1 + w3;
  CHECK(mid[0] == doctest::Approx((w1 * 1 + w1 * 3 + w3 * 50) / total).epsilon(1e-12));
  CHECK(mid[1] == doctest::Approx((w1 * 10 + w1 * 20 + w3 * 60) / total).epsilon(1e-12));

  std::mt19937_64 gen(71);
  Tensor target = random_cloud(20, gen);
  Tensor source = random_cloud(7, gen);
  Tensor constant(Shape{7, 3}, 4.25);
  Tensor out = inverse_distance_interpolate(target, source, constant);
  for (double v : out.data()) CHECK(v == doctest::Approx(4.25).epsilon(1e-12));
}

TEST_CASE("interpolated rows are convex combinations") {
  std::mt19937_64 gen(81);
  Tensor target = random_cloud(30, gen);
  Tensor source = random_cloud(10, gen);
  Tensor f = testing::random_tensor({10, 2}, gen);
  Tensor out = inverse_distance_interpolate(target, source, f);
  for (std::size_t c = 0; c < 2; ++c) {
    double lo = 1e9, hi = -1e9;
    for (std::size_t j = 0; j < 10; ++j) {
      lo = std::min(lo, f.at(j, c));
      hi = std::max(hi, f.at(j, c));
    }
    for (std::size_t i = 0; i < 30; ++i) {
      CHECK(out.at(i, c) >= lo - 1e-8);
      CHECK(out.at(i, c) <= hi + 1e-8);
    }
  }
}

TEST_CASE("interpolation gradients match central differences") {
  std::mt19937_64 gen(91);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Tensor> leaves{random_cloud(6, gen), random_cloud(4, gen),
                               testing::random_tensor({4, 2}, gen)};
    Tensor w = testing::random_tensor({6, 2}, gen);
    auto f = [&](Tape& tape, std::span<const Var> v) {
      Var out = interpolate_features(v[0], v[1], v[2]);
      return ops::sum(ops::hadamard(out, tape.constant(w)));
    };
    CHECK(finite_difference_check(f, leaves).max_rel_error < 1e-4);
  }
}
