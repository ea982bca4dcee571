#include "pointrnn/geometry.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_map>

#include "pointrnn/errors.hpp"

namespace pointrnn {

PointCloud::PointCloud(Tensor c, std::optional<Tensor> f)
    : coords(std::move(c)), features(std::move(f)) {}

void PointCloud::validate() const {
  require_matrix(coords, 3, "point cloud coordinates");
  if (coords.dim(0) == 0) throw ContractError("point cloud must hold at least one point");
  require_finite(coords, "point cloud coordinates");
  if (features) {
    if (features->rank() != 2 || features->dim(0) != coords.dim(0)) {
      throw ShapeError("point cloud features " + shape_string(features->shape()) +
                       " do not match " + std::to_string(coords.dim(0)) + " points");
    }
    require_finite(*features, "point cloud features");
  }
}

namespace {

double squared_distance(const double* a, const double* b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

void check_clouds(const Tensor& query, const Tensor& reference, const char* what) {
  require_matrix(query, 3, what);
  require_matrix(reference, 3, what);
  if (reference.dim(0) == 0) {
    throw ContractError(std::string(what) + ": reference cloud is empty");
  }
}

NeighborTable make_table(std::size_t rows, std::size_t k) {
  NeighborTable t;
  t.rows = rows;
  t.k = k;
  t.indices.assign(rows * k, 0);
  t.valid.assign(rows * k, 1);
  t.displacements.assign(rows * k * 3, 0.0);
  t.fallback.assign(rows, 0);
  return t;
}

void fill_displacements(NeighborTable& t, const Tensor& query, const Tensor& reference) {
  for (std::size_t i = 0; i < t.rows; ++i) {
    for (std::size_t j = 0; j < t.k; ++j) {
      const std::size_t r = t.indices[i * t.k + j];
      for (std::size_t a = 0; a < 3; ++a) {
        t.displacements[(i * t.k + j) * 3 + a] = query.at(i, a) - reference.at(r, a);
      }
    }
  }
}

std::size_t nearest_index(const double* q, const Tensor& reference) {
  std::size_t best = 0;
  double best_d = squared_distance(q, reference.ptr());
  for (std::size_t r = 1; r < reference.dim(0); ++r) {
    const double d = squared_distance(q, reference.ptr() + 3 * r);
    if (d < best_d) {
      best_d = d;
      best = r;
    }
  }
  return best;
}

struct CellKey {
  std::int64_t x, y, z;
  bool operator==(const CellKey&) const = default;
};

struct CellKeyHash {
  std::size_t operator()(const CellKey& c) const {
    std::uint64_t h = static_cast<std::uint64_t>(c.x) * 0x9E3779B97F4A7C15ULL;
    h ^= static_cast<std::uint64_t>(c.y) * 0xC2B2AE3D27D4EB4FULL + (h << 6) + (h >> 2);
    h ^= static_cast<std::uint64_t>(c.z) * 0x165667B19E3779F9ULL + (h << 6) + (h >> 2);
    return static_cast<std::size_t>(h);
  }
};

class UniformGrid {
 public:
  UniformGrid(const Tensor& points, double cell) : cell_(cell) {
    for (std::size_t i = 0; i < points.dim(0); ++i) {
      buckets_[key(points.ptr() + 3 * i)].push_back(i);
    }
  }

  /// Candidate indices from the 27 cells around `q`, ascending.
  std::vector<std::size_t> candidates(const double* q) const {
    const CellKey c = key(q);
    std::vector<std::size_t> out;
    for (std::int64_t dx = -1; dx <= 1; ++dx)
      for (std::int64_t dy = -1; dy <= 1; ++dy)
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
          auto it = buckets_.find({c.x + dx, c.y + dy, c.z + dz});
          if (it != buckets_.end()) out.insert(out.end(), it->second.begin(), it->second.end());
        }
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  CellKey key(const double* p) const {
    return {static_cast<std::int64_t>(std::floor(p[0] / cell_)),
            static_cast<std::int64_t>(std::floor(p[1] / cell_)),
            static_cast<std::int64_t>(std::floor(p[2] / cell_))};
  }

  double cell_;
  std::unordered_map<CellKey, std::vector<std::size_t>, CellKeyHash> buckets_;
};

}  // namespace

NeighborTable knn_query(const Tensor& query, const Tensor& reference, std::size_t k) {
  if (k == 0) throw ContractError("knn_query: k must be at least 1");
  check_clouds(query, reference, "knn_query");
  const std::size_t n = query.dim(0);
  const std::size_t m = reference.dim(0);
  const std::size_t take = std::min(k, m);
  NeighborTable t = make_table(n, k);
  std::vector<double> dist(m);
  std::vector<std::size_t> order(m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* q = query.ptr() + 3 * i;
    for (std::size_t r = 0; r < m; ++r) dist[r] = squared_distance(q, reference.ptr() + 3 * r);
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + take, order.end(),
                      [&](std::size_t a, std::size_t b) {
                        return dist[a] < dist[b] || (dist[a] == dist[b] && a < b);
                      });
    for (std::size_t j = 0; j < k; ++j) t.indices[i * k + j] = order[j < take ? j : 0];
  }
  fill_displacements(t, query, reference);
  return t;
}

NeighborTable ball_query(const Tensor& query, const Tensor& reference, double radius,
                         std::size_t k, Rng& rng, const BallQueryOptions& options) {
  if (!(radius > 0)) throw ContractError("ball_query: radius must be positive");
  if (k == 0) throw ContractError("ball_query: k must be at least 1");
  check_clouds(query, reference, "ball_query");
  const std::size_t n = query.dim(0);
  const std::size_t m = reference.dim(0);
  const double r2 = radius * radius;
  NeighborTable t = make_table(n, k);

  std::optional<UniformGrid> grid;
  if (options.use_grid) grid.emplace(reference, radius);

  std::vector<std::size_t> members;
  std::vector<std::size_t> all(m);
  std::iota(all.begin(), all.end(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* q = query.ptr() + 3 * i;
    members.clear();
    std::vector<std::size_t> local;
    if (grid) local = grid->candidates(q);
    for (std::size_t c : grid ? local : all) {
      if (squared_distance(q, reference.ptr() + 3 * c) <= r2) members.push_back(c);
    }

    std::size_t* row = t.indices.data() + i * k;
    std::uint8_t* valid = t.valid.data() + i * k;
    if (members.empty()) {
      const std::size_t nn = nearest_index(q, reference);
      std::fill(row, row + k, nn);
      std::fill(valid + 1, valid + k, 0);
      t.fallback[i] = 1;
      continue;
    }
    if (members.size() > k && options.sampling == BallSampling::uniform) {
      // Partial Fisher-Yates: the first k slots become a uniform k-subset.
      for (std::size_t j = 0; j < k; ++j) {
        std::uniform_int_distribution<std::size_t> pick(j, members.size() - 1);
        std::swap(members[j], members[pick(rng)]);
      }
      std::sort(members.begin(), members.begin() + static_cast<std::ptrdiff_t>(k));
    }
    const std::size_t take = std::min(k, members.size());
    for (std::size_t j = 0; j < k; ++j) {
      row[j] = members[j < take ? j : 0];
      valid[j] = j < take ? 1 : 0;
    }
  }
  fill_displacements(t, query, reference);
  return t;
}

std::vector<std::size_t> farthest_point_sample(const Tensor& coords, std::size_t m,
                                               std::size_t start) {
  require_matrix(coords, 3, "farthest_point_sample");
  const std::size_t n = coords.dim(0);
  if (m == 0 || m > n) {
    throw ContractError("farthest_point_sample: cannot pick " + std::to_string(m) + " of " +
                        std::to_string(n) + " points");
  }
  if (start >= n) throw ContractError("farthest_point_sample: start index out of range");
  std::vector<std::size_t> picked;
  picked.reserve(m);
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  std::vector<std::uint8_t> taken(n, 0);
  std::size_t current = start;
  for (std::size_t step = 0; step < m; ++step) {
    picked.push_back(current);
    taken[current] = 1;
    const double* c = coords.ptr() + 3 * current;
    std::size_t next = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = squared_distance(coords.ptr() + 3 * i, c);
      if (d < min_dist[i]) min_dist[i] = d;
      if (!taken[i] && min_dist[i] > best) {
        best = min_dist[i];
        next = i;
      }
    }
    current = next;
  }
  return picked;
}

Tensor group_features(const NeighborTable& table, const Tensor& reference_features) {
  if (reference_features.rank() != 2) {
    throw ShapeError("group_features: features must be rank 2, got " +
                     shape_string(reference_features.shape()));
  }
  const std::size_t d = reference_features.dim(1);
  Tensor out({table.rows, table.k, d});
  for (std::size_t e = 0; e < table.indices.size(); ++e) {
    const std::size_t r = table.indices[e];
    if (r >= reference_features.dim(0)) {
      throw ContractError("group_features: index " + std::to_string(r) + " out of range for " +
                          std::to_string(reference_features.dim(0)) + " rows");
    }
    std::copy_n(reference_features.ptr() + r * d, d, out.ptr() + e * d);
  }
  return out;
}

namespace {

constexpr std::size_t kInterpolationNeighbors = 3;

void check_interpolation(const Tensor& target, const Tensor& source, const Tensor& features) {
  check_clouds(target, source, "inverse_distance_interpolate");
  if (features.rank() != 2 || features.dim(0) != source.dim(0)) {
    throw ShapeError("inverse_distance_interpolate: features " + shape_string(features.shape()) +
                     " do not match " + std::to_string(source.dim(0)) + " source points");
  }
}

}  // namespace

Tensor inverse_distance_interpolate(const Tensor& target, const Tensor& source,
                                    const Tensor& source_features) {
  check_interpolation(target, source, source_features);
  const NeighborTable nn = knn_query(target, source, kInterpolationNeighbors);
  const std::size_t d = source_features.dim(1);
  Tensor out({target.dim(0), d});
  for (std::size_t i = 0; i < nn.rows; ++i) {
    std::array<double, kInterpolationNeighbors> w{};
    double total = 0.0;
    for (std::size_t j = 0; j < nn.k; ++j) {
      const double* disp = nn.displacements.data() + (i * nn.k + j) * 3;
      const double dist = std::sqrt(disp[0] * disp[0] + disp[1] * disp[1] + disp[2] * disp[2]);
      w[j] = 1.0 / (dist + kInterpolationGuard);
      total += w[j];
    }
    for (std::size_t j = 0; j < nn.k; ++j) {
      const double* f = source_features.ptr() + nn.index(i, j) * d;
      for (std::size_t c = 0; c < d; ++c) out[i * d + c] += (w[j] / total) * f[c];
    }
  }
  return out;
}

Var interpolate_features(const Var& target, const Var& source, const Var& source_features) {
  const Tensor& tv = target.value();
  const Tensor& sv = source.value();
  const Tensor& fv = source_features.value();
  check_interpolation(tv, sv, fv);
  NeighborTable nn = knn_query(tv, sv, kInterpolationNeighbors);
  Tensor out = inverse_distance_interpolate(tv, sv, fv);
  Tensor saved_out = out;
  return target.tape()->record(
      std::move(out), {target, source, source_features},
      [target, source, source_features, nn = std::move(nn), saved_out = std::move(saved_out)](
          Tape& t, const Tensor& g) {
        const Tensor& fv = source_features.value();
        const std::size_t d = fv.dim(1);
        const std::size_t k = nn.k;
        Tensor* gt = target.requires_grad() ? &t.grad_slot(target) : nullptr;
        Tensor* gs = source.requires_grad() ? &t.grad_slot(source) : nullptr;
        Tensor* gf = source_features.requires_grad() ? &t.grad_slot(source_features) : nullptr;
        for (std::size_t i = 0; i < nn.rows; ++i) {
          std::array<double, kInterpolationNeighbors> dist{}, u{};
          double total = 0.0;
          for (std::size_t j = 0; j < k; ++j) {
            const double* disp = nn.displacements.data() + (i * k + j) * 3;
            const double d2 = disp[0] * disp[0] + disp[1] * disp[1] + disp[2] * disp[2];
            dist[j] = std::sqrt(d2);
            u[j] = 1.0 / (dist[j] + kInterpolationGuard);
            total += u[j];
          }
          const double* gi = g.ptr() + i * d;
          const double* oi = saved_out.ptr() + i * d;
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t src = nn.index(i, j);
            const double* f = fv.ptr() + src * d;
            if (gf) {
              double* dst = gf->ptr() + src * d;
              for (std::size_t c = 0; c < d; ++c) dst[c] += gi[c] * (u[j] / total);
            }
            if (gt || gs) {
              // dL/du_j = g . (f_j - out) / total ; du/ddist = -u^2 ; ddist/dq = disp / dist.
              double dl_du = 0.0;
              for (std::size_t c = 0; c < d; ++c) dl_du += gi[c] * (f[c] - oi[c]);
              dl_du /= total;
              const double dl_ddist = -dl_du * u[j] * u[j];
              const double guarded = std::sqrt(dist[j] * dist[j] + ops::kSqrtEps);
              const double* disp = nn.displacements.data() + (i * k + j) * 3;
              for (std::size_t a = 0; a < 3; ++a) {
                const double dd = dl_ddist * disp[a] / guarded;
                if (gt) (*gt)[i * 3 + a] += dd;
                if (gs) (*gs)[src * 3 + a] -= dd;
              }
            }
          }
        }
      });
}

}  // namespace pointrnn
