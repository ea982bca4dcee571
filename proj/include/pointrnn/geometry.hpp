#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "pointrnn/autodiff.hpp"
#include "pointrnn/tensor.hpp"

namespace pointrnn {

using Rng = std::mt19937_64;

/// n x 3 coordinates plus optional n x d per-point features.
struct PointCloud {
  Tensor coords;
  std::optional<Tensor> features;

  PointCloud() = default;
  explicit PointCloud(Tensor coords, std::optional<Tensor> features = std::nullopt);

  std::size_t size() const { return coords.rank() == 2 ? coords.dim(0) : 0; }
  std::size_t feature_channels() const { return features ? features->dim(1) : 0; }
  /// Throws unless coords are n x 3 (n >= 1), finite, and feature rows match.
  void validate() const;
};

/// Per-query neighbour lists into a reference cloud.
///
/// Every row holds exactly k entries; padding repeats an earlier entry so
/// downstream grouping always sees k rows. `valid` is false for padding
/// produced by a ball query, `fallback` marks rows whose ball was empty.
struct NeighborTable {
  std::size_t rows = 0;
  std::size_t k = 0;
  std::vector<std::size_t> indices;   // rows * k
  std::vector<std::uint8_t> valid;    // rows * k
  std::vector<double> displacements;  // rows * k * 3, query - reference
  std::vector<std::uint8_t> fallback; // rows

  std::size_t index(std::size_t row, std::size_t j) const { return indices[row * k + j]; }
  bool is_valid(std::size_t row, std::size_t j) const { return valid[row * k + j] != 0; }
};

enum class BallSampling {
  uniform,  // k members drawn without replacement when more than k qualify
  first_k,  // lowest-index k members
};

struct BallQueryOptions {
  BallSampling sampling = BallSampling::uniform;
  /// Bucket reference points into a uniform grid of cell size `radius`.
  /// Produces the same table as the exhaustive scan.
  bool use_grid = false;
};

/// k nearest reference points per query, ascending by distance with ties to
/// the lower index. With fewer than k references the nearest one pads.
NeighborTable knn_query(const Tensor& query, const Tensor& reference, std::size_t k);

NeighborTable ball_query(const Tensor& query, const Tensor& reference, double radius,
                         std::size_t k, Rng& rng, const BallQueryOptions& options = {});

/// Greedy farthest point sampling. Returns m distinct indices in pick order,
/// starting from `start`; ties go to the lowest index.
std::vector<std::size_t> farthest_point_sample(const Tensor& coords, std::size_t m,
                                               std::size_t start = 0);

/// [n_ref x d] features gathered through the table into [rows x k x d].
Tensor group_features(const NeighborTable& table, const Tensor& reference_features);

/// Inverse-distance weighted blend of the 3 nearest source features for each
/// target point, weights 1 / (distance + 1e-8) normalised to one.
Tensor inverse_distance_interpolate(const Tensor& target, const Tensor& source,
                                    const Tensor& source_features);

/// Differentiable form of inverse_distance_interpolate: gradients reach the
/// features and both coordinate sets; neighbour selection is constant.
Var interpolate_features(const Var& target, const Var& source, const Var& source_features);

inline constexpr double kInterpolationGuard = 1e-8;

}  // namespace pointrnn
