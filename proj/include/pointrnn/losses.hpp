#pragma once

#include <cstddef>
#include <vector>

#include "pointrnn/autodiff.hpp"
#include "pointrnn/tensor.hpp"

namespace pointrnn {

/// A bijection between two equal-size point sets: point i of the first set
/// is matched to point mapping[i] of the second.
struct Assignment {
  std::vector<std::size_t> mapping;
  double cost = 0.0;  // sum of squared distances under the mapping
};

/// n x n matrix of squared distances between rows of a and b.
std::vector<double> squared_distance_matrix(const Tensor& a, const Tensor& b);

/// Minimum-cost perfect matching on a row-major n x n cost matrix
/// (shortest augmenting path with potentials, O(n^3)).
std::vector<std::size_t> hungarian_assign(const std::vector<double>& cost, std::size_t n);

struct AuctionOptions {
  double epsilon = 1e-3;
  std::size_t max_bids = 50'000'000;
};

/// Forward auction with epsilon scaling. The matching's cost is within
/// n * epsilon of the optimum. Throws SolverError past the bid cap.
std::vector<std::size_t> auction_assign(const std::vector<double>& cost, std::size_t n,
                                        const AuctionOptions& options = {});

/// Sum over both directions of squared nearest-neighbour distances.
double chamfer_value(const Tensor& p, const Tensor& q);
Var chamfer(const Var& p, const Var& q);

Assignment emd_exact_assignment(const Tensor& p, const Tensor& q);
Assignment emd_approx_assignment(const Tensor& p, const Tensor& q, double epsilon);

struct EmdResult {
  Var loss;
  Assignment assignment;
};

/// Optimal-assignment loss; gradient flows through the fixed matching.
EmdResult emd_exact(const Var& p, const Var& q);
EmdResult emd_approx(const Var& p, const Var& q, double epsilon);

/// sum_i |p_i - q_{mapping[i]}|^2 as a differentiable expression.
Var assignment_loss(const Var& p, const Var& q, const std::vector<std::size_t>& mapping);

struct LossWeights {
  double alpha = 1.0;  // chamfer
  double beta = 1.0;   // earth mover's
  /// Point counts above this use the auction solver for the EMD term.
  std::size_t exact_emd_limit = 64;
  double auction_epsilon = 1e-3;
};

/// alpha * chamfer + beta * emd.
Var combined_loss(const Var& p, const Var& q, const LossWeights& weights = {});

}  // namespace pointrnn
