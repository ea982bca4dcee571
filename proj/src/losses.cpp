#include "pointrnn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "pointrnn/errors.hpp"

namespace pointrnn {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_sets(const Tensor& p, const Tensor& q, const char* what) {
  require_matrix(p, 3, what);
  require_matrix(q, 3, what);
  if (p.dim(0) == 0 || q.dim(0) == 0) {
    throw ContractError(std::string(what) + ": point sets must be non-empty");
  }
}

void check_equal_sizes(const Tensor& p, const Tensor& q, const char* what) {
  check_sets(p, q, what);
  if (p.dim(0) != q.dim(0)) {
    throw ContractError(std::string(what) + ": sets have " + std::to_string(p.dim(0)) + " and " +
                        std::to_string(q.dim(0)) + " points; a bijection needs equal sizes");
  }
}

// For every row of `from`, the index of its nearest row in `to`.
std::vector<std::size_t> nearest_partners(const Tensor& from, const Tensor& to) {
  const std::size_t n = from.dim(0);
  const std::size_t m = to.dim(0);
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* a = from.ptr() + 3 * i;
    double best = kInf;
    for (std::size_t j = 0; j < m; ++j) {
      const double* b = to.ptr() + 3 * j;
      const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
      const double d = dx * dx + dy * dy + dz * dz;
      if (d < best) {
        best = d;
        out[i] = j;
      }
    }
  }
  return out;
}

double assignment_cost(const std::vector<double>& cost, std::size_t n,
                       const std::vector<std::size_t>& mapping) {
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += cost[i * n + mapping[i]];
  return total;
}

}  // namespace

std::vector<double> squared_distance_matrix(const Tensor& a, const Tensor& b) {
  check_sets(a, b, "squared_distance_matrix");
  const std::size_t n = a.dim(0);
  const std::size_t m = b.dim(0);
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double d = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        const double diff = a.at(i, c) - b.at(j, c);
        d += diff * diff;
      }
      out[i * m + j] = d;
    }
  }
  return out;
}

std::vector<std::size_t> hungarian_assign(const std::vector<double>& cost, std::size_t n) {
  if (cost.size() != n * n) throw ShapeError("hungarian_assign: cost matrix is not n x n");
  if (n == 0) return {};
  // 1-based potentials over rows (u) and columns (v); col_owner[j] is the row
  // matched to column j, way[j] the previous column on the augmenting path.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> col_owner(n + 1, 0), way(n + 1, 0);
  for (std::size_t row = 1; row <= n; ++row) {
    col_owner[0] = row;
    std::size_t col0 = 0;
    std::vector<double> min_slack(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[col0] = 1;
      const std::size_t i0 = col0 == 0 ? row : col_owner[col0];
      double delta = kInf;
      std::size_t col1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < min_slack[j]) {
          min_slack[j] = cur;
          way[j] = col0;
        }
        if (min_slack[j] < delta) {
          delta = min_slack[j];
          col1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[col_owner[j]] += delta;
          v[j] -= delta;
        } else {
          min_slack[j] -= delta;
        }
      }
      col0 = col1;
    } while (col_owner[col0] != 0);
    do {
      const std::size_t col1 = way[col0];
      col_owner[col0] = col_owner[col1];
      col0 = col1;
    } while (col0 != 0);
  }
  std::vector<std::size_t> mapping(n);
  for (std::size_t j = 1; j <= n; ++j) mapping[col_owner[j] - 1] = j - 1;
  return mapping;
}

std::vector<std::size_t> auction_assign(const std::vector<double>& cost, std::size_t n,
                                        const AuctionOptions& options) {
  if (cost.size() != n * n) throw ShapeError("auction_assign: cost matrix is not n x n");
  if (!(options.epsilon > 0)) throw ContractError("auction_assign: epsilon must be positive");
  if (n == 0) return {};
  if (n == 1) return {0};

  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  const double spread = *std::max_element(cost.begin(), cost.end()) -
                        *std::min_element(cost.begin(), cost.end());
  // Rows bid for columns, maximising -cost - price.
  std::vector<double> price(n, 0.0);
  std::vector<std::size_t> owner(n, kNone), assigned(n, kNone);
  double eps = std::max(options.epsilon, spread / 4.0);
  std::size_t bids = 0;
  while (true) {
    std::fill(owner.begin(), owner.end(), kNone);
    std::fill(assigned.begin(), assigned.end(), kNone);
    std::vector<std::size_t> queue(n);
    std::iota(queue.begin(), queue.end(), 0);
    std::reverse(queue.begin(), queue.end());
    while (!queue.empty()) {
      if (++bids > options.max_bids) {
        throw SolverError("auction_assign: " + std::to_string(queue.size()) +
                          " rows unassigned after " + std::to_string(options.max_bids) +
                          " bids at epsilon " + std::to_string(eps));
      }
      const std::size_t i = queue.back();
      queue.pop_back();
      double best = -kInf, second = -kInf;
      std::size_t best_j = 0;
      const double* row = cost.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double value = -row[j] - price[j];
        if (value > best) {
          second = best;
          best = value;
          best_j = j;
        } else if (value > second) {
          second = value;
        }
      }
      price[best_j] += best - second + eps;
      if (owner[best_j] != kNone) {
        assigned[owner[best_j]] = kNone;
        queue.push_back(owner[best_j]);
      }
      owner[best_j] = i;
      assigned[i] = best_j;
    }
    if (eps <= options.epsilon) break;
    eps = std::max(options.epsilon, eps / 5.0);
  }
  return assigned;
}

double chamfer_value(const Tensor& p, const Tensor& q) {
  check_sets(p, q, "chamfer");
  const auto pq = nearest_partners(p, q);
  const auto qp = nearest_partners(q, p);
  double total = 0.0;
  auto dist = [](const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
    double d = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      const double diff = a.at(i, c) - b.at(j, c);
      d += diff * diff;
    }
    return d;
  };
  for (std::size_t i = 0; i < p.dim(0); ++i) total += dist(p, i, q, pq[i]);
  for (std::size_t j = 0; j < q.dim(0); ++j) total += dist(q, j, p, qp[j]);
  return total;
}

Var chamfer(const Var& p, const Var& q) {
  check_sets(p.value(), q.value(), "chamfer");
  const auto pq = nearest_partners(p.value(), q.value());
  const auto qp = nearest_partners(q.value(), p.value());
  Var forward = ops::sum(ops::square(ops::subtract(p, ops::gather_rows(q, pq, {pq.size()}))));
  Var backward = ops::sum(ops::square(ops::subtract(q, ops::gather_rows(p, qp, {qp.size()}))));
  return ops::add(forward, backward);
}

Assignment emd_exact_assignment(const Tensor& p, const Tensor& q) {
  check_equal_sizes(p, q, "emd_exact");
  const std::size_t n = p.dim(0);
  const auto cost = squared_distance_matrix(p, q);
  Assignment a;
  a.mapping = hungarian_assign(cost, n);
  a.cost = assignment_cost(cost, n, a.mapping);
  return a;
}

Assignment emd_approx_assignment(const Tensor& p, const Tensor& q, double epsilon) {
  check_equal_sizes(p, q, "emd_approx");
  if (!(epsilon > 0)) throw ContractError("emd_approx: epsilon must be positive");
  const std::size_t n = p.dim(0);
  const auto cost = squared_distance_matrix(p, q);
  Assignment a;
  a.mapping = auction_assign(cost, n, {.epsilon = epsilon});
  a.cost = assignment_cost(cost, n, a.mapping);
  return a;
}

Var assignment_loss(const Var& p, const Var& q, const std::vector<std::size_t>& mapping) {
  if (mapping.size() != p.value().dim(0)) {
    throw ShapeError("assignment_loss: mapping length does not match point count");
  }
  return ops::sum(ops::square(ops::subtract(p, ops::gather_rows(q, mapping, {mapping.size()}))));
}

EmdResult emd_exact(const Var& p, const Var& q) {
  Assignment a = emd_exact_assignment(p.value(), q.value());
  Var loss = assignment_loss(p, q, a.mapping);
  return {loss, std::move(a)};
}

EmdResult emd_approx(const Var& p, const Var& q, double epsilon) {
  Assignment a = emd_approx_assignment(p.value(), q.value(), epsilon);
  Var loss = assignment_loss(p, q, a.mapping);
  return {loss, std::move(a)};
}

Var combined_loss(const Var& p, const Var& q, const LossWeights& w) {
  if (!(w.alpha >= 0) || !(w.beta >= 0)) {
    throw ContractError("combined_loss: alpha and beta must be non-negative");
  }
  Var total = p.tape()->constant(Tensor::scalar(0.0));
  if (w.alpha > 0) total = ops::add(total, ops::scale(chamfer(p, q), w.alpha));
  if (w.beta > 0) {
    const bool exact = p.value().dim(0) <= w.exact_emd_limit;
    Var emd = exact ? emd_exact(p, q).loss : emd_approx(p, q, w.auction_epsilon).loss;
    total = ops::add(total, ops::scale(emd, w.beta));
  }
  return total;
}

}  // namespace pointrnn
