#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "pointrnn/tensor.hpp"

namespace testing {

using pointrnn::Shape;
using pointrnn::Tensor;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (double& v : t.data()) v = d(rng);
  return t;
}

inline Tensor random_cloud(std::size_t n, std::mt19937_64& rng, double extent = 1.0) {
  return random_tensor({n, 3}, rng, -extent, extent);
}

inline Tensor permute_rows(const Tensor& t, const std::vector<std::size_t>& perm) {
  Tensor out(t.shape());
  const std::size_t stride = t.row_stride();
  for (std::size_t i = 0; i < perm.size(); ++i)
    std::copy_n(t.ptr() + perm[i] * stride, stride, out.ptr() + i * stride);
  return out;
}

inline std::vector<std::size_t> random_permutation(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

inline double sq_dist(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  double d = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    const double x = a.at(i, c) - b.at(j, c);
    d += x * x;
  }
  return d;
}

}  // namespace testing
