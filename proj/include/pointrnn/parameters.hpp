#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "pointrnn/autodiff.hpp"
#include "pointrnn/geometry.hpp"

namespace pointrnn {

/// Owns named parameters with stable addresses.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;

  Parameter& add(std::string name, Shape shape);
  /// Elements drawn uniformly from [-bound, bound], rounded to float precision.
  Parameter& add_uniform(std::string name, Shape shape, double bound, Rng& rng);

  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;

  std::size_t size() const { return items_.size(); }
  Parameter& operator[](std::size_t i) { return *items_[i]; }
  const Parameter& operator[](std::size_t i) const { return *items_[i]; }

  /// Total number of scalar entries across all parameters.
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::unique_ptr<Parameter>> items_;
};

/// y = x @ weight + bias, weight stored [in x out].
struct AffineParams {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;

  std::size_t in_channels() const { return weight->value.dim(0); }
  std::size_t out_channels() const { return weight->value.dim(1); }
  Var apply(Tape& tape, const Var& x) const;
};

/// Weight and bias uniform in +-1/sqrt(in).
AffineParams make_affine(ParameterSet& set, const std::string& name, std::size_t in,
                         std::size_t out, Rng& rng);

}  // namespace pointrnn
