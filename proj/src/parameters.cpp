#include "pointrnn/parameters.hpp"

#include <cmath>

#include "pointrnn/errors.hpp"

namespace pointrnn {

Parameter& ParameterSet::add(std::string name, Shape shape) {
  if (find(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  auto p = std::make_unique<Parameter>();
  p->name = std::move(name);
  p->value = Tensor(shape);
  p->grad = Tensor(std::move(shape));
  items_.push_back(std::move(p));
  return *items_.back();
}

Parameter& ParameterSet::add_uniform(std::string name, Shape shape, double bound, Rng& rng) {
  Parameter& p = add(std::move(name), std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : p.value.data()) v = static_cast<float>(dist(rng));
  return p;
}

Parameter* ParameterSet::find(const std::string& name) {
  for (auto& p : items_)
    if (p->name == name) return p.get();
  return nullptr;
}

const Parameter* ParameterSet::find(const std::string& name) const {
  for (const auto& p : items_)
    if (p->name == name) return p.get();
  return nullptr;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p->value.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : items_) p->zero_grad();
}

Var AffineParams::apply(Tape& tape, const Var& x) const {
  return ops::affine(x, tape.parameter(*weight), tape.parameter(*bias));
}

AffineParams make_affine(ParameterSet& set, const std::string& name, std::size_t in,
                         std::size_t out, Rng& rng) {
  if (in == 0 || out == 0) throw ConfigError("affine layer '" + name + "' has a zero extent");
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  AffineParams a;
  a.weight = &set.add_uniform(name + ".weight", {in, out}, bound, rng);
  a.bias = &set.add_uniform(name + ".bias", {out}, bound, rng);
  return a;
}

}  // namespace pointrnn
