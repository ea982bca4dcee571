#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "pointrnn/tensor.hpp"

namespace pointrnn {

/// Trainable tensor that lives outside any computation record. A record
/// reads `value` and backward() adds into `grad`.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() { grad = Tensor(value.shape()); }
};

class Tape;

/// Handle to a node of a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  /// Gradient after backward(); empty if the node was not reached.
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode computation record. Nodes are appended in evaluation order,
/// so reverse insertion order is a valid topological order for backward().
///
/// A tape is single-threaded and single-use: backward() may run once, after
/// which the tape refuses both new nodes and a second traversal.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  /// With `record_gradients` false no node requires a gradient and no
  /// reverse rules are stored; useful for inference and finite differences.
  explicit Tape(bool record_gradients = true) : record_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);
  /// Leaf reading `param`. Binding the same parameter again returns the
  /// existing node, so a record holds one copy per parameter.
  Var parameter(Parameter& param);

  /// Accumulates d(root)/d(node) into every reachable node and into the
  /// grad of every Parameter leaf. `root` must hold a single element.
  void backward(const Var& root);

  bool recording() const { return record_; }
  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  /// Appends an operation result. The reverse rule is kept only when some
  /// parent requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward);
  Var record(Tensor value, std::span<const Var> parents, BackwardFn backward);

  /// Gradient accumulator of `v`, zero-initialised on first access.
  Tensor& grad_slot(const Var& v);

 private:
  friend class Var;

  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  Var push(Node node);
  void check_open() const;
  void check_owned(const Var& v) const;

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> bound_;
  bool record_;
  bool consumed_ = false;
};

/// Differentiable primitives. Shapes must match exactly except that a
/// single-element rank-0 operand broadcasts against any tensor.
namespace ops {

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var subtract(const Var& a, const Var& b);
Var hadamard(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);
/// x: [n, c], bias: [c]. Adds the bias to every row.
Var add_bias(const Var& x, const Var& bias);
/// x @ weight + bias with weight stored as [in, out].
Var affine(const Var& x, const Var& weight, const Var& bias);
/// Concatenates along the last axis; leading extents must agree.
Var concat_last(std::span<const Var> parts);
Var concat_last(std::initializer_list<Var> parts);
/// Rows [begin, end) of a rank-2 tensor.
Var slice_rows(const Var& x, std::size_t begin, std::size_t end);

Var sigmoid(const Var& x);
Var tanh(const Var& x);
Var relu(const Var& x);
Var square(const Var& x);
inline constexpr double kSqrtEps = 1e-12;
/// sqrt(x + 1e-12), elementwise.
Var sqrt_eps(const Var& x);

/// out[i, ...] = src[indices[i], ...]; `lead` gives the leading extents of
/// the result (product must equal indices.size()).
Var gather_rows(const Var& src, std::span<const std::size_t> indices, const Shape& lead);
/// [n, k, c] -> [n, c]. Gradient reaches only the lowest-index maximal row.
Var neighbor_max_pool(const Var& grouped);
/// [n, k, c] -> [n, c].
Var neighbor_mean_pool(const Var& grouped);

/// neighbor_max_pool(gather_rows(src, indices, {n, k})) without building the
/// [n, k, c] intermediate. Results and gradients are bitwise identical.
Var gather_max_pool(const Var& src, std::span<const std::size_t> indices, std::size_t n,
                    std::size_t k);
/// neighbor_mean_pool(gather_rows(src, indices, {n, k})), fused likewise.
Var gather_mean_pool(const Var& src, std::span<const std::size_t> indices, std::size_t n,
                     std::size_t k);

Var sum(const Var& x);
Var mean(const Var& x);

}  // namespace ops

/// Largest |analytic - central difference| / max(1e-8, |central difference|)
/// over every coordinate of every parameter. `f` must build a scalar from the
/// leaves it is handed and be deterministic.
using ScalarGraph = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

GradCheckReport finite_difference_check(const ScalarGraph& f, const std::vector<Tensor>& params,
                                        double h = 1e-5);

}  // namespace pointrnn
