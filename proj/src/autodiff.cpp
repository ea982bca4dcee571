#include "pointrnn/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>

#include "pointrnn/errors.hpp"

namespace pointrnn {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

ConstMatrixMap as_matrix(const Tensor& t) {
  return ConstMatrixMap(t.ptr(), static_cast<Eigen::Index>(t.dim(0)),
                        static_cast<Eigen::Index>(t.dim(1)));
}

MatrixMap as_matrix(Tensor& t) {
  return MatrixMap(t.ptr(), static_cast<Eigen::Index>(t.dim(0)),
                   static_cast<Eigen::Index>(t.dim(1)));
}

bool is_scalar(const Tensor& t) { return t.rank() == 0; }

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) +
                   " and " + shape_string(b.shape()));
}

}  // namespace

// --- Var -------------------------------------------------------------------

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return tape_->nodes_[id_].value;
}

const Tensor& Var::grad() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return tape_->nodes_[id_].grad;
}

bool Var::requires_grad() const { return tape_ && tape_->nodes_[id_].requires_grad; }

// --- Tape ------------------------------------------------------------------

void Tape::check_open() const {
  if (consumed_) throw ReuseError("computation record already consumed by backward()");
}

void Tape::check_owned(const Var& v) const {
  if (v.tape_ != this) throw ContractError("Var belongs to a different computation record");
}

Var Tape::push(Node node) {
  check_open();
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  require_finite(value, "constant");
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::variable(Tensor value) {
  require_finite(value, "variable");
  Node n;
  n.value = std::move(value);
  n.requires_grad = record_;
  return push(std::move(n));
}

Var Tape::parameter(Parameter& param) {
  if (auto it = bound_.find(&param); it != bound_.end()) {
    check_open();
    return Var(this, it->second);
  }
  require_finite(param.value, param.name.c_str());
  Node n;
  n.value = param.value;
  n.requires_grad = record_;
  n.param = record_ ? &param : nullptr;
  Var v = push(std::move(n));
  bound_.emplace(&param, v.id());
  return v;
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(backward));
}

Var Tape::record(Tensor value, std::span<const Var> parents, BackwardFn backward) {
  check_open();
  if (!value.all_finite()) throw NumericError("operation produced a non-finite value");
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (const Var& p : parents) {
      check_owned(p);
      if (nodes_[p.id_].requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

Tensor& Tape::grad_slot(const Var& v) {
  Node& n = nodes_[v.id_];
  if (n.grad.shape() != n.value.shape() || n.grad.empty() != n.value.empty()) {
    n.grad = Tensor(n.value.shape());
  }
  return n.grad;
}

void Tape::backward(const Var& root) {
  check_open();
  check_owned(root);
  if (root.value().size() != 1) {
    throw ContractError("backward() requires a scalar root, got shape " +
                        shape_string(root.shape()));
  }
  consumed_ = true;
  if (!nodes_[root.id_].requires_grad) return;
  grad_slot(root).fill(1.0);
  for (std::size_t i = root.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.param) {
      if (n.param->grad.shape() != n.value.shape()) n.param->grad = Tensor(n.value.shape());
      auto dst = n.param->grad.data();
      auto src = n.grad.data();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  }
}

// --- primitives --------------------------------------------------------------

namespace ops {

namespace {

void accumulate(Tape& t, const Var& v, const Tensor& g) {
  if (!v.requires_grad()) return;
  Tensor& slot = t.grad_slot(v);
  if (is_scalar(slot) && !is_scalar(g)) {
    double s = 0.0;
    for (double x : g.data()) s += x;
    slot[0] += s;
    return;
  }
  auto dst = slot.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename F>
Tensor map_values(const Tensor& x, F f) {
  Tensor out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

// Elementwise binary op with scalar broadcast. `f(a, b)` gives the value;
// `da(a, b, g)` and `db(a, b, g)` give the per-element partials times g.
template <typename F, typename DA, typename DB>
Var binary(const char* name, const Var& a, const Var& b, F f, DA da, DB db) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Shape out_shape;
  if (av.shape() == bv.shape()) {
    out_shape = av.shape();
  } else if (is_scalar(av)) {
    out_shape = bv.shape();
  } else if (is_scalar(bv)) {
    out_shape = av.shape();
  } else {
    shape_fail(name, av, bv);
  }
  const std::size_t n = shape_size(out_shape);
  const std::size_t sa = is_scalar(av) && n != 1 ? 0 : 1;
  const std::size_t sb = is_scalar(bv) && n != 1 ? 0 : 1;
  Tensor out(out_shape);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i * sa], bv[i * sb]);
  return a.tape()->record(std::move(out), {a, b}, [a, b, sa, sb, n, da, db](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (a.requires_grad()) {
      Tensor& ga = t.grad_slot(a);
      for (std::size_t i = 0; i < n; ++i) ga[i * sa] += da(av[i * sa], bv[i * sb], g[i]);
    }
    if (b.requires_grad()) {
      Tensor& gb = t.grad_slot(b);
      for (std::size_t i = 0; i < n; ++i) gb[i * sb] += db(av[i * sa], bv[i * sb], g[i]);
    }
  });
}

void check_same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape() || !a.valid()) {
    throw ContractError("operands belong to different computation records");
  }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  check_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) shape_fail("matmul", av, bv);
  Tensor out({av.dim(0), bv.dim(1)});
  if (!out.empty() && av.dim(1) > 0) as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (g.empty()) return;
    if (a.requires_grad() && b.value().dim(0) > 0) {
      as_matrix(t.grad_slot(a)).noalias() += as_matrix(g) * as_matrix(b.value()).transpose();
    }
    if (b.requires_grad() && a.value().dim(1) > 0) {
      as_matrix(t.grad_slot(b)).noalias() += as_matrix(a.value()).transpose() * as_matrix(g);
    }
  });
}

Var add(const Var& a, const Var& b) {
  check_same_tape(a, b);
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g) { return g; }, [](double, double, double g) { return g; });
}

Var subtract(const Var& a, const Var& b) {
  check_same_tape(a, b);
  return binary(
      "subtract", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g) { return g; }, [](double, double, double g) { return -g; });
}

Var hadamard(const Var& a, const Var& b) {
  check_same_tape(a, b);
  return binary(
      "hadamard", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double g) { return g * y; },
      [](double x, double, double g) { return g * x; });
}

Var scale(const Var& a, double factor) {
  Tensor out = map_values(a.value(), [factor](double x) { return x * factor; });
  return a.tape()->record(std::move(out), {a}, [a, factor](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_slot(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
  });
}

Var add_scalar(const Var& a, double offset) {
  Tensor out = map_values(a.value(), [offset](double x) { return x + offset; });
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Tensor& g) { accumulate(t, a, g); });
}

Var add_bias(const Var& x, const Var& bias) {
  check_same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (xv.rank() != 2 || bv.rank() != 1 || bv.dim(0) != xv.dim(1)) shape_fail("add_bias", xv, bv);
  const std::size_t rows = xv.dim(0);
  const std::size_t cols = xv.dim(1);
  Tensor out = xv;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  return x.tape()->record(std::move(out), {x, bias}, [x, bias, rows, cols](Tape& t, const Tensor& g) {
    accumulate(t, x, g);
    if (bias.requires_grad()) {
      Tensor& gb = t.grad_slot(bias);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
    }
  });
}

Var affine(const Var& x, const Var& weight, const Var& bias) {
  return add_bias(matmul(x, weight), bias);
}

Var concat_last(std::initializer_list<Var> parts) {
  return concat_last(std::span<const Var>(parts.begin(), parts.size()));
}

Var concat_last(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_last: no operands");
  const Tensor& first = parts[0].value();
  if (first.rank() == 0) throw ShapeError("concat_last: scalar operand");
  const Shape lead(first.shape().begin(), first.shape().end() - 1);
  const std::size_t rows = shape_size(lead);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    check_same_tape(parts[0], p);
    const Tensor& v = p.value();
    if (v.rank() != first.rank() || !std::equal(lead.begin(), lead.end(), v.shape().begin())) {
      shape_fail("concat_last", first, v);
    }
    widths.push_back(v.shape().back());
    total += widths.back();
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& v = parts[p].value();
    const std::size_t w = widths[p];
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.ptr() + r * w, w, out.ptr() + r * total + offset);
    offset += w;
  }
  std::vector<Var> saved(parts.begin(), parts.end());
  return parts[0].tape()->record(
      std::move(out), parts, [saved, widths, rows, total](Tape& t, const Tensor& g) {
        std::size_t offset = 0;
        for (std::size_t p = 0; p < saved.size(); ++p) {
          const std::size_t w = widths[p];
          if (saved[p].requires_grad()) {
            Tensor& gp = t.grad_slot(saved[p]);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < w; ++c) gp[r * w + c] += g[r * total + offset + c];
          }
          offset += w;
        }
      });
}

Var slice_rows(const Var& x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || begin > end || end > xv.dim(0)) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") of " + shape_string(xv.shape()));
  }
  const std::size_t cols = xv.dim(1);
  Tensor out({end - begin, cols});
  std::copy(xv.ptr() + begin * cols, xv.ptr() + end * cols, out.ptr());
  return x.tape()->record(std::move(out), {x}, [x, begin, cols](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[begin * cols + i] += g[i];
  });
}

Var sigmoid(const Var& x) {
  Tensor out = map_values(x.value(), [](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
  Tensor saved = out;
  return x.tape()->record(std::move(out), {x}, [x, saved = std::move(saved)](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * saved[i] * (1.0 - saved[i]);
  });
}

Var tanh(const Var& x) {
  Tensor out = map_values(x.value(), [](double v) { return std::tanh(v); });
  Tensor saved = out;
  return x.tape()->record(std::move(out), {x}, [x, saved = std::move(saved)](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - saved[i] * saved[i]);
  });
}

Var relu(const Var& x) {
  Tensor out = map_values(x.value(), [](double v) { return v > 0 ? v : 0.0; });
  return x.tape()->record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    const Tensor& xv = x.value();
    Tensor& gx = t.grad_slot(x);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0) gx[i] += g[i];
  });
}

Var square(const Var& x) {
  Tensor out = map_values(x.value(), [](double v) { return v * v; });
  return x.tape()->record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    const Tensor& xv = x.value();
    Tensor& gx = t.grad_slot(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 2.0 * xv[i] * g[i];
  });
}

Var sqrt_eps(const Var& x) {
  for (double v : x.value().data()) {
    if (v + kSqrtEps < 0) throw NumericError("sqrt_eps of a negative value");
  }
  Tensor out = map_values(x.value(), [](double v) { return std::sqrt(v + kSqrtEps); });
  Tensor saved = out;
  return x.tape()->record(std::move(out), {x}, [x, saved = std::move(saved)](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * 0.5 / saved[i];
  });
}

Var gather_rows(const Var& src, std::span<const std::size_t> indices, const Shape& lead) {
  const Tensor& sv = src.value();
  if (sv.rank() == 0) throw ShapeError("gather_rows: scalar source");
  if (shape_size(lead) != indices.size()) {
    throw ShapeError("gather_rows: lead shape " + shape_string(lead) + " does not hold " +
                     std::to_string(indices.size()) + " indices");
  }
  const std::size_t rows = sv.dim(0);
  const std::size_t stride = sv.row_stride();
  Shape out_shape = lead;
  out_shape.insert(out_shape.end(), sv.shape().begin() + 1, sv.shape().end());
  Tensor out(out_shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) {
      throw ContractError("gather_rows: index " + std::to_string(indices[i]) +
                          " out of range for " + std::to_string(rows) + " rows");
    }
    std::copy_n(sv.ptr() + indices[i] * stride, stride, out.ptr() + i * stride);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return src.tape()->record(std::move(out), {src}, [src, idx = std::move(idx), stride](Tape& t, const Tensor& g) {
    Tensor& gs = t.grad_slot(src);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double* dst = gs.ptr() + idx[i] * stride;
      const double* from = g.ptr() + i * stride;
      for (std::size_t c = 0; c < stride; ++c) dst[c] += from[c];
    }
  });
}

Var neighbor_max_pool(const Var& grouped) {
  const Tensor& gv = grouped.value();
  if (gv.rank() != 3 || gv.dim(1) == 0) {
    throw ShapeError("neighbor_max_pool: expected [n x k x c] with k >= 1, got " +
                     shape_string(gv.shape()));
  }
  const std::size_t n = gv.dim(0), k = gv.dim(1), c = gv.dim(2);
  Tensor out({n, c});
  std::vector<std::uint32_t> argmax(n * c, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* base = gv.ptr() + i * k * c;
    for (std::size_t ch = 0; ch < c; ++ch) {
      double best = base[ch];
      std::uint32_t arg = 0;
      for (std::size_t j = 1; j < k; ++j) {
        const double v = base[j * c + ch];
        if (v > best) {
          best = v;
          arg = static_cast<std::uint32_t>(j);
        }
      }
      out[i * c + ch] = best;
      argmax[i * c + ch] = arg;
    }
  }
  return grouped.tape()->record(
      std::move(out), {grouped}, [grouped, argmax = std::move(argmax), n, k, c](Tape& t, const Tensor& g) {
        Tensor& gg = t.grad_slot(grouped);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t ch = 0; ch < c; ++ch)
            gg[(i * k + argmax[i * c + ch]) * c + ch] += g[i * c + ch];
      });
}

Var neighbor_mean_pool(const Var& grouped) {
  const Tensor& gv = grouped.value();
  if (gv.rank() != 3 || gv.dim(1) == 0) {
    throw ShapeError("neighbor_mean_pool: expected [n x k x c] with k >= 1, got " +
                     shape_string(gv.shape()));
  }
  const std::size_t n = gv.dim(0), k = gv.dim(1), c = gv.dim(2);
  const double inv = 1.0 / static_cast<double>(k);
  Tensor out({n, c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t ch = 0; ch < c; ++ch) out[i * c + ch] += gv[(i * k + j) * c + ch];
  for (double& v : out.data()) v *= inv;
  return grouped.tape()->record(std::move(out), {grouped}, [grouped, n, k, c, inv](Tape& t, const Tensor& g) {
    Tensor& gg = t.grad_slot(grouped);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t ch = 0; ch < c; ++ch) gg[(i * k + j) * c + ch] += g[i * c + ch] * inv;
  });
}

namespace {

void check_gather_pool(const Tensor& sv, std::span<const std::size_t> indices, std::size_t n,
                       std::size_t k, const char* what) {
  if (sv.rank() != 2) {
    throw ShapeError(std::string(what) + ": expected a [m x c] source, got " +
                     shape_string(sv.shape()));
  }
  if (k == 0 || indices.size() != n * k) {
    throw ShapeError(std::string(what) + ": " + std::to_string(indices.size()) +
                     " indices do not fill " + std::to_string(n) + " rows of " +
                     std::to_string(k));
  }
  for (std::size_t idx : indices) {
    if (idx >= sv.dim(0)) {
      throw ContractError(std::string(what) + ": index " + std::to_string(idx) +
                          " out of range for " + std::to_string(sv.dim(0)) + " rows");
    }
  }
}

}  // namespace

Var gather_max_pool(const Var& src, std::span<const std::size_t> indices, std::size_t n,
                    std::size_t k) {
  const Tensor& sv = src.value();
  check_gather_pool(sv, indices, n, k, "gather_max_pool");
  const std::size_t c = sv.dim(1);
  Tensor out({n, c});
  // Source row chosen per output entry.
  std::vector<std::uint32_t> winner(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t* row = indices.data() + i * k;
    double* o = out.ptr() + i * c;
    std::uint32_t* w = winner.data() + i * c;
    const double* first = sv.ptr() + row[0] * c;
    for (std::size_t ch = 0; ch < c; ++ch) {
      o[ch] = first[ch];
      w[ch] = static_cast<std::uint32_t>(row[0]);
    }
    for (std::size_t j = 1; j < k; ++j) {
      const double* r = sv.ptr() + row[j] * c;
      for (std::size_t ch = 0; ch < c; ++ch) {
        if (r[ch] > o[ch]) {
          o[ch] = r[ch];
          w[ch] = static_cast<std::uint32_t>(row[j]);
        }
      }
    }
  }
  return src.tape()->record(std::move(out), {src}, [src, winner = std::move(winner), c](Tape& t, const Tensor& g) {
    Tensor& gs = t.grad_slot(src);
    for (std::size_t e = 0; e < winner.size(); ++e) gs[winner[e] * c + e % c] += g[e];
  });
}

Var gather_mean_pool(const Var& src, std::span<const std::size_t> indices, std::size_t n,
                     std::size_t k) {
  const Tensor& sv = src.value();
  check_gather_pool(sv, indices, n, k, "gather_mean_pool");
  const std::size_t c = sv.dim(1);
  const double inv = 1.0 / static_cast<double>(k);
  Tensor out({n, c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const double* r = sv.ptr() + indices[i * k + j] * c;
      for (std::size_t ch = 0; ch < c; ++ch) out[i * c + ch] += r[ch];
    }
  for (double& v : out.data()) v *= inv;
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return src.tape()->record(std::move(out), {src}, [src, idx = std::move(idx), k, c, inv](Tape& t, const Tensor& g) {
    Tensor& gs = t.grad_slot(src);
    for (std::size_t e = 0; e < idx.size(); ++e) {
      double* dst = gs.ptr() + idx[e] * c;
      const double* from = g.ptr() + (e / k) * c;
      for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += from[ch] * inv;
    }
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape()->record(Tensor::scalar(s), {x}, [x](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(x);
    const double gv = g[0];
    for (double& v : gx.data()) v += gv;
  });
}

Var mean(const Var& x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const double inv = 1.0 / static_cast<double>(n);
  return x.tape()->record(Tensor::scalar(s * inv), {x}, [x, inv](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(x);
    const double gv = g[0] * inv;
    for (double& v : gx.data()) v += gv;
  });
}

}  // namespace ops

// --- finite differences ------------------------------------------------------

namespace {

double evaluate(const ScalarGraph& f, const std::vector<Tensor>& params) {
  Tape tape(false);
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const Tensor& p : params) leaves.push_back(tape.variable(p));
  const double v = f(tape, leaves).value().item();
  if (!std::isfinite(v)) throw NumericError("finite_difference_check: f returned non-finite");
  return v;
}

}  // namespace

GradCheckReport finite_difference_check(const ScalarGraph& f, const std::vector<Tensor>& params,
                                        double h) {
  if (!(h > 0)) throw ContractError("finite_difference_check: step must be positive");
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const Tensor& p : params) leaves.push_back(tape.variable(p));
    Var root = f(tape, leaves);
    if (!std::isfinite(root.value().item())) {
      throw NumericError("finite_difference_check: f returned non-finite");
    }
    tape.backward(root);
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      analytic.push_back(leaves[i].grad().empty() && params[i].size() > 0
                             ? Tensor(params[i].shape())
                             : leaves[i].grad());
    }
  }

  GradCheckReport report;
  std::vector<Tensor> probe = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double orig = params[p][i];
      probe[p][i] = orig + h;
      const double up = evaluate(f, probe);
      probe[p][i] = orig - h;
      const double down = evaluate(f, probe);
      probe[p][i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[p][i];
      const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(numeric));
      if (err > report.max_rel_error) {
        report = {err, p, i, a, numeric};
      }
    }
  }
  return report;
}

}  // namespace pointrnn
