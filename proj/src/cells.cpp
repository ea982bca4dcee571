#include "pointrnn/cells.hpp"

#include "pointrnn/errors.hpp"

namespace pointrnn {

NeighborTable find_neighbors(const Tensor& current, const Tensor& previous,
                             const NeighborQuery& query, Rng& rng) {
  if (query.kind == QueryKind::knn) return knn_query(current, previous, query.k);
  return ball_query(current, previous, query.radius, query.k, rng, query.ball);
}

CorrelationParams make_correlation(ParameterSet& set, const std::string& name,
                                   std::size_t input_channels, std::size_t state_channels,
                                   std::size_t out_channels, Rng& rng) {
  CorrelationParams p;
  p.affine = make_affine(set, name, input_channels + state_channels + 3, out_channels, rng);
  p.input_channels = input_channels;
  p.state_channels = state_channels;
  return p;
}

namespace {

Var one_minus(const Var& x) { return ops::add_scalar(ops::scale(x, -1.0), 1.0); }

void check_state(const CellState& state, const char* what, bool needs_cell) {
  if (!state.coords.valid() || !state.hidden.valid()) {
    throw ContractError(std::string(what) + ": state is not initialised");
  }
  if (needs_cell && !state.cell) throw ContractError(std::string(what) + ": missing cell state");
}

}  // namespace

Var point_rnn_correlate(const CellInput& current, const Var& previous_coords,
                        const Var& previous_states, const CorrelationParams& params,
                        const NeighborTable& neighbors, PoolKind pool) {
  const Tensor& cur = current.coords.value();
  const Tensor& prev = previous_coords.value();
  const Tensor& states = previous_states.value();
  require_matrix(cur, 3, "point_rnn_correlate current coordinates");
  require_matrix(prev, 3, "point_rnn_correlate previous coordinates");
  if (states.rank() != 2 || states.dim(0) != prev.dim(0) ||
      states.dim(1) != params.state_channels) {
    throw ContractError("point_rnn_correlate: previous state " + shape_string(states.shape()) +
                        " does not match " + std::to_string(prev.dim(0)) + " points with " +
                        std::to_string(params.state_channels) + " channels");
  }
  const std::size_t d = current.features ? current.features->value().dim(1) : 0;
  if (current.features) {
    const Tensor& x = current.features->value();
    if (x.rank() != 2 || x.dim(0) != cur.dim(0)) {
      throw ContractError("point_rnn_correlate: feature rows do not match current points");
    }
  }
  if (d != params.input_channels) {
    throw ContractError("point_rnn_correlate: input has " + std::to_string(d) +
                        " feature channels, parameters expect " +
                        std::to_string(params.input_channels));
  }
  if (neighbors.rows != cur.dim(0)) {
    throw ContractError("point_rnn_correlate: neighbour table rows do not match current points");
  }

  Tape& tape = *current.coords.tape();
  const Var weight = tape.parameter(*params.affine.weight);
  const Var bias = tape.parameter(*params.affine.bias);
  const std::size_t ds = params.state_channels;

  // W [X_i, S_j, P_i - P_j] = (W_x X_i + W_p P_i) + (W_s S_j - W_p P_j); the
  // second bracket depends on j only and is evaluated once per previous point.
  const Var w_state = ops::slice_rows(weight, d, d + ds);
  const Var w_disp = ops::slice_rows(weight, d + ds, d + ds + 3);
  const Var per_neighbor = ops::subtract(ops::matmul(previous_states, w_state),
                                         ops::matmul(previous_coords, w_disp));
  const Var pooled =
      pool == PoolKind::max
          ? ops::gather_max_pool(per_neighbor, neighbors.indices, neighbors.rows, neighbors.k)
          : ops::gather_mean_pool(per_neighbor, neighbors.indices, neighbors.rows, neighbors.k);

  Var per_query = ops::matmul(current.coords, w_disp);
  if (current.features) {
    per_query = ops::add(per_query, ops::matmul(*current.features, ops::slice_rows(weight, 0, d)));
  }
  return ops::add_bias(ops::add(pooled, per_query), bias);
}

Var point_rnn_correlate(const CellInput& current, const Var& previous_coords,
                        const Var& previous_states, const CorrelationParams& params,
                        const NeighborQuery& query, PoolKind pool, Rng& rng) {
  const NeighborTable table =
      find_neighbors(current.coords.value(), previous_coords.value(), query, rng);
  return point_rnn_correlate(current, previous_coords, previous_states, params, table, pool);
}

StepResult point_rnn_step(const CellInput& input, const CellState& state, const RnnGates& gates,
                          const NeighborQuery& query, PoolKind pool, Rng& rng) {
  check_state(state, "point_rnn_step", false);
  Var s = point_rnn_correlate(input, state.coords, state.hidden, gates.main, query, pool, rng);
  if (gates.tanh_output) s = ops::tanh(s);
  return {s, CellState{input.coords, s, std::nullopt}};
}

StepResult point_gru_step(const CellInput& input, const CellState& state, const GruGates& gates,
                          const NeighborQuery& query, PoolKind pool, Rng& rng) {
  check_state(state, "point_gru_step", false);
  const NeighborTable table =
      find_neighbors(input.coords.value(), state.coords.value(), query, rng);
  auto correlate = [&](const CorrelationParams& p, const CellInput& in) {
    return point_rnn_correlate(in, state.coords, state.hidden, p, table, pool);
  };
  const CellInput coords_only{input.coords, std::nullopt};
  const Var z = ops::sigmoid(correlate(gates.update, input));
  const Var r = ops::sigmoid(correlate(gates.reset, input));
  const Var s_hat = correlate(gates.state_hat, coords_only);

  Tape& tape = *input.coords.tape();
  const Var gated = ops::hadamard(r, s_hat);
  const Var candidate_in = input.features ? ops::concat_last({*input.features, gated}) : gated;
  if (candidate_in.value().dim(1) != gates.state_tilde.in_channels()) {
    throw ContractError("point_gru_step: candidate input width does not match parameters");
  }
  const Var s_tilde = ops::tanh(gates.state_tilde.apply(tape, candidate_in));
  const Var s = ops::add(ops::hadamard(z, s_hat), ops::hadamard(one_minus(z), s_tilde));
  return {s, CellState{input.coords, s, std::nullopt}};
}

StepResult point_lstm_step(const CellInput& input, const CellState& state,
                           const LstmGates& gates, const NeighborQuery& query, PoolKind pool,
                           Rng& rng) {
  check_state(state, "point_lstm_step", true);
  const NeighborTable table =
      find_neighbors(input.coords.value(), state.coords.value(), query, rng);
  auto correlate = [&](const CorrelationParams& p, const CellInput& in, const Var& prev) {
    return point_rnn_correlate(in, state.coords, prev, p, table, pool);
  };
  const CellInput coords_only{input.coords, std::nullopt};
  const Var i = ops::sigmoid(correlate(gates.input, input, state.hidden));
  const Var f = ops::sigmoid(correlate(gates.forget, input, state.hidden));
  const Var o = ops::sigmoid(correlate(gates.output, input, state.hidden));
  const Var c_hat = correlate(gates.cell_hat, coords_only, *state.cell);
  const Var c_tilde = ops::tanh(correlate(gates.cell_tilde, input, state.hidden));
  const Var c = ops::add(ops::hadamard(f, c_hat), ops::hadamard(i, c_tilde));
  const Var h = ops::hadamard(o, ops::tanh(c));
  return {h, CellState{input.coords, h, c}};
}

CellState init_state(const Var& first_coords, std::size_t channels, CellKind kind) {
  if (channels == 0) throw ContractError("init_state: channels must be at least 1");
  require_matrix(first_coords.value(), 3, "init_state");
  Tape& tape = *first_coords.tape();
  const std::size_t n = first_coords.value().dim(0);
  CellState s;
  s.coords = first_coords;
  s.hidden = tape.constant(Tensor({n, channels}));
  if (kind == CellKind::lstm) s.cell = tape.constant(Tensor({n, channels}));
  return s;
}

PointCell::PointCell(CellKind kind, std::size_t input_channels, std::size_t channels,
                     ParameterSet& set, const std::string& name, Rng& rng, bool rnn_tanh)
    : kind_(kind), input_channels_(input_channels), channels_(channels) {
  if (channels == 0) throw ConfigError("recurrent unit '" + name + "' needs channels >= 1");
  const std::size_t d = input_channels;
  const std::size_t c = channels;
  switch (kind) {
    case CellKind::rnn:
      gates_ = RnnGates{make_correlation(set, name + ".main", d, c, c, rng), rnn_tanh};
      break;
    case CellKind::gru: {
      GruGates g;
      g.update = make_correlation(set, name + ".update", d, c, c, rng);
      g.reset = make_correlation(set, name + ".reset", d, c, c, rng);
      g.state_hat = make_correlation(set, name + ".state_hat", 0, c, c, rng);
      g.state_tilde = make_affine(set, name + ".state_tilde", d + c, c, rng);
      gates_ = g;
      break;
    }
    case CellKind::lstm: {
      LstmGates g;
      g.input = make_correlation(set, name + ".input", d, c, c, rng);
      g.forget = make_correlation(set, name + ".forget", d, c, c, rng);
      g.output = make_correlation(set, name + ".output", d, c, c, rng);
      g.cell_hat = make_correlation(set, name + ".cell_hat", 0, c, c, rng);
      g.cell_tilde = make_correlation(set, name + ".cell_tilde", d, c, c, rng);
      gates_ = g;
      break;
    }
  }
}

CellState PointCell::init_state(const Var& first_coords) const {
  return pointrnn::init_state(first_coords, channels_, kind_);
}

StepResult PointCell::step(const CellInput& input, const CellState& state,
                           const NeighborQuery& query, PoolKind pool, Rng& rng) const {
  return std::visit(
      [&](const auto& g) -> StepResult {
        using G = std::decay_t<decltype(g)>;
        if constexpr (std::is_same_v<G, RnnGates>) {
          return point_rnn_step(input, state, g, query, pool, rng);
        } else if constexpr (std::is_same_v<G, GruGates>) {
          return point_gru_step(input, state, g, query, pool, rng);
        } else {
          return point_lstm_step(input, state, g, query, pool, rng);
        }
      },
      gates_);
}

const char* to_string(CellKind kind) {
  switch (kind) {
    case CellKind::rnn: return "rnn";
    case CellKind::gru: return "gru";
    case CellKind::lstm: return "lstm";
  }
  return "?";
}

const char* to_string(PoolKind kind) { return kind == PoolKind::max ? "max" : "mean"; }
const char* to_string(QueryKind kind) { return kind == QueryKind::knn ? "knn" : "ball"; }

}  // namespace pointrnn
