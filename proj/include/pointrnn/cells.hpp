#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <variant>

#include "pointrnn/autodiff.hpp"
#include "pointrnn/geometry.hpp"
#include "pointrnn/parameters.hpp"

namespace pointrnn {

enum class CellKind { rnn, gru, lstm };
enum class PoolKind { max, mean };
enum class QueryKind { knn, ball };

struct NeighborQuery {
  QueryKind kind = QueryKind::ball;
  double radius = 1.0;  // ball only
  std::size_t k = 8;
  BallQueryOptions ball;
};

/// Neighbours of each current point among the previous points.
NeighborTable find_neighbors(const Tensor& current, const Tensor& previous,
                             const NeighborQuery& query, Rng& rng);

/// Shared affine map of the point-rnn correlation. The weight has rows
/// [features (d) | previous state (d') | displacement (3)] and d' columns;
/// d is 0 for the feature-less form.
struct CorrelationParams {
  AffineParams affine;
  std::size_t input_channels = 0;
  std::size_t state_channels = 0;

  std::size_t out_channels() const { return affine.out_channels(); }
};

CorrelationParams make_correlation(ParameterSet& set, const std::string& name,
                                   std::size_t input_channels, std::size_t state_channels,
                                   std::size_t out_channels, Rng& rng);

struct CellInput {
  Var coords;
  std::optional<Var> features;
};

/// (P, S) for PointRNN / PointGRU; (P, H, C) for PointLSTM with `hidden`
/// holding H and `cell` holding C.
struct CellState {
  Var coords;
  Var hidden;
  std::optional<Var> cell;
};

struct StepResult {
  Var output;
  CellState state;
};

/// For each current point: gather its neighbours in the previous cloud,
/// map [X_i, S_j, P_i - P_j] through the shared affine map, pool over the
/// neighbours. No activation is applied.
Var point_rnn_correlate(const CellInput& current, const Var& previous_coords,
                        const Var& previous_states, const CorrelationParams& params,
                        const NeighborTable& neighbors, PoolKind pool);

Var point_rnn_correlate(const CellInput& current, const Var& previous_coords,
                        const Var& previous_states, const CorrelationParams& params,
                        const NeighborQuery& query, PoolKind pool, Rng& rng);

struct RnnGates {
  CorrelationParams main;
  bool tanh_output = false;
};

struct GruGates {
  CorrelationParams update;
  CorrelationParams reset;
  CorrelationParams state_hat;  // feature-less
  AffineParams state_tilde;     // plain row-wise map of [X, R * S_hat]
};

struct LstmGates {
  CorrelationParams input;
  CorrelationParams forget;
  CorrelationParams output;
  CorrelationParams cell_hat;  // feature-less, reads C
  CorrelationParams cell_tilde;
};

using GateParams = std::variant<RnnGates, GruGates, LstmGates>;

StepResult point_rnn_step(const CellInput& input, const CellState& state, const RnnGates& gates,
                          const NeighborQuery& query, PoolKind pool, Rng& rng);
StepResult point_gru_step(const CellInput& input, const CellState& state, const GruGates& gates,
                          const NeighborQuery& query, PoolKind pool, Rng& rng);
StepResult point_lstm_step(const CellInput& input, const CellState& state,
                           const LstmGates& gates, const NeighborQuery& query, PoolKind pool,
                           Rng& rng);

/// Zero state tensors located at the first cloud's coordinates.
CellState init_state(const Var& first_coords, std::size_t channels, CellKind kind);

/// A recurrent unit with its own parameters.
class PointCell {
 public:
  PointCell(CellKind kind, std::size_t input_channels, std::size_t channels, ParameterSet& set,
            const std::string& name, Rng& rng, bool rnn_tanh = false);

  CellKind kind() const { return kind_; }
  std::size_t input_channels() const { return input_channels_; }
  std::size_t channels() const { return channels_; }
  const GateParams& gates() const { return gates_; }

  CellState init_state(const Var& first_coords) const;
  StepResult step(const CellInput& input, const CellState& state, const NeighborQuery& query,
                  PoolKind pool, Rng& rng) const;

 private:
  CellKind kind_;
  std::size_t input_channels_;
  std::size_t channels_;
  GateParams gates_;
};

const char* to_string(CellKind kind);
const char* to_string(PoolKind kind);
const char* to_string(QueryKind kind);

}  // namespace pointrnn
