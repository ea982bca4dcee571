#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pointrnn/autodiff.hpp"
#include "pointrnn/cells.hpp"
#include "pointrnn/geometry.hpp"
#include "pointrnn/losses.hpp"
#include "pointrnn/parameters.hpp"

namespace pointrnn {

enum class LayerKind { sample_group, recurrent, feature_propagation, fully_connected };
enum class Architecture { basic, advanced };

/// One row of a layer stack. `divisor` gives the output point count as
/// n / divisor for sample-group, recurrent and feature-propagation layers.
struct LayerSpec {
  LayerKind kind = LayerKind::recurrent;
  std::size_t divisor = 1;
  double radius = 0.0;
  std::size_t k = 0;
  std::size_t channels = 0;

  static LayerSpec sample_group(std::size_t divisor, double radius, std::size_t k);
  static LayerSpec recurrent(std::size_t divisor, double radius, std::size_t k,
                             std::size_t channels);
  static LayerSpec feature_propagation(std::size_t divisor, std::size_t channels);
  static LayerSpec fully_connected(std::size_t channels);

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ModelConfig {
  Architecture architecture = Architecture::basic;
  CellKind cell = CellKind::lstm;
  std::vector<LayerSpec> layers;
  QueryKind query = QueryKind::ball;
  PoolKind pool = PoolKind::max;
  BallSampling ball_sampling = BallSampling::uniform;
  bool rnn_tanh = false;
  std::size_t points = 128;
  std::size_t input_length = 10;
  std::size_t horizon = 10;

  static ModelConfig mnist_basic(CellKind cell, std::size_t points = 128);
  static ModelConfig mnist_advanced(CellKind cell, std::size_t points = 128);
  static ModelConfig driving_advanced(CellKind cell, std::size_t points = 1024);

  /// Throws ConfigError describing the first inconsistency.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

std::string to_text(const ModelConfig& config);
ModelConfig parse_model_config(std::string_view text);
ModelConfig load_model_config(const std::string& path);
void save_model_config(const std::string& path, const ModelConfig& config);
/// FNV-1a of the canonical text form, as 16 hex digits.
std::string config_digest(const ModelConfig& config);

const char* to_string(LayerKind kind);
const char* to_string(Architecture kind);

/// A point set flowing through the layer program.
struct Level {
  Var coords;
  std::optional<Var> features;
};

/// FPS centroids of `input`, each carrying the max over its ball of input
/// features. Without input features the result has none.
Level set_abstraction(const Level& input, std::size_t points, double radius, std::size_t k,
                      Rng& rng, const BallQueryOptions& options = {});

/// relu(map([interpolate(source -> target), target skip features])).
Var feature_propagation(Tape& tape, const Level& target, const Level& source,
                        const AffineParams& map);

struct EncoderState {
  std::vector<CellState> layers;
};

struct Rollout {
  std::vector<Var> clouds;  // predicted frames
  std::vector<Var> flows;   // per-step displacement added to the input frame
};

struct ForwardResult {
  Var loss;
  double chamfer = 0.0;  // mean over predicted frames
  double emd = 0.0;
  Rollout rollout;
};

struct LayerTrace {
  LayerKind kind;
  std::size_t points;
  std::size_t channels;  // 0 when the level carries no features
};

class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }
  std::size_t parameter_count() const { return params_.scalar_count(); }

  const std::vector<PointCell>& encoder_cells() const { return encoder_; }
  const std::vector<PointCell>& predictor_cells() const { return predictor_; }

  EncoderState encode(Tape& tape, std::span<const Tensor> frames, Rng& rng) const;

  /// Free-running rollout from `last_input`. With `teacher` set, step s > 0
  /// reads teacher[s - 1] instead of the previous prediction.
  Rollout predict(Tape& tape, const EncoderState& state, const Var& last_input,
                  std::size_t horizon, Rng& rng,
                  std::span<const Tensor> teacher = {}) const;

  /// Mean over predicted frames of alpha * chamfer + beta * emd.
  ForwardResult forward_loss(Tape& tape, std::span<const Tensor> sequence, std::size_t in_len,
                             std::size_t out_len, const LossWeights& weights,
                             bool teacher_forcing, Rng& rng) const;

  /// Shapes after every layer of one predictor step on `frame`.
  std::vector<LayerTrace> trace(const Tensor& frame, Rng& rng) const;

 private:
  struct Head {
    std::vector<AffineParams> propagation;
    std::vector<AffineParams> dense;
  };

  Var run(Tape& tape, const std::vector<PointCell>& cells, std::vector<CellState>& states,
          const Var& frame, bool with_head, Rng& rng, std::vector<LayerTrace>* trace) const;
  NeighborQuery query_for(const LayerSpec& spec) const;

  ModelConfig config_;
  ParameterSet params_;
  std::vector<PointCell> encoder_;
  std::vector<PointCell> predictor_;
  Head head_;
};

Model build_model(const ModelConfig& config, std::uint64_t seed);
std::size_t count_parameters(const Model& model);

}  // namespace pointrnn
