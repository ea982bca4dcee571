#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pointrnn/data.hpp"
#include "pointrnn/model.hpp"

namespace pointrnn {

enum class MetricNormalization {
  frame_sum,  // raw per-frame sums, averaged over frames and sequences
  per_point,  // the same divided by the point count
};

struct TrainConfig {
  double learning_rate = 1e-5;
  double clip = 5.0;
  LossWeights loss;
  std::size_t iterations = 0;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
  std::size_t input_length = 10;
  std::size_t output_length = 10;
  bool teacher_forcing = false;
  MetricNormalization normalization = MetricNormalization::frame_sum;
  std::size_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::string checkpoint_path;

  void validate() const;
};

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

AdamState make_adam(const ParameterSet& params);

/// Bias-corrected Adam update of `values` in place; increments state.step.
void adam_step(std::span<Tensor> values, std::span<const Tensor> grads, AdamState& state,
               double lr);
void adam_step(ParameterSet& params, AdamState& state, double lr);

/// Clamps every element into [-bound, bound].
void clip_gradients(std::span<Tensor> grads, double bound);
void clip_gradients(ParameterSet& params, double bound);

struct LogRecord {
  std::size_t iteration = 0;
  double loss = 0.0;
  double chamfer = 0.0;
  double emd = 0.0;
  double elapsed_ms = 0.0;
};

std::string format_record(const LogRecord& r, bool with_time = true);
LogRecord parse_record(const std::string& line);

/// Mixes a seed with two counters into an independent 64-bit seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor>> parameters;
  AdamState adam;
  std::string rng_state;
  std::uint64_t iteration = 0;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

/// Copies checkpoint tensors into the model. Throws ShapeError naming the
/// first tensor that is missing or has a different shape.
void load_parameters(Model& model, const Checkpoint& c);

/// Owns the optimiser state of one training run.
class Trainer {
 public:
  Trainer(Model& model, TrainConfig config);

  /// One iteration: draw a batch, forward, backward, clip, Adam.
  LogRecord step(const SequenceSource& source);
  std::vector<LogRecord> run(const SequenceSource& source, std::size_t iterations,
                             const std::function<void(const LogRecord&)>& on_record = {});

  std::size_t iteration() const { return iteration_; }
  const AdamState& adam() const { return adam_; }
  const TrainConfig& config() const { return config_; }

  Checkpoint checkpoint() const;
  void restore(const Checkpoint& c);

 private:
  Model* model_;
  TrainConfig config_;
  AdamState adam_;
  Rng rng_;
  std::size_t iteration_ = 0;
  double elapsed_ms_ = 0.0;
};

/// Runs config.iterations steps, writing periodic checkpoints when asked.
std::vector<LogRecord> train(Model& model, const SequenceSource& source, const TrainConfig& config);

struct Metrics {
  double chamfer = 0.0;
  double emd = 0.0;
};

struct EvalOptions {
  std::size_t input_length = 10;
  std::size_t output_length = 10;
  MetricNormalization normalization = MetricNormalization::frame_sum;
  std::uint64_t seed = 0;
  std::size_t exact_emd_limit = 64;
  double auction_epsilon = 1e-3;
};

/// Chamfer and EMD between predicted and true frames, averaged over frames
/// and sequences. Ball queries draw from a per-sequence seed.
Metrics evaluate(const Model& model, std::span<const std::vector<Tensor>> sequences,
                 const EvalOptions& options);
Metrics evaluate_copy_last(std::span<const std::vector<Tensor>> sequences,
                           const EvalOptions& options);

/// Metrics of one predicted set of frames against the truth.
Metrics frame_metrics(std::span<const Tensor> predicted, std::span<const Tensor> truth,
                      const EvalOptions& options);

struct FlowFrame {
  Tensor points;  // input cloud rows whose flow survived
  Tensor flow;    // matching displacement rows
};

/// Predicted per-step displacements with |flow| >= threshold.
std::vector<FlowFrame> export_scene_flow(const Model& model, std::span<const Tensor> inputs,
                                         std::size_t horizon, double threshold,
                                         std::uint64_t seed);

}  // namespace pointrnn
