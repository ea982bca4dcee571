#include "pointrnn/training.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "pointrnn/errors.hpp"

namespace pointrnn {

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("learning rate must be positive");
  if (!(clip > 0)) throw ConfigError("clip bound must be positive");
  if (!(loss.alpha >= 0) || !(loss.beta >= 0)) throw ConfigError("alpha and beta must be >= 0");
  if (batch == 0) throw ConfigError("batch size must be positive");
  if (input_length == 0 || output_length == 0) throw ConfigError("split lengths must be positive");
  if (checkpoint_every > 0 && checkpoint_path.empty()) {
    throw ConfigError("periodic checkpoints need a checkpoint path");
  }
}

AdamState make_adam(const ParameterSet& params) {
  AdamState s;
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m.emplace_back(params[i].value.shape());
    s.v.emplace_back(params[i].value.shape());
  }
  return s;
}

void adam_step(std::span<Tensor> values, std::span<const Tensor> grads, AdamState& s, double lr) {
  if (values.size() != grads.size() || values.size() != s.m.size() || s.m.size() != s.v.size()) {
    throw ContractError("adam_step: parameter, gradient and moment counts differ");
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].shape() != grads[i].shape() || values[i].shape() != s.m[i].shape() ||
        values[i].shape() != s.v[i].shape()) {
      throw ContractError("adam_step: shape mismatch for tensor " + std::to_string(i) + ": " +
                          shape_string(values[i].shape()) + " vs gradient " +
                          shape_string(grads[i].shape()));
    }
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < values.size(); ++i) {
    double* x = values[i].ptr();
    const double* g = grads[i].ptr();
    double* m = s.m[i].ptr();
    double* v = s.v[i].ptr();
    for (std::size_t j = 0; j < values[i].size(); ++j) {
      m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * g[j];
      v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * g[j] * g[j];
      x[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + s.epsilon);
    }
  }
}

void adam_step(ParameterSet& params, AdamState& state, double lr) {
  std::vector<Tensor> values, grads;
  for (std::size_t i = 0; i < params.size(); ++i) {
    values.push_back(std::move(params[i].value));
    grads.push_back(params[i].grad);
  }
  try {
    adam_step(values, grads, state, lr);
  } catch (...) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i].value = std::move(values[i]);
    throw;
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i].value = std::move(values[i]);
}

void clip_gradients(std::span<Tensor> grads, double bound) {
  if (!(bound > 0)) throw ContractError("clip_gradients: bound must be positive");
  for (Tensor& g : grads)
    for (double& v : g.data()) v = std::clamp(v, -bound, bound);
}

void clip_gradients(ParameterSet& params, double bound) {
  if (!(bound > 0)) throw ContractError("clip_gradients: bound must be positive");
  for (std::size_t i = 0; i < params.size(); ++i)
    for (double& v : params[i].grad.data()) v = std::clamp(v, -bound, bound);
}

std::string format_record(const LogRecord& r, bool with_time) {
  char buf[256];
  int n = std::snprintf(buf, sizeof buf, "iteration=%zu loss=%.17g chamfer=%.17g emd=%.17g",
                        r.iteration, r.loss, r.chamfer, r.emd);
  std::string out(buf, static_cast<std::size_t>(n));
  if (with_time) {
    n = std::snprintf(buf, sizeof buf, " elapsed_ms=%.3f", r.elapsed_ms);
    out.append(buf, static_cast<std::size_t>(n));
  }
  return out;
}

LogRecord parse_record(const std::string& line) {
  LogRecord r;
  std::istringstream in(line);
  std::string field;
  bool seen = false;
  while (in >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw FormatError("log record: bad field '" + field + "'");
    const std::string key = field.substr(0, eq);
    const std::string value = field.substr(eq + 1);
    if (key == "iteration") {
      r.iteration = std::stoull(value);
      seen = true;
    } else if (key == "loss") r.loss = std::stod(value);
    else if (key == "chamfer") r.chamfer = std::stod(value);
    else if (key == "emd") r.emd = std::stod(value);
    else if (key == "elapsed_ms") r.elapsed_ms = std::stod(value);
  }
  if (!seen) throw FormatError("log record without iteration: '" + line + "'");
  return r;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto splitmix = [](std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  };
  return splitmix(splitmix(splitmix(seed) ^ a) ^ b);
}

namespace {

constexpr char kCheckpointMagic[8] = {'P', 'R', 'N', 'N', 'C', 'K', 'P', 'T'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

void put_tensor(std::vector<std::uint8_t>& out, const std::string& name, const Tensor& t) {
  put_string(out, name);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
  for (double v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("checkpoint: truncated ") + what + " at byte offset " +
                        std::to_string(pos_) + ", missing " +
                        std::to_string(n - (bytes_.size() - pos_)) + " bytes");
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes_[pos_ + i]} << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{bytes_[pos_ + i]} << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string string(const char* what) {
    const std::size_t n = u32(what);
    need(n, what);
    std::string s(bytes_.begin() + pos_, bytes_.begin() + pos_ + n);
    pos_ += n;
    return s;
  }
  std::pair<std::string, Tensor> tensor() {
    std::string name = string("tensor name");
    const std::size_t rank = u32("tensor rank");
    if (rank > 8) throw FormatError("checkpoint: tensor '" + name + "' has rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& e : shape) e = u32("tensor extent");
    const std::size_t count = shape_size(shape);
    need(count * 4, "tensor data");
    Tensor t(shape);
    for (double& v : t.data()) v = std::bit_cast<float>(u32("tensor data"));
    return {std::move(name), std::move(t)};
  }
  void skip(std::size_t n) { pos_ += n; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void round_to_float(Tensor& t) {
  for (double& v : t.data()) v = static_cast<float>(v);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  if (c.adam.m.size() != c.adam.v.size() ||
      (!c.adam.m.empty() && c.adam.m.size() != c.parameters.size())) {
    throw ContractError("save_checkpoint: optimiser state does not match parameters");
  }
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 8);
  put_u32(out, c.version);
  put_string(out, to_text(c.config));
  put_u64(out, c.iteration);
  put_string(out, c.rng_state);
  put_u64(out, c.adam.step);
  put_u64(out, std::bit_cast<std::uint64_t>(c.adam.beta1));
  put_u64(out, std::bit_cast<std::uint64_t>(c.adam.beta2));
  put_u64(out, std::bit_cast<std::uint64_t>(c.adam.epsilon));
  const std::size_t moments = c.adam.m.size();
  put_u32(out, static_cast<std::uint32_t>(c.parameters.size() + 2 * moments));
  for (const auto& [name, t] : c.parameters) put_tensor(out, "param/" + name, t);
  for (std::size_t i = 0; i < moments; ++i) {
    put_tensor(out, "adam.m/" + c.parameters[i].first, c.adam.m[i]);
    put_tensor(out, "adam.v/" + c.parameters[i].first, c.adam.v[i]);
  }
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || !std::equal(bytes.begin(), bytes.begin() + 8, kCheckpointMagic)) {
    throw FormatError("checkpoint: bad magic at byte offset 0");
  }
  Reader body(bytes);
  body.skip(8);
  Checkpoint c;
  c.version = body.u32("version");
  if (c.version != Checkpoint::kVersion) {
    throw FormatError("checkpoint: format version " + std::to_string(c.version) +
                      " is not supported (expected " + std::to_string(Checkpoint::kVersion) + ")");
  }
  try {
    c.config = parse_model_config(body.string("model config"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: embedded model config is invalid: ") + e.what());
  }
  c.iteration = body.u64("iteration");
  c.rng_state = body.string("rng state");
  c.adam.step = body.u64("adam step");
  c.adam.beta1 = body.f64("adam beta1");
  c.adam.beta2 = body.f64("adam beta2");
  c.adam.epsilon = body.f64("adam epsilon");
  const std::size_t count = body.u32("tensor count");
  std::vector<std::pair<std::string, Tensor>> moments_m, moments_v;
  for (std::size_t i = 0; i < count; ++i) {
    auto [name, t] = body.tensor();
    auto strip = [&](const char* prefix) -> std::optional<std::string> {
      const std::string p(prefix);
      if (name.rfind(p, 0) == 0) return name.substr(p.size());
      return std::nullopt;
    };
    if (auto n = strip("param/")) c.parameters.emplace_back(*n, std::move(t));
    else if (auto n = strip("adam.m/")) moments_m.emplace_back(*n, std::move(t));
    else if (auto n = strip("adam.v/")) moments_v.emplace_back(*n, std::move(t));
    else throw FormatError("checkpoint: unknown tensor '" + name + "'");
  }
  if (!body.done()) throw FormatError("checkpoint: trailing bytes after tensor table");
  if (!moments_m.empty() || !moments_v.empty()) {
    if (moments_m.size() != c.parameters.size() || moments_v.size() != c.parameters.size()) {
      throw FormatError("checkpoint: optimiser moments do not cover every parameter");
    }
    for (std::size_t i = 0; i < c.parameters.size(); ++i) {
      if (moments_m[i].first != c.parameters[i].first || moments_v[i].first != c.parameters[i].first) {
        throw FormatError("checkpoint: optimiser moment order differs at '" + c.parameters[i].first + "'");
      }
      c.adam.m.push_back(std::move(moments_m[i].second));
      c.adam.v.push_back(std::move(moments_v[i].second));
    }
  }
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  const auto bytes = encode_checkpoint(c);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

void load_parameters(Model& model, const Checkpoint& c) {
  ParameterSet& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter& p = params[i];
    auto it = std::find_if(c.parameters.begin(), c.parameters.end(),
                           [&](const auto& e) { return e.first == p.name; });
    if (it == c.parameters.end()) {
      throw ShapeError("checkpoint has no tensor '" + p.name + "' required by the model");
    }
    if (it->second.shape() != p.value.shape()) {
      throw ShapeError("tensor '" + p.name + "' has shape " + shape_string(it->second.shape()) +
                       " in the checkpoint but " + shape_string(p.value.shape()) + " in the model");
    }
  }
  if (c.parameters.size() != params.size()) {
    throw ShapeError("checkpoint holds " + std::to_string(c.parameters.size()) +
                     " tensors, model expects " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (const auto& [name, t] : c.parameters)
      if (name == params[i].name) params[i].value = t;
  }
}

Trainer::Trainer(Model& model, TrainConfig config)
    : model_(&model), config_(std::move(config)), adam_(make_adam(model.parameters())),
      rng_(config_.seed) {
  config_.validate();
  // Parameters and moments live at 32-bit precision between steps so that a
  // checkpoint captures the run exactly.
  ParameterSet& params = model_->parameters();
  for (std::size_t i = 0; i < params.size(); ++i) round_to_float(params[i].value);
}

LogRecord Trainer::step(const SequenceSource& source) {
  const auto start = std::chrono::steady_clock::now();
  ParameterSet& params = model_->parameters();
  params.zero_grad();
  const std::uint64_t batch_seed = rng_();
  const std::size_t length = config_.input_length + config_.output_length;
  const double scale = 1.0 / static_cast<double>(config_.batch);
  LogRecord rec;
  rec.iteration = iteration_ + 1;
  for (std::size_t b = 0; b < config_.batch; ++b) {
    const std::uint64_t seq_seed = mix_seed(batch_seed, b);
    try {
      Rng rng(seq_seed);
      const std::vector<Tensor> seq = source.draw(rng);
      if (seq.size() < length) {
        throw ContractError("training sequence has " + std::to_string(seq.size()) +
                            " frames, split needs " + std::to_string(length));
      }
      Tape tape;
      const ForwardResult r =
          model_->forward_loss(tape, std::span(seq).first(length), config_.input_length,
                               config_.output_length, config_.loss, config_.teacher_forcing, rng);
      const double loss = r.loss.value().item();
      if (!std::isfinite(loss)) throw NumericError("loss is not finite");
      tape.backward(ops::scale(r.loss, scale));
      rec.loss += loss * scale;
      rec.chamfer += r.chamfer * scale;
      rec.emd += r.emd * scale;
    } catch (const NumericError& e) {
      char buf[160];
      std::snprintf(buf, sizeof buf,
                    "iteration %zu, batch element %zu, sequence seed %llu: ", rec.iteration, b,
                    static_cast<unsigned long long>(seq_seed));
      throw NumericError(buf + std::string(e.what()));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].grad.all_finite()) {
      throw NumericError("iteration " + std::to_string(rec.iteration) +
                         ": non-finite gradient in '" + params[i].name + "'");
    }
  }
  clip_gradients(params, config_.clip);
  adam_step(params, adam_, config_.learning_rate);
  for (std::size_t i = 0; i < params.size(); ++i) {
    round_to_float(params[i].value);
    round_to_float(adam_.m[i]);
    round_to_float(adam_.v[i]);
  }
  ++iteration_;
  elapsed_ms_ += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  rec.elapsed_ms = elapsed_ms_;
  return rec;
}

std::vector<LogRecord> Trainer::run(const SequenceSource& source, std::size_t iterations,
                                    const std::function<void(const LogRecord&)>& on_record) {
  std::vector<LogRecord> log;
  for (std::size_t i = 0; i < iterations; ++i) {
    log.push_back(step(source));
    if (on_record) on_record(log.back());
  }
  return log;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.config = model_->config();
  const ParameterSet& params = model_->parameters();
  for (std::size_t i = 0; i < params.size(); ++i) c.parameters.emplace_back(params[i].name, params[i].value);
  c.adam = adam_;
  std::ostringstream rng;
  rng << rng_;
  c.rng_state = rng.str();
  c.iteration = iteration_;
  return c;
}

void Trainer::restore(const Checkpoint& c) {
  if (!(c.config == model_->config())) {
    throw ShapeError("checkpoint model config (digest " + config_digest(c.config) +
                     ") differs from the training model (digest " +
                     config_digest(model_->config()) + ")");
  }
  load_parameters(*model_, c);
  if (!c.adam.m.empty()) {
    adam_ = c.adam;
  } else {
    adam_ = make_adam(model_->parameters());
    adam_.step = c.adam.step;
  }
  if (!c.rng_state.empty()) {
    std::istringstream rng(c.rng_state);
    rng >> rng_;
    if (!rng) throw FormatError("checkpoint: unreadable rng state");
  }
  iteration_ = c.iteration;
}

std::vector<LogRecord> train(Model& model, const SequenceSource& source, const TrainConfig& config) {
  Trainer trainer(model, config);
  std::vector<LogRecord> log;
  for (std::size_t i = 0; i < config.iterations; ++i) {
    log.push_back(trainer.step(source));
    if (config.checkpoint_every > 0 && trainer.iteration() % config.checkpoint_every == 0) {
      save_checkpoint(config.checkpoint_path, trainer.checkpoint());
    }
  }
  return log;
}

Metrics frame_metrics(std::span<const Tensor> predicted, std::span<const Tensor> truth,
                      const EvalOptions& options) {
  if (predicted.size() != truth.size() || predicted.empty()) {
    throw ContractError("frame_metrics: predicted and true frame counts differ or are zero");
  }
  Metrics m;
  for (std::size_t f = 0; f < predicted.size(); ++f) {
    const Tensor& p = predicted[f];
    const Tensor& q = truth[f];
    double cd = chamfer_value(p, q);
    double emd = p.dim(0) <= options.exact_emd_limit
                     ? emd_exact_assignment(p, q).cost
                     : emd_approx_assignment(p, q, options.auction_epsilon).cost;
    if (options.normalization == MetricNormalization::per_point) {
      cd /= static_cast<double>(p.dim(0));
      emd /= static_cast<double>(p.dim(0));
    }
    m.chamfer += cd;
    m.emd += emd;
  }
  m.chamfer /= static_cast<double>(predicted.size());
  m.emd /= static_cast<double>(predicted.size());
  return m;
}

namespace {

void check_eval_sequence(const std::vector<Tensor>& seq, const EvalOptions& o) {
  if (seq.size() < o.input_length + o.output_length) {
    throw ContractError("evaluate: sequence has " + std::to_string(seq.size()) +
                        " frames, split needs " +
                        std::to_string(o.input_length + o.output_length));
  }
}

template <class Predict>
Metrics average(std::span<const std::vector<Tensor>> sequences, const EvalOptions& o,
                Predict predict) {
  if (sequences.empty()) throw ContractError("evaluate: empty test set");
  Metrics total;
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    check_eval_sequence(sequences[i], o);
    const auto seq = std::span(sequences[i]);
    const auto inputs = seq.subspan(0, o.input_length);
    const auto truth = seq.subspan(o.input_length, o.output_length);
    const std::vector<Tensor> predicted = predict(i, inputs);
    const Metrics m = frame_metrics(predicted, truth, o);
    total.chamfer += m.chamfer;
    total.emd += m.emd;
  }
  total.chamfer /= static_cast<double>(sequences.size());
  total.emd /= static_cast<double>(sequences.size());
  return total;
}

}  // namespace

Metrics evaluate(const Model& model, std::span<const std::vector<Tensor>> sequences,
                 const EvalOptions& options) {
  return average(sequences, options, [&](std::size_t i, std::span<const Tensor> inputs) {
    Rng rng(mix_seed(options.seed, i));
    Tape tape(false);
    const EncoderState state = model.encode(tape, inputs, rng);
    const Rollout r = model.predict(tape, state, tape.constant(inputs.back()),
                                    options.output_length, rng);
    std::vector<Tensor> out;
    for (const Var& v : r.clouds) out.push_back(v.value());
    return out;
  });
}

Metrics evaluate_copy_last(std::span<const std::vector<Tensor>> sequences,
                           const EvalOptions& options) {
  return average(sequences, options, [&](std::size_t, std::span<const Tensor> inputs) {
    return std::vector<Tensor>(options.output_length, inputs.back());
  });
}

std::vector<FlowFrame> export_scene_flow(const Model& model, std::span<const Tensor> inputs,
                                         std::size_t horizon, double threshold,
                                         std::uint64_t seed) {
  if (horizon == 0) throw ContractError("export_scene_flow: horizon must be at least 1");
  if (!(threshold >= 0)) throw ContractError("export_scene_flow: threshold must be >= 0");
  Rng rng(seed);
  Tape tape(false);
  const EncoderState state = model.encode(tape, inputs, rng);
  const Rollout r = model.predict(tape, state, tape.constant(inputs.back()), horizon, rng);
  std::vector<FlowFrame> out;
  for (std::size_t s = 0; s < horizon; ++s) {
    const Tensor& base = s == 0 ? inputs.back() : r.clouds[s - 1].value();
    const Tensor& flow = r.flows[s].value();
    std::vector<double> pts, fl;
    for (std::size_t i = 0; i < flow.dim(0); ++i) {
      const double* f = flow.ptr() + 3 * i;
      if (std::sqrt(f[0] * f[0] + f[1] * f[1] + f[2] * f[2]) >= threshold) {
        pts.insert(pts.end(), base.ptr() + 3 * i, base.ptr() + 3 * i + 3);
        fl.insert(fl.end(), f, f + 3);
      }
    }
    const std::size_t n = pts.size() / 3;
    out.push_back({Tensor({n, 3}, std::move(pts)), Tensor({n, 3}, std::move(fl))});
  }
  return out;
}

}  // namespace pointrnn
