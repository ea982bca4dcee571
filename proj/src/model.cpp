#include "pointrnn/model.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "pointrnn/errors.hpp"

namespace pointrnn {

LayerSpec LayerSpec::sample_group(std::size_t divisor, double radius, std::size_t k) {
  return {LayerKind::sample_group, divisor, radius, k, 0};
}

LayerSpec LayerSpec::recurrent(std::size_t divisor, double radius, std::size_t k,
                               std::size_t channels) {
  return {LayerKind::recurrent, divisor, radius, k, channels};
}

LayerSpec LayerSpec::feature_propagation(std::size_t divisor, std::size_t channels) {
  return {LayerKind::feature_propagation, divisor, 0.0, 0, channels};
}

LayerSpec LayerSpec::fully_connected(std::size_t channels) {
  return {LayerKind::fully_connected, 1, 0.0, 0, channels};
}

ModelConfig ModelConfig::mnist_basic(CellKind cell, std::size_t points) {
  ModelConfig c;
  c.architecture = Architecture::basic;
  c.cell = cell;
  c.points = points;
  c.layers = {
      LayerSpec::recurrent(1, 4.0, 8, 64),
      LayerSpec::recurrent(1, 8.0, 8, 128),
      LayerSpec::recurrent(1, 12.0, 8, 256),
      LayerSpec::fully_connected(64),
      LayerSpec::fully_connected(3),
  };
  return c;
}

ModelConfig ModelConfig::mnist_advanced(CellKind cell, std::size_t points) {
  ModelConfig c;
  c.architecture = Architecture::advanced;
  c.cell = cell;
  c.points = points;
  c.layers = {
      LayerSpec::sample_group(2, 1.0, 4),
      LayerSpec::recurrent(2, 4.0, 12, 64),
      LayerSpec::sample_group(4, 2.0, 4),
      LayerSpec::recurrent(4, 8.0, 8, 128),
      LayerSpec::sample_group(8, 4.0, 4),
      LayerSpec::recurrent(8, 12.0, 4, 256),
      LayerSpec::feature_propagation(4, 128),
      LayerSpec::feature_propagation(2, 128),
      LayerSpec::feature_propagation(1, 128),
      LayerSpec::fully_connected(64),
      LayerSpec::fully_connected(3),
  };
  return c;
}

ModelConfig ModelConfig::driving_advanced(CellKind cell, std::size_t points) {
  ModelConfig c;
  c.architecture = Architecture::advanced;
  c.cell = cell;
  c.points = points;
  c.layers = {
      LayerSpec::sample_group(2, 0.5, 8),
      LayerSpec::recurrent(2, 1.0, 24, 128),
      LayerSpec::sample_group(4, 1.0, 8),
      LayerSpec::recurrent(4, 2.0, 16, 256),
      LayerSpec::sample_group(8, 2.0, 8),
      LayerSpec::recurrent(8, 4.0, 8, 512),
      LayerSpec::feature_propagation(4, 256),
      LayerSpec::feature_propagation(2, 256),
      LayerSpec::feature_propagation(1, 256),
      LayerSpec::fully_connected(128),
      LayerSpec::fully_connected(3),
  };
  return c;
}

namespace {

std::string layer_label(std::size_t i, const LayerSpec& s) {
  return "layer " + std::to_string(i) + " (" + to_string(s.kind) + ")";
}

}  // namespace

void ModelConfig::validate() const {
  if (points == 0) throw ConfigError("points must be at least 1");
  if (input_length == 0) throw ConfigError("input_length must be at least 1");
  if (horizon == 0) throw ConfigError("horizon must be at least 1");
  if (layers.empty()) throw ConfigError("layer stack is empty");

  struct Slot {
    std::size_t points;
    std::size_t channels;
  };
  std::vector<Slot> stack{{points, 0}};
  bool decoding = false;  // an FP or FC layer has been seen
  bool dense = false;     // an FC layer has been seen
  std::size_t units = 0, groups = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& s = layers[i];
    const std::string where = layer_label(i, s);
    auto expect_points = [&](std::size_t have) {
      if (s.divisor == 0 || points % s.divisor != 0) {
        throw ConfigError(where + ": n=" + std::to_string(points) + " is not divisible by " +
                          std::to_string(s.divisor));
      }
      if (points / s.divisor != have) {
        throw ConfigError(where + ": declares n/" + std::to_string(s.divisor) + " = " +
                          std::to_string(points / s.divisor) + " points but its input has " +
                          std::to_string(have));
      }
    };
    switch (s.kind) {
      case LayerKind::sample_group: {
        if (decoding) throw ConfigError(where + ": sampling after propagation or dense layers");
        if (s.divisor == 0 || points % s.divisor != 0) {
          throw ConfigError(where + ": n=" + std::to_string(points) +
                            " is not divisible by " + std::to_string(s.divisor));
        }
        const std::size_t m = points / s.divisor;
        if (m > stack.back().points) {
          throw ConfigError(where + ": cannot sample " + std::to_string(m) + " points from " +
                            std::to_string(stack.back().points));
        }
        if (!(s.radius > 0) || s.k == 0) throw ConfigError(where + ": needs radius > 0 and k >= 1");
        stack.push_back({m, stack.back().channels});
        ++groups;
        break;
      }
      case LayerKind::recurrent:
        if (decoding) throw ConfigError(where + ": recurrent unit after propagation or dense layers");
        expect_points(stack.back().points);
        if (s.channels == 0 || s.k == 0) throw ConfigError(where + ": needs channels and k >= 1");
        if (query == QueryKind::ball && !(s.radius > 0)) throw ConfigError(where + ": needs radius > 0");
        stack.back().channels = s.channels;
        ++units;
        break;
      case LayerKind::feature_propagation: {
        if (dense) throw ConfigError(where + ": propagation after dense layers");
        decoding = true;
        if (stack.size() < 2) throw ConfigError(where + ": no coarser level to propagate from");
        const Slot source = stack.back();
        stack.pop_back();
        expect_points(stack.back().points);
        if (source.channels == 0) throw ConfigError(where + ": source level carries no features");
        if (s.channels == 0) throw ConfigError(where + ": needs channels >= 1");
        stack.back().channels = s.channels;
        break;
      }
      case LayerKind::fully_connected:
        decoding = dense = true;
        if (stack.size() != 1) {
          throw ConfigError(where + ": dense head must run on the full-resolution level");
        }
        if (stack.back().channels == 0) throw ConfigError(where + ": input level has no features");
        if (s.channels == 0) throw ConfigError(where + ": needs channels >= 1");
        stack.back().channels = s.channels;
        break;
    }
  }
  if (units == 0) throw ConfigError("layer stack has no recurrent unit");
  if (!dense || layers.back().kind != LayerKind::fully_connected || layers.back().channels != 3) {
    throw ConfigError("layer stack must end with a 3-channel dense layer");
  }
  if (architecture == Architecture::basic && groups > 0) {
    throw ConfigError("basic architecture cannot contain sample-group or propagation layers");
  }
  if (architecture == Architecture::advanced && groups == 0) {
    throw ConfigError("advanced architecture needs at least one sample-group layer");
  }
}

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::sample_group: return "sample_group";
    case LayerKind::recurrent: return "recurrent";
    case LayerKind::feature_propagation: return "feature_propagation";
    case LayerKind::fully_connected: return "fully_connected";
  }
  return "?";
}

const char* to_string(Architecture kind) {
  return kind == Architecture::basic ? "basic" : "advanced";
}

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::size_t parse_count(const std::string& v, const std::string& where) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(where + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

double parse_real(const std::string& v, const std::string& where) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw ConfigError(where + ": expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& v, const std::string& where) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(where + ": expected true or false, got '" + v + "'");
}

template <class E>
E parse_enum(const std::string& v, const std::string& where,
             std::initializer_list<std::pair<const char*, E>> options) {
  for (const auto& [name, value] : options)
    if (v == name) return value;
  throw ConfigError(where + ": unknown value '" + v + "'");
}

LayerSpec parse_layer(const std::string& body, const std::string& where) {
  std::istringstream in(body);
  std::string kind;
  in >> kind;
  LayerSpec s;
  s.kind = parse_enum<LayerKind>(kind, where,
                                 {{"sample_group", LayerKind::sample_group},
                                  {"recurrent", LayerKind::recurrent},
                                  {"feature_propagation", LayerKind::feature_propagation},
                                  {"fully_connected", LayerKind::fully_connected}});
  std::string field;
  while (in >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key=value, got '" + field + "'");
    const std::string key = field.substr(0, eq);
    const std::string value = field.substr(eq + 1);
    if (key == "divisor") s.divisor = parse_count(value, where);
    else if (key == "radius") s.radius = parse_real(value, where);
    else if (key == "k") s.k = parse_count(value, where);
    else if (key == "channels") s.channels = parse_count(value, where);
    else throw ConfigError(where + ": unknown layer field '" + key + "'");
  }
  return s;
}

}  // namespace

std::string to_text(const ModelConfig& c) {
  std::ostringstream out;
  out << "architecture = " << to_string(c.architecture) << '\n'
      << "cell = " << to_string(c.cell) << '\n'
      << "points = " << c.points << '\n'
      << "input_length = " << c.input_length << '\n'
      << "horizon = " << c.horizon << '\n'
      << "query = " << to_string(c.query) << '\n'
      << "pool = " << to_string(c.pool) << '\n'
      << "ball_sampling = " << (c.ball_sampling == BallSampling::uniform ? "uniform" : "first_k")
      << '\n'
      << "rnn_tanh = " << (c.rnn_tanh ? "true" : "false") << '\n';
  for (const LayerSpec& s : c.layers) {
    out << "layer = " << to_string(s.kind);
    switch (s.kind) {
      case LayerKind::sample_group:
        out << " divisor=" << s.divisor << " radius=" << format_double(s.radius) << " k=" << s.k;
        break;
      case LayerKind::recurrent:
        out << " divisor=" << s.divisor << " radius=" << format_double(s.radius) << " k=" << s.k
            << " channels=" << s.channels;
        break;
      case LayerKind::feature_propagation:
        out << " divisor=" << s.divisor << " channels=" << s.channels;
        break;
      case LayerKind::fully_connected:
        out << " channels=" << s.channels;
        break;
    }
    out << '\n';
  }
  return out.str();
}

ModelConfig parse_model_config(std::string_view text) {
  ModelConfig c;
  c.layers.clear();
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const std::string where = "config line " + std::to_string(line_no);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (key == "architecture") {
      c.architecture = parse_enum<Architecture>(
          value, where, {{"basic", Architecture::basic}, {"advanced", Architecture::advanced}});
    } else if (key == "cell") {
      c.cell = parse_enum<CellKind>(
          value, where, {{"rnn", CellKind::rnn}, {"gru", CellKind::gru}, {"lstm", CellKind::lstm}});
    } else if (key == "points") {
      c.points = parse_count(value, where);
    } else if (key == "input_length") {
      c.input_length = parse_count(value, where);
    } else if (key == "horizon") {
      c.horizon = parse_count(value, where);
    } else if (key == "query") {
      c.query = parse_enum<QueryKind>(value, where, {{"knn", QueryKind::knn}, {"ball", QueryKind::ball}});
    } else if (key == "pool") {
      c.pool = parse_enum<PoolKind>(value, where, {{"max", PoolKind::max}, {"mean", PoolKind::mean}});
    } else if (key == "ball_sampling") {
      c.ball_sampling = parse_enum<BallSampling>(
          value, where, {{"uniform", BallSampling::uniform}, {"first_k", BallSampling::first_k}});
    } else if (key == "rnn_tanh") {
      c.rnn_tanh = parse_bool(value, where);
    } else if (key == "layer") {
      c.layers.push_back(parse_layer(value, where));
    } else {
      throw ConfigError(where + ": unknown key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

ModelConfig load_model_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_model_config(buf.str());
}

void save_model_config(const std::string& path, const ModelConfig& config) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config file '" + path + "'");
  out << to_text(config);
}

std::string config_digest(const ModelConfig& config) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : to_text(config)) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Level set_abstraction(const Level& input, std::size_t points, double radius, std::size_t k,
                      Rng& rng, const BallQueryOptions& options) {
  const Tensor& coords = input.coords.value();
  const auto picks = farthest_point_sample(coords, points);
  Level out;
  out.coords = ops::gather_rows(input.coords, picks, {points});
  if (input.features) {
    const NeighborTable table = ball_query(out.coords.value(), coords, radius, k, rng, options);
    out.features = ops::gather_max_pool(*input.features, table.indices, points, k);
  }
  return out;
}

Var feature_propagation(Tape& tape, const Level& target, const Level& source,
                        const AffineParams& map) {
  if (!source.features) throw ContractError("feature_propagation: source level has no features");
  Var x = interpolate_features(target.coords, source.coords, *source.features);
  if (target.features) x = ops::concat_last({x, *target.features});
  if (x.value().dim(1) != map.in_channels()) {
    throw ShapeError("feature_propagation: input width " + std::to_string(x.value().dim(1)) +
                     " does not match map width " + std::to_string(map.in_channels()));
  }
  return ops::relu(map.apply(tape, x));
}

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  auto build_units = [&](const std::string& prefix, std::vector<PointCell>& out) {
    std::size_t features = 0;
    std::size_t index = 0;
    for (const LayerSpec& s : config_.layers) {
      if (s.kind == LayerKind::recurrent) {
        out.emplace_back(config_.cell, features, s.channels, params_,
                         prefix + ".unit" + std::to_string(index++), rng, config_.rnn_tanh);
        features = s.channels;
      }
    }
  };
  // Sample-group layers keep the width of the level they sample.
  build_units("encoder", encoder_);
  build_units("predictor", predictor_);

  std::vector<std::size_t> widths{0};
  std::size_t fp = 0, fc = 0;
  for (const LayerSpec& s : config_.layers) {
    switch (s.kind) {
      case LayerKind::sample_group: widths.push_back(widths.back()); break;
      case LayerKind::recurrent: widths.back() = s.channels; break;
      case LayerKind::feature_propagation: {
        const std::size_t source = widths.back();
        widths.pop_back();
        head_.propagation.push_back(make_affine(params_, "predictor.fp" + std::to_string(fp++),
                                                source + widths.back(), s.channels, rng));
        widths.back() = s.channels;
        break;
      }
      case LayerKind::fully_connected:
        head_.dense.push_back(make_affine(params_, "predictor.fc" + std::to_string(fc++),
                                          widths.back(), s.channels, rng));
        widths.back() = s.channels;
        break;
    }
  }
}

NeighborQuery Model::query_for(const LayerSpec& spec) const {
  NeighborQuery q;
  q.kind = config_.query;
  q.radius = spec.radius;
  q.k = spec.k;
  q.ball.sampling = config_.ball_sampling;
  return q;
}

Var Model::run(Tape& tape, const std::vector<PointCell>& cells, std::vector<CellState>& states,
               const Var& frame, bool with_head, Rng& rng, std::vector<LayerTrace>* trace) const {
  std::vector<Level> levels{{frame, std::nullopt}};
  std::size_t unit = 0, fp = 0, fc = 0;
  const std::size_t dense_count = head_.dense.size();
  for (const LayerSpec& s : config_.layers) {
    if (!with_head &&
        (s.kind == LayerKind::feature_propagation || s.kind == LayerKind::fully_connected)) {
      break;
    }
    switch (s.kind) {
      case LayerKind::sample_group: {
        BallQueryOptions options;
        options.sampling = config_.ball_sampling;
        levels.push_back(set_abstraction(levels.back(), config_.points / s.divisor, s.radius,
                                         s.k, rng, options));
        break;
      }
      case LayerKind::recurrent: {
        Level& top = levels.back();
        const PointCell& cell = cells[unit];
        if (!states[unit].hidden.valid()) states[unit] = cell.init_state(top.coords);
        StepResult r = cell.step({top.coords, top.features}, states[unit], query_for(s),
                                 config_.pool, rng);
        top.features = r.output;
        states[unit] = std::move(r.state);
        ++unit;
        break;
      }
      case LayerKind::feature_propagation: {
        const Level source = levels.back();
        levels.pop_back();
        levels.back().features = feature_propagation(tape, levels.back(), source, head_.propagation[fp++]);
        break;
      }
      case LayerKind::fully_connected: {
        Level& top = levels.back();
        Var y = head_.dense[fc].apply(tape, *top.features);
        if (++fc < dense_count) y = ops::relu(y);
        top.features = y;
        break;
      }
    }
    if (trace) {
      const Level& top = levels.back();
      trace->push_back({s.kind, top.coords.value().dim(0),
                        top.features ? top.features->value().dim(1) : 0});
    }
  }
  return with_head ? *levels.front().features : Var{};
}

namespace {

void check_frames(std::span<const Tensor> frames, std::size_t points, const char* what) {
  for (std::size_t t = 0; t < frames.size(); ++t) {
    require_matrix(frames[t], 3, what);
    if (frames[t].dim(0) != points) {
      throw ContractError(std::string(what) + ": frame " + std::to_string(t) + " has " +
                          std::to_string(frames[t].dim(0)) + " points, expected " +
                          std::to_string(points));
    }
  }
}

}  // namespace

EncoderState Model::encode(Tape& tape, std::span<const Tensor> frames, Rng& rng) const {
  if (frames.empty()) throw ContractError("encode: empty input sequence");
  check_frames(frames, config_.points, "encode");
  EncoderState state;
  state.layers.resize(encoder_.size());
  for (const Tensor& f : frames) run(tape, encoder_, state.layers, tape.constant(f), false, rng, nullptr);
  return state;
}

Rollout Model::predict(Tape& tape, const EncoderState& state, const Var& last_input,
                       std::size_t horizon, Rng& rng, std::span<const Tensor> teacher) const {
  if (horizon == 0) throw ContractError("predict: horizon must be at least 1");
  if (state.layers.size() != predictor_.size()) {
    throw ContractError("predict: encoder state has " + std::to_string(state.layers.size()) +
                        " layers, model has " + std::to_string(predictor_.size()));
  }
  check_frames({&last_input.value(), 1}, config_.points, "predict");
  if (!teacher.empty()) {
    if (teacher.size() + 1 < horizon) throw ContractError("predict: too few teacher frames");
    check_frames(teacher, config_.points, "predict teacher");
  }
  std::vector<CellState> states = state.layers;
  Rollout out;
  Var current = last_input;
  for (std::size_t s = 0; s < horizon; ++s) {
    const Var flow = run(tape, predictor_, states, current, true, rng, nullptr);
    const Var next = ops::add(current, flow);
    out.flows.push_back(flow);
    out.clouds.push_back(next);
    if (s + 1 < horizon) current = teacher.empty() ? next : tape.constant(teacher[s]);
  }
  return out;
}

ForwardResult Model::forward_loss(Tape& tape, std::span<const Tensor> sequence, std::size_t in_len,
                                  std::size_t out_len, const LossWeights& weights,
                                  bool teacher_forcing, Rng& rng) const {
  if (in_len == 0 || out_len == 0) throw ContractError("forward_loss: empty split");
  if (sequence.size() != in_len + out_len) {
    throw ContractError("forward_loss: sequence has " + std::to_string(sequence.size()) +
                        " frames, split needs " + std::to_string(in_len + out_len));
  }
  if (!(weights.alpha >= 0) || !(weights.beta >= 0)) {
    throw ContractError("forward_loss: alpha and beta must be non-negative");
  }
  const auto inputs = sequence.subspan(0, in_len);
  const auto targets = sequence.subspan(in_len, out_len);
  EncoderState state = encode(tape, inputs, rng);
  ForwardResult r;
  r.rollout = predict(tape, state, tape.constant(inputs.back()), out_len, rng,
                      teacher_forcing ? targets : std::span<const Tensor>{});
  Var total = tape.constant(Tensor::scalar(0.0));
  for (std::size_t s = 0; s < out_len; ++s) {
    const Var& p = r.rollout.clouds[s];
    const Var q = tape.constant(targets[s]);
    const Var cd = chamfer(p, q);
    const bool exact = config_.points <= weights.exact_emd_limit;
    const Var emd = exact ? emd_exact(p, q).loss : emd_approx(p, q, weights.auction_epsilon).loss;
    r.chamfer += cd.value().item();
    r.emd += emd.value().item();
    if (weights.alpha > 0) total = ops::add(total, ops::scale(cd, weights.alpha));
    if (weights.beta > 0) total = ops::add(total, ops::scale(emd, weights.beta));
  }
  const double inv = 1.0 / static_cast<double>(out_len);
  r.loss = ops::scale(total, inv);
  r.chamfer *= inv;
  r.emd *= inv;
  return r;
}

std::vector<LayerTrace> Model::trace(const Tensor& frame, Rng& rng) const {
  check_frames({&frame, 1}, config_.points, "trace");
  Tape tape(false);
  std::vector<CellState> states(predictor_.size());
  std::vector<LayerTrace> out;
  run(tape, predictor_, states, tape.constant(frame), true, rng, &out);
  return out;
}

Model build_model(const ModelConfig& config, std::uint64_t seed) { return Model(config, seed); }

std::size_t count_parameters(const Model& model) { return model.parameter_count(); }

}  // namespace pointrnn
