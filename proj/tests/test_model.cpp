#include <cmath>
#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "pointrnn/errors.hpp"
#include "pointrnn/model.hpp"
#include "support.hpp"

using namespace pointrnn;
using testing::random_cloud;

namespace {

std::vector<Tensor> random_sequence(std::size_t frames, std::size_t n, std::mt19937_64& gen,
                                    double extent = 3.0) {
  std::vector<Tensor> out;
  Tensor base = random_cloud(n, gen, extent);
  for (std::size_t t = 0; t < frames; ++t) {
    Tensor f = base;
    for (std::size_t i = 0; i < n; ++i) f.at(i, 0) += 0.3 * double(t);
    out.push_back(f);
  }
  return out;
}

ModelConfig micro(CellKind cell, std::size_t n = 8) {
  ModelConfig c;
  c.architecture = Architecture::basic;
  c.cell = cell;
  c.points = n;
  c.input_length = 2;
  c.horizon = 2;
  c.layers = {LayerSpec::recurrent(1, 2.0, 3, 4), LayerSpec::fully_connected(4),
              LayerSpec::fully_connected(3)};
  return c;
}

std::vector<std::pair<std::size_t, std::size_t>> ladder(const std::vector<LayerTrace>& t) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& l : t) out.emplace_back(l.points, l.channels);
  return out;
}

}  // namespace

TEST_CASE("presets validate and round-trip through text") {
  for (CellKind cell : {CellKind::rnn, CellKind::gru, CellKind::lstm}) {
    for (const ModelConfig& c : {ModelConfig::mnist_basic(cell), ModelConfig::mnist_advanced(cell),
                                 ModelConfig::driving_advanced(cell)}) {
      CHECK_NOTHROW(c.validate());
      const ModelConfig back = parse_model_config(to_text(c));
      CHECK(back == c);
      CHECK(config_digest(back) == config_digest(c));
      CHECK(config_digest(c).size() == 16);
    }
  }
  CHECK(config_digest(ModelConfig::mnist_basic(CellKind::rnn)) !=
        config_digest(ModelConfig::mnist_basic(CellKind::gru)));
}

TEST_CASE("config text accepts comments and reports bad lines") {
  const char* text =
      "# micro model\n"
      "architecture = basic\n"
      "cell = gru   # trailing\n"
      "points = 16\n"
      "query = knn\n"
      "pool = mean\n"
      "layer = recurrent divisor=1 radius=0.5 k=4 channels=8\n"
      "layer = fully_connected channels=3\n";
  ModelConfig c = parse_model_config(text);
  CHECK(c.cell == CellKind::gru);
  CHECK(c.points == 16);
  CHECK(c.query == QueryKind::knn);
  CHECK(c.pool == PoolKind::mean);
  REQUIRE(c.layers.size() == 2);
  CHECK(c.layers[0] == LayerSpec::recurrent(1, 0.5, 4, 8));
  CHECK_NOTHROW(c.validate());

  CHECK_THROWS_AS(parse_model_config("cell = transformer\n"), ConfigError);
  CHECK_THROWS_AS(parse_model_config("colour = red\n"), ConfigError);
  CHECK_THROWS_AS(parse_model_config("points\n"), ConfigError);
  CHECK_THROWS_AS(parse_model_config("points = -3\n"), ConfigError);
  CHECK_THROWS_AS(parse_model_config("layer = recurrent divisor=1 k=4\n").validate(), ConfigError);
  try {
    parse_model_config("architecture = basic\n\ncell = lstm\nbogus = 1\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 4") != std::string::npos);
  }

  const auto path = std::filesystem::temp_directory_path() / "pointrnn_config_test.txt";
  save_model_config(path.string(), ModelConfig::mnist_advanced(CellKind::lstm));
  CHECK(load_model_config(path.string()) == ModelConfig::mnist_advanced(CellKind::lstm));
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_model_config("/nonexistent/config.txt"), ConfigError);
}

TEST_CASE("validation rejects inconsistent stacks") {
  ModelConfig c = ModelConfig::mnist_advanced(CellKind::lstm);
  c.points = 100;  // not divisible by 8
  CHECK_THROWS_AS(c.validate(), ConfigError);

  c = ModelConfig::mnist_advanced(CellKind::lstm);
  c.layers[1].divisor = 4;  // PU declares n/4 on an n/2 level
  CHECK_THROWS_AS(c.validate(), ConfigError);

  c = ModelConfig::mnist_advanced(CellKind::lstm);
  c.layers.back().channels = 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  c = ModelConfig::mnist_basic(CellKind::lstm);
  c.layers.insert(c.layers.begin(), LayerSpec::sample_group(2, 1.0, 4));
  CHECK_THROWS_AS(c.validate(), ConfigError);

  c = ModelConfig::mnist_advanced(CellKind::lstm);
  c.layers.erase(c.layers.begin() + 6);  // drop one FP: ladder no longer returns to n
  CHECK_THROWS_AS(c.validate(), ConfigError);

  c = ModelConfig::mnist_basic(CellKind::lstm);
  std::swap(c.layers[2], c.layers[3]);  // PU after FC
  CHECK_THROWS_AS(c.validate(), ConfigError);

  c = ModelConfig::mnist_basic(CellKind::lstm);
  c.layers[0].radius = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.query = QueryKind::knn;
  CHECK_NOTHROW(c.validate());

  CHECK_THROWS_AS(Model(ModelConfig{}, 0), ConfigError);
}

TEST_CASE("mnist advanced point ladder") {
  Model m(ModelConfig::mnist_advanced(CellKind::lstm), 1);
  std::mt19937_64 gen(1);
  Rng rng(1);
  auto t = m.trace(random_cloud(128, gen, 30.0), rng);
  using P = std::pair<std::size_t, std::size_t>;
  CHECK(ladder(t) == std::vector<P>{{64, 0}, {64, 64}, {32, 64}, {32, 128}, {16, 128}, {16, 256},
                                    {32, 128}, {64, 128}, {128, 128}, {128, 64}, {128, 3}});
  CHECK(t[0].kind == LayerKind::sample_group);
  CHECK(t[6].kind == LayerKind::feature_propagation);
  CHECK(t[10].kind == LayerKind::fully_connected);
}

TEST_CASE("driving advanced point ladder") {
  Model m(ModelConfig::driving_advanced(CellKind::gru, 256), 1);
  std::mt19937_64 gen(2);
  Rng rng(2);
  using P = std::pair<std::size_t, std::size_t>;
  CHECK(ladder(m.trace(random_cloud(256, gen, 10.0), rng)) ==
        std::vector<P>{{128, 0}, {128, 128}, {64, 128}, {64, 256}, {32, 256}, {32, 512},
                       {64, 256}, {128, 256}, {256, 256}, {256, 128}, {256, 3}});
}

TEST_CASE("parameter counts") {
  struct Row {
    ModelConfig config;
    std::size_t exact;
    double table;
  };
  const Row rows[] = {
      {ModelConfig::mnist_basic(CellKind::rnn), 274179, 0.27},
      {ModelConfig::mnist_basic(CellKind::gru), 962179, 0.96},
      {ModelConfig::mnist_basic(CellKind::lstm), 1222403, 1.22},
      {ModelConfig::mnist_advanced(CellKind::rnn), 356483, 0.36},
      {ModelConfig::mnist_advanced(CellKind::gru), 1044483, 1.04},
      {ModelConfig::mnist_advanced(CellKind::lstm), 1304707, 1.30},
  };
  for (const Row& r : rows) {
    Model m(r.config, 0);
    CHECK(count_parameters(m) == r.exact);
    CHECK(std::abs(double(m.parameter_count()) / 1e6 - r.table) <= 0.15 * r.table);
  }
}

TEST_CASE("encoder and predictor keep separate parameters") {
  Model m(ModelConfig::mnist_basic(CellKind::lstm), 3);
  CHECK(m.encoder_cells().size() == 3);
  CHECK(m.predictor_cells().size() == 3);
  CHECK(m.encoder_cells()[0].input_channels() == 0);
  CHECK(m.encoder_cells()[1].input_channels() == 64);
  const auto& ps = m.parameters();
  REQUIRE(ps.find("encoder.unit0.input.weight") != nullptr);
  REQUIRE(ps.find("predictor.unit0.input.weight") != nullptr);
  CHECK(ps.find("encoder.unit0.input.weight")->value.shape() == Shape{67, 64});
  CHECK(ps.find("predictor.fc1.weight")->value.shape() == Shape{64, 3});
  CHECK(ps.find("encoder.fc0.weight") == nullptr);
  CHECK(ps.find("encoder.unit0.input.weight")->value !=
        ps.find("predictor.unit0.input.weight")->value);

  Model adv(ModelConfig::mnist_advanced(CellKind::lstm), 3);
  CHECK(adv.parameters().find("predictor.fp0.weight")->value.shape() == Shape{256 + 128, 128});
  CHECK(adv.parameters().find("predictor.fp2.weight")->value.shape() == Shape{128, 128});
}

TEST_CASE("construction is a function of the seed") {
  Model a(micro(CellKind::gru), 5), b(micro(CellKind::gru), 5), c(micro(CellKind::gru), 6);
  bool differs = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    CHECK(a.parameters()[i].value == b.parameters()[i].value);
    differs |= a.parameters()[i].value != c.parameters()[i].value;
  }
  CHECK(differs);
}

TEST_CASE("rollout adds each flow to its input frame") {
  Model m(ModelConfig::mnist_advanced(CellKind::gru, 32), 4);
  std::mt19937_64 gen(4);
  auto seq = random_sequence(6, 32, gen, 20.0);
  Tape tape(false);
  Rng rng(4);
  EncoderState st = m.encode(tape, std::span(seq).subspan(0, 3), rng);
  CHECK(st.layers.size() == 3);
  Var last = tape.constant(seq[2]);
  Rollout r = m.predict(tape, st, last, 3, rng);
  REQUIRE(r.clouds.size() == 3);
  CHECK(max_abs_diff(r.clouds[0].value(), [&] {
          Tensor t = seq[2];
          for (std::size_t i = 0; i < t.size(); ++i) t[i] += r.flows[0].value()[i];
          return t;
        }()) == 0.0);
  for (std::size_t s = 1; s < 3; ++s) {
    Tensor expect = r.clouds[s - 1].value();
    for (std::size_t i = 0; i < expect.size(); ++i) expect[i] += r.flows[s].value()[i];
    CHECK(r.clouds[s].value() == expect);
  }

  // With teacher frames, step s > 0 starts from the given frame.
  Rng rng2(4);
  Tape tape2(false);
  EncoderState st2 = m.encode(tape2, std::span(seq).subspan(0, 3), rng2);
  Rollout tf = m.predict(tape2, st2, tape2.constant(seq[2]), 3, rng2, std::span(seq).subspan(3, 3));
  Tensor expect = seq[3];
  for (std::size_t i = 0; i < expect.size(); ++i) expect[i] += tf.flows[1].value()[i];
  CHECK(tf.clouds[1].value() == expect);

  CHECK_THROWS_AS(m.predict(tape2, st2, tape2.constant(seq[2]), 0, rng2), ContractError);
  CHECK_THROWS_AS(m.encode(tape2, std::span(seq).subspan(0, 0), rng2), ContractError);
  std::vector<Tensor> wrong{random_cloud(31, gen)};
  CHECK_THROWS_AS(m.encode(tape2, wrong, rng2), ContractError);
}

TEST_CASE("forward loss averages the per-frame terms") {
  Model m(micro(CellKind::lstm, 16), 7);
  std::mt19937_64 gen(7);
  auto seq = random_sequence(4, 16, gen);
  Tape tape;
  Rng rng(7);
  ForwardResult r = m.forward_loss(tape, seq, 2, 2, {}, false, rng);
  double cd = 0.0, emd = 0.0;
  for (std::size_t s = 0; s < 2; ++s) {
    cd += chamfer_value(r.rollout.clouds[s].value(), seq[2 + s]);
    emd += emd_exact_assignment(r.rollout.clouds[s].value(), seq[2 + s]).cost;
  }
  CHECK(r.chamfer == doctest::Approx(cd / 2).epsilon(1e-12));
  CHECK(r.emd == doctest::Approx(emd / 2).epsilon(1e-12));
  CHECK(r.loss.value().item() == doctest::Approx((cd + emd) / 2).epsilon(1e-12));

  Tape t2;
  Rng rng2(7);
  ForwardResult weighted = m.forward_loss(t2, seq, 2, 2, {.alpha = 2.0, .beta = 0.0}, false, rng2);
  CHECK(weighted.loss.value().item() == doctest::Approx(cd).epsilon(1e-12));

  Tape t3;
  CHECK_THROWS_AS(m.forward_loss(t3, seq, 3, 2, {}, false, rng), ContractError);
  CHECK_THROWS_AS(m.forward_loss(t3, seq, 2, 2, {.alpha = -1}, false, rng), ContractError);
}

TEST_CASE("micro model gradients match central differences") {
  std::mt19937_64 gen(8);
  for (CellKind kind : {CellKind::rnn, CellKind::gru, CellKind::lstm}) {
    ModelConfig cfg = micro(kind);
    cfg.query = QueryKind::knn;
    Model m(cfg, 8);
    auto seq = random_sequence(4, 8, gen, 1.0);
    auto loss = [&] {
      Tape tape;
      Rng rng(1);
      ForwardResult r = m.forward_loss(tape, seq, 2, 2, {}, false, rng);
      m.parameters().zero_grad();
      tape.backward(r.loss);
      return r.loss.value().item();
    };
    loss();
    std::vector<Tensor> analytic;
    for (std::size_t i = 0; i < m.parameters().size(); ++i) analytic.push_back(m.parameters()[i].grad);
    double worst = 0.0;
    const double h = 1e-5;
    for (std::size_t i = 0; i < m.parameters().size(); ++i) {
      Parameter& p = m.parameters()[i];
      for (std::size_t e = 0; e < p.value.size(); e += 3) {
        const double keep = p.value[e];
        p.value[e] = keep + h;
        const double up = loss();
        p.value[e] = keep - h;
        const double down = loss();
        p.value[e] = keep;
        const double numeric = (up - down) / (2 * h);
        const double a = analytic[i][e];
        if (std::abs(a) < 1e-6 && std::abs(numeric) < 1e-6) continue;
        worst = std::max(worst, std::abs(a - numeric) / std::max(1e-8, std::abs(numeric)));
      }
    }
    CHECK(worst < 1e-3);
  }
}
