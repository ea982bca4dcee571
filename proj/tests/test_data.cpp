#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "pointrnn/data.hpp"
#include "pointrnn/errors.hpp"
#include "pointrnn/losses.hpp"
#include "support.hpp"

using namespace pointrnn;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> idx_blob(std::uint32_t magic, std::vector<std::uint32_t> dims,
                                   std::vector<std::uint8_t> payload) {
  std::vector<std::uint8_t> out;
  auto be = [&](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
  };
  be(magic);
  for (auto d : dims) be(d);
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

std::string fnv_hex(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// A 28x28 image holding a filled 6x6 block at rows/cols 10..15.
ImageSet block_images(std::size_t count) {
  ImageSet s;
  s.count = count;
  s.rows = s.cols = 28;
  s.pixels.assign(count * 784, 0);
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t r = 10; r < 16; ++r)
      for (std::size_t c = 10; c < 16; ++c) s.pixels[i * 784 + r * 28 + c] = 200;
  return s;
}

// Independent scalar bounce simulation on one axis.
std::vector<double> bounce_trace(double p, double v, double limit, int steps) {
  std::vector<double> out{p};
  for (int i = 0; i < steps; ++i) {
    double next = p + v;
    if (next > limit) {
      next = limit;
      v = -v;
    } else if (next < 0) {
      next = 0;
      v = -v;
    }
    p = next;
    out.push_back(p);
  }
  return out;
}

fs::path temp_path(const std::string& name) { return fs::temp_directory_path() / name; }

const std::string kMnistDir = std::string(POINTRNN_TEST_DATA) + "/mnist";

}  // namespace

TEST_CASE("idx parsing") {
  ImageSet s = parse_idx_images(idx_blob(0x803, {1, 2, 2}, {0, 1, 2, 3}));
  CHECK(s.count == 1);
  CHECK(s.rows == 2);
  CHECK(s.cols == 2);
  CHECK(s.pixels == std::vector<std::uint8_t>{0, 1, 2, 3});

  CHECK(parse_idx_labels(idx_blob(0x801, {3}, {7, 0, 9})) == std::vector<std::uint8_t>{7, 0, 9});

  CHECK_THROWS_AS(parse_idx_images(idx_blob(0, {1, 2, 2}, {0, 1, 2, 3})), FormatError);
  CHECK_THROWS_AS(parse_idx_images(idx_blob(0x801, {1, 2, 2}, {0, 1, 2, 3})), FormatError);
  CHECK_THROWS_AS(parse_idx_labels(idx_blob(0x803, {1}, {0})), FormatError);
  try {
    parse_idx_images(idx_blob(0x803, {2, 2, 2}, {0, 1, 2, 3, 4}));
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("offset 21") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_idx_images(idx_blob(0x803, {1}, {})), FormatError);
  CHECK_THROWS_AS(load_mnist_idx("/nonexistent/images"), FormatError);
}

TEST_CASE("bundled MNIST subset") {
  const std::string path = kMnistDir + "/images.idx3-ubyte";
  if (!fs::exists(path)) {
    MESSAGE("MNIST subset not present; run tools/make_mnist_idx.py");
    return;
  }
  ImageSet s = load_mnist_idx(path);
  CHECK(s.count == 5000);
  CHECK(s.rows == 28);
  CHECK(s.cols == 28);
  CHECK(fnv_hex(s.image(0)) == "d606c220677aad08");
  CHECK(fnv_hex(s.image(4999)) == "47ebc95d99c1dc27");
  CHECK(digit_to_points(s.image(0), 28, 28).size() == 169);
  CHECK(load_mnist_labels(kMnistDir + "/labels.idx1-ubyte").size() == 5000);
}

TEST_CASE("official MNIST training file") {
  const std::string path = kMnistDir + "/train-images-idx3-ubyte";
  if (!fs::exists(path)) {
    MESSAGE("official MNIST training file not present; skipped");
    return;
  }
  ImageSet s = load_mnist_idx(path);
  CHECK(s.count == 60000);
  CHECK(s.rows == 28);
  CHECK(s.cols == 28);
  const std::string labels = kMnistDir + "/train-labels-idx1-ubyte";
  if (fs::exists(labels)) {
    auto l = load_mnist_labels(labels);
    CHECK(std::vector<std::uint8_t>(l.begin(), l.begin() + 10) ==
          std::vector<std::uint8_t>{5, 0, 4, 1, 9, 2, 1, 3, 1, 4});
  }
}

TEST_CASE("digit to points") {
  std::vector<std::uint8_t> img(28 * 28, 0);
  img[3 * 28 + 5] = 255;
  auto pts = digit_to_points(img, 28, 28);
  REQUIRE(pts.size() == 1);
  CHECK(pts[0] == std::array<double, 2>{5, 3});

  img[0] = 15;
  img[1] = 16;
  pts = digit_to_points(img, 28, 28);
  REQUIRE(pts.size() == 2);
  CHECK(pts[0] == std::array<double, 2>{1, 0});

  std::vector<std::uint8_t> flat(9, 200);
  CHECK(digit_to_points(flat, 3, 3).size() == 9);
  CHECK_THROWS_AS(digit_to_points(std::vector<std::uint8_t>(9, 15), 3, 3), ContractError);
}

TEST_CASE("linear motion and wall bounce") {
  SynthConfig cfg;
  DigitTrack t{0, 10.0, 10.0, 1.0, 0.0};
  for (int i = 1; i <= 3; ++i) {
    advance_track(t, cfg);
    CHECK(t.x == 10.0 + i);
    CHECK(t.y == 10.0);
  }

  const double limit = cfg.area - cfg.digit_size;
  DigitTrack w{0, limit - 0.5, 0.5, 2.5, -1.5};
  auto xs = bounce_trace(w.x, w.vx, limit, 30);
  auto ys = bounce_trace(w.y, w.vy, limit, 30);
  const double speed = std::hypot(w.vx, w.vy);
  for (int i = 1; i <= 30; ++i) {
    advance_track(w, cfg);
    CHECK(w.x == xs[i]);
    CHECK(w.y == ys[i]);
    CHECK(std::hypot(w.vx, w.vy) == doctest::Approx(speed).epsilon(1e-15));
    CHECK(w.x >= 0.0);
    CHECK(w.x <= limit);
  }
  DigitTrack at_wall{0, limit, 5, 1.0, 0};
  advance_track(at_wall, cfg);
  CHECK(at_wall.vx == -1.0);
}

TEST_CASE("synthesized sequences") {
  ImageSet images = block_images(4);
  SynthConfig cfg;
  Rng rng(3);
  SynthResult r = synthesize_sequence(images, cfg, rng);
  REQUIRE(r.frames.size() == 20);
  for (const auto& f : r.frames) {
    CHECK(f.size() == 128);
    for (std::size_t i = 0; i < 128; ++i) {
      CHECK(f.coords.at(i, 0) >= 0.0);
      CHECK(f.coords.at(i, 0) <= 64.0);
      CHECK(f.coords.at(i, 1) >= 0.0);
      CHECK(f.coords.at(i, 1) <= 64.0);
      CHECK(f.coords.at(i, 2) == 0.0);
    }
  }
  // 36 lit pixels < 128: sampled with replacement, all from the block.
  const DigitTrack& t0 = r.initial_tracks[0];
  for (std::size_t i = 0; i < 128; ++i) {
    const double cx = r.frames[0].coords.at(i, 0) - t0.x;
    const double cy = r.frames[0].coords.at(i, 1) - t0.y;
    CHECK(std::abs(cx - std::round(cx)) < 1e-9);
    CHECK(std::round(cx) >= 10);
    CHECK(std::round(cx) <= 15);
    CHECK(std::round(cy) >= 10);
    CHECK(std::round(cy) <= 15);
  }
  const double speed = std::hypot(t0.vx, t0.vy);
  CHECK(speed >= 1.0);
  CHECK(speed <= 4.0);

  Rng a(9), b(9);
  CHECK(encode_pcseq(synthesize_sequence(images, cfg, a).frames) ==
        encode_pcseq(synthesize_sequence(images, cfg, b).frames));

  SynthConfig two = cfg;
  two.digits = 2;
  Rng c(4);
  SynthResult r2 = synthesize_sequence(images, two, c);
  CHECK(r2.frames[0].size() == 256);
  CHECK(r2.initial_tracks.size() == 2);
}

TEST_CASE("synthesis honours the image range") {
  ImageSet images = block_images(10);
  SynthConfig cfg;
  cfg.first_image = 6;
  cfg.image_count = 2;
  for (int s = 0; s < 50; ++s) {
    Rng rng(s);
    auto r = synthesize_sequence(images, cfg, rng);
    CHECK(r.initial_tracks[0].image >= 6);
    CHECK(r.initial_tracks[0].image <= 7);
  }
  cfg.first_image = 10;
  Rng rng(0);
  CHECK_THROWS_AS(synthesize_sequence(images, cfg, rng), ConfigError);
  SynthConfig bad;
  bad.input_length = 20;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("real digits produce moving clouds") {
  const std::string path = kMnistDir + "/images.idx3-ubyte";
  if (!fs::exists(path)) return;
  ImageSet images = load_mnist_idx(path);
  SynthConfig cfg;
  Rng rng(1);
  auto r = synthesize_sequence(images, cfg, rng);
  for (const auto& f : r.frames) CHECK(f.size() == 128);
}

TEST_CASE("sampling with and without replacement") {
  std::mt19937_64 gen(5);
  Tensor cloud = testing::random_cloud(200, gen);
  Rng rng(5);
  Tensor s = sample_rows(cloud, 128, rng);
  std::set<std::vector<double>> seen;
  for (std::size_t i = 0; i < 128; ++i) seen.insert({s.at(i, 0), s.at(i, 1), s.at(i, 2)});
  CHECK(seen.size() == 128);

  Tensor small = testing::random_cloud(10, gen);
  Tensor t = sample_rows(small, 1024, rng);
  CHECK(t.dim(0) == 1024);
  std::set<std::vector<double>> pool;
  for (std::size_t i = 0; i < 10; ++i) pool.insert({small.at(i, 0), small.at(i, 1), small.at(i, 2)});
  for (std::size_t i = 0; i < 1024; ++i) CHECK(pool.count({t.at(i, 0), t.at(i, 1), t.at(i, 2)}) == 1);
}

TEST_CASE("crop and sample") {
  Rng rng(6);
  Tensor c = Tensor::matrix({{6, 0, 0}, {5, 5, -5}});
  Tensor out = crop_and_sample(c, 5.0, 3, rng);
  for (std::size_t i = 0; i < 3; ++i) CHECK(out.at(i, 0) == 5.0);
  CHECK_THROWS_AS(crop_and_sample(Tensor::matrix({{6, 0, 0}}), 5.0, 3, rng), ContractError);

  std::mt19937_64 gen(6);
  Tensor big = testing::random_cloud(2000, gen, 5.0);
  Tensor s = crop_and_sample(big, 5.0, 1024, rng);
  CHECK(s.dim(0) == 1024);

  CloudSequence rec;
  for (int t = 0; t < 8; ++t) rec.emplace_back(testing::random_cloud(50, gen, 7.0));
  CloudSequence clip = sample_clip(rec, 5, 5.0, 32, rng);
  CHECK(clip.size() == 5);
  for (const auto& f : clip)
    for (double v : f.coords.data()) CHECK(std::abs(v) <= 5.0);
  CHECK_THROWS_AS(sample_clip(rec, 9, 5.0, 32, rng), ContractError);
}

TEST_CASE("pcseq round trip") {
  std::mt19937_64 gen(7);
  CloudSequence seq;
  for (int t = 0; t < 20; ++t) {
    Tensor c = testing::random_cloud(128, gen, 30.0);
    for (double& v : c.data()) v = static_cast<float>(v);
    seq.emplace_back(c);
  }
  const auto path = temp_path("pointrnn_roundtrip.pcseq");
  write_pcseq(path.string(), seq);
  CloudSequence back = read_pcseq(path.string());
  REQUIRE(back.size() == 20);
  for (std::size_t t = 0; t < 20; ++t) CHECK(back[t].coords == seq[t].coords);
  CHECK(encode_pcseq(back) == read_file_bytes(path.string()));
  CHECK(fs::file_size(path) == 18 + 20 * 128 * 3 * 4);
  fs::remove(path);

  CloudSequence with_features;
  for (int t = 0; t < 3; ++t) {
    Tensor f({4, 2});
    for (double& v : f.data()) v = static_cast<float>(std::uniform_real_distribution<double>(-1, 1)(gen));
    Tensor c = testing::random_cloud(4, gen);
    for (double& v : c.data()) v = static_cast<float>(v);
    with_features.emplace_back(c, f);
  }
  CloudSequence fb = decode_pcseq(encode_pcseq(with_features));
  for (std::size_t t = 0; t < 3; ++t) {
    CHECK(fb[t].coords == with_features[t].coords);
    REQUIRE(fb[t].features.has_value());
    CHECK(*fb[t].features == *with_features[t].features);
  }
}

TEST_CASE("pcseq round trip property") {
  std::mt19937_64 gen(8);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t t = 1 + trial % 7, n = 1 + (trial * 5) % 17;
    CloudSequence seq;
    for (std::size_t f = 0; f < t; ++f) {
      Tensor c = testing::random_cloud(n, gen, 100.0);
      for (double& v : c.data()) v = static_cast<float>(v);
      seq.emplace_back(c);
    }
    auto bytes = encode_pcseq(seq);
    CHECK(encode_pcseq(decode_pcseq(bytes)) == bytes);
  }
}

TEST_CASE("pcseq rejects malformed input") {
  CHECK_THROWS_AS(encode_pcseq({}), ContractError);
  CloudSequence ragged{PointCloud(Tensor({2, 3})), PointCloud(Tensor({3, 3}))};
  CHECK_THROWS_AS(encode_pcseq(ragged), ContractError);

  CloudSequence seq{PointCloud(Tensor({2, 3}, 1.0)), PointCloud(Tensor({2, 3}, 2.0))};
  auto bytes = encode_pcseq(seq);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 5);
  try {
    decode_pcseq(truncated);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("missing 5 bytes") != std::string::npos);
  }
  auto bad_magic = bytes;
  bad_magic[5] = '2';
  CHECK_THROWS_AS(decode_pcseq(bad_magic), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(decode_pcseq(trailing), FormatError);
  auto more_frames = bytes;
  more_frames[6] = 3;  // header claims a third frame
  CHECK_THROWS_AS(decode_pcseq(more_frames), FormatError);
  CHECK_THROWS_AS(decode_pcseq(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 9)),
                  FormatError);
  CHECK_THROWS_AS(read_pcseq("/nonexistent/x.pcseq"), FormatError);
}

TEST_CASE("ply export") {
  const auto path = temp_path("pointrnn_test.ply");
  write_ply(path.string(), Tensor::matrix({{1, 2, 3}}), Tensor::matrix({{0.5, 0, -1}}));
  std::ifstream in(path);
  std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(all.find("element vertex 1") != std::string::npos);
  CHECK(all.find("property float fz") != std::string::npos);
  CHECK(all.find("1 2 3 0.5 0 -1\n") != std::string::npos);
  fs::remove(path);
}

TEST_CASE("copy-last baseline") {
  std::mt19937_64 gen(9);
  CloudSequence in;
  for (int t = 0; t < 10; ++t) in.emplace_back(testing::random_cloud(16, gen));
  CloudSequence out = copy_last_baseline(in, 10);
  REQUIRE(out.size() == 10);
  for (const auto& f : out) CHECK(f.coords == in.back().coords);
  CHECK(chamfer_value(out[3].coords, in.back().coords) == 0.0);
  CHECK_THROWS_AS(copy_last_baseline({}, 3), ContractError);

  ImageSet images = block_images(3);
  SynthConfig cfg;
  SynthSource src(images, cfg);
  double total = 0.0;
  for (int s = 0; s < 20; ++s) {
    Rng rng(s);
    auto seq = src.draw(rng);
    total += chamfer_value(seq[9], seq[15]);
  }
  CHECK(total > 0.0);
}

TEST_CASE("sequence directories load in name order") {
  const auto dir = temp_path("pointrnn_seqdir");
  fs::remove_all(dir);
  fs::create_directories(dir);
  for (int i : {2, 0, 1}) {
    CloudSequence s{PointCloud(Tensor({1, 3}, double(i)))};
    write_pcseq((dir / ("seq_" + std::to_string(i) + ".pcseq")).string(), s);
  }
  std::ofstream(dir / "notes.txt") << "ignored";
  auto all = load_sequence_dir(dir.string());
  REQUIRE(all.size() == 3);
  for (int i = 0; i < 3; ++i) CHECK(all[i][0][0] == double(i));
  DatasetSource ds(all);
  Rng rng(1);
  CHECK(ds.draw(rng).size() == 1);
  fs::remove_all(dir);
  CHECK_THROWS_AS(load_sequence_dir(dir.string()), FormatError);
}
