#include "pointrnn/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "pointrnn/errors.hpp"

namespace pointrnn {

namespace {

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;
constexpr char kPcseqMagic[6] = {'P', 'C', 'S', 'E', 'Q', '1'};

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  if (offset + 4 > bytes.size()) {
    throw FormatError("idx: header truncated at byte offset " + std::to_string(offset));
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void check_magic(std::uint32_t magic, std::uint32_t expected) {
  if (magic != expected) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "idx: bad magic 0x%08x at byte offset 0, expected 0x%08x",
                  magic, expected);
    throw FormatError(buf);
  }
}

void check_payload(std::span<const std::uint8_t> bytes, std::size_t offset, std::size_t need) {
  if (bytes.size() - offset < need) {
    throw FormatError("idx: payload truncated at byte offset " + std::to_string(bytes.size()) +
                      ", expected " + std::to_string(offset + need) + " bytes");
  }
}

}  // namespace

ImageSet parse_idx_images(std::span<const std::uint8_t> bytes) {
  check_magic(read_be32(bytes, 0), kIdxImages);
  ImageSet set;
  set.count = read_be32(bytes, 4);
  set.rows = read_be32(bytes, 8);
  set.cols = read_be32(bytes, 12);
  const std::size_t need = set.count * set.rows * set.cols;
  check_payload(bytes, 16, need);
  set.pixels.assign(bytes.begin() + 16, bytes.begin() + 16 + need);
  return set;
}

std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes) {
  check_magic(read_be32(bytes, 0), kIdxLabels);
  const std::size_t count = read_be32(bytes, 4);
  check_payload(bytes, 8, count);
  return {bytes.begin() + 8, bytes.begin() + 8 + count};
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ImageSet load_mnist_idx(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return parse_idx_images(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

std::vector<std::uint8_t> load_mnist_labels(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return parse_idx_labels(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

std::vector<std::array<double, 2>> digit_to_points(std::span<const std::uint8_t> image,
                                                   std::size_t rows, std::size_t cols,
                                                   std::uint8_t threshold) {
  if (image.size() != rows * cols) throw ShapeError("digit_to_points: image size mismatch");
  std::vector<std::array<double, 2>> out;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      if (image[r * cols + c] >= threshold) out.push_back({double(c), double(r)});
  if (out.empty()) throw ContractError("digit_to_points: no pixel reaches the threshold");
  return out;
}

void SynthConfig::validate() const {
  if (digits == 0) throw ConfigError("synth: digits must be at least 1");
  if (!(area > digit_size) || !(digit_size > 0)) throw ConfigError("synth: digit box must fit the area");
  if (input_length == 0 || input_length >= length) {
    throw ConfigError("synth: input_length must leave at least one target frame");
  }
  if (!(min_speed >= 0) || !(max_speed >= min_speed)) throw ConfigError("synth: bad speed range");
}

void advance_track(DigitTrack& t, const SynthConfig& config) {
  const double limit = config.area - config.digit_size;
  auto step = [limit](double& p, double& v) {
    p += v;
    if (p < 0.0) {
      p = 0.0;
      v = -v;
    } else if (p > limit) {
      p = limit;
      v = -v;
    }
  };
  step(t.x, t.vx);
  step(t.y, t.vy);
}

Tensor render_frame(const ImageSet& images, std::span<const DigitTrack> tracks,
                    const SynthConfig& config) {
  std::vector<double> data;
  for (const DigitTrack& t : tracks) {
    const auto pts = digit_to_points(images.image(t.image), images.rows, images.cols, config.threshold);
    for (const auto& p : pts) {
      data.push_back(t.x + p[0]);
      data.push_back(t.y + p[1]);
      data.push_back(0.0);
    }
  }
  const std::size_t n = data.size() / 3;
  return Tensor({n, 3}, std::move(data));
}

Tensor sample_rows(const Tensor& cloud, std::size_t count, Rng& rng) {
  require_matrix(cloud, 3, "sample_rows");
  const std::size_t n = cloud.dim(0);
  if (n == 0) throw ContractError("sample_rows: cloud is empty");
  std::vector<std::size_t> picks(count);
  if (n >= count) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = 0; i < count; ++i) {
      std::uniform_int_distribution<std::size_t> d(i, n - 1);
      std::swap(order[i], order[d(rng)]);
      picks[i] = order[i];
    }
  } else {
    std::uniform_int_distribution<std::size_t> d(0, n - 1);
    for (auto& p : picks) p = d(rng);
  }
  Tensor out({count, 3});
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t c = 0; c < 3; ++c) out.at(i, c) = cloud.at(picks[i], c);
  return out;
}

SynthResult synthesize_sequence(const ImageSet& images, const SynthConfig& config, Rng& rng) {
  config.validate();
  if (images.count == 0) throw ContractError("synthesize_sequence: no images loaded");
  if (images.rows > config.digit_size || images.cols > config.digit_size) {
    throw ConfigError("synthesize_sequence: images exceed the digit box");
  }
  const std::size_t first = config.first_image;
  if (first >= images.count) throw ConfigError("synthesize_sequence: first_image out of range");
  const std::size_t span = config.image_count ? std::min(config.image_count, images.count - first)
                                              : images.count - first;
  std::uniform_int_distribution<std::size_t> pick(first, first + span - 1);
  std::uniform_real_distribution<double> pos(0.0, config.area - config.digit_size);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> speed(config.min_speed, config.max_speed);

  std::vector<DigitTrack> tracks(config.digits);
  for (DigitTrack& t : tracks) {
    // All-dark images are redrawn.
    for (std::size_t attempt = 0;; ++attempt) {
      t.image = pick(rng);
      const auto img = images.image(t.image);
      if (std::any_of(img.begin(), img.end(), [&](std::uint8_t v) { return v >= config.threshold; })) break;
      if (attempt > 1000) throw ContractError("synthesize_sequence: no usable digit image");
    }
    t.x = pos(rng);
    t.y = pos(rng);
    const double a = angle(rng), s = speed(rng);
    t.vx = s * std::cos(a);
    t.vy = s * std::sin(a);
  }
  SynthResult result;
  result.initial_tracks = tracks;
  for (std::size_t f = 0; f < config.length; ++f) {
    if (f > 0)
      for (DigitTrack& t : tracks) advance_track(t, config);
    result.frames.emplace_back(sample_rows(render_frame(images, tracks, config),
                                           config.sample_count(), rng));
  }
  return result;
}

Tensor crop_and_sample(const Tensor& cloud, double bound, std::size_t count, Rng& rng) {
  require_matrix(cloud, 3, "crop_and_sample");
  std::vector<double> kept;
  for (std::size_t i = 0; i < cloud.dim(0); ++i) {
    const double* p = cloud.ptr() + 3 * i;
    if (std::abs(p[0]) <= bound && std::abs(p[1]) <= bound && std::abs(p[2]) <= bound) {
      kept.insert(kept.end(), p, p + 3);
    }
  }
  if (kept.empty()) {
    throw ContractError("crop_and_sample: no point lies inside [-" + std::to_string(bound) + ", " +
                        std::to_string(bound) + "]^3");
  }
  const std::size_t n = kept.size() / 3;
  return sample_rows(Tensor({n, 3}, std::move(kept)), count, rng);
}

CloudSequence sample_clip(const CloudSequence& recording, std::size_t length, double bound,
                          std::size_t count, Rng& rng) {
  if (length == 0 || recording.size() < length) {
    throw ContractError("sample_clip: recording has " + std::to_string(recording.size()) +
                        " frames, clip needs " + std::to_string(length));
  }
  std::uniform_int_distribution<std::size_t> start(0, recording.size() - length);
  const std::size_t s = start(rng);
  CloudSequence out;
  for (std::size_t t = 0; t < length; ++t) {
    out.emplace_back(crop_and_sample(recording[s + t].coords, bound, count, rng));
  }
  return out;
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, double v) {
  put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("pcseq: truncated ") + what + " at byte offset " +
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
  double f32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes_[pos_ + i]} << (8 * i);
    pos_ += 4;
    return std::bit_cast<float>(v);
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_pcseq(const CloudSequence& seq) {
  if (seq.empty()) throw ContractError("write_pcseq: a sequence needs at least one frame");
  const std::size_t n = seq.front().size();
  const std::size_t d = seq.front().feature_channels();
  for (std::size_t t = 0; t < seq.size(); ++t) {
    seq[t].validate();
    if (seq[t].size() != n || seq[t].feature_channels() != d) {
      throw ContractError("write_pcseq: frame " + std::to_string(t) +
                          " differs in point or feature count from frame 0");
    }
  }
  std::vector<std::uint8_t> out(kPcseqMagic, kPcseqMagic + 6);
  out.reserve(18 + seq.size() * n * (3 + d) * 4);
  put_u32(out, static_cast<std::uint32_t>(seq.size()));
  put_u32(out, static_cast<std::uint32_t>(n));
  put_u32(out, static_cast<std::uint32_t>(d));
  for (const PointCloud& f : seq)
    for (double v : f.coords.data()) put_f32(out, v);
  if (d > 0)
    for (const PointCloud& f : seq)
      for (double v : f.features->data()) put_f32(out, v);
  return out;
}

CloudSequence decode_pcseq(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  const auto magic = in.take(6, "magic");
  if (!std::equal(magic.begin(), magic.end(), kPcseqMagic)) {
    throw FormatError("pcseq: bad magic or version at byte offset 0");
  }
  const std::size_t t = in.u32("frame count");
  const std::size_t n = in.u32("point count");
  const std::size_t d = in.u32("feature count");
  if (t == 0) throw FormatError("pcseq: frame count is zero at byte offset 6");
  if (n == 0) throw FormatError("pcseq: point count is zero at byte offset 10");
  const std::size_t payload = t * n * (3 + d) * 4;
  in.need(payload, "payload");
  if (in.remaining() != payload) {
    throw FormatError("pcseq: " + std::to_string(in.remaining() - payload) +
                      " trailing bytes after payload at byte offset " +
                      std::to_string(in.pos() + payload));
  }
  CloudSequence seq(t);
  for (auto& f : seq) {
    Tensor c({n, 3});
    for (double& v : c.data()) v = in.f32();
    f.coords = std::move(c);
  }
  if (d > 0) {
    for (auto& f : seq) {
      Tensor x({n, d});
      for (double& v : x.data()) v = in.f32();
      f.features = std::move(x);
    }
  }
  return seq;
}

void write_pcseq(const std::string& path, const CloudSequence& seq) {
  const auto bytes = encode_pcseq(seq);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to '" + path + "'");
}

CloudSequence read_pcseq(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_pcseq(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

void write_ply(const std::string& path, const Tensor& coords, const std::optional<Tensor>& flow) {
  require_matrix(coords, 3, "write_ply");
  if (flow) {
    require_matrix(*flow, 3, "write_ply flow");
    if (flow->dim(0) != coords.dim(0)) throw ShapeError("write_ply: flow rows do not match points");
  }
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out << "ply\nformat ascii 1.0\nelement vertex " << coords.dim(0) << "\n"
      << "property float x\nproperty float y\nproperty float z\n";
  if (flow) out << "property float fx\nproperty float fy\nproperty float fz\n";
  out << "end_header\n";
  char buf[160];
  for (std::size_t i = 0; i < coords.dim(0); ++i) {
    int len = std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g", coords.at(i, 0), coords.at(i, 1),
                            coords.at(i, 2));
    out.write(buf, len);
    if (flow) {
      len = std::snprintf(buf, sizeof buf, " %.9g %.9g %.9g", flow->at(i, 0), flow->at(i, 1),
                          flow->at(i, 2));
      out.write(buf, len);
    }
    out << '\n';
  }
}

CloudSequence copy_last_baseline(const CloudSequence& inputs, std::size_t horizon) {
  if (inputs.empty()) throw ContractError("copy_last_baseline: empty input sequence");
  return CloudSequence(horizon, inputs.back());
}

std::vector<Tensor> coordinates_of(const CloudSequence& seq) {
  std::vector<Tensor> out;
  out.reserve(seq.size());
  for (const auto& f : seq) out.push_back(f.coords);
  return out;
}

CloudSequence sequence_from(std::span<const Tensor> frames) {
  CloudSequence out;
  for (const Tensor& f : frames) out.emplace_back(f);
  return out;
}

SynthSource::SynthSource(const ImageSet& images, SynthConfig config)
    : images_(&images), config_(config) {
  config_.validate();
}

std::vector<Tensor> SynthSource::draw(Rng& rng) const {
  return coordinates_of(synthesize_sequence(*images_, config_, rng).frames);
}

DatasetSource::DatasetSource(std::vector<std::vector<Tensor>> sequences)
    : sequences_(std::move(sequences)) {
  if (sequences_.empty()) throw ContractError("DatasetSource: no sequences");
}

std::vector<Tensor> DatasetSource::draw(Rng& rng) const {
  std::uniform_int_distribution<std::size_t> d(0, sequences_.size() - 1);
  return sequences_[d(rng)];
}

std::vector<std::vector<Tensor>> load_sequence_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw FormatError("'" + dir + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".pcseq") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<std::vector<Tensor>> out;
  for (const auto& f : files) out.push_back(coordinates_of(read_pcseq(f.string())));
  return out;
}

}  // namespace pointrnn
