#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pointrnn/geometry.hpp"
#include "pointrnn/tensor.hpp"

namespace pointrnn {

using CloudSequence = std::vector<PointCloud>;

/// count x rows x cols unsigned bytes, row-major per image.
struct ImageSet {
  std::size_t count = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> pixels;

  std::span<const std::uint8_t> image(std::size_t i) const {
    return {pixels.data() + i * rows * cols, rows * cols};
  }
};

ImageSet parse_idx_images(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes);
ImageSet load_mnist_idx(const std::string& path);
std::vector<std::uint8_t> load_mnist_labels(const std::string& path);
std::vector<std::uint8_t> read_file_bytes(const std::string& path);

inline constexpr std::uint8_t kBrightnessThreshold = 16;

/// (x = column, y = row) of every pixel at or above `threshold`, row-major.
/// Throws ContractError when no pixel qualifies.
std::vector<std::array<double, 2>> digit_to_points(std::span<const std::uint8_t> image,
                                                   std::size_t rows, std::size_t cols,
                                                   std::uint8_t threshold = kBrightnessThreshold);

struct SynthConfig {
  double area = 64.0;
  double digit_size = 28.0;
  std::size_t digits = 1;
  std::size_t length = 20;
  std::size_t input_length = 10;
  std::uint8_t threshold = kBrightnessThreshold;
  std::size_t samples = 0;  // 0 selects 128 per digit
  double min_speed = 1.0;
  double max_speed = 4.0;
  /// Images [first_image, first_image + image_count) are eligible; a zero
  /// count means every image from first_image on.
  std::size_t first_image = 0;
  std::size_t image_count = 0;

  std::size_t sample_count() const { return samples ? samples : 128 * digits; }
  void validate() const;
};

struct DigitTrack {
  std::size_t image = 0;
  double x = 0.0;  // top-left of the digit box
  double y = 0.0;
  double vx = 0.0;
  double vy = 0.0;
};

/// Moves the track one frame. A coordinate that leaves [0, area - digit_size]
/// is clamped to the wall and its velocity component negated.
void advance_track(DigitTrack& track, const SynthConfig& config);

/// Points of every digit at the given track positions, z = 0.
Tensor render_frame(const ImageSet& images, std::span<const DigitTrack> tracks,
                    const SynthConfig& config);

/// Draws `count` rows of `cloud`: without replacement when enough rows
/// exist, uniformly with replacement otherwise.
Tensor sample_rows(const Tensor& cloud, std::size_t count, Rng& rng);

struct SynthResult {
  CloudSequence frames;
  std::vector<DigitTrack> initial_tracks;
};

SynthResult synthesize_sequence(const ImageSet& images, const SynthConfig& config, Rng& rng);

/// Keeps points with every coordinate in [-bound, bound] and samples `count`
/// of them. Throws ContractError when none remain.
Tensor crop_and_sample(const Tensor& cloud, double bound, std::size_t count, Rng& rng);

/// `length` consecutive frames from a uniformly drawn start offset, each
/// cropped and sampled.
CloudSequence sample_clip(const CloudSequence& recording, std::size_t length, double bound,
                          std::size_t count, Rng& rng);

std::vector<std::uint8_t> encode_pcseq(const CloudSequence& seq);
CloudSequence decode_pcseq(std::span<const std::uint8_t> bytes);
void write_pcseq(const std::string& path, const CloudSequence& seq);
CloudSequence read_pcseq(const std::string& path);

/// ASCII PLY with x y z and, when `flow` is given, fx fy fz.
void write_ply(const std::string& path, const Tensor& coords,
               const std::optional<Tensor>& flow = std::nullopt);

CloudSequence copy_last_baseline(const CloudSequence& inputs, std::size_t horizon);

std::vector<Tensor> coordinates_of(const CloudSequence& seq);
CloudSequence sequence_from(std::span<const Tensor> frames);

/// Supplies training sequences; every draw is a function of the rng alone.
class SequenceSource {
 public:
  virtual ~SequenceSource() = default;
  virtual std::vector<Tensor> draw(Rng& rng) const = 0;
};

class SynthSource final : public SequenceSource {
 public:
  SynthSource(const ImageSet& images, SynthConfig config);
  std::vector<Tensor> draw(Rng& rng) const override;

 private:
  const ImageSet* images_;
  SynthConfig config_;
};

class DatasetSource final : public SequenceSource {
 public:
  explicit DatasetSource(std::vector<std::vector<Tensor>> sequences);
  std::vector<Tensor> draw(Rng& rng) const override;
  std::size_t size() const { return sequences_.size(); }
  const std::vector<Tensor>& operator[](std::size_t i) const { return sequences_[i]; }

 private:
  std::vector<std::vector<Tensor>> sequences_;
};

/// Every *.pcseq file of a directory, in file-name order.
std::vector<std::vector<Tensor>> load_sequence_dir(const std::string& dir);

}  // namespace pointrnn
