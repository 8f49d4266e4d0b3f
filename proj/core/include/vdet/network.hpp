#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "vdet/tensor.hpp"

namespace vdet::diff {

enum class SegmentId { backbone = 0, neck = 1, head = 2 };

inline constexpr std::array<SegmentId, 3> kAllSegments{SegmentId::backbone, SegmentId::neck,
                                                       SegmentId::head};

std::string_view segment_name(SegmentId id) noexcept;
/// Throws ConfigError naming the valid segments.
SegmentId parse_segment(std::string_view name);

using SegmentSet = std::set<SegmentId>;

/// Parses "backbone,neck" (or "none" / empty for the empty set).
SegmentSet parse_segment_set(std::string_view text);
std::string format_segment_set(const SegmentSet& set);

/// Architecture of the micro-detector. The backbone halves the resolution
/// three times, so the grid size is input_size / 8.
struct NetConfig {
  int input_size = 64;
  std::array<int, 3> backbone_channels{16, 32, 32};
  int neck_channels = 32;
  int boxes_per_cell = 2;
  int num_classes = 7;
  double leaky_slope = 0.1;

  int grid_size() const noexcept { return input_size / 8; }
  int channels_per_box() const noexcept { return 5 + num_classes; }
  int output_channels() const noexcept { return boxes_per_cell * channels_per_box(); }
  /// Throws ConfigError on non-positive sizes or an input not divisible by 8.
  void validate() const;
};

template <typename T>
struct Parameter {
  std::string name;
  BasicTensor<T> value;
  std::vector<T> velocity;
};

template <typename T>
struct Segment {
  SegmentId id = SegmentId::backbone;
  std::vector<Parameter<T>> params;
  bool frozen = false;
};

/// Backbone (three strided 3x3 convolutions, 64x64 -> 8x8), neck (lateral 1x1
/// merge of the last two backbone stages) and head (1x1 convolution emitting
/// B * (5 + K) channels per cell).
template <typename T>
class DetectorNet {
 public:
  /// All parameters zero.
  explicit DetectorNet(NetConfig config);
  /// Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) initialization from `seed`.
  DetectorNet(NetConfig config, std::uint64_t seed);

  const NetConfig& config() const noexcept { return config_; }

  Segment<T>& segment(SegmentId id) noexcept { return segments_[static_cast<std::size_t>(id)]; }
  const Segment<T>& segment(SegmentId id) const noexcept {
    return segments_[static_cast<std::size_t>(id)];
  }
  std::array<Segment<T>, 3>& segments() noexcept { return segments_; }
  const std::array<Segment<T>, 3>& segments() const noexcept { return segments_; }

  /// Re-draws the parameters of one segment from `seed`.
  void initialize(SegmentId id, std::uint64_t seed);

  /// Pre-activation head output of shape S x S x B(5+K). With track_grad
  /// false no parameter is attached to the graph (inference).
  Var<T> forward_logits(const BasicTensor<T>& image, bool track_grad = true);
  /// Sigmoid-activated output: cell offsets, image-relative w/h, objectness, class scores.
  Var<T> forward(const BasicTensor<T>& image, bool track_grad = true);

  /// Runs the reverse pass of a loss computed from the latest forward output.
  /// Frozen segments receive no gradient.
  void backward(Var<T>& loss);

  /// v <- momentum * v + g; w <- w - lr * v for unfrozen parameters; clears all gradients.
  void sgd_step(double lr, double momentum);

  void set_frozen(const SegmentSet& segments, bool frozen);
  void set_frozen(const std::vector<std::string>& names, bool frozen);
  void zero_grad();
  /// Multiplies every accumulated gradient by `factor` (batch averaging).
  void scale_grad(double factor);
  /// Rescales all trainable gradients so their joint L2 norm is at most
  /// max_norm. Returns the norm before clipping.
  double clip_grad_norm(double max_norm);
  void reset_momentum();

  std::size_t parameter_count() const noexcept;

  template <typename U>
  DetectorNet<U> cast() const {
    DetectorNet<U> out(config_);
    for (std::size_t s = 0; s < 3; ++s) {
      auto& dst = out.segments()[s];
      dst.frozen = segments_[s].frozen;
      for (std::size_t p = 0; p < segments_[s].params.size(); ++p) {
        dst.params[p].value = segments_[s].params[p].value.template cast<U>();
      }
    }
    return out;
  }

 private:
  void build();
  Var<T> param(SegmentId seg, std::size_t index, bool track_grad);

  NetConfig config_;
  std::array<Segment<T>, 3> segments_;
  std::uint64_t forward_count_ = 0;
};

using Detector = DetectorNet<float>;

/// Binary weight file: "SDW1", u32 segment count, then per segment the name
/// (u8 length + bytes), u32 parameter count and per parameter u32 rank, u32
/// dims and raw little-endian f32 values.
void save_weights(const Detector& net, const std::filesystem::path& path);

/// Replaces every segment of `net` with the file's contents.
void load_weights(Detector& net, const std::filesystem::path& path);

/// Replaces only the listed segments; the others keep their values. Shape or
/// format mismatches throw FormatError naming the offending segment.
void transfer_weights(Detector& dst, const std::filesystem::path& src_file,
                      const SegmentSet& segments);

/// Infers the architecture stored in a weight file, given the slot count and
/// input resolution that the file does not record.
NetConfig config_from_weights(const std::filesystem::path& path, int boxes_per_cell,
                              int input_size);

}  // namespace vdet::diff
