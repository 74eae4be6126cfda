#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "fabme/blocks.hpp"
#include "fabme/metrics.hpp"

namespace fabme {

/// Neck C2F blocks numbered top to bottom: the two top-down blocks, then the
/// two bottom-up blocks.
enum class NeckSlot { None, C2F1, C2F2, C2F3, C2F4 };

std::string to_string(NeckSlot slot);
NeckSlot parse_neck_slot(std::string_view text);

struct GraphSpec {
  std::string scale = "s";
  double width_mult = 0.5;
  double depth_mult = 0.33;
  Index max_channels = 1024;
  bool emca_enabled = true;
  NeckSlot vmamba_position = NeckSlot::C2F3;
  Index num_classes = 20;
  Index input_size = 640;
  Index in_channels = 3;
  bool strict_paper_concat = true;
  Index vss_expansion = 1;
  Index d_state = 16;
  Index dw_kernel = 3;
  ScanOptions scan;
  Index emca_kernel = 0;  ///< 0: adaptive from the channel count
  std::uint64_t seed = 0;

  /// Stem plus the four stage widths c1..c4.
  std::array<Index, 5> widths() const;
  /// C2f repeats for the four backbone stages.
  std::array<Index, 4> backbone_depths() const;
  Index neck_depth() const;
  void validate() const;

  /// scale: "s" or "nano-test". variant: baseline, fabme, c2f1..c2f4, emca-only.
  static GraphSpec preset(std::string_view variant, std::string_view scale = "s");
};

/// Preset name matching the toggles, or "custom".
std::string variant_name(const GraphSpec& spec);

/// key=value lines, '#' comments. `variant` and `scale` keys reset to a
/// preset and must come before other keys.
GraphSpec parse_graph_spec(std::string_view text, GraphSpec base = {});
GraphSpec load_graph_spec(const std::filesystem::path& path, GraphSpec base = {});
std::string format_graph_spec(const GraphSpec& spec);

struct HeadOutputs {
  /// Per level (n, 5 + num_classes, H, W): tx, ty, tw, th, objectness, classes.
  std::vector<Tensor> maps;
  std::vector<Index> strides;
};

struct BackboneOutputs {
  std::array<Tensor, 4> stages;  ///< c1..c4; c4 after SPPF (and EMCA when enabled)
};

using NeckBlock = std::variant<C2f, C2fVMamba>;

/// Decoupled per-level head: two 3x3 conv units and a 1x1 conv for the box,
/// the same for objectness plus classes.
class DetectHead {
 public:
  DetectHead() = default;
  DetectHead(Index in, Index box_width, Index cls_width, Index num_classes, Rng& rng);
  Tensor forward(const Tensor& x, Mode mode);
  void collect(const std::string& prefix, ParamList& out) const;

 private:
  ConvUnit box1_, box2_;
  Conv box_out_;
  ConvUnit cls1_, cls2_;
  Conv cls_out_;
};

class Model {
 public:
  explicit Model(const GraphSpec& spec);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  /// Images are (n, in_channels, H, W) in [0, 1] with H, W divisible by 32.
  /// Eval mode leaves the model untouched, so concurrent calls are safe.
  HeadOutputs forward(const Tensor& images, Mode mode);
  BackboneOutputs backbone(const Tensor& images, Mode mode);

  const GraphSpec& spec() const { return spec_; }
  ParamList parameters() const;
  Index count_params() const;
  Index vss_block_count() const;
  Index emca_block_count() const { return spec_.emca_enabled ? 1 : 0; }

  std::vector<NamedTensor> state() const;
  /// Copies values by name; every saved tensor must exist with the same shape.
  void load_state(const std::vector<NamedTensor>& state);
  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  GraphSpec spec_;
  ConvUnit stem_;
  std::array<ConvUnit, 4> down_;
  std::array<C2f, 4> stage_;
  Sppf sppf_;
  Emca emca_;
  std::array<NeckBlock, 4> neck_;
  ConvUnit neck_down3_, neck_down4_;
  std::array<DetectHead, 3> heads_;
};

Index count_params(const Model& model);

/// Center-based decoding of one cell, shared with the loss:
/// cx = (j + 2 sigmoid(tx) - 0.5) s, w = 4 s sigmoid(tw)^2.
Box decode_box(double tx, double ty, double tw, double th, Index row, Index col, Index stride);

struct DecodeOptions {
  double conf_threshold = 0.25;
  double iou_threshold = 0.5;
  Index max_detections = 300;
};

/// Greedy per-class suppression in descending confidence, capped at max_detections.
std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold, Index max_detections);

/// Detections per image; confidence = sigmoid(obj) * max sigmoid(cls).
std::vector<std::vector<Detection>> decode(const HeadOutputs& heads, const DecodeOptions& options = {});

}  // namespace fabme
