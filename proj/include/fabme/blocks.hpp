#pragma once

#include <string>
#include <vector>

#include "fabme/ops.hpp"
#include "fabme/snapshot.hpp"
#include "fabme/ss2d.hpp"

namespace fabme {

enum class Mode { Train, Eval };

enum class ParamKind {
  Weight,   ///< conv / projection weights; weight decay applies
  NoDecay,  ///< biases, norm gains, A and D of the scan
  Buffer,   ///< running statistics; saved, never trained or counted
};

struct ParamRef {
  std::string name;
  Tensor tensor;
  ParamKind kind;
};
using ParamList = std::vector<ParamRef>;

/// Learnable scalar count (buffers excluded).
Index count_params(const ParamList& params);

/// PyTorch's default conv initializer: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor kaiming_uniform(Shape shape, Index fan_in, Rng& rng);

/// Plain convolution with optional bias.
class Conv {
 public:
  Conv() = default;
  Conv(const ConvSpec& spec, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
  const ConvSpec& spec() const { return spec_; }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

 private:
  ConvSpec spec_;
  Tensor weight_;
  Tensor bias_;
};

/// Conv (no bias) -> batch norm -> SiLU; the basic detector unit.
class ConvUnit {
 public:
  ConvUnit() = default;
  ConvUnit(Index in, Index out, Index kernel, Index stride, Rng& rng);
  Tensor forward(const Tensor& x, Mode mode);
  void collect(const std::string& prefix, ParamList& out) const;
  Index out_channels() const { return conv_.spec().out_channels; }
  Conv& conv() { return conv_; }

 private:
  Conv conv_;
  Tensor gain_;
  Tensor shift_;
  BatchNormStats stats_;
};

class Bottleneck {
 public:
  Bottleneck() = default;
  Bottleneck(Index in, Index out, bool shortcut, Rng& rng);
  Tensor forward(const Tensor& x, Mode mode);
  void collect(const std::string& prefix, ParamList& out) const;
  ConvUnit& first() { return cv1_; }
  ConvUnit& second() { return cv2_; }

 private:
  ConvUnit cv1_;
  ConvUnit cv2_;
  bool residual_ = false;
};

/// CSP block with two convolutions: 1x1 conv, split, n bottlenecks on one
/// half, concat of every intermediate, 1x1 conv.
class C2f {
 public:
  C2f() = default;
  C2f(Index in, Index out, Index n, bool shortcut, Rng& rng);
  Tensor forward(const Tensor& x, Mode mode);
  void collect(const std::string& prefix, ParamList& out) const;
  static Index concat_width(Index n, Index hidden) { return (n + 2) * hidden; }
  Index hidden() const { return hidden_; }

 private:
  Index hidden_ = 0;
  ConvUnit cv1_;
  std::vector<Bottleneck> blocks_;
  ConvUnit cv2_;
};

/// Spatial pyramid pooling (fast): three chained stride-1 5x5 max pools.
class Sppf {
 public:
  Sppf() = default;
  Sppf(Index in, Index out, Rng& rng, Index pool = 5);
  Tensor forward(const Tensor& x, Mode mode);
  void collect(const std::string& prefix, ParamList& out) const;

 private:
  ConvUnit cv1_;
  ConvUnit cv2_;
  Index pool_ = 5;
};

struct VssConfig {
  Index channels = 0;
  Index expansion = 1;
  Index dw_kernel = 3;
  Index d_state = 16;
  ScanOptions scan;

  Index inner() const { return channels * expansion; }
  void validate() const;
};

/// Visual state-space block. After a channel layer norm the input feeds two
/// paths, each expanding to `inner` channels:
///   scan path: 1x1 -> depthwise conv -> SiLU -> SS2D -> layer norm
///   gate path: 1x1 -> SiLU
/// The paths multiply, project back to `channels`, and add to the input.
class VssBlock {
 public:
  VssBlock() = default;
  VssBlock(const VssConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
  const VssConfig& config() const { return cfg_; }

 private:
  VssConfig cfg_;
  Tensor norm_gain_, norm_bias_;
  Conv expand_scan_;
  Conv depthwise_;
  ScanParams scan_;
  Tensor out_norm_gain_, out_norm_bias_;
  Conv expand_gate_;
  Conv out_proj_;
};

Tensor vss_block(const Tensor& x, const VssBlock& block);

struct C2fVMambaConfig {
  Index in_channels = 0;
  Index out_channels = 0;
  Index n = 1;
  /// Concat(X1, Conv(X), Y2, chain...) as written; false gives the usual C2f
  /// layout Concat(X1, X2, Y2, chain...).
  bool strict_paper_concat = true;
  Index expansion = 1;
  Index dw_kernel = 3;
  Index d_state = 16;
  ScanOptions scan;

  Index hidden() const { return out_channels / 2; }
  Index concat_width() const;
  void validate() const;
};

/// C2f with VSS blocks in place of bottlenecks:
///   X1, X2 = Split(Conv(X)); Y2 = VSS(X2); n-1 further VSS blocks chained on
///   Y2; output = Conv(Concat(X1, Conv(X), Y2, chain outputs...)).
class C2fVMamba {
 public:
  C2fVMamba() = default;
  C2fVMamba(const C2fVMambaConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& x, Mode mode);
  void collect(const std::string& prefix, ParamList& out) const;
  const C2fVMambaConfig& config() const { return cfg_; }

 private:
  C2fVMambaConfig cfg_;
  ConvUnit cv1_;
  std::vector<VssBlock> blocks_;
  ConvUnit cv2_;
};

struct EmcaConfig {
  Index channels = 0;
  Index k = 0;  ///< 0 selects adaptive_kernel_size(channels)

  Index kernel_size() const;
  void validate() const;
};

/// Odd 1-D kernel size from the channel count (gamma = 2, b = 1), at least 3.
Index adaptive_kernel_size(Index channels);

/// a = sigmoid(conv1d(GAP(x) + GMP(x), kernel)), shape (n, c, 1, 1).
Tensor emca_weights(const Tensor& x, const Tensor& kernel);
/// x scaled per channel by emca_weights.
Tensor emca(const Tensor& x, const Tensor& kernel);

class Emca {
 public:
  Emca() = default;
  Emca(const EmcaConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& x) const { return emca(x, kernel_); }
  void collect(const std::string& prefix, ParamList& out) const;
  Tensor& kernel() { return kernel_; }
  Index k() const { return kernel_.numel(); }

 private:
  Tensor kernel_;
};

}  // namespace fabme
