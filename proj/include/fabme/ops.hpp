#pragma once

#include <optional>
#include <span>
#include <vector>

#include "fabme/tensor.hpp"

namespace fabme {

/// 2-D convolution geometry. groups == in_channels selects depthwise.
struct ConvSpec {
  Index in_channels = 1;
  Index out_channels = 1;
  Index kh = 1;
  Index kw = 1;
  Index stride = 1;
  Index padding = 0;
  Index groups = 1;
  bool bias = false;

  static ConvSpec square(Index in, Index out, Index k, Index stride = 1, Index groups = 1,
                         bool bias = false) {
    return {in, out, k, k, stride, k / 2, groups, bias};
  }

  void validate() const;
  Shape weight_shape() const { return {out_channels, in_channels / groups, kh, kw}; }
  Index out_extent(Index in, Index k) const { return (in + 2 * padding - k) / stride + 1; }
};

// Elementwise arithmetic. The right operand may broadcast along any extent of 1.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor neg(const Tensor& x);

Tensor exp(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor softplus(const Tensor& x);

/// Reductions to a 1x1x1x1 scalar.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// sum(x * weights) with constant weights; weights.size() == x.numel().
Tensor weighted_sum(const Tensor& x, const Buffer& weights);

Tensor conv2d(const Tensor& x, const ConvSpec& spec, const Tensor& weight,
              const std::optional<Tensor>& bias = std::nullopt);

/// Same-padded 1-D convolution across the channel axis of an (n, c, 1, 1) descriptor.
/// `kernel` holds k (odd) taps; tap j multiplies channel c + j - k/2.
Tensor conv1d(const Tensor& x, const Tensor& kernel);

Tensor global_avg_pool(const Tensor& x);
/// Backward routes to the first maximum in row-major order.
Tensor global_max_pool(const Tensor& x);

/// Padding is -inf; backward routes to the first maximum of each window.
Tensor max_pool2d(const Tensor& x, Index kernel, Index stride, Index padding);
Tensor upsample_nearest2x(const Tensor& x);

std::vector<Tensor> split_channels(const Tensor& x, std::span<const Index> sizes);
std::vector<Tensor> split_channels(const Tensor& x, std::initializer_list<Index> sizes);
Tensor concat_channels(std::span<const Tensor> parts);
Tensor concat_channels(std::initializer_list<Tensor> parts);

/// Normalizes over channels independently at every (n, y, x) position.
Tensor layer_norm_channels(const Tensor& x, const Tensor& gain, const Tensor& bias,
                           double eps = 1e-6);

struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.03;
  double eps = 1e-3;
};

/// Batch statistics when `training` (running statistics updated in place),
/// running statistics otherwise.
Tensor batch_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, BatchNormStats& stats,
                  bool training);

}  // namespace fabme
