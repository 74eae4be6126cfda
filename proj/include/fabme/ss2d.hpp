#pragma once

#include "fabme/scan.hpp"
#include "fabme/tensor.hpp"

namespace fabme {

enum class ScanMerge { Sum, Mean };

/// How many flattening orders SS2D runs (1: LR, 2: LR+RL, 4: all) and how
/// their outputs are combined.
struct ScanOptions {
  Index directions = 4;
  ScanMerge merge = ScanMerge::Sum;
};

/// Learnable parameters of the 2-D selective scan over d_model channels.
///
/// delta = softplus(delta_weight . x + delta_bias) per channel, B = b_weight . x
/// and C = c_weight . x per token, A = -exp(a_log) (D x N), skip gain D.
struct ScanParams {
  Index d_model = 0;
  Index d_state = 0;
  Tensor delta_weight;  ///< (D, D, 1, 1)
  Tensor delta_bias;    ///< (1, D, 1, 1)
  Tensor b_weight;      ///< (N, D, 1, 1)
  Tensor c_weight;      ///< (N, D, 1, 1)
  Tensor a_log;         ///< (1, 1, D, N)
  Tensor skip;          ///< (1, D, 1, 1)

  /// Projections uniform in +-1/sqrt(D); A = -(1..N) per channel; skip = 1;
  /// delta bias set so softplus(bias) is log-uniform in [1e-3, 1e-1].
  static ScanParams init(Index d_model, Index d_state, Rng& rng);
  void validate() const;
};

/// Row-major token matrix (h*w x c) of one sample.
RowMatrixXd tokens_of(const Tensor& x, Index sample = 0);
std::array<scan::DirectionalSequence<double>, 4> cross_scan(const Tensor& x, Index sample = 0);

/// Differentiable multi-direction scan over precomputed per-token inputs.
/// x, delta: (n, D, h, w); b, c: (n, N, h, w); a: (1, 1, D, N); skip: D entries.
Tensor selective_scan_2d(const Tensor& x, const Tensor& delta, const Tensor& b, const Tensor& c,
                         const Tensor& a, const Tensor& skip, const ScanOptions& options = {});

/// Full SS2D: projections, cross-scan, per-direction recurrence, cross-merge.
Tensor ss2d(const Tensor& x, const ScanParams& params, const ScanOptions& options = {});

}  // namespace fabme
