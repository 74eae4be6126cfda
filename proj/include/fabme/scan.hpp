#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <string_view>
#include <vector>

#include "fabme/tensor.hpp"

namespace fabme::scan {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Flattening orders of an h x w token grid.
enum class Direction {
  RowMajor,          ///< left-to-right, top-to-bottom
  RowMajorReversed,  ///< reverse of RowMajor
  ColMajor,          ///< top-to-bottom, left-to-right
  ColMajorReversed,  ///< reverse of ColMajor
};

inline constexpr std::array<Direction, 4> kAllDirections{
    Direction::RowMajor, Direction::RowMajorReversed, Direction::ColMajor, Direction::ColMajorReversed};

constexpr std::string_view name(Direction d) {
  switch (d) {
    case Direction::RowMajor: return "LR";
    case Direction::RowMajorReversed: return "RL";
    case Direction::ColMajor: return "TB";
    case Direction::ColMajorReversed: return "BT";
  }
  return "?";
}

/// order[t] is the row-major index of the token visited at step t.
inline std::vector<Index> scan_order(Direction d, Index height, Index width) {
  const Index length = height * width;
  std::vector<Index> order;
  order.reserve(static_cast<std::size_t>(length));
  const bool column = d == Direction::ColMajor || d == Direction::ColMajorReversed;
  if (column) {
    for (Index x = 0; x < width; ++x)
      for (Index y = 0; y < height; ++y) order.push_back(y * width + x);
  } else {
    for (Index i = 0; i < length; ++i) order.push_back(i);
  }
  if (d == Direction::RowMajorReversed || d == Direction::ColMajorReversed) {
    std::reverse(order.begin(), order.end());
  }
  return order;
}

template <typename Scalar>
struct DirectionalSequence {
  Direction direction;
  RowMatrix<Scalar> tokens;  ///< L x d_model, in visiting order
};

/// Reorders the rows of a row-major token grid (L x d) into visiting order.
template <typename Scalar>
RowMatrix<Scalar> flatten(const RowMatrix<Scalar>& grid, Direction d, Index height, Index width) {
  if (grid.rows() != height * width) throw Error("flatten: token count does not match grid");
  const auto order = scan_order(d, height, width);
  RowMatrix<Scalar> seq(grid.rows(), grid.cols());
  for (std::size_t t = 0; t < order.size(); ++t) seq.row(static_cast<Index>(t)) = grid.row(order[t]);
  return seq;
}

template <typename Scalar>
RowMatrix<Scalar> unflatten(const RowMatrix<Scalar>& seq, Direction d, Index height, Index width) {
  if (seq.rows() != height * width) throw Error("unflatten: sequence length does not match grid");
  const auto order = scan_order(d, height, width);
  RowMatrix<Scalar> grid(seq.rows(), seq.cols());
  for (std::size_t t = 0; t < order.size(); ++t) grid.row(order[t]) = seq.row(static_cast<Index>(t));
  return grid;
}

template <typename Scalar>
std::array<DirectionalSequence<Scalar>, 4> cross_scan(const RowMatrix<Scalar>& grid, Index height,
                                                      Index width) {
  if (height * width < 1) throw Error("cross_scan: empty spatial extent");
  std::array<DirectionalSequence<Scalar>, 4> out;
  for (std::size_t k = 0; k < 4; ++k) {
    out[k] = {kAllDirections[k], flatten(grid, kAllDirections[k], height, width)};
  }
  return out;
}

/// Inverse-flattens every sequence and sums the resulting grids.
template <typename Scalar>
RowMatrix<Scalar> cross_merge(std::span<const DirectionalSequence<Scalar>> seqs, Index height,
                              Index width) {
  if (seqs.empty()) throw Error("cross_merge: no sequences");
  RowMatrix<Scalar> grid = RowMatrix<Scalar>::Zero(height * width, seqs.front().tokens.cols());
  for (const auto& s : seqs) grid += unflatten(s.tokens, s.direction, height, width);
  return grid;
}

/// Selective state-space recurrence over one sequence.
///
///   h_t = exp(delta_t * A) . h_{t-1} + (delta_t * B_t) x_t,   h_{-1} = 0
///   y_t = C_t . h_t + skip . x_t
///
/// Shapes: x, delta: L x D; b, c: L x N; a: D x N; skip: D. The state is D x N
/// (one N-vector per channel). When `states` is given it receives h_t as row t
/// (L x D*N), which the backward pass needs.
template <typename Scalar>
RowMatrix<Scalar> selective_scan(const RowMatrix<Scalar>& x, const RowMatrix<Scalar>& delta,
                                 const RowMatrix<Scalar>& b, const RowMatrix<Scalar>& c,
                                 const RowMatrix<Scalar>& a, const Vector<Scalar>& skip,
                                 RowMatrix<Scalar>* states = nullptr) {
  const Index length = x.rows();
  const Index channels = x.cols();
  const Index state = a.cols();
  if (length < 1) throw Error("selective_scan: empty sequence");
  if (delta.rows() != length || delta.cols() != channels) throw Error("selective_scan: delta must be L x D");
  if (b.rows() != length || b.cols() != state) throw Error("selective_scan: B must be L x N");
  if (c.rows() != length || c.cols() != state) throw Error("selective_scan: C must be L x N");
  if (a.rows() != channels) throw Error("selective_scan: A must be D x N");
  if (skip.size() != channels) throw Error("selective_scan: skip must have D entries");
  if (!(delta.array() > Scalar(0)).all()) {
    throw Error("selective_scan: step size delta must be strictly positive");
  }

  RowMatrix<Scalar> y(length, channels);
  Vector<Scalar> h = Vector<Scalar>::Zero(channels * state);
  if (states) states->resize(length, channels * state);
  for (Index t = 0; t < length; ++t) {
    const Scalar* bt = b.row(t).data();
    const Scalar* ct = c.row(t).data();
    for (Index d = 0; d < channels; ++d) {
      const Scalar dt = delta(t, d);
      const Scalar xd = x(t, d);
      const Scalar u = dt * xd;
      const Scalar* ad = a.row(d).data();
      Scalar* hd = h.data() + d * state;
      Scalar acc = 0;
      for (Index n = 0; n < state; ++n) {
        hd[n] = std::exp(dt * ad[n]) * hd[n] + u * bt[n];
        acc += ct[n] * hd[n];
      }
      y(t, d) = acc + skip[d] * xd;
    }
    if (states) states->row(t) = h.transpose();
  }
  return y;
}

template <typename Scalar>
struct ScanGradients {
  RowMatrix<Scalar> x, delta, b, c, a;
  Vector<Scalar> skip;
};

/// Reverse sweep of `selective_scan` given the stored states and dL/dy.
template <typename Scalar>
ScanGradients<Scalar> selective_scan_backward(const RowMatrix<Scalar>& x, const RowMatrix<Scalar>& delta,
                                              const RowMatrix<Scalar>& b, const RowMatrix<Scalar>& c,
                                              const RowMatrix<Scalar>& a, const Vector<Scalar>& skip,
                                              const RowMatrix<Scalar>& states, const RowMatrix<Scalar>& dy) {
  const Index length = x.rows();
  const Index channels = x.cols();
  const Index state = a.cols();
  ScanGradients<Scalar> g{RowMatrix<Scalar>::Zero(length, channels), RowMatrix<Scalar>::Zero(length, channels),
                          RowMatrix<Scalar>::Zero(length, state),    RowMatrix<Scalar>::Zero(length, state),
                          RowMatrix<Scalar>::Zero(channels, state),  Vector<Scalar>::Zero(channels)};
  // carry = a_{t+1} * dL/dh_{t+1}, the part of dL/dh_t flowing back through the recurrence
  Vector<Scalar> carry = Vector<Scalar>::Zero(channels * state);
  for (Index t = length - 1; t >= 0; --t) {
    const Scalar* bt = b.row(t).data();
    const Scalar* ct = c.row(t).data();
    const Scalar* ht = states.row(t).data();
    const Scalar* hprev = t > 0 ? states.row(t - 1).data() : nullptr;
    for (Index d = 0; d < channels; ++d) {
      const Scalar dt = delta(t, d);
      const Scalar xd = x(t, d);
      const Scalar gy = dy(t, d);
      const Scalar* ad = a.row(d).data();
      g.skip[d] += gy * xd;
      Scalar gx = gy * skip[d];
      Scalar gdelta = 0;
      Scalar* cd = carry.data() + d * state;
      for (Index n = 0; n < state; ++n) {
        const Scalar gh = ct[n] * gy + cd[n];
        g.c(t, n) += gy * ht[d * state + n];
        const Scalar abar = std::exp(dt * ad[n]);
        if (hprev) {
          const Scalar gabar = gh * hprev[d * state + n] * abar;
          g.a(d, n) += gabar * dt;
          gdelta += gabar * ad[n];
        }
        gdelta += gh * bt[n] * xd;
        g.b(t, n) += gh * dt * xd;
        gx += gh * dt * bt[n];
        cd[n] = gh * abar;
      }
      g.x(t, d) += gx;
      g.delta(t, d) += gdelta;
    }
  }
  return g;
}

/// Softmax attention with an explicit L x L score computation; the quadratic
/// reference the scan is benchmarked against.
template <typename Scalar>
RowMatrix<Scalar> naive_attention(const RowMatrix<Scalar>& q, const RowMatrix<Scalar>& k,
                                  const RowMatrix<Scalar>& v) {
  const Index length = q.rows();
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(q.cols()));
  RowMatrix<Scalar> out(length, v.cols());
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> scores(k.rows());
  for (Index i = 0; i < length; ++i) {
    scores.noalias() = (q.row(i) * k.transpose()) * inv_sqrt;
    const Scalar top = scores.maxCoeff();
    scores = (scores.array() - top).exp();
    scores /= scores.sum();
    out.row(i).noalias() = scores * v;
  }
  return out;
}

}  // namespace fabme::scan
