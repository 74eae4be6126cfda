#include "fabme/ss2d.hpp"

#include <cmath>

#include "fabme/ops.hpp"

namespace fabme {

namespace {

using Node = detail::Node;

RowMatrixXd tokens_from(const double* block, Index channels, Index plane) {
  return Eigen::Map<const RowMatrixXd>(block, channels, plane).transpose();
}

void add_tokens_to(double* block, const RowMatrixXd& tokens) {
  Eigen::Map<RowMatrixXd>(block, tokens.cols(), tokens.rows()) += tokens.transpose();
}

std::span<const scan::Direction> active_directions(const ScanOptions& options) {
  if (options.directions != 1 && options.directions != 2 && options.directions != 4) {
    throw Error("ss2d: directions must be 1, 2 or 4");
  }
  return {scan::kAllDirections.data(), static_cast<std::size_t>(options.directions)};
}

}  // namespace

ScanParams ScanParams::init(Index d_model, Index d_state, Rng& rng) {
  if (d_model < 1 || d_state < 1) throw Error("ScanParams: d_model and d_state must be positive");
  ScanParams p;
  p.d_model = d_model;
  p.d_state = d_state;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_model));
  p.delta_weight = Tensor::uniform({d_model, d_model, 1, 1}, -bound, bound, rng, true);
  p.b_weight = Tensor::uniform({d_state, d_model, 1, 1}, -bound, bound, rng, true);
  p.c_weight = Tensor::uniform({d_state, d_model, 1, 1}, -bound, bound, rng, true);

  Buffer bias(d_model);
  std::uniform_real_distribution<double> log_dt(std::log(1e-3), std::log(1e-1));
  for (Index d = 0; d < d_model; ++d) {
    const double dt = std::exp(log_dt(rng));
    bias[d] = dt + std::log(-std::expm1(-dt));
  }
  p.delta_bias = Tensor({1, d_model, 1, 1}, std::move(bias), true);

  Buffer a_log(d_model * d_state);
  for (Index d = 0; d < d_model; ++d)
    for (Index n = 0; n < d_state; ++n) a_log[d * d_state + n] = std::log(static_cast<double>(n + 1));
  p.a_log = Tensor({1, 1, d_model, d_state}, std::move(a_log), true);
  p.skip = Tensor::full({1, d_model, 1, 1}, 1.0, true);
  return p;
}

void ScanParams::validate() const {
  auto expect = [](const Tensor& t, Shape s, const char* what) {
    if (!t.defined() || t.shape() != s) {
      throw Error(std::string("ScanParams: ") + what + " must be " + s.str());
    }
  };
  expect(delta_weight, {d_model, d_model, 1, 1}, "delta_weight");
  expect(delta_bias, {1, d_model, 1, 1}, "delta_bias");
  expect(b_weight, {d_state, d_model, 1, 1}, "b_weight");
  expect(c_weight, {d_state, d_model, 1, 1}, "c_weight");
  expect(a_log, {1, 1, d_model, d_state}, "a_log");
  expect(skip, {1, d_model, 1, 1}, "skip");
}

RowMatrixXd tokens_of(const Tensor& x, Index sample) {
  const Shape& s = x.shape();
  if (sample < 0 || sample >= s.n) throw Error("tokens_of: sample index out of range");
  return tokens_from(x.values().data() + sample * s.c * s.plane(), s.c, s.plane());
}

std::array<scan::DirectionalSequence<double>, 4> cross_scan(const Tensor& x, Index sample) {
  return scan::cross_scan<double>(tokens_of(x, sample), x.shape().h, x.shape().w);
}

Tensor selective_scan_2d(const Tensor& x, const Tensor& delta, const Tensor& b, const Tensor& c,
                         const Tensor& a, const Tensor& skip, const ScanOptions& options) {
  const Shape xs = x.shape();
  const Index channels = xs.c;
  const Index plane = xs.plane();
  if (plane < 1) throw Error("ss2d: empty spatial extent");
  if (delta.shape() != xs) throw Error("ss2d: delta shape " + delta.shape().str() + " != input " + xs.str());
  const Index state = b.shape().c;
  const Shape bs{xs.n, state, xs.h, xs.w};
  if (b.shape() != bs) throw Error("ss2d: B shape " + b.shape().str() + " != " + bs.str());
  if (c.shape() != bs) throw Error("ss2d: C shape " + c.shape().str() + " != " + bs.str());
  if (a.numel() != channels * state) throw Error("ss2d: A must hold d_model x d_state entries");
  if (skip.numel() != channels) throw Error("ss2d: skip must hold d_model entries");
  const auto directions = active_directions(options);
  const double merge_scale = options.merge == ScanMerge::Mean ? 1.0 / static_cast<double>(directions.size()) : 1.0;

  const RowMatrixXd a_mat = Eigen::Map<const RowMatrixXd>(a.values().data(), channels, state);
  const scan::Vector<double> skip_vec = skip.values().matrix();
  // The per-step states are only needed by the backward pass.
  const bool keep_states = x.requires_grad() || delta.requires_grad() || b.requires_grad() || c.requires_grad() ||
                           a.requires_grad() || skip.requires_grad();
  std::vector<RowMatrixXd> states(static_cast<std::size_t>(xs.n) * directions.size());
  Buffer out = Buffer::Zero(xs.numel());
  for (Index n = 0; n < xs.n; ++n) {
    const RowMatrixXd xt = tokens_of(x, n);
    const RowMatrixXd dt = tokens_of(delta, n);
    const RowMatrixXd bt = tokens_of(b, n);
    const RowMatrixXd ct = tokens_of(c, n);
    RowMatrixXd merged = RowMatrixXd::Zero(plane, channels);
    for (std::size_t k = 0; k < directions.size(); ++k) {
      const auto dir = directions[k];
      RowMatrixXd* saved = keep_states ? &states[static_cast<std::size_t>(n) * directions.size() + k] : nullptr;
      const RowMatrixXd y = scan::selective_scan<double>(
          scan::flatten(xt, dir, xs.h, xs.w), scan::flatten(dt, dir, xs.h, xs.w),
          scan::flatten(bt, dir, xs.h, xs.w), scan::flatten(ct, dir, xs.h, xs.w), a_mat, skip_vec, saved);
      merged += scan::unflatten(y, dir, xs.h, xs.w);
    }
    merged *= merge_scale;
    add_tokens_to(out.data() + n * channels * plane, merged);
  }

  return make_result(
      xs, std::move(out), "ss2d_scan", {x, delta, b, c, a, skip},
      [states = std::move(states), directions, merge_scale, xs, state, a_mat, skip_vec](Node& self) {
        auto& px = *self.parents[0];
        auto& pdelta = *self.parents[1];
        auto& pb = *self.parents[2];
        auto& pc = *self.parents[3];
        auto& pa = *self.parents[4];
        auto& pskip = *self.parents[5];
        const Index channels = xs.c;
        const Index plane = xs.plane();
        RowMatrixXd ga = RowMatrixXd::Zero(channels, state);
        scan::Vector<double> gskip = scan::Vector<double>::Zero(channels);
        for (Index n = 0; n < xs.n; ++n) {
          const Index xoff = n * channels * plane;
          const Index boff = n * state * plane;
          const RowMatrixXd xt = tokens_from(px.value.data() + xoff, channels, plane);
          const RowMatrixXd dt = tokens_from(pdelta.value.data() + xoff, channels, plane);
          const RowMatrixXd bt = tokens_from(pb.value.data() + boff, state, plane);
          const RowMatrixXd ct = tokens_from(pc.value.data() + boff, state, plane);
          const RowMatrixXd gy = tokens_from(self.grad.data() + xoff, channels, plane) * merge_scale;
          RowMatrixXd gx = RowMatrixXd::Zero(plane, channels);
          RowMatrixXd gdt = RowMatrixXd::Zero(plane, channels);
          RowMatrixXd gb = RowMatrixXd::Zero(plane, state);
          RowMatrixXd gc = RowMatrixXd::Zero(plane, state);
          for (std::size_t k = 0; k < directions.size(); ++k) {
            const auto dir = directions[k];
            const auto g = scan::selective_scan_backward<double>(
                scan::flatten(xt, dir, xs.h, xs.w), scan::flatten(dt, dir, xs.h, xs.w),
                scan::flatten(bt, dir, xs.h, xs.w), scan::flatten(ct, dir, xs.h, xs.w), a_mat, skip_vec,
                states[static_cast<std::size_t>(n) * directions.size() + k], scan::flatten(gy, dir, xs.h, xs.w));
            gx += scan::unflatten(g.x, dir, xs.h, xs.w);
            gdt += scan::unflatten(g.delta, dir, xs.h, xs.w);
            gb += scan::unflatten(g.b, dir, xs.h, xs.w);
            gc += scan::unflatten(g.c, dir, xs.h, xs.w);
            ga += g.a;
            gskip += g.skip;
          }
          if (px.requires_grad) add_tokens_to(px.grad_buffer().data() + xoff, gx);
          if (pdelta.requires_grad) add_tokens_to(pdelta.grad_buffer().data() + xoff, gdt);
          if (pb.requires_grad) add_tokens_to(pb.grad_buffer().data() + boff, gb);
          if (pc.requires_grad) add_tokens_to(pc.grad_buffer().data() + boff, gc);
        }
        if (pa.requires_grad) pa.grad_buffer() += Eigen::Map<const Buffer>(ga.data(), ga.size());
        if (pskip.requires_grad) pskip.grad_buffer() += gskip.array();
      });
}

Tensor ss2d(const Tensor& x, const ScanParams& params, const ScanOptions& options) {
  params.validate();
  if (x.shape().c != params.d_model) {
    throw Error("ss2d: input channels " + std::to_string(x.shape().c) + " != d_model " +
                std::to_string(params.d_model));
  }
  const Index d = params.d_model;
  const Index n = params.d_state;
  const Tensor delta = softplus(conv2d(x, ConvSpec{d, d, 1, 1, 1, 0, 1, true}, params.delta_weight, params.delta_bias));
  const Tensor b = conv2d(x, ConvSpec{d, n, 1, 1, 1, 0, 1, false}, params.b_weight);
  const Tensor c = conv2d(x, ConvSpec{d, n, 1, 1, 1, 0, 1, false}, params.c_weight);
  const Tensor a = neg(exp(params.a_log));
  return selective_scan_2d(x, delta, b, c, a, params.skip, options);
}

}  // namespace fabme
