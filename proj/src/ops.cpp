#include "fabme/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fabme {

namespace {

using Node = detail::Node;
using MatMap = Eigen::Map<RowMatrixXd>;
using ConstMatMap = Eigen::Map<const RowMatrixXd>;

std::string dims_of(const Shape& s) { return s.str(); }

/// Element strides of `b` when broadcast against `a` (0 along extents of 1).
struct Broadcast {
  Index sn, sc, sh, sw;
};

Broadcast broadcast_strides(const Shape& a, const Shape& b, const char* op) {
  auto check = [&](Index ea, Index eb, const char* dim) {
    if (eb != ea && eb != 1) {
      throw Error(std::string(op) + ": cannot broadcast " + dims_of(b) + " to " + dims_of(a) +
                  " along " + dim);
    }
  };
  check(a.n, b.n, "n");
  check(a.c, b.c, "c");
  check(a.h, b.h, "h");
  check(a.w, b.w, "w");
  const Index sw = b.w == 1 ? 0 : 1;
  const Index sh = b.h == 1 ? 0 : b.w;
  const Index sc = b.c == 1 ? 0 : b.h * b.w;
  const Index sn = b.n == 1 ? 0 : b.c * b.h * b.w;
  return {sn, sc, sh, sw};
}

template <typename F>
void for_each_broadcast(const Shape& a, const Broadcast& bs, F&& f) {
  Index ia = 0;
  for (Index n = 0; n < a.n; ++n)
    for (Index c = 0; c < a.c; ++c)
      for (Index y = 0; y < a.h; ++y) {
        const Index base = n * bs.sn + c * bs.sc + y * bs.sh;
        for (Index x = 0; x < a.w; ++x, ++ia) f(ia, base + x * bs.sw);
      }
}

Tensor binary(const Tensor& a, const Tensor& b, bool multiply, double sign, const char* op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa == sb) {
    Buffer out = multiply ? Buffer(a.values() * b.values()) : Buffer(a.values() + sign * b.values());
    return make_result(sa, std::move(out), op, {a, b}, [multiply, sign](Node& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      if (pa.requires_grad) {
        if (multiply) pa.grad_buffer() += self.grad * pb.value;
        else pa.grad_buffer() += self.grad;
      }
      if (pb.requires_grad) {
        if (multiply) pb.grad_buffer() += self.grad * pa.value;
        else pb.grad_buffer() += sign * self.grad;
      }
    });
  }
  const Broadcast bs = broadcast_strides(sa, sb, op);
  Buffer out(sa.numel());
  const double* av = a.values().data();
  const double* bv = b.values().data();
  if (multiply) {
    for_each_broadcast(sa, bs, [&](Index i, Index j) { out[i] = av[i] * bv[j]; });
  } else {
    for_each_broadcast(sa, bs, [&](Index i, Index j) { out[i] = av[i] + sign * bv[j]; });
  }
  return make_result(sa, std::move(out), op, {a, b}, [multiply, sign, bs, sa](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const double* g = self.grad.data();
    if (pa.requires_grad) {
      auto& ga = pa.grad_buffer();
      if (multiply) for_each_broadcast(sa, bs, [&](Index i, Index j) { ga[i] += g[i] * pb.value[j]; });
      else ga += self.grad;
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      if (multiply) for_each_broadcast(sa, bs, [&](Index i, Index j) { gb[j] += g[i] * pa.value[i]; });
      else for_each_broadcast(sa, bs, [&](Index i, Index j) { gb[j] += sign * g[i]; });
    }
  });
}

/// Elementwise map with derivative expressed through input and output values.
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, const char* op, Fwd fwd, Deriv deriv) {
  Buffer out = x.values().unaryExpr(fwd);
  return make_result(x.shape(), std::move(out), op, {x}, [deriv](Node& self) {
    auto& px = *self.parents[0];
    auto& gx = px.grad_buffer();
    const Index n = self.value.size();
    for (Index i = 0; i < n; ++i) gx[i] += self.grad[i] * deriv(px.value[i], self.value[i]);
  });
}

double sigmoid_scalar(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

double softplus_scalar(double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }

void im2col(const double* x, Index channels, Index height, Index width, const ConvSpec& s,
            Index out_h, Index out_w, double* cols) {
  const Index plane = out_h * out_w;
  for (Index ci = 0; ci < channels; ++ci) {
    const double* src = x + ci * height * width;
    for (Index ky = 0; ky < s.kh; ++ky) {
      for (Index kx = 0; kx < s.kw; ++kx) {
        double* row = cols + ((ci * s.kh + ky) * s.kw + kx) * plane;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * s.stride - s.padding + ky;
          double* dst = row + oy * out_w;
          if (iy < 0 || iy >= height) {
            std::fill(dst, dst + out_w, 0.0);
            continue;
          }
          const double* line = src + iy * width;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * s.stride - s.padding + kx;
            dst[ox] = (ix >= 0 && ix < width) ? line[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, Index channels, Index height, Index width, const ConvSpec& s,
                Index out_h, Index out_w, double* x) {
  const Index plane = out_h * out_w;
  for (Index ci = 0; ci < channels; ++ci) {
    double* dst = x + ci * height * width;
    for (Index ky = 0; ky < s.kh; ++ky) {
      for (Index kx = 0; kx < s.kw; ++kx) {
        const double* row = cols + ((ci * s.kh + ky) * s.kw + kx) * plane;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * s.stride - s.padding + ky;
          if (iy < 0 || iy >= height) continue;
          double* line = dst + iy * width;
          const double* src = row + oy * out_w;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * s.stride - s.padding + kx;
            if (ix >= 0 && ix < width) line[ix] += src[ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvSpec& s) {
  return s.kh == 1 && s.kw == 1 && s.stride == 1 && s.padding == 0;
}

}  // namespace

void ConvSpec::validate() const {
  if (in_channels < 1 || out_channels < 1) throw Error("conv: channel counts must be positive");
  if (groups < 1) throw Error("conv: groups must be >= 1");
  if (in_channels % groups != 0) {
    throw Error("conv: in_channels " + std::to_string(in_channels) + " not divisible by groups " +
                std::to_string(groups));
  }
  if (out_channels % groups != 0) {
    throw Error("conv: out_channels " + std::to_string(out_channels) + " not divisible by groups " +
                std::to_string(groups));
  }
  if (kh < 1 || kw < 1) throw Error("conv: kernel extent must be positive");
  if (stride < 1) throw Error("conv: stride must be >= 1");
  if (padding < 0) throw Error("conv: padding must be >= 0");
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, false, 1.0, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, false, -1.0, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, true, 1.0, "mul"); }

Tensor scale(const Tensor& x, double factor) {
  return make_result(x.shape(), x.values() * factor, "scale", {x}, [factor](Node& self) {
    self.parents[0]->grad_buffer() += factor * self.grad;
  });
}

Tensor add_scalar(const Tensor& x, double value) {
  return make_result(x.shape(), x.values() + value, "add_scalar", {x},
                     [](Node& self) { self.parents[0]->grad_buffer() += self.grad; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, "sigmoid", sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& x) {
  return unary(
      x, "silu", [](double v) { return v * sigmoid_scalar(v); },
      [](double v, double) {
        const double s = sigmoid_scalar(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor softplus(const Tensor& x) {
  return unary(x, "softplus", softplus_scalar, [](double v, double) { return sigmoid_scalar(v); });
}

Tensor sum(const Tensor& x) {
  return make_result({1, 1, 1, 1}, Buffer::Constant(1, x.values().sum()), "sum", {x},
                     [](Node& self) { self.parents[0]->grad_buffer() += self.grad[0]; });
}

Tensor mean(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.numel());
  return make_result({1, 1, 1, 1}, Buffer::Constant(1, x.values().sum() * inv), "mean", {x},
                     [inv](Node& self) { self.parents[0]->grad_buffer() += self.grad[0] * inv; });
}

Tensor weighted_sum(const Tensor& x, const Buffer& weights) {
  if (weights.size() != x.numel()) throw Error("weighted_sum: weight count does not match " + x.shape().str());
  const double v = (x.values() * weights).sum();
  return make_result({1, 1, 1, 1}, Buffer::Constant(1, v), "weighted_sum", {x},
                     [weights](Node& self) { self.parents[0]->grad_buffer() += self.grad[0] * weights; });
}

Tensor conv2d(const Tensor& x, const ConvSpec& spec, const Tensor& weight,
              const std::optional<Tensor>& bias) {
  spec.validate();
  const Shape& xs = x.shape();
  if (xs.c != spec.in_channels) {
    throw Error("conv2d: input channel dimension " + std::to_string(xs.c) + " != in_channels " +
                std::to_string(spec.in_channels));
  }
  const Shape ws = spec.weight_shape();
  const Shape& wg = weight.shape();
  if (wg.n != ws.n) throw Error("conv2d: weight out_channels dimension " + std::to_string(wg.n) + " != " + std::to_string(ws.n));
  if (wg.c != ws.c) throw Error("conv2d: weight in_channels/groups dimension " + std::to_string(wg.c) + " != " + std::to_string(ws.c));
  if (wg.h != ws.h) throw Error("conv2d: weight kernel height " + std::to_string(wg.h) + " != " + std::to_string(ws.h));
  if (wg.w != ws.w) throw Error("conv2d: weight kernel width " + std::to_string(wg.w) + " != " + std::to_string(ws.w));
  if (spec.bias != bias.has_value()) throw Error("conv2d: bias presence does not match spec");
  if (bias && bias->numel() != spec.out_channels) {
    throw Error("conv2d: bias length " + std::to_string(bias->numel()) + " != out_channels " +
                std::to_string(spec.out_channels));
  }
  const Index out_h = spec.out_extent(xs.h, spec.kh);
  const Index out_w = spec.out_extent(xs.w, spec.kw);
  if (out_h < 1 || out_w < 1) throw Error("conv2d: kernel larger than padded input " + xs.str());

  const Shape os{xs.n, spec.out_channels, out_h, out_w};
  const Index cin_g = spec.in_channels / spec.groups;
  const Index cout_g = spec.out_channels / spec.groups;
  const Index k = cin_g * spec.kh * spec.kw;
  const Index plane = out_h * out_w;
  const Index in_plane = xs.h * xs.w;
  const bool pointwise = is_pointwise(spec);
  const bool depthwise = cin_g == 1 && cout_g == 1;

  Buffer out(os.numel());
  const double* xv = x.values().data();
  const double* wv = weight.values().data();
  RowMatrixXd cols;
  if (!pointwise && !depthwise) cols.resize(k, plane);

  for (Index n = 0; n < xs.n; ++n) {
    for (Index g = 0; g < spec.groups; ++g) {
      const double* xg = xv + (n * spec.in_channels + g * cin_g) * in_plane;
      double* og = out.data() + (n * spec.out_channels + g * cout_g) * plane;
      if (depthwise) {
        const double* wk = wv + g * spec.kh * spec.kw;
        for (Index oy = 0; oy < out_h; ++oy)
          for (Index ox = 0; ox < out_w; ++ox) {
            double acc = 0.0;
            for (Index ky = 0; ky < spec.kh; ++ky) {
              const Index iy = oy * spec.stride - spec.padding + ky;
              if (iy < 0 || iy >= xs.h) continue;
              for (Index kx = 0; kx < spec.kw; ++kx) {
                const Index ix = ox * spec.stride - spec.padding + kx;
                if (ix >= 0 && ix < xs.w) acc += wk[ky * spec.kw + kx] * xg[iy * xs.w + ix];
              }
            }
            og[oy * out_w + ox] = acc;
          }
        continue;
      }
      ConstMatMap wmat(wv + g * cout_g * k, cout_g, k);
      MatMap omat(og, cout_g, plane);
      if (pointwise) {
        omat.noalias() = wmat * ConstMatMap(xg, cin_g, plane);
      } else {
        im2col(xg, cin_g, xs.h, xs.w, spec, out_h, out_w, cols.data());
        omat.noalias() = wmat * cols;
      }
    }
    if (bias) {
      const double* bv = bias->values().data();
      for (Index c = 0; c < spec.out_channels; ++c) {
        double* oc = out.data() + (n * spec.out_channels + c) * plane;
        for (Index p = 0; p < plane; ++p) oc[p] += bv[c];
      }
    }
  }

  std::vector<Tensor> parents{x, weight};
  if (bias) parents.push_back(*bias);
  return make_result(os, std::move(out), "conv2d", std::move(parents), [spec, xs, os](Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    const Index cin_g = spec.in_channels / spec.groups;
    const Index cout_g = spec.out_channels / spec.groups;
    const Index k = cin_g * spec.kh * spec.kw;
    const Index plane = os.h * os.w;
    const Index in_plane = xs.h * xs.w;
    const bool pointwise = is_pointwise(spec);
    const bool depthwise = cin_g == 1 && cout_g == 1;
    const double* g = self.grad.data();

    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      auto& gb = self.parents[2]->grad_buffer();
      for (Index n = 0; n < os.n; ++n)
        for (Index c = 0; c < os.c; ++c) {
          const double* gc = g + (n * os.c + c) * plane;
          double acc = 0.0;
          for (Index p = 0; p < plane; ++p) acc += gc[p];
          gb[c] += acc;
        }
    }
    double* gx = px.requires_grad ? px.grad_buffer().data() : nullptr;
    double* gw = pw.requires_grad ? pw.grad_buffer().data() : nullptr;
    const double* xv = px.value.data();
    const double* wv = pw.value.data();
    RowMatrixXd cols;
    RowMatrixXd dcols;
    if (!pointwise && !depthwise) {
      cols.resize(k, plane);
      dcols.resize(k, plane);
    }
    for (Index n = 0; n < os.n; ++n) {
      for (Index grp = 0; grp < spec.groups; ++grp) {
        const double* xg = xv + (n * spec.in_channels + grp * cin_g) * in_plane;
        const double* gg = g + (n * spec.out_channels + grp * cout_g) * plane;
        if (depthwise) {
          const double* wk = wv + grp * spec.kh * spec.kw;
          double* gwk = gw ? gw + grp * spec.kh * spec.kw : nullptr;
          double* gxg = gx ? gx + (n * spec.in_channels + grp) * in_plane : nullptr;
          for (Index oy = 0; oy < os.h; ++oy)
            for (Index ox = 0; ox < os.w; ++ox) {
              const double go = gg[oy * os.w + ox];
              if (go == 0.0) continue;
              for (Index ky = 0; ky < spec.kh; ++ky) {
                const Index iy = oy * spec.stride - spec.padding + ky;
                if (iy < 0 || iy >= xs.h) continue;
                for (Index kx = 0; kx < spec.kw; ++kx) {
                  const Index ix = ox * spec.stride - spec.padding + kx;
                  if (ix < 0 || ix >= xs.w) continue;
                  if (gwk) gwk[ky * spec.kw + kx] += go * xg[iy * xs.w + ix];
                  if (gxg) gxg[iy * xs.w + ix] += go * wk[ky * spec.kw + kx];
                }
              }
            }
          continue;
        }
        ConstMatMap gmat(gg, cout_g, plane);
        ConstMatMap wmat(wv + grp * cout_g * k, cout_g, k);
        if (pointwise) {
          if (gw) MatMap(gw + grp * cout_g * k, cout_g, k).noalias() += gmat * ConstMatMap(xg, cin_g, plane).transpose();
          if (gx) {
            MatMap(gx + (n * spec.in_channels + grp * cin_g) * in_plane, cin_g, plane).noalias() +=
                wmat.transpose() * gmat;
          }
          continue;
        }
        if (gw) {
          im2col(xg, cin_g, xs.h, xs.w, spec, os.h, os.w, cols.data());
          MatMap(gw + grp * cout_g * k, cout_g, k).noalias() += gmat * cols.transpose();
        }
        if (gx) {
          dcols.noalias() = wmat.transpose() * gmat;
          col2im_add(dcols.data(), cin_g, xs.h, xs.w, spec, os.h, os.w,
                     gx + (n * spec.in_channels + grp * cin_g) * in_plane);
        }
      }
    }
  });
}

Tensor conv1d(const Tensor& x, const Tensor& kernel) {
  const Shape& xs = x.shape();
  if (xs.h != 1 || xs.w != 1) throw Error("conv1d: expected an (n, c, 1, 1) descriptor, got " + xs.str());
  const Index k = kernel.numel();
  if (k % 2 == 0) throw Error("conv1d: kernel size " + std::to_string(k) + " must be odd");
  const Index half = k / 2;
  const Index channels = xs.c;
  Buffer out = Buffer::Zero(xs.numel());
  const double* xv = x.values().data();
  const double* kv = kernel.values().data();
  for (Index n = 0; n < xs.n; ++n)
    for (Index c = 0; c < channels; ++c) {
      double acc = 0.0;
      for (Index j = 0; j < k; ++j) {
        const Index src = c + j - half;
        if (src >= 0 && src < channels) acc += kv[j] * xv[n * channels + src];
      }
      out[n * channels + c] = acc;
    }
  return make_result(xs, std::move(out), "conv1d", {x, kernel}, [k, half, xs](Node& self) {
    auto& px = *self.parents[0];
    auto& pk = *self.parents[1];
    const Index channels = xs.c;
    for (Index n = 0; n < xs.n; ++n)
      for (Index c = 0; c < channels; ++c) {
        const double g = self.grad[n * channels + c];
        for (Index j = 0; j < k; ++j) {
          const Index src = c + j - half;
          if (src < 0 || src >= channels) continue;
          if (px.requires_grad) px.grad_buffer()[n * channels + src] += g * pk.value[j];
          if (pk.requires_grad) pk.grad_buffer()[j] += g * px.value[n * channels + src];
        }
      }
  });
}

Tensor global_avg_pool(const Tensor& x) {
  const Shape& xs = x.shape();
  const Index plane = xs.plane();
  if (plane < 1) throw Error("global_avg_pool: empty spatial extent");
  Buffer out(xs.n * xs.c);
  for (Index i = 0; i < out.size(); ++i) out[i] = x.values().segment(i * plane, plane).mean();
  return make_result({xs.n, xs.c, 1, 1}, std::move(out), "global_avg_pool", {x}, [plane](Node& self) {
    auto& gx = self.parents[0]->grad_buffer();
    const double inv = 1.0 / static_cast<double>(plane);
    for (Index i = 0; i < self.grad.size(); ++i) gx.segment(i * plane, plane) += self.grad[i] * inv;
  });
}

Tensor global_max_pool(const Tensor& x) {
  const Shape& xs = x.shape();
  const Index plane = xs.plane();
  if (plane < 1) throw Error("global_max_pool: empty spatial extent");
  Buffer out(xs.n * xs.c);
  std::vector<Index> argmax(static_cast<std::size_t>(out.size()));
  const double* xv = x.values().data();
  for (Index i = 0; i < out.size(); ++i) {
    const double* p = xv + i * plane;
    Index best = 0;
    for (Index j = 1; j < plane; ++j)
      if (p[j] > p[best]) best = j;
    argmax[static_cast<std::size_t>(i)] = i * plane + best;
    out[i] = p[best];
  }
  return make_result({xs.n, xs.c, 1, 1}, std::move(out), "global_max_pool", {x},
                     [argmax = std::move(argmax)](Node& self) {
                       auto& gx = self.parents[0]->grad_buffer();
                       for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += self.grad[static_cast<Index>(i)];
                     });
}

Tensor max_pool2d(const Tensor& x, Index kernel, Index stride, Index padding) {
  if (kernel < 1 || stride < 1 || padding < 0) throw Error("max_pool2d: invalid geometry");
  if (padding > kernel / 2) throw Error("max_pool2d: padding exceeds half the kernel");
  const Shape& xs = x.shape();
  const Index out_h = (xs.h + 2 * padding - kernel) / stride + 1;
  const Index out_w = (xs.w + 2 * padding - kernel) / stride + 1;
  if (out_h < 1 || out_w < 1) throw Error("max_pool2d: kernel larger than padded input " + xs.str());
  const Shape os{xs.n, xs.c, out_h, out_w};
  Buffer out(os.numel());
  std::vector<Index> argmax(static_cast<std::size_t>(os.numel()));
  const double* xv = x.values().data();
  Index o = 0;
  for (Index nc = 0; nc < xs.n * xs.c; ++nc) {
    const double* p = xv + nc * xs.plane();
    for (Index oy = 0; oy < out_h; ++oy)
      for (Index ox = 0; ox < out_w; ++ox, ++o) {
        double best = -std::numeric_limits<double>::infinity();
        Index where = -1;
        for (Index ky = 0; ky < kernel; ++ky) {
          const Index iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= xs.h) continue;
          for (Index kx = 0; kx < kernel; ++kx) {
            const Index ix = ox * stride - padding + kx;
            if (ix < 0 || ix >= xs.w) continue;
            const double v = p[iy * xs.w + ix];
            if (where < 0 || v > best) {
              best = v;
              where = iy * xs.w + ix;
            }
          }
        }
        out[o] = best;
        argmax[static_cast<std::size_t>(o)] = nc * xs.plane() + where;
      }
  }
  return make_result(os, std::move(out), "max_pool2d", {x}, [argmax = std::move(argmax)](Node& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += self.grad[static_cast<Index>(i)];
  });
}

Tensor upsample_nearest2x(const Tensor& x) {
  const Shape& xs = x.shape();
  const Shape os{xs.n, xs.c, xs.h * 2, xs.w * 2};
  Buffer out(os.numel());
  const double* xv = x.values().data();
  for (Index nc = 0; nc < xs.n * xs.c; ++nc)
    for (Index y = 0; y < os.h; ++y)
      for (Index xx = 0; xx < os.w; ++xx)
        out[(nc * os.h + y) * os.w + xx] = xv[(nc * xs.h + y / 2) * xs.w + xx / 2];
  return make_result(os, std::move(out), "upsample_nearest2x", {x}, [xs, os](Node& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (Index nc = 0; nc < xs.n * xs.c; ++nc)
      for (Index y = 0; y < os.h; ++y)
        for (Index xx = 0; xx < os.w; ++xx)
          gx[(nc * xs.h + y / 2) * xs.w + xx / 2] += self.grad[(nc * os.h + y) * os.w + xx];
  });
}

std::vector<Tensor> split_channels(const Tensor& x, std::span<const Index> sizes) {
  const Shape& xs = x.shape();
  Index total = 0;
  for (Index s : sizes) {
    if (s < 1) throw Error("split_channels: part sizes must be positive");
    total += s;
  }
  if (total != xs.c) {
    throw Error("split_channels: parts sum to " + std::to_string(total) + " channels, input has " +
                std::to_string(xs.c));
  }
  std::vector<Tensor> parts;
  parts.reserve(sizes.size());
  const Index plane = xs.plane();
  Index start = 0;
  for (Index size : sizes) {
    const Shape ps{xs.n, size, xs.h, xs.w};
    Buffer out(ps.numel());
    for (Index n = 0; n < xs.n; ++n)
      out.segment(n * size * plane, size * plane) = x.values().segment((n * xs.c + start) * plane, size * plane);
    parts.push_back(make_result(ps, std::move(out), "split_channels", {x}, [start, size, xs](Node& self) {
      auto& gx = self.parents[0]->grad_buffer();
      const Index plane = xs.plane();
      for (Index n = 0; n < xs.n; ++n)
        gx.segment((n * xs.c + start) * plane, size * plane) += self.grad.segment(n * size * plane, size * plane);
    }));
    start += size;
  }
  return parts;
}

std::vector<Tensor> split_channels(const Tensor& x, std::initializer_list<Index> sizes) {
  return split_channels(x, std::span<const Index>(sizes.begin(), sizes.size()));
}

Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) throw Error("concat_channels: nothing to concatenate");
  const Shape& first = parts.front().shape();
  Index channels = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw Error("concat_channels: part " + s.str() + " does not match n/h/w of " + first.str());
    }
    channels += s.c;
  }
  const Shape os{first.n, channels, first.h, first.w};
  const Index plane = first.plane();
  Buffer out(os.numel());
  std::vector<Index> starts;
  Index start = 0;
  for (const auto& p : parts) {
    const Index c = p.shape().c;
    for (Index n = 0; n < os.n; ++n)
      out.segment((n * channels + start) * plane, c * plane) = p.values().segment(n * c * plane, c * plane);
    starts.push_back(start);
    start += c;
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  return make_result(os, std::move(out), "concat_channels", std::move(parents),
                     [starts = std::move(starts), os](Node& self) {
                       const Index plane = os.plane();
                       for (std::size_t i = 0; i < self.parents.size(); ++i) {
                         auto& p = *self.parents[i];
                         if (!p.requires_grad) continue;
                         auto& gp = p.grad_buffer();
                         const Index c = p.shape.c;
                         for (Index n = 0; n < os.n; ++n)
                           gp.segment(n * c * plane, c * plane) +=
                               self.grad.segment((n * os.c + starts[i]) * plane, c * plane);
                       }
                     });
}

Tensor concat_channels(std::initializer_list<Tensor> parts) {
  return concat_channels(std::span<const Tensor>(parts.begin(), parts.size()));
}

Tensor layer_norm_channels(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const Shape& xs = x.shape();
  if (gain.numel() != xs.c || bias.numel() != xs.c) {
    throw Error("layer_norm_channels: affine parameters must have " + std::to_string(xs.c) + " entries");
  }
  const Index plane = xs.plane();
  const Index channels = xs.c;
  Buffer out(xs.numel());
  Buffer normalized(xs.numel());
  Buffer inv_std(xs.n * plane);
  const double* xv = x.values().data();
  const double* gv = gain.values().data();
  const double* bv = bias.values().data();
  for (Index n = 0; n < xs.n; ++n)
    for (Index p = 0; p < plane; ++p) {
      const Index base = n * channels * plane + p;
      double m = 0.0;
      for (Index c = 0; c < channels; ++c) m += xv[base + c * plane];
      m /= static_cast<double>(channels);
      double v = 0.0;
      for (Index c = 0; c < channels; ++c) {
        const double d = xv[base + c * plane] - m;
        v += d * d;
      }
      v /= static_cast<double>(channels);
      const double is = 1.0 / std::sqrt(v + eps);
      inv_std[n * plane + p] = is;
      for (Index c = 0; c < channels; ++c) {
        const double xh = (xv[base + c * plane] - m) * is;
        normalized[base + c * plane] = xh;
        out[base + c * plane] = xh * gv[c] + bv[c];
      }
    }
  return make_result(xs, std::move(out), "layer_norm_channels", {x, gain, bias},
                     [normalized = std::move(normalized), inv_std = std::move(inv_std), xs](Node& self) {
                       auto& px = *self.parents[0];
                       auto& pg = *self.parents[1];
                       auto& pb = *self.parents[2];
                       const Index plane = xs.plane();
                       const Index channels = xs.c;
                       const double* g = self.grad.data();
                       const double* gv = pg.value.data();
                       for (Index n = 0; n < xs.n; ++n)
                         for (Index p = 0; p < plane; ++p) {
                           const Index base = n * channels * plane + p;
                           double sum_d = 0.0;
                           double sum_dx = 0.0;
                           for (Index c = 0; c < channels; ++c) {
                             const Index i = base + c * plane;
                             const double d = g[i] * gv[c];
                             sum_d += d;
                             sum_dx += d * normalized[i];
                             if (pg.requires_grad) pg.grad_buffer()[c] += g[i] * normalized[i];
                             if (pb.requires_grad) pb.grad_buffer()[c] += g[i];
                           }
                           if (!px.requires_grad) continue;
                           auto& gx = px.grad_buffer();
                           const double is = inv_std[n * plane + p];
                           const double inv_c = 1.0 / static_cast<double>(channels);
                           for (Index c = 0; c < channels; ++c) {
                             const Index i = base + c * plane;
                             const double d = g[i] * gv[c];
                             gx[i] += is * (d - inv_c * sum_d - normalized[i] * inv_c * sum_dx);
                           }
                         }
                     });
}

Tensor batch_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, BatchNormStats& stats,
                  bool training) {
  const Shape& xs = x.shape();
  const Index channels = xs.c;
  if (gain.numel() != channels || bias.numel() != channels || stats.running_mean.numel() != channels ||
      stats.running_var.numel() != channels) {
    throw Error("batch_norm: parameters must have " + std::to_string(channels) + " entries");
  }
  const Index plane = xs.plane();
  const Index count = xs.n * plane;
  Buffer mean_c(channels);
  Buffer inv_std(channels);
  const double* xv = x.values().data();
  if (training) {
    if (count < 2) throw Error("batch_norm: training mode needs more than one value per channel");
    auto& rm = stats.running_mean.mutable_values();
    auto& rv = stats.running_var.mutable_values();
    for (Index c = 0; c < channels; ++c) {
      double m = 0.0;
      for (Index n = 0; n < xs.n; ++n) {
        const double* p = xv + (n * channels + c) * plane;
        for (Index i = 0; i < plane; ++i) m += p[i];
      }
      m /= static_cast<double>(count);
      double v = 0.0;
      for (Index n = 0; n < xs.n; ++n) {
        const double* p = xv + (n * channels + c) * plane;
        for (Index i = 0; i < plane; ++i) v += (p[i] - m) * (p[i] - m);
      }
      const double biased = v / static_cast<double>(count);
      mean_c[c] = m;
      inv_std[c] = 1.0 / std::sqrt(biased + stats.eps);
      // Non-finite batch statistics are not folded into the running ones, so a
      // diverging step cannot poison the saved buffers.
      if (std::isfinite(m) && std::isfinite(v)) {
        rm[c] = (1.0 - stats.momentum) * rm[c] + stats.momentum * m;
        rv[c] = (1.0 - stats.momentum) * rv[c] + stats.momentum * v / static_cast<double>(count - 1);
      }
    }
  } else {
    mean_c = stats.running_mean.values();
    inv_std = (stats.running_var.values() + stats.eps).rsqrt();
  }
  Buffer out(xs.numel());
  Buffer normalized(xs.numel());
  const double* gv = gain.values().data();
  const double* bv = bias.values().data();
  for (Index n = 0; n < xs.n; ++n)
    for (Index c = 0; c < channels; ++c) {
      const Index base = (n * channels + c) * plane;
      for (Index i = 0; i < plane; ++i) {
        const double xh = (xv[base + i] - mean_c[c]) * inv_std[c];
        normalized[base + i] = xh;
        out[base + i] = xh * gv[c] + bv[c];
      }
    }
  return make_result(xs, std::move(out), training ? "batch_norm" : "batch_norm_eval", {x, gain, bias},
                     [normalized = std::move(normalized), inv_std, xs, training](Node& self) {
                       auto& px = *self.parents[0];
                       auto& pg = *self.parents[1];
                       auto& pb = *self.parents[2];
                       const Index channels = xs.c;
                       const Index plane = xs.plane();
                       const double count = static_cast<double>(xs.n * plane);
                       const double* g = self.grad.data();
                       for (Index c = 0; c < channels; ++c) {
                         double sum_g = 0.0;
                         double sum_gx = 0.0;
                         for (Index n = 0; n < xs.n; ++n) {
                           const Index base = (n * channels + c) * plane;
                           for (Index i = 0; i < plane; ++i) {
                             sum_g += g[base + i];
                             sum_gx += g[base + i] * normalized[base + i];
                           }
                         }
                         if (pg.requires_grad) pg.grad_buffer()[c] += sum_gx;
                         if (pb.requires_grad) pb.grad_buffer()[c] += sum_g;
                         if (!px.requires_grad) continue;
                         auto& gx = px.grad_buffer();
                         const double k = pg.value[c] * inv_std[c];
                         for (Index n = 0; n < xs.n; ++n) {
                           const Index base = (n * channels + c) * plane;
                           for (Index i = 0; i < plane; ++i) {
                             if (training) {
                               gx[base + i] += k * (g[base + i] - sum_g / count - normalized[base + i] * sum_gx / count);
                             } else {
                               gx[base + i] += k * g[base + i];
                             }
                           }
                         }
                       }
                     });
}

}  // namespace fabme
