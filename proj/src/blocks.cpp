#include "fabme/blocks.hpp"

#include <cmath>

namespace fabme {

Index count_params(const ParamList& params) {
  Index total = 0;
  for (const auto& p : params)
    if (p.kind != ParamKind::Buffer) total += p.tensor.numel();
  return total;
}

Tensor kaiming_uniform(Shape shape, Index fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::uniform(shape, -bound, bound, rng, true);
}

Conv::Conv(const ConvSpec& spec, Rng& rng) : spec_(spec) {
  spec_.validate();
  const Shape ws = spec_.weight_shape();
  weight_ = kaiming_uniform(ws, ws.c * ws.h * ws.w, rng);
  if (spec_.bias) bias_ = Tensor::zeros({1, spec_.out_channels, 1, 1}, true);
}

Tensor Conv::forward(const Tensor& x) const {
  if (spec_.bias) return conv2d(x, spec_, weight_, bias_);
  return conv2d(x, spec_, weight_);
}

void Conv::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight_, ParamKind::Weight});
  if (spec_.bias) out.push_back({prefix + ".bias", bias_, ParamKind::NoDecay});
}

ConvUnit::ConvUnit(Index in, Index out, Index kernel, Index stride, Rng& rng)
    : conv_(ConvSpec{in, out, kernel, kernel, stride, kernel / 2, 1, false}, rng),
      gain_(Tensor::full({1, out, 1, 1}, 1.0, true)),
      shift_(Tensor::zeros({1, out, 1, 1}, true)),
      stats_{Tensor::zeros({1, out, 1, 1}), Tensor::full({1, out, 1, 1}, 1.0)} {}

Tensor ConvUnit::forward(const Tensor& x, Mode mode) {
  return silu(batch_norm(conv_.forward(x), gain_, shift_, stats_, mode == Mode::Train));
}

void ConvUnit::collect(const std::string& prefix, ParamList& out) const {
  conv_.collect(prefix + ".conv", out);
  out.push_back({prefix + ".bn.weight", gain_, ParamKind::NoDecay});
  out.push_back({prefix + ".bn.bias", shift_, ParamKind::NoDecay});
  out.push_back({prefix + ".bn.running_mean", stats_.running_mean, ParamKind::Buffer});
  out.push_back({prefix + ".bn.running_var", stats_.running_var, ParamKind::Buffer});
}

Bottleneck::Bottleneck(Index in, Index out, bool shortcut, Rng& rng)
    : cv1_(in, out, 3, 1, rng), cv2_(out, out, 3, 1, rng), residual_(shortcut && in == out) {}

Tensor Bottleneck::forward(const Tensor& x, Mode mode) {
  Tensor y = cv2_.forward(cv1_.forward(x, mode), mode);
  return residual_ ? add(x, y) : y;
}

void Bottleneck::collect(const std::string& prefix, ParamList& out) const {
  cv1_.collect(prefix + ".cv1", out);
  cv2_.collect(prefix + ".cv2", out);
}

C2f::C2f(Index in, Index out, Index n, bool shortcut, Rng& rng) : hidden_(out / 2) {
  if (out % 2 != 0) throw Error("C2f: out_channels must be even");
  if (n < 1) throw Error("C2f: n must be >= 1");
  cv1_ = ConvUnit(in, 2 * hidden_, 1, 1, rng);
  for (Index i = 0; i < n; ++i) blocks_.emplace_back(hidden_, hidden_, shortcut, rng);
  cv2_ = ConvUnit(concat_width(n, hidden_), out, 1, 1, rng);
}

Tensor C2f::forward(const Tensor& x, Mode mode) {
  std::vector<Tensor> parts = split_channels(cv1_.forward(x, mode), {hidden_, hidden_});
  for (auto& block : blocks_) parts.push_back(block.forward(parts.back(), mode));
  return cv2_.forward(concat_channels(std::span<const Tensor>(parts)), mode);
}

void C2f::collect(const std::string& prefix, ParamList& out) const {
  cv1_.collect(prefix + ".cv1", out);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + ".m." + std::to_string(i), out);
  cv2_.collect(prefix + ".cv2", out);
}

Sppf::Sppf(Index in, Index out, Rng& rng, Index pool)
    : cv1_(in, in / 2, 1, 1, rng), cv2_(4 * (in / 2), out, 1, 1, rng), pool_(pool) {
  if (in < 2) throw Error("SPPF: needs at least two input channels");
}

Tensor Sppf::forward(const Tensor& x, Mode mode) {
  const Tensor y0 = cv1_.forward(x, mode);
  const Tensor y1 = max_pool2d(y0, pool_, 1, pool_ / 2);
  const Tensor y2 = max_pool2d(y1, pool_, 1, pool_ / 2);
  const Tensor y3 = max_pool2d(y2, pool_, 1, pool_ / 2);
  return cv2_.forward(concat_channels({y0, y1, y2, y3}), mode);
}

void Sppf::collect(const std::string& prefix, ParamList& out) const {
  cv1_.collect(prefix + ".cv1", out);
  cv2_.collect(prefix + ".cv2", out);
}

void VssConfig::validate() const {
  if (channels < 1) throw Error("VSS: channels must be positive");
  if (expansion < 1) throw Error("VSS: expansion must be >= 1");
  if (dw_kernel < 1 || dw_kernel % 2 == 0) throw Error("VSS: depthwise kernel must be odd");
  if (d_state < 1) throw Error("VSS: d_state must be positive");
}

VssBlock::VssBlock(const VssConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const Index c = cfg_.channels;
  const Index e = cfg_.inner();
  norm_gain_ = Tensor::full({1, c, 1, 1}, 1.0, true);
  norm_bias_ = Tensor::zeros({1, c, 1, 1}, true);
  expand_scan_ = Conv(ConvSpec{c, e, 1, 1, 1, 0, 1, true}, rng);
  depthwise_ = Conv(ConvSpec{e, e, cfg_.dw_kernel, cfg_.dw_kernel, 1, cfg_.dw_kernel / 2, e, true}, rng);
  scan_ = ScanParams::init(e, cfg_.d_state, rng);
  out_norm_gain_ = Tensor::full({1, e, 1, 1}, 1.0, true);
  out_norm_bias_ = Tensor::zeros({1, e, 1, 1}, true);
  expand_gate_ = Conv(ConvSpec{c, e, 1, 1, 1, 0, 1, true}, rng);
  out_proj_ = Conv(ConvSpec{e, c, 1, 1, 1, 0, 1, true}, rng);
}

Tensor VssBlock::forward(const Tensor& x) const {
  if (x.shape().c != cfg_.channels) {
    throw Error("VSS: input channels " + std::to_string(x.shape().c) + " != " + std::to_string(cfg_.channels));
  }
  const Tensor normed = layer_norm_channels(x, norm_gain_, norm_bias_);
  Tensor scanned = silu(depthwise_.forward(expand_scan_.forward(normed)));
  scanned = layer_norm_channels(ss2d(scanned, scan_, cfg_.scan), out_norm_gain_, out_norm_bias_);
  const Tensor gate = silu(expand_gate_.forward(normed));
  return add(x, out_proj_.forward(mul(scanned, gate)));
}

void VssBlock::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".norm.weight", norm_gain_, ParamKind::NoDecay});
  out.push_back({prefix + ".norm.bias", norm_bias_, ParamKind::NoDecay});
  expand_scan_.collect(prefix + ".expand_scan", out);
  depthwise_.collect(prefix + ".dwconv", out);
  out.push_back({prefix + ".ss2d.delta_proj.weight", scan_.delta_weight, ParamKind::Weight});
  out.push_back({prefix + ".ss2d.delta_proj.bias", scan_.delta_bias, ParamKind::NoDecay});
  out.push_back({prefix + ".ss2d.b_proj.weight", scan_.b_weight, ParamKind::Weight});
  out.push_back({prefix + ".ss2d.c_proj.weight", scan_.c_weight, ParamKind::Weight});
  out.push_back({prefix + ".ss2d.a_log", scan_.a_log, ParamKind::NoDecay});
  out.push_back({prefix + ".ss2d.skip", scan_.skip, ParamKind::NoDecay});
  out.push_back({prefix + ".out_norm.weight", out_norm_gain_, ParamKind::NoDecay});
  out.push_back({prefix + ".out_norm.bias", out_norm_bias_, ParamKind::NoDecay});
  expand_gate_.collect(prefix + ".expand_gate", out);
  out_proj_.collect(prefix + ".out_proj", out);
}

Tensor vss_block(const Tensor& x, const VssBlock& block) { return block.forward(x); }

Index C2fVMambaConfig::concat_width() const {
  const Index h = hidden();
  return strict_paper_concat ? (n + 3) * h : (n + 2) * h;
}

void C2fVMambaConfig::validate() const {
  if (in_channels < 1) throw Error("C2f-VMamba: in_channels must be positive");
  if (out_channels < 2 || out_channels % 2 != 0) {
    throw Error("C2f-VMamba: out_channels " + std::to_string(out_channels) + " must be even");
  }
  if (n < 1) throw Error("C2f-VMamba: n must be >= 1");
}

C2fVMamba::C2fVMamba(const C2fVMambaConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const Index h = cfg_.hidden();
  cv1_ = ConvUnit(cfg_.in_channels, 2 * h, 1, 1, rng);
  const VssConfig vss{h, cfg_.expansion, cfg_.dw_kernel, cfg_.d_state, cfg_.scan};
  for (Index i = 0; i < cfg_.n; ++i) blocks_.emplace_back(vss, rng);
  cv2_ = ConvUnit(cfg_.concat_width(), cfg_.out_channels, 1, 1, rng);
}

Tensor C2fVMamba::forward(const Tensor& x, Mode mode) {
  if (x.shape().c != cfg_.in_channels) {
    throw Error("C2f-VMamba: input channels " + std::to_string(x.shape().c) + " != " +
                std::to_string(cfg_.in_channels));
  }
  const Index h = cfg_.hidden();
  const Tensor projected = cv1_.forward(x, mode);
  const auto halves = split_channels(projected, {h, h});
  std::vector<Tensor> parts{halves[0], cfg_.strict_paper_concat ? projected : halves[1]};
  Tensor y = halves[1];
  for (const auto& block : blocks_) {
    y = block.forward(y);
    parts.push_back(y);
  }
  return cv2_.forward(concat_channels(std::span<const Tensor>(parts)), mode);
}

void C2fVMamba::collect(const std::string& prefix, ParamList& out) const {
  cv1_.collect(prefix + ".cv1", out);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + ".vss." + std::to_string(i), out);
  cv2_.collect(prefix + ".cv2", out);
}

Index adaptive_kernel_size(Index channels) {
  if (channels < 1) throw Error("EMCA: channels must be positive");
  const double t = std::abs((std::log2(static_cast<double>(channels)) + 1.0) / 2.0);
  Index k = static_cast<Index>(t);
  if (k % 2 == 0) ++k;
  return std::max<Index>(k, 3);
}

Index EmcaConfig::kernel_size() const { return k == 0 ? adaptive_kernel_size(channels) : k; }

void EmcaConfig::validate() const {
  if (channels < 1) throw Error("EMCA: channels must be positive");
  const Index ks = kernel_size();
  if (ks < 3 || ks % 2 == 0) throw Error("EMCA: kernel size " + std::to_string(ks) + " must be odd and >= 3");
}

Tensor emca_weights(const Tensor& x, const Tensor& kernel) {
  return sigmoid(conv1d(add(global_avg_pool(x), global_max_pool(x)), kernel));
}

Tensor emca(const Tensor& x, const Tensor& kernel) { return mul(x, emca_weights(x, kernel)); }

Emca::Emca(const EmcaConfig& cfg, Rng& rng) {
  cfg.validate();
  const Index k = cfg.kernel_size();
  kernel_ = kaiming_uniform({1, 1, 1, k}, k, rng);
}

void Emca::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".conv1d.weight", kernel_, ParamKind::Weight});
}

}  // namespace fabme
