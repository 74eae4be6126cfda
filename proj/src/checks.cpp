#include "fabme/checks.hpp"

#include <algorithm>
#include <array>
#include <functional>

#include "fabme/blocks.hpp"

namespace fabme {

namespace {

std::vector<GradTarget> targets_of(const ParamList& params, const Tensor& x) {
  std::vector<GradTarget> out{{"x", x}};
  for (const auto& p : params)
    if (p.kind != ParamKind::Buffer) out.push_back({p.name, p.tensor});
  return out;
}

GradCheckReport check_one(const std::string& block, const Shape& s, Rng& rng, const GradCheckOptions& opts) {
  const Tensor x = Tensor::uniform(s, -1.0, 1.0, rng, true);
  if (block == "conv2d") {
    // Strided, padded, grouped when the channel count allows it.
    const Index groups = s.c % 2 == 0 ? 2 : 1;
    const ConvSpec spec{s.c, 2 * groups, 3, 3, 2, 1, groups, true};
    const Tensor w = Tensor::uniform(spec.weight_shape(), -1, 1, rng, true);
    const Tensor b = Tensor::uniform({1, spec.out_channels, 1, 1}, -1, 1, rng, true);
    const std::vector<GradTarget> t{{"x", x}, {"weight", w}, {"bias", b}};
    return grad_check([&] { return conv2d(x, spec, w, b); }, t, opts);
  }
  if (block == "conv1d") {
    const Tensor k = Tensor::uniform({1, 1, 1, 3}, -1, 1, rng, true);
    const Tensor v = Tensor::uniform({s.n, s.c, 1, 1}, -1, 1, rng, true);
    const std::vector<GradTarget> t{{"x", v}, {"kernel", k}};
    return grad_check([&] { return conv1d(v, k); }, t, opts);
  }
  const std::vector<GradTarget> tx{{"x", x}};
  if (block == "gap") return grad_check([&] { return global_avg_pool(x); }, tx, opts);
  if (block == "gmp") return grad_check([&] { return global_max_pool(x); }, tx, opts);
  if (block == "silu") return grad_check([&] { return silu(x); }, tx, opts);
  if (block == "sigmoid") return grad_check([&] { return sigmoid(x); }, tx, opts);
  if (block == "ss2d") {
    auto params = ScanParams::init(s.c, 2, rng);
    // larger steps than the default init so the recurrence carries real memory
    params.delta_bias.mutable_values().setConstant(0.3);
    const std::vector<GradTarget> t{{"x", x},
                                    {"delta_weight", params.delta_weight},
                                    {"delta_bias", params.delta_bias},
                                    {"b_weight", params.b_weight},
                                    {"c_weight", params.c_weight},
                                    {"a_log", params.a_log},
                                    {"skip", params.skip}};
    return grad_check([&] { return ss2d(x, params); }, t, opts);
  }
  if (block == "vss") {
    VssBlock vss(VssConfig{s.c, 1, 3, 2, {}}, rng);
    ParamList params;
    vss.collect("vss", params);
    return grad_check([&] { return vss.forward(x); }, targets_of(params, x), opts);
  }
  if (block == "emca") {
    Emca e(EmcaConfig{s.c, 3}, rng);
    const std::vector<GradTarget> t{{"x", x}, {"kernel", e.kernel()}};
    return grad_check([&] { return e.forward(x); }, t, opts);
  }
  if (block == "c2f_vmamba") {
    C2fVMamba m(C2fVMambaConfig{s.c, s.c, 2, true, 1, 3, 2, {}}, rng);
    ParamList params;
    m.collect("c2f_vmamba", params);
    return grad_check([&] { return m.forward(x, Mode::Eval); }, targets_of(params, x), opts);
  }
  throw Error("gradcheck: unknown block '" + block + "'");
}

std::array<Shape, 3> shapes_for(const std::string& block) {
  if (block == "c2f_vmamba") return {Shape{1, 6, 3, 3}, Shape{1, 8, 4, 4}, Shape{2, 6, 2, 3}};
  if (block == "vss" || block == "ss2d") return {Shape{1, 4, 3, 3}, Shape{2, 3, 2, 4}, Shape{1, 6, 4, 3}};
  return {Shape{1, 2, 3, 3}, Shape{2, 3, 4, 5}, Shape{1, 6, 5, 2}};
}

}  // namespace

const std::vector<std::string>& gradcheck_block_names() {
  static const std::vector<std::string> names{"conv2d", "conv1d", "gap",  "gmp",  "silu",
                                              "sigmoid", "ss2d",   "vss", "emca", "c2f_vmamba"};
  return names;
}

std::vector<BlockCheck> gradcheck_block(const std::string& block, std::uint64_t seed, const GradCheckOptions& options) {
  const auto& names = gradcheck_block_names();
  if (std::find(names.begin(), names.end(), block) == names.end()) {
    std::string list;
    for (const auto& n : names) list += (list.empty() ? "" : ", ") + n;
    throw Error("gradcheck: unknown block '" + block + "' (expected one of " + list + ")");
  }
  Rng rng(seed);
  std::vector<BlockCheck> out;
  for (const Shape& s : shapes_for(block)) out.push_back({block, s, check_one(block, s, rng, options)});
  return out;
}

}  // namespace fabme
