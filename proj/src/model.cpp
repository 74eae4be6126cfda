#include "fabme/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "fabme/grad_check.hpp"
#include "key_value.hpp"

namespace fabme {

namespace {

constexpr std::array<Index, 5> kBaseWidths{64, 128, 256, 512, 1024};
constexpr std::array<Index, 4> kBaseDepths{3, 6, 6, 3};
constexpr Index kBaseNeckDepth = 3;

Index make_divisible(double value, Index divisor) {
  return std::max(divisor, static_cast<Index>(std::ceil(value / static_cast<double>(divisor))) * divisor);
}

Index scaled_depth(Index base, double mult) {
  return std::max<Index>(1, static_cast<Index>(std::llround(static_cast<double>(base) * mult)));
}

void check_finite(const Tensor& t, const std::string& path) {
  if (t.values().allFinite()) return;
  std::string op = first_non_finite_op(t);
  throw NonFiniteError("non-finite values at " + path + (op.empty() ? "" : " (op " + op + ")"));
}

bool parse_bool(const std::string& v, const std::string& key) { return kv::parse_bool(v, key, "graph spec"); }

template <typename T>
T parse_number(const std::string& v, const std::string& key) {
  return kv::parse_number<T>(v, key, "graph spec");
}

double sigmoid_of(double v) { return 1.0 / (1.0 + std::exp(-v)); }

Tensor neck_forward(NeckBlock& block, const Tensor& x, Mode mode) {
  return std::visit([&](auto& b) { return b.forward(x, mode); }, block);
}

}  // namespace

std::string variant_name(const GraphSpec& spec) {
  if (spec.vmamba_position == NeckSlot::None) return spec.emca_enabled ? "emca-only" : "baseline";
  if (spec.emca_enabled) return spec.vmamba_position == NeckSlot::C2F3 ? "fabme" : "custom";
  std::string name = to_string(spec.vmamba_position);
  std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return std::tolower(c); });
  return name;
}

std::string to_string(NeckSlot slot) {
  switch (slot) {
    case NeckSlot::None: return "none";
    case NeckSlot::C2F1: return "C2F1";
    case NeckSlot::C2F2: return "C2F2";
    case NeckSlot::C2F3: return "C2F3";
    case NeckSlot::C2F4: return "C2F4";
  }
  return "none";
}

NeckSlot parse_neck_slot(std::string_view text) {
  std::string t(text);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::toupper(c); });
  if (t == "NONE") return NeckSlot::None;
  if (t == "C2F1") return NeckSlot::C2F1;
  if (t == "C2F2") return NeckSlot::C2F2;
  if (t == "C2F3") return NeckSlot::C2F3;
  if (t == "C2F4") return NeckSlot::C2F4;
  throw Error("invalid vmamba_position '" + std::string(text) + "' (none, C2F1..C2F4)");
}

std::array<Index, 5> GraphSpec::widths() const {
  std::array<Index, 5> out{};
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = make_divisible(static_cast<double>(std::min(kBaseWidths[i], max_channels)) * width_mult, 8);
  }
  return out;
}

std::array<Index, 4> GraphSpec::backbone_depths() const {
  std::array<Index, 4> out{};
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scaled_depth(kBaseDepths[i], depth_mult);
  return out;
}

Index GraphSpec::neck_depth() const { return scaled_depth(kBaseNeckDepth, depth_mult); }

void GraphSpec::validate() const {
  if (!(width_mult > 0) || !(depth_mult > 0)) throw Error("graph spec: width_mult and depth_mult must be positive");
  if (max_channels < 8) throw Error("graph spec: max_channels must be >= 8");
  if (num_classes < 1 || num_classes > 100) throw Error("graph spec: num_classes must be in 1..100");
  if (input_size < 32 || input_size % 32 != 0) throw Error("graph spec: input_size must be a positive multiple of 32");
  if (in_channels < 1) throw Error("graph spec: in_channels must be positive");
  if (vss_expansion < 1 || d_state < 1) throw Error("graph spec: vss_expansion and d_state must be positive");
  if (dw_kernel < 1 || dw_kernel % 2 == 0) throw Error("graph spec: dw_kernel must be odd");
  if (scan.directions != 1 && scan.directions != 2 && scan.directions != 4) {
    throw Error("graph spec: scan_directions must be 1, 2 or 4");
  }
  if (emca_kernel != 0 && (emca_kernel < 3 || emca_kernel % 2 == 0)) {
    throw Error("graph spec: emca_kernel must be 0 (adaptive) or odd >= 3");
  }
}

GraphSpec GraphSpec::preset(std::string_view variant, std::string_view scale) {
  GraphSpec s;
  if (scale == "s") {
    s.scale = "s";
  } else if (scale == "nano-test" || scale == "nano") {
    s.scale = "nano-test";
    s.width_mult = 0.125;
    s.depth_mult = 0.1;
    s.input_size = 64;
  } else {
    throw Error("unknown scale '" + std::string(scale) + "' (s, nano-test)");
  }
  if (variant == "fabme") {
    s.emca_enabled = true;
    s.vmamba_position = NeckSlot::C2F3;
  } else if (variant == "baseline") {
    s.emca_enabled = false;
    s.vmamba_position = NeckSlot::None;
  } else if (variant == "emca-only") {
    s.emca_enabled = true;
    s.vmamba_position = NeckSlot::None;
  } else if (variant.size() == 4 && variant.substr(0, 3) == "c2f") {
    s.emca_enabled = false;
    s.vmamba_position = parse_neck_slot(variant);
    if (s.vmamba_position == NeckSlot::None) throw Error("unknown variant '" + std::string(variant) + "'");
  } else {
    throw Error("unknown variant '" + std::string(variant) + "' (baseline, fabme, c2f1..c2f4, emca-only)");
  }
  return s;
}

GraphSpec parse_graph_spec(std::string_view text, GraphSpec base) {
  GraphSpec s = std::move(base);
  std::string variant = variant_name(s);
  std::string scale = s.scale;
  bool other_seen = false;
  kv::for_each(text, "graph spec", [&](const std::string& key, const std::string& value, int) {
    if (key == "variant" || key == "scale") {
      if (other_seen) throw Error("graph spec: " + key + " must precede other keys");
      (key == "variant" ? variant : scale) = value;
      const std::uint64_t seed = s.seed;
      s = GraphSpec::preset(variant, scale);
      s.seed = seed;
      return;
    }
    other_seen = true;
    if (key == "width_mult") s.width_mult = parse_number<double>(value, key);
    else if (key == "depth_mult") s.depth_mult = parse_number<double>(value, key);
    else if (key == "max_channels") s.max_channels = parse_number<Index>(value, key);
    else if (key == "emca_enabled") s.emca_enabled = parse_bool(value, key);
    else if (key == "vmamba_position") s.vmamba_position = parse_neck_slot(value);
    else if (key == "num_classes") s.num_classes = parse_number<Index>(value, key);
    else if (key == "input_size") s.input_size = parse_number<Index>(value, key);
    else if (key == "in_channels") s.in_channels = parse_number<Index>(value, key);
    else if (key == "strict_paper_concat") s.strict_paper_concat = parse_bool(value, key);
    else if (key == "vss_expansion") s.vss_expansion = parse_number<Index>(value, key);
    else if (key == "d_state") s.d_state = parse_number<Index>(value, key);
    else if (key == "dw_kernel") s.dw_kernel = parse_number<Index>(value, key);
    else if (key == "scan_directions") s.scan.directions = parse_number<int>(value, key);
    else if (key == "scan_merge") {
      if (value == "sum") s.scan.merge = ScanMerge::Sum;
      else if (value == "mean") s.scan.merge = ScanMerge::Mean;
      else throw Error("graph spec: scan_merge expects sum or mean");
    } else if (key == "emca_kernel") s.emca_kernel = parse_number<Index>(value, key);
    else if (key == "seed") s.seed = parse_number<std::uint64_t>(value, key);
    else throw Error("graph spec: unknown key '" + key + "'");
  });
  s.validate();
  return s;
}

GraphSpec load_graph_spec(const std::filesystem::path& path, GraphSpec base) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open graph spec " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_graph_spec(buffer.str(), std::move(base));
}

std::string format_graph_spec(const GraphSpec& s) {
  std::ostringstream out;
  out.precision(17);
  out << "scale=" << s.scale << '\n'
      << "width_mult=" << s.width_mult << '\n'
      << "depth_mult=" << s.depth_mult << '\n'
      << "max_channels=" << s.max_channels << '\n'
      << "emca_enabled=" << (s.emca_enabled ? "true" : "false") << '\n'
      << "vmamba_position=" << to_string(s.vmamba_position) << '\n'
      << "num_classes=" << s.num_classes << '\n'
      << "input_size=" << s.input_size << '\n'
      << "in_channels=" << s.in_channels << '\n'
      << "strict_paper_concat=" << (s.strict_paper_concat ? "true" : "false") << '\n'
      << "vss_expansion=" << s.vss_expansion << '\n'
      << "d_state=" << s.d_state << '\n'
      << "dw_kernel=" << s.dw_kernel << '\n'
      << "scan_directions=" << s.scan.directions << '\n'
      << "scan_merge=" << (s.scan.merge == ScanMerge::Sum ? "sum" : "mean") << '\n'
      << "emca_kernel=" << s.emca_kernel << '\n'
      << "seed=" << s.seed << '\n';
  return out.str();
}

DetectHead::DetectHead(Index in, Index box_width, Index cls_width, Index num_classes, Rng& rng)
    : box1_(in, box_width, 3, 1, rng),
      box2_(box_width, box_width, 3, 1, rng),
      box_out_(ConvSpec{box_width, 4, 1, 1, 1, 0, 1, true}, rng),
      cls1_(in, cls_width, 3, 1, rng),
      cls2_(cls_width, cls_width, 3, 1, rng),
      cls_out_(ConvSpec{cls_width, 1 + num_classes, 1, 1, 1, 0, 1, true}, rng) {
  // Start with low objectness and class scores so early training is not
  // swamped by background cells.
  auto& b = cls_out_.bias().mutable_values();
  b[0] = -4.0;
  b.tail(num_classes).setConstant(-2.0);
}

Tensor DetectHead::forward(const Tensor& x, Mode mode) {
  const Tensor box = box_out_.forward(box2_.forward(box1_.forward(x, mode), mode));
  const Tensor cls = cls_out_.forward(cls2_.forward(cls1_.forward(x, mode), mode));
  return concat_channels({box, cls});
}

void DetectHead::collect(const std::string& prefix, ParamList& out) const {
  box1_.collect(prefix + ".box.0", out);
  box2_.collect(prefix + ".box.1", out);
  box_out_.collect(prefix + ".box.2", out);
  cls1_.collect(prefix + ".cls.0", out);
  cls2_.collect(prefix + ".cls.1", out);
  cls_out_.collect(prefix + ".cls.2", out);
}

Model::Model(const GraphSpec& spec) : spec_(spec) {
  spec_.validate();
  Rng rng(spec_.seed);
  const auto w = spec_.widths();
  const auto depths = spec_.backbone_depths();
  stem_ = ConvUnit(spec_.in_channels, w[0], 3, 2, rng);
  for (std::size_t i = 0; i < 4; ++i) {
    down_[i] = ConvUnit(w[i], w[i + 1], 3, 2, rng);
    stage_[i] = C2f(w[i + 1], w[i + 1], depths[i], true, rng);
  }
  sppf_ = Sppf(w[4], w[4], rng);
  if (spec_.emca_enabled) emca_ = Emca(EmcaConfig{w[4], spec_.emca_kernel}, rng);

  const std::array<std::pair<Index, Index>, 4> neck_io{
      std::pair{w[4] + w[3], w[3]}, {w[3] + w[2], w[2]}, {w[2] + w[3], w[3]}, {w[3] + w[4], w[4]}};
  const Index n = spec_.neck_depth();
  for (std::size_t i = 0; i < 4; ++i) {
    const auto [in, out] = neck_io[i];
    if (static_cast<std::size_t>(spec_.vmamba_position) == i + 1) {
      neck_[i] = C2fVMamba(C2fVMambaConfig{in, out, n, spec_.strict_paper_concat, spec_.vss_expansion,
                                           spec_.dw_kernel, spec_.d_state, spec_.scan},
                           rng);
    } else {
      neck_[i] = C2f(in, out, n, false, rng);
    }
    if (i == 1) neck_down3_ = ConvUnit(w[2], w[2], 3, 2, rng);
    if (i == 2) neck_down4_ = ConvUnit(w[3], w[3], 3, 2, rng);
  }

  const Index box_width = std::max({Index{16}, w[2] / 4, 2 * w[0]});
  const Index cls_width = std::max(w[2], std::min<Index>(spec_.num_classes, 100));
  const std::array<Index, 3> head_in{w[2], w[3], w[4]};
  for (std::size_t i = 0; i < 3; ++i) heads_[i] = DetectHead(head_in[i], box_width, cls_width, spec_.num_classes, rng);
}

BackboneOutputs Model::backbone(const Tensor& images, Mode mode) {
  const Shape& s = images.shape();
  if (s.c != spec_.in_channels) {
    throw Error("model: expected " + std::to_string(spec_.in_channels) + " input channels, got " + std::to_string(s.c));
  }
  if (s.h % 32 != 0 || s.w % 32 != 0 || s.h == 0 || s.w == 0) {
    throw Error("model: input extent " + std::to_string(s.h) + "x" + std::to_string(s.w) + " must be divisible by 32");
  }
  BackboneOutputs out;
  Tensor x = stem_.forward(images, mode);
  check_finite(x, "backbone.stem");
  for (std::size_t i = 0; i < 4; ++i) {
    x = stage_[i].forward(down_[i].forward(x, mode), mode);
    check_finite(x, "backbone.stage" + std::to_string(i + 1));
    out.stages[i] = x;
  }
  x = sppf_.forward(x, mode);
  check_finite(x, "backbone.sppf");
  if (spec_.emca_enabled) {
    x = emca_.forward(x);
    check_finite(x, "backbone.emca");
  }
  out.stages[3] = x;
  return out;
}

HeadOutputs Model::forward(const Tensor& images, Mode mode) {
  const BackboneOutputs bb = backbone(images, mode);
  const auto& [c1, c2, c3, c4] = bb.stages;
  (void)c1;
  auto neck = [&](std::size_t i, const Tensor& x) {
    Tensor y = neck_forward(neck_[i], x, mode);
    check_finite(y, "neck.C2F" + std::to_string(i + 1));
    return y;
  };
  const Tensor n1 = neck(0, concat_channels({upsample_nearest2x(c4), c3}));
  const Tensor p3 = neck(1, concat_channels({upsample_nearest2x(n1), c2}));
  const Tensor p4 = neck(2, concat_channels({neck_down3_.forward(p3, mode), n1}));
  const Tensor p5 = neck(3, concat_channels({neck_down4_.forward(p4, mode), c4}));

  HeadOutputs out;
  out.strides = {8, 16, 32};
  const std::array<Tensor, 3> levels{p3, p4, p5};
  for (std::size_t i = 0; i < 3; ++i) {
    out.maps.push_back(heads_[i].forward(levels[i], mode));
    check_finite(out.maps.back(), "head.P" + std::to_string(i + 3));
  }
  return out;
}

ParamList Model::parameters() const {
  ParamList out;
  stem_.collect("backbone.stem", out);
  for (std::size_t i = 0; i < 4; ++i) {
    down_[i].collect("backbone.down" + std::to_string(i + 1), out);
    stage_[i].collect("backbone.stage" + std::to_string(i + 1), out);
  }
  sppf_.collect("backbone.sppf", out);
  if (spec_.emca_enabled) emca_.collect("backbone.emca", out);
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string prefix = "neck.C2F" + std::to_string(i + 1);
    std::visit([&](const auto& b) { b.collect(prefix, out); }, neck_[i]);
    if (i == 1) neck_down3_.collect("neck.down3", out);
    if (i == 2) neck_down4_.collect("neck.down4", out);
  }
  for (std::size_t i = 0; i < 3; ++i) heads_[i].collect("head.P" + std::to_string(i + 3), out);
  return out;
}

Index Model::count_params() const { return fabme::count_params(parameters()); }

Index Model::vss_block_count() const {
  Index total = 0;
  for (const auto& block : neck_)
    if (const auto* v = std::get_if<C2fVMamba>(&block)) total += v->config().n;
  return total;
}

std::vector<NamedTensor> Model::state() const {
  std::vector<NamedTensor> out;
  for (const auto& p : parameters()) out.push_back({p.name, p.tensor.detach()});
  return out;
}

void Model::load_state(const std::vector<NamedTensor>& state) {
  std::map<std::string, const Tensor*> saved;
  for (const auto& s : state) saved[s.name] = &s.tensor;
  for (auto& p : parameters()) {
    const auto it = saved.find(p.name);
    if (it == saved.end()) throw Error("checkpoint is missing " + p.name);
    if (it->second->shape() != p.tensor.shape()) {
      throw Error("checkpoint shape mismatch for " + p.name + ": " + it->second->shape().str() + " vs " +
                  p.tensor.shape().str());
    }
    p.tensor.mutable_values() = it->second->values();
  }
}

void Model::save(const std::filesystem::path& path) const { save_checkpoint(path, state()); }

void Model::load(const std::filesystem::path& path) { load_state(load_checkpoint(path)); }

Index count_params(const Model& model) { return model.count_params(); }

Box decode_box(double tx, double ty, double tw, double th, Index row, Index col, Index stride) {
  const double s = static_cast<double>(stride);
  const double cx = (static_cast<double>(col) + 2.0 * sigmoid_of(tx) - 0.5) * s;
  const double cy = (static_cast<double>(row) + 2.0 * sigmoid_of(ty) - 0.5) * s;
  const double sw = sigmoid_of(tw);
  const double sh = sigmoid_of(th);
  const double w = 4.0 * s * sw * sw;
  const double h = 4.0 * s * sh * sh;
  return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold, Index max_detections) {
  std::stable_sort(detections.begin(), detections.end(),
                   [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
  std::vector<Detection> kept;
  for (const auto& d : detections) {
    if (static_cast<Index>(kept.size()) >= max_detections) break;
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.class_id == d.class_id && k.image == d.image && iou(k.box, d.box) > iou_threshold;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

std::vector<std::vector<Detection>> decode(const HeadOutputs& heads, const DecodeOptions& options) {
  if (heads.maps.empty() || heads.maps.size() != heads.strides.size()) throw Error("decode: malformed head outputs");
  const Index batch = heads.maps.front().shape().n;
  std::vector<std::vector<Detection>> out(static_cast<std::size_t>(batch));
  for (std::size_t level = 0; level < heads.maps.size(); ++level) {
    const Tensor& map = heads.maps[level];
    const Shape& s = map.shape();
    const Index classes = s.c - 5;
    if (classes < 1 || s.n != batch) throw Error("decode: malformed head outputs");
    const auto& v = map.values();
    if (v.isNaN().any()) throw NonFiniteError("decode: NaN in head output level " + std::to_string(level));
    const Index plane = s.plane();
    for (Index n = 0; n < batch; ++n) {
      const double* base = v.data() + n * s.c * plane;
      for (Index i = 0; i < s.h; ++i) {
        for (Index j = 0; j < s.w; ++j) {
          const Index cell = i * s.w + j;
          const double obj = sigmoid_of(base[4 * plane + cell]);
          if (obj < options.conf_threshold) continue;
          Index best = 0;
          for (Index k = 1; k < classes; ++k)
            if (base[(5 + k) * plane + cell] > base[(5 + best) * plane + cell]) best = k;
          const double conf = obj * sigmoid_of(base[(5 + best) * plane + cell]);
          if (conf < options.conf_threshold) continue;
          const Box box = decode_box(base[cell], base[plane + cell], base[2 * plane + cell], base[3 * plane + cell], i,
                                     j, heads.strides[level]);
          if (!box.valid()) continue;
          out[static_cast<std::size_t>(n)].push_back({n, static_cast<int>(best + 1), box, conf});
        }
      }
    }
  }
  for (auto& dets : out) dets = nms(std::move(dets), options.iou_threshold, options.max_detections);
  return out;
}

}  // namespace fabme
