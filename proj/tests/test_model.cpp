#include <cmath>
#include <limits>

#include "doctest.h"
#include "fabme/model.hpp"

using namespace fabme;

namespace {

GraphSpec nano(std::string_view variant, Index classes = 4) {
  GraphSpec s = GraphSpec::preset(variant, "nano-test");
  s.num_classes = classes;
  return s;
}

}  // namespace

TEST_CASE("presets") {
  const auto fab = GraphSpec::preset("fabme");
  CHECK(fab.emca_enabled);
  CHECK(fab.vmamba_position == NeckSlot::C2F3);
  const auto base = GraphSpec::preset("baseline");
  CHECK_FALSE(base.emca_enabled);
  CHECK(base.vmamba_position == NeckSlot::None);
  CHECK(GraphSpec::preset("c2f2").vmamba_position == NeckSlot::C2F2);
  CHECK_FALSE(GraphSpec::preset("c2f2").emca_enabled);
  CHECK(GraphSpec::preset("emca-only").emca_enabled);
  CHECK_THROWS_AS(GraphSpec::preset("c2f5"), Error);
  CHECK_THROWS_AS(GraphSpec::preset("fabme", "xl"), Error);
  CHECK_THROWS_AS(parse_neck_slot("C2F7"), Error);

  CHECK(fab.widths() == std::array<Index, 5>{32, 64, 128, 256, 512});
  CHECK(fab.backbone_depths() == std::array<Index, 4>{1, 2, 2, 1});
  const auto n = GraphSpec::preset("fabme", "nano-test");
  CHECK(n.widths() == std::array<Index, 5>{8, 16, 32, 64, 128});
  CHECK(n.backbone_depths() == std::array<Index, 4>{1, 1, 1, 1});
  CHECK(n.neck_depth() == 1);
}

TEST_CASE("graph spec text round trip and errors") {
  GraphSpec s = parse_graph_spec("variant = c2f4\nscale=nano-test\n# comment\nnum_classes=4\nd_state=8 # inline\n");
  CHECK(s.vmamba_position == NeckSlot::C2F4);
  CHECK(s.scale == "nano-test");
  CHECK(s.num_classes == 4);
  CHECK(s.d_state == 8);
  const GraphSpec again = parse_graph_spec(format_graph_spec(s));
  CHECK(format_graph_spec(again) == format_graph_spec(s));
  CHECK_THROWS_WITH_AS(parse_graph_spec("num_classes=4\nbogus=1\n"), doctest::Contains("line 2"), Error);
  CHECK_THROWS_AS(parse_graph_spec("vmamba_position=C2F9\n"), Error);
  CHECK_THROWS_AS(parse_graph_spec("d_state=x\n"), Error);
  CHECK_THROWS_AS(parse_graph_spec("num_classes=4\nvariant=fabme\n"), Error);
}

TEST_CASE("baseline graph has no vss or emca blocks") {
  Model base(nano("baseline"));
  CHECK(base.vss_block_count() == 0);
  CHECK(base.emca_block_count() == 0);
  Model fab(nano("fabme"));
  CHECK(fab.vss_block_count() == 1);
  CHECK(fab.emca_block_count() == 1);
}

TEST_CASE("nano forward produces three head maps") {
  Model model(nano("fabme"));
  Rng rng(1);
  const Tensor images = Tensor::uniform({1, 3, 64, 64}, 0.0, 1.0, rng);
  const auto out = model.forward(images, Mode::Eval);
  REQUIRE(out.maps.size() == 3);
  CHECK(out.maps[0].shape() == Shape{1, 9, 8, 8});
  CHECK(out.maps[1].shape() == Shape{1, 9, 4, 4});
  CHECK(out.maps[2].shape() == Shape{1, 9, 2, 2});
  CHECK(out.strides == std::vector<Index>{8, 16, 32});

  const auto wide = model.forward(Tensor::uniform({2, 3, 96, 64}, 0.0, 1.0, rng), Mode::Train);
  CHECK(wide.maps[2].shape() == Shape{2, 9, 3, 2});
  CHECK_THROWS_AS(model.forward(Tensor::zeros({1, 3, 48, 64}), Mode::Eval), Error);
}

TEST_CASE("backbone stages widen and shrink") {
  Model model(nano("fabme"));
  Rng rng(2);
  const auto bb = model.backbone(Tensor::uniform({1, 3, 64, 64}, 0.0, 1.0, rng), Mode::Eval);
  for (std::size_t i = 1; i < 4; ++i) {
    CHECK(bb.stages[i].shape().c > bb.stages[i - 1].shape().c);
    CHECK(bb.stages[i].shape().h < bb.stages[i - 1].shape().h);
  }
}

TEST_CASE("parameter counts at scale s") {
  const Index baseline = Model(GraphSpec::preset("baseline")).count_params();
  const Index fab = Model(GraphSpec::preset("fabme")).count_params();
  MESSAGE("baseline " << baseline << " fabme " << fab);
  CHECK(std::abs(static_cast<double>(baseline) - 11.10e6) <= 0.15 * 11.10e6);
  CHECK(fab <= baseline);

  const Index emca_only = Model(GraphSpec::preset("emca-only")).count_params();
  CHECK(emca_only - baseline == adaptive_kernel_size(512));
  CHECK(emca_only - baseline == 5);
}

TEST_CASE("toggle isolation") {
  GraphSpec a = nano("baseline");
  GraphSpec b = a;
  b.vmamba_position = NeckSlot::C2F3;
  const auto pa = Model(a).parameters();
  const auto pb = Model(b).parameters();
  auto names_outside = [](const ParamList& ps) {
    std::vector<std::pair<std::string, Shape>> out;
    for (const auto& p : ps)
      if (p.name.rfind("neck.C2F3.", 0) != 0) out.emplace_back(p.name, p.tensor.shape());
    return out;
  };
  CHECK(names_outside(pa) == names_outside(pb));
}

TEST_CASE("single pointwise conv parameter count") {
  Rng rng(3);
  Conv conv(ConvSpec{4, 8, 1, 1, 1, 0, 1, true}, rng);
  ParamList ps;
  conv.collect("c", ps);
  CHECK(count_params(ps) == 40);
}

TEST_CASE("state round trip through a checkpoint") {
  GraphSpec s = nano("fabme");
  Model a(s);
  s.seed = 99;
  Model b(s);
  const auto path = std::filesystem::temp_directory_path() / "fabme_model_test.ckpt";
  a.save(path);
  b.load(path);
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK((pa[i].tensor.values() == pb[i].tensor.values()).all());
  Model other(nano("baseline"));
  CHECK_THROWS_AS(other.load(path), Error);
  std::filesystem::remove(path);
}

TEST_CASE("decode examples") {
  const double inf = std::numeric_limits<double>::infinity();
  auto blank = [&](double obj) {
    HeadOutputs h;
    h.strides = {8, 16, 32};
    for (Index size : {8, 4, 2}) {
      Buffer v = Buffer::Zero(9 * size * size);
      v.segment(4 * size * size, size * size).setConstant(obj);
      h.maps.push_back(Tensor({1, 9, size, size}, v, false));
    }
    return h;
  };
  CHECK(decode(blank(-inf))[0].empty());

  HeadOutputs one = blank(-inf);
  Buffer v = one.maps[0].values();
  const Index plane = 64;
  const Index cell = 3 * 8 + 5;
  v[4 * plane + cell] = 20.0;
  for (Index k = 0; k < 4; ++k) v[(5 + k) * plane + cell] = -5.0;
  v[(5 + 3) * plane + cell] = 6.0;
  one.maps[0] = Tensor(one.maps[0].shape(), v, false);
  const auto dets = decode(one)[0];
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].class_id == 4);
  const Box expected = decode_box(0, 0, 0, 0, 3, 5, 8);
  CHECK(dets[0].box.x1 == expected.x1);
  CHECK(expected.x2 - expected.x1 == doctest::Approx(8.0));
  CHECK((expected.x1 + expected.x2) / 2 == doctest::Approx(5.5 * 8));

  Buffer nan_v = one.maps[1].values();
  nan_v[0] = std::numeric_limits<double>::quiet_NaN();
  one.maps[1] = Tensor(one.maps[1].shape(), nan_v, false);
  CHECK_THROWS_AS(decode(one), Error);
}

TEST_CASE("nms examples") {
  const Box b{0, 0, 10, 10};
  auto kept = nms({{0, 1, b, 0.8}, {0, 1, b, 0.9}}, 0.5, 300);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].confidence == 0.9);
  CHECK(nms({{0, 1, b, 0.8}, {0, 2, b, 0.9}}, 0.5, 300).size() == 2);
  CHECK(nms({{0, 1, b, 0.8}, {0, 1, {20, 20, 30, 30}, 0.9}}, 0.5, 1).size() == 1);
}
