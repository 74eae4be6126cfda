#include <cmath>
#include <sstream>

#include "doctest.h"
#include "fabme/metrics.hpp"
#include "oracles/map_oracle.hpp"
#include "oracles/random_scenes.hpp"

using namespace fabme;

TEST_CASE("iou examples") {
  const Box a{0, 0, 2, 2};
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, Box{5, 5, 6, 6}) == 0.0);
  CHECK(iou(a, Box{2, 0, 3, 2}) == 0.0);
  CHECK(std::abs(iou(a, Box{1, 0, 3, 2}) - 1.0 / 3.0) < 1e-15);
  CHECK_THROWS_AS(iou(a, Box{1, 1, 1, 2}), Error);
  CHECK_THROWS_AS(iou(Box{0, 0, -1, 1}, a), Error);
}

TEST_CASE("hand-traced precision-recall fixture") {
  const std::vector<GroundTruth> gts{{0, 1, {0, 0, 10, 10}}, {0, 1, {20, 20, 30, 30}}};
  const std::vector<Detection> dets{
      {0, 1, {0, 0, 10, 10}, 0.9}, {0, 1, {50, 50, 60, 60}, 0.8}, {0, 1, {20, 20, 30, 30}, 0.7}};
  const auto r = match_and_ap(dets, gts, 1);
  CHECK(r.recall == std::vector<double>{0.5, 0.5, 1.0});
  CHECK(r.precision[0] == 1.0);
  CHECK(r.precision[1] == 0.5);
  CHECK(std::abs(r.precision[2] - 2.0 / 3.0) < 1e-15);
  CHECK(std::abs(r.ap - 5.0 / 6.0) < 1e-12);
  CHECK(std::abs(oracle::class_ap(dets, gts, 1) - 5.0 / 6.0) < 1e-12);
}

TEST_CASE("perfect, empty and two-class cases") {
  const std::vector<GroundTruth> gts{{0, 1, {0, 0, 4, 4}}, {1, 2, {1, 1, 5, 5}}};
  std::vector<Detection> perfect;
  for (const auto& g : gts) perfect.push_back({g.image, g.class_id, g.box, 1.0});
  CHECK(map50(perfect, gts).map50 == 1.0);
  CHECK(match_and_ap({}, gts, 1).ap == 0.0);

  const std::vector<Detection> half{{0, 1, {0, 0, 4, 4}, 0.7}};
  const auto report = map50(half, gts);
  CHECK(report.classes.size() == 2);
  CHECK(report.map50 == 0.5);
  CHECK(report.fn == 1);

  CHECK_THROWS_AS(map50(perfect, std::vector<GroundTruth>{}), Error);
  CHECK_THROWS_AS(map50(perfect, std::vector<GroundTruth>{{0, 21, {0, 0, 1, 1}}}), Error);
}

TEST_CASE("duplicates of one ground truth give one true positive") {
  const std::vector<GroundTruth> gts{{0, 3, {0, 0, 10, 10}}};
  const std::vector<Detection> dets{
      {0, 3, {0, 0, 10, 10}, 0.5}, {0, 3, {0, 0, 10, 10}, 0.9}, {0, 3, {1, 0, 10, 10}, 0.7}};
  const auto r = match_and_ap(dets, gts, 3);
  CHECK(r.n_tp == 1);
  CHECK(r.n_fp == 2);
  CHECK(r.ap == 1.0);
}

TEST_CASE("detections only match ground truth in their own image") {
  const std::vector<GroundTruth> gts{{0, 1, {0, 0, 10, 10}}};
  const std::vector<Detection> dets{{1, 1, {0, 0, 10, 10}, 0.9}};
  CHECK(match_and_ap(dets, gts, 1).n_fp == 1);
}

TEST_CASE("map50 agrees with the brute-force oracle on random scenes") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto scene = oracle::random_scene(seed);
    const double fast = map50(scene.dets, scene.gts, 3).map50;
    const double slow = oracle::map50(scene.dets, scene.gts, 3);
    INFO("seed " << seed);
    CHECK(std::abs(fast - slow) <= 1e-9);
  }
}

TEST_CASE("ap is invariant under monotone confidence transforms") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto scene = oracle::random_scene(seed + 1000);
    const double before = map50(scene.dets, scene.gts, 3).map50;
    for (auto& d : scene.dets) d.confidence = 1.0 / (1.0 + std::exp(-5.0 * d.confidence + 1.0));
    CHECK(std::abs(map50(scene.dets, scene.gts, 3).map50 - before) <= 1e-12);
  }
}

TEST_CASE("adding a false positive never raises ap, adding a missing true positive never lowers it") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto scene = oracle::random_scene(seed + 2000);
    const auto base = map50(scene.dets, scene.gts, 3);
    auto with_fp = scene.dets;
    with_fp.push_back({0, 1, {100, 100, 110, 110}, 0.55});
    const auto fp_report = map50(with_fp, scene.gts, 3);
    for (std::size_t i = 0; i < base.classes.size(); ++i) CHECK(fp_report.classes[i].ap <= base.classes[i].ap + 1e-15);

    auto with_tp = scene.dets;
    const auto& g = scene.gts.front();
    with_tp.push_back({g.image, g.class_id, g.box, 0.35});
    const auto probe = match_and_ap(scene.dets, scene.gts, g.class_id);
    if (probe.n_tp < probe.n_gt) {
      // Only meaningful when that ground truth is still unmatched.
      const auto tp_report = match_and_ap(with_tp, scene.gts, g.class_id);
      if (tp_report.n_tp > probe.n_tp) CHECK(tp_report.ap >= probe.ap - 1e-15);
    }
    CHECK(base.map50 >= 0.0);
    CHECK(base.map50 <= 1.0);
  }
}

TEST_CASE("interpolation variants") {
  const std::vector<double> r{0.5, 0.5, 1.0};
  const std::vector<double> p{1.0, 0.5, 2.0 / 3.0};
  CHECK(std::abs(average_precision(r, p) - 5.0 / 6.0) < 1e-12);
  // 11-point: six levels <= 0.5 at 1.0, five above at 2/3.
  CHECK(std::abs(average_precision(r, p, ApInterpolation::ElevenPoint) - (6 + 5 * 2.0 / 3.0) / 11) < 1e-12);
  CHECK(std::abs(average_precision(r, p, ApInterpolation::HundredOnePoint) - (51 + 50 * 2.0 / 3.0) / 101) < 1e-12);
}

TEST_CASE("report csv layout") {
  const std::vector<GroundTruth> gts{{0, 2, {0, 0, 4, 4}}};
  const std::vector<Detection> dets{{0, 2, {0, 0, 4, 4}, 0.9}};
  std::ostringstream out;
  write_report_csv(out, map50(dets, gts));
  CHECK(out.str() == "class_id,n_gt,n_tp,n_fp,AP\n2,1,1,0,1\nmAP@0.5,1\n");
}
