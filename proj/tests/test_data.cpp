#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "doctest.h"
#include "fabme/data.hpp"

using namespace fabme;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("fabme_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Image gradient_image(Index w, Index h, Index channels = 3) {
  Image img(w, h, channels);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index c = 0; c < channels; ++c) img.at(x, y, c) = static_cast<std::uint8_t>((x + 3 * y + 50 * c) % 256);
  return img;
}

Annotation box_px(int cls, double x1, double y1, double x2, double y2, double W, double H) {
  return {cls, (x1 + x2) / 2 / W, (y1 + y2) / 2 / H, (x2 - x1) / W, (y2 - y1) / H};
}

}  // namespace

TEST_CASE("plan_tiles examples") {
  const auto g = plan_tiles(2446, 1000);
  CHECK(g.origins().size() == 8);
  CHECK(g.xs == std::vector<Index>{0, 640, 1280, 1806});
  CHECK(g.ys == std::vector<Index>{0, 360});

  const auto exact = plan_tiles(640, 640);
  REQUIRE(exact.origins().size() == 1);
  CHECK(exact.origins()[0] == TileOrigin{0, 0});

  const auto shifted = plan_tiles(700, 640);
  CHECK(shifted.xs == std::vector<Index>{0, 60});
  CHECK(shifted.ys == std::vector<Index>{0});

  const auto small = plan_tiles(300, 200);
  CHECK(small.origins() == std::vector<TileOrigin>{{0, 0}});
  CHECK_THROWS_AS(plan_tiles(0, 10), Error);
}

TEST_CASE("plan_tiles matches ceil arithmetic and covers the image") {
  for (Index w : {1, 17, 639, 640, 641, 1279, 1280, 1281, 2446, 3000}) {
    for (Index h : {1, 640, 1000, 1500}) {
      const auto g = plan_tiles(w, h);
      CHECK(static_cast<Index>(g.xs.size()) == (w + 639) / 640);
      CHECK(static_cast<Index>(g.ys.size()) == (h + 639) / 640);
      for (Index x : g.xs) {
        CHECK(x >= 0);
        if (w >= 640) CHECK(x + 640 <= w);
      }
      // Every pixel column falls in some tile.
      for (Index x = 0; x < w; x += 7) {
        CHECK(std::any_of(g.xs.begin(), g.xs.end(), [&](Index o) { return x >= o && x < o + 640; }));
      }
    }
  }
}

TEST_CASE("remap examples") {
  const double W = 1280, H = 640;
  const Annotation inside = box_px(3, 100, 200, 200, 260, W, H);
  const auto kept = remap_annotations({inside}, 1280, 640, {0, 0}, 640);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].class_id == 3);
  CHECK(kept[0].cx == doctest::Approx(150.0 / 640));
  CHECK(kept[0].cy == doctest::Approx(230.0 / 640));
  CHECK(kept[0].w == doctest::Approx(100.0 / 640));
  CHECK(kept[0].h == doctest::Approx(60.0 / 640));

  CHECK(remap_annotations({inside}, 1280, 640, {640, 0}, 640).empty());

  // 70% of the area left of x = 640, 30% right of it.
  const Annotation straddle = box_px(1, 570, 100, 670, 200, W, H);
  const auto left = remap_annotations({straddle}, 1280, 640, {0, 0}, 640);
  const auto right = remap_annotations({straddle}, 1280, 640, {640, 0}, 640);
  REQUIRE(left.size() == 1);
  REQUIRE(right.size() == 1);
  CHECK(left[0].w == doctest::Approx(70.0 / 640));
  CHECK(right[0].w == doctest::Approx(30.0 / 640));
  CHECK(right[0].cx == doctest::Approx(15.0 / 640));

  const Annotation mostly_left = box_px(1, 560, 100, 660, 200, W, H);  // 20% on the right
  CHECK(remap_annotations({mostly_left}, 1280, 640, {640, 0}, 640).empty());

  const Annotation sliver = box_px(1, 638.5, 100, 639.5, 300, W, H);
  CHECK(remap_annotations({sliver}, 1280, 640, {0, 0}, 640).empty());
}

TEST_CASE("tile jobs keep only annotated tiles with in-frame boxes") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    const Index W = 2446, H = 1000;
    std::vector<Annotation> anns;
    for (int k = 0; k < 6; ++k) {
      const double w = 5 + u(rng) * 300, h = 5 + u(rng) * 300;
      const double x = u(rng) * (W - w), y = u(rng) * (H - h);
      anns.push_back(box_px(1 + static_cast<int>(u(rng) * 20), x, y, x + w, y + h, W, H));
    }
    const auto job = make_tile_job("img", W, H, anns);
    CHECK(job.origins.size() == job.annotations.size());
    Index kept = 0;
    for (const auto& tile : job.annotations) {
      CHECK_FALSE(tile.empty());
      for (const auto& a : tile) {
        CHECK_NOTHROW(validate(a));
        CHECK(a.cx - a.w / 2 >= -1e-12);
        CHECK(a.cx + a.w / 2 <= 1 + 1e-12);
      }
      kept += static_cast<Index>(tile.size());
    }
    // Lower bound: annotations that survive in at least one tile.
    Index surviving = 0;
    for (const auto& a : anns) {
      bool any = false;
      for (const auto& o : plan_tiles(W, H).origins()) any = any || !remap_annotations({a}, W, H, o, 640).empty();
      surviving += any;
    }
    CHECK(kept >= surviving);
  }
}

TEST_CASE("crop pads by replicating the border") {
  const Image img = gradient_image(5, 3);
  const Image tile = crop_tile(img, {0, 0}, 8);
  CHECK(tile.width == 8);
  CHECK(tile.at(2, 1, 1) == img.at(2, 1, 1));
  CHECK(tile.at(7, 1, 0) == img.at(4, 1, 0));
  CHECK(tile.at(7, 7, 2) == img.at(4, 2, 2));
}

TEST_CASE("split by source image") {
  std::vector<std::string> ids;
  for (int i = 0; i < 10; ++i) ids.push_back("src" + std::to_string(i));
  const auto a = split_dataset(ids, 7);
  CHECK(a.train.size() == 8);
  CHECK(a.val.size() == 2);
  const auto b = split_dataset(ids, 7);
  CHECK(a.train == b.train);
  CHECK(a.val == b.val);
  std::set<std::string> all(a.train.begin(), a.train.end());
  all.insert(a.val.begin(), a.val.end());
  CHECK(all.size() == 10);

  bool differs = false;
  for (std::uint64_t s = 0; s < 10 && !differs; ++s) differs = split_dataset(ids, s).val != a.val;
  CHECK(differs);

  for (std::size_t n : {1u, 3u, 7u, 13u, 101u}) {
    std::vector<std::string> v;
    for (std::size_t i = 0; i < n; ++i) v.push_back(std::to_string(i));
    const auto s = split_dataset(v, 1);
    CHECK(std::abs(static_cast<double>(s.train.size()) - 4.0 * static_cast<double>(s.val.size())) <= 5.0);
  }
}

TEST_CASE("yolo labels parse, validate and round trip") {
  std::istringstream one("0 0.5 0.5 0.1 0.2\n");
  const auto parsed = parse_labels(one);
  REQUIRE(parsed.size() == 1);
  CHECK(parsed[0] == Annotation{1, 0.5, 0.5, 0.1, 0.2});

  std::istringstream bad_cx("5 1.5 0.5 0.1 0.1\n");
  CHECK_THROWS_WITH_AS(parse_labels(bad_cx), doctest::Contains("cx"), Error);
  std::istringstream bad_line("0 0.5 0.5 0.1 0.2\n\n3 0.5 0.5 0.1\n");
  CHECK_THROWS_WITH_AS(parse_labels(bad_line, "f.txt"), doctest::Contains("f.txt:3"), Error);
  std::istringstream bad_num("0 0.5 abc 0.1 0.2\n");
  CHECK_THROWS_WITH_AS(parse_labels(bad_num), doctest::Contains("cy"), Error);
  std::istringstream bad_class("20 0.5 0.5 0.1 0.2\n");
  CHECK_THROWS_AS(parse_labels(bad_class), Error);
  std::istringstream zero_w("1 0.5 0.5 0 0.2\n");
  CHECK_THROWS_WITH_AS(parse_labels(zero_w), doctest::Contains("w out of range"), Error);

  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> micro(1, 1000000);
  std::uniform_int_distribution<int> cls(1, 20);
  std::vector<Annotation> anns;
  for (int i = 0; i < 100; ++i) {
    anns.push_back({cls(rng), micro(rng) / 1e6, micro(rng) / 1e6, micro(rng) / 1e6, micro(rng) / 1e6});
  }
  TempDir dir("labels");
  write_labels(dir.path / "a.txt", anns);
  CHECK(read_labels(dir.path / "a.txt") == anns);
}

TEST_CASE("ppm round trip and errors") {
  TempDir dir("ppm");
  for (Index c : {1, 3}) {
    const Image img = gradient_image(13, 7, c);
    const fs::path p = dir.path / (c == 3 ? "a.ppm" : "a.pgm");
    write_ppm(p, img);
    CHECK(read_image(p) == img);
  }
  {
    std::ofstream f(dir.path / "bad.ppm", std::ios::binary);
    f << "P6\n4 4\n255\nabc";
  }
  CHECK_THROWS_WITH_AS(read_image(dir.path / "bad.ppm"), doctest::Contains("truncated"), Error);
  CHECK_THROWS_AS(read_image(dir.path / "missing.ppm"), Error);
}

TEST_CASE("coco reading") {
  TempDir dir("coco");
  {
    std::ofstream f(dir.path / "ann.json");
    f << R"({"images":[{"id":7,"file_name":"a/img1.png","width":200,"height":100}],
             "categories":[{"id":3,"name":"knots"}],
             "annotations":[{"image_id":7,"category_id":3,"bbox":[10,20,40,10]}]})";
  }
  const auto labels = read_coco(dir.path / "ann.json");
  REQUIRE(labels.count("img1") == 1);
  const auto& a = labels.at("img1").at(0);
  CHECK(a.class_id == 3);
  CHECK(a.cx == doctest::Approx(0.15));
  CHECK(a.cy == doctest::Approx(0.25));
  CHECK(a.w == doctest::Approx(0.2));
  CHECK(a.h == doctest::Approx(0.1));
  {
    std::ofstream f(dir.path / "broken.json");
    f << R"({"images":[]})";
  }
  CHECK_THROWS_AS(read_coco(dir.path / "broken.json"), Error);
}

TEST_CASE("tile a directory end to end") {
  TempDir in("tile_in");
  TempDir out("tile_out");
  fs::create_directories(in.path / "images");
  fs::create_directories(in.path / "labels");
  const Index W = 2446, H = 1000;
  for (int i = 0; i < 5; ++i) {
    const std::string id = "photo" + std::to_string(i);
    write_ppm(in.path / "images" / (id + ".ppm"), gradient_image(W, H));
    std::vector<Annotation> anns{box_px(1 + i, 100, 100, 180, 150, W, H), box_px(4, 1900, 700, 2000, 760, W, H)};
    if (i == 4) anns.clear();  // defect-free source
    write_labels(in.path / "labels" / (id + ".txt"), anns);
  }
  const auto summary = tile_directory(in.path, out.path, TileOptions{640, 3, {}});
  CHECK(summary.sources == 5);
  CHECK(summary.train_tiles + summary.val_tiles == 8);  // two annotated tiles in each of four sources
  CHECK(summary.annotations == 8);
  Index listed = 0;
  for (const char* part : {"train", "val"}) {
    std::ifstream manifest(out.path / part / "manifest.csv");
    std::string line;
    std::getline(manifest, line);
    CHECK(line == "tile_id,source_id,origin_x,origin_y,n_annotations");
    while (std::getline(manifest, line)) {
      ++listed;
      const std::string tid = line.substr(0, line.find(','));
      CHECK(fs::exists(out.path / part / "images" / (tid + ".ppm")));
      CHECK_FALSE(read_labels(out.path / part / "labels" / (tid + ".txt")).empty());
    }
  }
  CHECK(listed == 8);
  const auto tile = read_image(out.path / "train" / "images" / "photo0_0_0.ppm");
  CHECK(tile.width == 640);

  std::ifstream stats(out.path / "stats.csv");
  std::string header;
  std::getline(stats, header);
  CHECK(header == "id,name,train_img,train_ann,val_img,val_ann");

  TempDir empty("tile_empty");
  CHECK_THROWS_WITH_AS(tile_directory(empty.path, out.path, {}), doctest::Contains("no images found"), Error);
}

TEST_CASE("category counts count images once per class") {
  CategoryCounts counts;
  counts.add({{1, .5, .5, .1, .1}, {1, .2, .2, .1, .1}, {3, .5, .5, .1, .1}}, false);
  counts.add({{1, .5, .5, .1, .1}}, true);
  CHECK(counts.train_images[0] == 1);
  CHECK(counts.train_annotations[0] == 2);
  CHECK(counts.train_images[2] == 1);
  CHECK(counts.val_images[0] == 1);
  std::ostringstream out;
  write_stats_table(out, counts);
  CHECK(out.str().find("1,\"holes\",1,2,1,1\n") != std::string::npos);
  CHECK(out.str().find("total,\"all\",2,3,1,1\n") != std::string::npos);
}

TEST_CASE("image batches become tensors in [0,1]") {
  const Image gray = gradient_image(4, 2, 1);
  const Tensor t = images_to_tensor({&gray, &gray});
  CHECK(t.shape() == Shape{2, 3, 2, 4});
  CHECK(t.at(1, 2, 1, 3) == doctest::Approx(gray.at(3, 1, 0) / 255.0));
  const Image other = gradient_image(5, 2, 1);
  CHECK_THROWS_AS(images_to_tensor({&gray, &other}), Error);
}
