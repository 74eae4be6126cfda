#include "fabme/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fabme/parallel.hpp"

#ifdef FABME_HAVE_PNG
#include <png.h>
#endif

namespace fabme {

namespace fs = std::filesystem;

const std::array<const char*, kNumDefectClasses> kDefectClassNames{
    "holes",           "water stains, etc.",   "three-yarn defects", "knots",
    "pattern skips",   "hundred-leg defects",  "neps",               "thick ends",
    "loose ends",      "broken ends",          "sagging ends",       "thick fibers",
    "weft shrinkage",  "sizing spots",         "warp knots",         "star skips, etc.",
    "broken spandex",  "color shading, etc.",  "abrasion marks, etc.", "dead folds, etc."};

namespace {

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t b = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > b) out.push_back(line.substr(b, i - b));
  }
  return out;
}

template <typename T>
bool parse_token(std::string_view token, T& out) {
  const auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), out);
  return ec == std::errc() && ptr == token.data() + token.size();
}

std::vector<fs::path> sorted_images(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && is_image_file(entry.path())) out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  return out;
}

Image read_pnm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open image " + path.string());
  auto token = [&]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(ch);
    }
    return t;
  };
  const std::string magic = token();
  if (magic != "P6" && magic != "P5") throw Error(path.string() + ": unsupported image magic '" + magic + "'");
  Index w = 0, h = 0, maxval = 0;
  if (!parse_token(token(), w) || !parse_token(token(), h) || !parse_token(token(), maxval) || w < 1 || h < 1) {
    throw Error(path.string() + ": malformed PNM header");
  }
  if (maxval != 255) throw Error(path.string() + ": only maxval 255 is supported");
  Image img(w, h, magic == "P6" ? 3 : 1);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw Error(path.string() + ": truncated pixel data");
  return img;
}

#ifdef FABME_HAVE_PNG
Image read_png(const fs::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw Error(path.string() + ": " + png.message);
  }
  const bool gray = (png.format & PNG_FORMAT_FLAG_COLOR) == 0;
  png.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image img(png.width, png.height, gray ? 1 : 3);
  if (!png_image_finish_read(&png, nullptr, img.pixels.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw Error(path.string() + ": " + msg);
  }
  return img;
}
#endif

std::string lower_ext(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

void write_manifest(const fs::path& path, const std::vector<std::pair<const TileJob*, std::size_t>>& tiles) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "tile_id,source_id,origin_x,origin_y,n_annotations\n";
  for (const auto& [job, i] : tiles) {
    out << tile_id(*job, i) << ',' << job->source_id << ',' << job->origins[i].x << ',' << job->origins[i].y << ','
        << job->annotations[i].size() << '\n';
  }
}

}  // namespace

void validate(const Annotation& a, int num_classes) {
  if (a.class_id < 1 || a.class_id > num_classes) {
    throw Error("class " + std::to_string(a.class_id - 1) + " out of range (0.." + std::to_string(num_classes - 1) + ")");
  }
  auto in01 = [](double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; };
  auto pos01 = [](double v) { return std::isfinite(v) && v > 0.0 && v <= 1.0; };
  if (!in01(a.cx)) throw Error("cx out of range [0,1]");
  if (!in01(a.cy)) throw Error("cy out of range [0,1]");
  if (!pos01(a.w)) throw Error("w out of range (0,1]");
  if (!pos01(a.h)) throw Error("h out of range (0,1]");
}

std::vector<Annotation> parse_labels(std::istream& in, const std::string& source) {
  std::vector<Annotation> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto tokens = split_ws(line);
    if (tokens.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no) + ": ";
    if (tokens.size() != 5) {
      throw Error(where + "expected 5 fields (class cx cy w h), got " + std::to_string(tokens.size()));
    }
    int cls = 0;
    if (!parse_token(tokens[0], cls)) throw Error(where + "class is not an integer");
    Annotation a;
    a.class_id = cls + 1;
    static constexpr const char* kFields[] = {"cx", "cy", "w", "h"};
    double* slots[] = {&a.cx, &a.cy, &a.w, &a.h};
    for (int k = 0; k < 4; ++k) {
      if (!parse_token(tokens[static_cast<std::size_t>(k) + 1], *slots[k])) {
        throw Error(where + kFields[k] + " is not a number");
      }
    }
    try {
      validate(a);
    } catch (const Error& e) {
      throw Error(where + e.what());
    }
    out.push_back(a);
  }
  return out;
}

std::vector<Annotation> read_labels(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open labels " + path.string());
  return parse_labels(in, path.string());
}

void write_labels(std::ostream& out, const std::vector<Annotation>& annotations) {
  char buf[128];
  for (const auto& a : annotations) {
    validate(a);
    std::snprintf(buf, sizeof buf, "%d %.6f %.6f %.6f %.6f\n", a.class_id - 1, a.cx, a.cy, a.w, a.h);
    out << buf;
  }
}

void write_labels(const fs::path& path, const std::vector<Annotation>& annotations) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write labels " + path.string());
  write_labels(out, annotations);
}

bool png_supported() {
#ifdef FABME_HAVE_PNG
  return true;
#else
  return false;
#endif
}

bool is_image_file(const fs::path& path) {
  const std::string ext = lower_ext(path);
  return ext == ".ppm" || ext == ".pgm" || ext == ".pnm" || (ext == ".png" && png_supported());
}

Image read_image(const fs::path& path) {
  const std::string ext = lower_ext(path);
  if (ext == ".png") {
#ifdef FABME_HAVE_PNG
    return read_png(path);
#else
    throw Error(path.string() + ": PNG support not built");
#endif
  }
  return read_pnm(path);
}

void write_ppm(const fs::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) throw Error("write_ppm: images must have 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write image " + path.string());
  out << (image.channels == 3 ? "P6" : "P5") << '\n' << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw Error("write failed for " + path.string());
}

std::vector<TileOrigin> TileGrid::origins() const {
  std::vector<TileOrigin> out;
  for (Index y : ys)
    for (Index x : xs) out.push_back({x, y});
  return out;
}

TileGrid plan_tiles(Index img_w, Index img_h, Index tile) {
  if (img_w < 1 || img_h < 1) throw Error("plan_tiles: image extent must be positive");
  if (tile < 1) throw Error("plan_tiles: tile size must be positive");
  auto axis = [tile](Index len) {
    std::vector<Index> out;
    const Index count = (len + tile - 1) / tile;
    for (Index k = 0; k < count; ++k) out.push_back(std::min(k * tile, std::max<Index>(0, len - tile)));
    return out;
  };
  return TileGrid{tile, axis(img_w), axis(img_h)};
}

std::vector<Annotation> remap_annotations(const std::vector<Annotation>& annotations, Index img_w, Index img_h,
                                          TileOrigin origin, Index tile, const RemapOptions& options) {
  std::vector<Annotation> out;
  const double W = static_cast<double>(img_w);
  const double H = static_cast<double>(img_h);
  const double tx0 = static_cast<double>(origin.x);
  const double ty0 = static_cast<double>(origin.y);
  const double tx1 = std::min(tx0 + static_cast<double>(tile), W);
  const double ty1 = std::min(ty0 + static_cast<double>(tile), H);
  const double T = static_cast<double>(tile);
  for (const auto& a : annotations) {
    const double x1 = (a.cx - a.w / 2) * W;
    const double x2 = (a.cx + a.w / 2) * W;
    const double y1 = (a.cy - a.h / 2) * H;
    const double y2 = (a.cy + a.h / 2) * H;
    const double cx1 = std::max(x1, tx0), cx2 = std::min(x2, tx1);
    const double cy1 = std::max(y1, ty0), cy2 = std::min(y2, ty1);
    const double cw = cx2 - cx1;
    const double ch = cy2 - cy1;
    if (cw <= 0 || ch <= 0) continue;
    const double area = (x2 - x1) * (y2 - y1);
    if (cw * ch < options.min_area_ratio * area) continue;
    if (cw < options.min_side_px || ch < options.min_side_px) continue;
    Annotation r;
    r.class_id = a.class_id;
    r.cx = std::clamp(((cx1 + cx2) / 2 - tx0) / T, 0.0, 1.0);
    r.cy = std::clamp(((cy1 + cy2) / 2 - ty0) / T, 0.0, 1.0);
    r.w = std::min(cw / T, 1.0);
    r.h = std::min(ch / T, 1.0);
    out.push_back(r);
  }
  return out;
}

Image crop_tile(const Image& image, TileOrigin origin, Index tile) {
  Image out(tile, tile, image.channels);
  for (Index y = 0; y < tile; ++y) {
    const Index sy = std::clamp<Index>(origin.y + y, 0, image.height - 1);
    for (Index x = 0; x < tile; ++x) {
      const Index sx = std::clamp<Index>(origin.x + x, 0, image.width - 1);
      for (Index c = 0; c < image.channels; ++c) out.at(x, y, c) = image.at(sx, sy, c);
    }
  }
  return out;
}

TileJob make_tile_job(const std::string& source_id, Index img_w, Index img_h,
                      const std::vector<Annotation>& annotations, Index tile, const RemapOptions& options) {
  TileJob job{source_id, img_w, img_h, tile, {}, {}};
  for (const auto& origin : plan_tiles(img_w, img_h, tile).origins()) {
    auto remapped = remap_annotations(annotations, img_w, img_h, origin, tile, options);
    if (remapped.empty()) continue;
    job.origins.push_back(origin);
    job.annotations.push_back(std::move(remapped));
  }
  return job;
}

std::string tile_id(const TileJob& job, std::size_t index) {
  const auto& o = job.origins.at(index);
  return job.source_id + "_" + std::to_string(o.x) + "_" + std::to_string(o.y);
}

Split split_dataset(std::vector<std::string> source_ids, std::uint64_t seed) {
  std::sort(source_ids.begin(), source_ids.end());
  source_ids.erase(std::unique(source_ids.begin(), source_ids.end()), source_ids.end());
  Rng rng(seed);
  // Fisher-Yates with an explicit draw so the result does not depend on the
  // standard library's shuffle implementation.
  for (std::size_t i = source_ids.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(source_ids[i - 1], source_ids[pick(rng)]);
  }
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(source_ids.size()) / 5.0));
  Split split;
  split.val.assign(source_ids.begin(), source_ids.begin() + static_cast<std::ptrdiff_t>(n_val));
  split.train.assign(source_ids.begin() + static_cast<std::ptrdiff_t>(n_val), source_ids.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  return split;
}

std::map<std::string, std::vector<Annotation>> read_coco(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open COCO file " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ": " + e.what());
  }
  struct ImageInfo {
    std::string stem;
    double width, height;
  };
  std::map<long long, ImageInfo> images;
  std::map<std::string, std::vector<Annotation>> out;
  try {
    for (const auto& im : doc.at("images")) {
      const std::string stem = fs::path(im.at("file_name").get<std::string>()).stem().string();
      images[im.at("id").get<long long>()] = {stem, im.at("width").get<double>(), im.at("height").get<double>()};
      out[stem];
    }
    std::set<long long> category_ids;
    if (doc.contains("categories")) {
      for (const auto& c : doc.at("categories")) category_ids.insert(c.at("id").get<long long>());
    }
    for (const auto& a : doc.at("annotations")) category_ids.insert(a.at("category_id").get<long long>());
    const bool direct = !category_ids.empty() && *category_ids.begin() >= 1 && *category_ids.rbegin() <= kNumDefectClasses;
    std::map<long long, int> class_of;
    int next = 1;
    for (long long id : category_ids) class_of[id] = direct ? static_cast<int>(id) : next++;

    for (const auto& a : doc.at("annotations")) {
      const auto it = images.find(a.at("image_id").get<long long>());
      if (it == images.end()) throw Error("annotation refers to unknown image id");
      const auto& bbox = a.at("bbox");
      const double x = bbox.at(0).get<double>(), y = bbox.at(1).get<double>();
      const double w = bbox.at(2).get<double>(), h = bbox.at(3).get<double>();
      const auto& info = it->second;
      Annotation ann{class_of.at(a.at("category_id").get<long long>()), (x + w / 2) / info.width,
                     (y + h / 2) / info.height, w / info.width, h / info.height};
      validate(ann);
      out[info.stem].push_back(ann);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ": " + e.what());
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
  return out;
}

void CategoryCounts::add(const std::vector<Annotation>& tile_annotations, bool val) {
  std::array<bool, kNumDefectClasses> seen{};
  auto& img = val ? val_images : train_images;
  auto& ann = val ? val_annotations : train_annotations;
  for (const auto& a : tile_annotations) {
    const auto c = static_cast<std::size_t>(a.class_id - 1);
    ++ann[c];
    if (!seen[c]) {
      seen[c] = true;
      ++img[c];
    }
  }
}

void write_stats_table(std::ostream& out, const CategoryCounts& counts) {
  out << "id,name,train_img,train_ann,val_img,val_ann\n";
  Index totals[4] = {0, 0, 0, 0};
  for (std::size_t c = 0; c < kNumDefectClasses; ++c) {
    out << c + 1 << ",\"" << kDefectClassNames[c] << "\"," << counts.train_images[c] << ','
        << counts.train_annotations[c] << ',' << counts.val_images[c] << ',' << counts.val_annotations[c] << '\n';
    totals[0] += counts.train_images[c];
    totals[1] += counts.train_annotations[c];
    totals[2] += counts.val_images[c];
    totals[3] += counts.val_annotations[c];
  }
  out << "total,\"all\"," << totals[0] << ',' << totals[1] << ',' << totals[2] << ',' << totals[3] << '\n';
}

TileSummary tile_directory(const fs::path& in, const fs::path& out, const TileOptions& options, const fs::path& coco) {
  const fs::path image_dir = fs::is_directory(in / "images") ? in / "images" : in;
  const fs::path label_dir = fs::is_directory(in / "labels") ? in / "labels" : image_dir;
  const auto sources = sorted_images(image_dir);
  if (sources.empty()) throw Error("no images found in " + in.string());

  std::map<std::string, std::vector<Annotation>> coco_labels;
  if (!coco.empty()) coco_labels = read_coco(coco);

  std::vector<std::string> ids;
  for (const auto& p : sources) ids.push_back(p.stem().string());
  if (std::set<std::string>(ids.begin(), ids.end()).size() != ids.size()) {
    throw Error("duplicate image stems in " + image_dir.string());
  }
  const Split split = split_dataset(ids, options.seed);
  const std::set<std::string> val_ids(split.val.begin(), split.val.end());

  for (const char* part : {"train", "val"}) {
    fs::create_directories(out / part / "images");
    fs::create_directories(out / part / "labels");
  }

  std::vector<TileJob> jobs(sources.size());
  parallel_for(sources.size(), [&](std::size_t i) {
    const std::string& id = ids[i];
    const Image image = read_image(sources[i]);
    std::vector<Annotation> labels;
    if (!coco.empty()) {
      if (auto it = coco_labels.find(id); it != coco_labels.end()) labels = it->second;
    } else if (const fs::path lp = label_dir / (id + ".txt"); fs::exists(lp)) {
      labels = read_labels(lp);
    }
    TileJob job = make_tile_job(id, image.width, image.height, labels, options.tile, options.remap);
    const fs::path part = out / (val_ids.count(id) ? "val" : "train");
    for (std::size_t t = 0; t < job.origins.size(); ++t) {
      const std::string tid = tile_id(job, t);
      write_ppm(part / "images" / (tid + ".ppm"), crop_tile(image, job.origins[t], options.tile));
      write_labels(part / "labels" / (tid + ".txt"), job.annotations[t]);
    }
    jobs[i] = std::move(job);
  });

  TileSummary summary;
  summary.sources = static_cast<Index>(sources.size());
  std::vector<std::pair<const TileJob*, std::size_t>> train_tiles, val_tiles;
  for (const auto& job : jobs) {
    const bool val = val_ids.count(job.source_id) > 0;
    for (std::size_t t = 0; t < job.origins.size(); ++t) {
      (val ? val_tiles : train_tiles).emplace_back(&job, t);
      summary.counts.add(job.annotations[t], val);
      summary.annotations += static_cast<Index>(job.annotations[t].size());
    }
  }
  summary.train_tiles = static_cast<Index>(train_tiles.size());
  summary.val_tiles = static_cast<Index>(val_tiles.size());
  write_manifest(out / "train" / "manifest.csv", train_tiles);
  write_manifest(out / "val" / "manifest.csv", val_tiles);
  std::ofstream stats(out / "stats.csv");
  write_stats_table(stats, summary.counts);
  return summary;
}

std::vector<Sample> load_samples(const fs::path& dir) {
  const fs::path image_dir = dir / "images";
  const auto paths = sorted_images(image_dir);
  if (paths.empty()) throw Error("no images found in " + image_dir.string());
  std::vector<Sample> out(paths.size());
  parallel_for(paths.size(), [&](std::size_t i) {
    Sample& s = out[i];
    s.id = paths[i].stem().string();
    s.image = read_image(paths[i]);
    const fs::path lp = dir / "labels" / (s.id + ".txt");
    if (fs::exists(lp)) s.annotations = read_labels(lp);
  });
  return out;
}

void save_samples(const fs::path& dir, const std::vector<Sample>& samples) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "labels");
  for (const auto& s : samples) {
    write_ppm(dir / "images" / (s.id + ".ppm"), s.image);
    write_labels(dir / "labels" / (s.id + ".txt"), s.annotations);
  }
}

Tensor images_to_tensor(const std::vector<const Image*>& images, Index channels) {
  if (images.empty()) throw Error("images_to_tensor: empty batch");
  const Index w = images.front()->width;
  const Index h = images.front()->height;
  Buffer values(static_cast<Index>(images.size()) * channels * h * w);
  for (std::size_t n = 0; n < images.size(); ++n) {
    const Image& img = *images[n];
    if (img.width != w || img.height != h) throw Error("images_to_tensor: images differ in size");
    if (img.channels != 1 && img.channels != channels) throw Error("images_to_tensor: channel count mismatch");
    for (Index c = 0; c < channels; ++c) {
      const Index src_c = img.channels == 1 ? 0 : c;
      double* dst = values.data() + (static_cast<Index>(n) * channels + c) * h * w;
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) dst[y * w + x] = img.at(x, y, src_c) / 255.0;
    }
  }
  return Tensor({static_cast<Index>(images.size()), channels, h, w}, std::move(values), false);
}

}  // namespace fabme
