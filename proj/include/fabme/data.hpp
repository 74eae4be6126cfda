#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "fabme/tensor.hpp"

namespace fabme {

inline constexpr int kNumDefectClasses = 20;

/// Short category names, index 0 is class 1.
extern const std::array<const char*, kNumDefectClasses> kDefectClassNames;

/// class_id in 1..20; box center and size normalized to the image.
struct Annotation {
  int class_id = 1;
  double cx = 0, cy = 0, w = 0, h = 0;

  bool operator==(const Annotation&) const = default;
};

/// Throws naming the offending field.
void validate(const Annotation& a, int num_classes = kNumDefectClasses);

/// YOLO text: "class cx cy w h" per line, class 0-based on disk. `source`
/// prefixes error messages.
std::vector<Annotation> parse_labels(std::istream& in, const std::string& source = "labels");
std::vector<Annotation> read_labels(const std::filesystem::path& path);
/// Six decimal places.
void write_labels(std::ostream& out, const std::vector<Annotation>& annotations);
void write_labels(const std::filesystem::path& path, const std::vector<Annotation>& annotations);

/// Interleaved 8-bit pixels, row-major, 1 or 3 channels.
struct Image {
  Index width = 0;
  Index height = 0;
  Index channels = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(Index w, Index h, Index c) : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w * h * c)) {}
  std::uint8_t& at(Index x, Index y, Index c) { return pixels[static_cast<std::size_t>((y * width + x) * channels + c)]; }
  std::uint8_t at(Index x, Index y, Index c) const {
    return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
  bool operator==(const Image&) const = default;
};

/// Binary PPM (P6) and PGM (P5) with maxval 255; PNG when built with libpng.
Image read_image(const std::filesystem::path& path);
/// P6 for 3 channels, P5 for 1.
void write_ppm(const std::filesystem::path& path, const Image& image);
bool is_image_file(const std::filesystem::path& path);
bool png_supported();

struct TileOrigin {
  Index x = 0;
  Index y = 0;
  bool operator==(const TileOrigin&) const = default;
};

struct TileGrid {
  Index tile = 640;
  std::vector<Index> xs;  ///< column origins
  std::vector<Index> ys;  ///< row origins
  /// Row-major over (ys, xs).
  std::vector<TileOrigin> origins() const;
};

/// ceil(w/tile) x ceil(h/tile) origins at multiples of `tile`; the last origin
/// of an axis longer than `tile` is moved to len - tile. A shorter axis gets
/// one origin at 0 and the tile is padded.
TileGrid plan_tiles(Index img_w, Index img_h, Index tile = 640);

struct RemapOptions {
  double min_area_ratio = 0.25;
  double min_side_px = 2.0;
};

/// Clips each box to the tile (and image), keeps it when enough of it
/// survives, and renormalizes to the tile frame.
std::vector<Annotation> remap_annotations(const std::vector<Annotation>& annotations, Index img_w, Index img_h,
                                          TileOrigin origin, Index tile, const RemapOptions& options = {});

/// tile x tile crop; pixels beyond the image replicate the nearest border pixel.
Image crop_tile(const Image& image, TileOrigin origin, Index tile);

struct TileJob {
  std::string source_id;
  Index img_w = 0;
  Index img_h = 0;
  Index tile = 640;
  std::vector<TileOrigin> origins;                   ///< kept tiles only
  std::vector<std::vector<Annotation>> annotations;  ///< per kept tile, never empty
};

/// Plans and remaps one source image, dropping tiles without annotations.
TileJob make_tile_job(const std::string& source_id, Index img_w, Index img_h,
                      const std::vector<Annotation>& annotations, Index tile = 640,
                      const RemapOptions& options = {});

std::string tile_id(const TileJob& job, std::size_t index);

struct Split {
  std::vector<std::string> train;
  std::vector<std::string> val;
};

/// Source-level 4:1 split: ids are sorted, shuffled with the seed, and the
/// first round(n/5) go to validation.
Split split_dataset(std::vector<std::string> source_ids, std::uint64_t seed);

/// COCO json (images, annotations.bbox/category_id) to normalized annotations
/// keyed by image file stem. Category ids 1..20 are used as-is; otherwise
/// categories are numbered by ascending id.
std::map<std::string, std::vector<Annotation>> read_coco(const std::filesystem::path& path);

struct CategoryCounts {
  std::array<Index, kNumDefectClasses> train_images{};
  std::array<Index, kNumDefectClasses> train_annotations{};
  std::array<Index, kNumDefectClasses> val_images{};
  std::array<Index, kNumDefectClasses> val_annotations{};

  /// An image counts once per category it contains.
  void add(const std::vector<Annotation>& tile_annotations, bool val);
};

/// id,name,train_img,train_ann,val_img,val_ann plus a total row.
void write_stats_table(std::ostream& out, const CategoryCounts& counts);

struct TileOptions {
  Index tile = 640;
  std::uint64_t seed = 0;
  RemapOptions remap;
};

struct TileSummary {
  Index sources = 0;
  Index train_tiles = 0;
  Index val_tiles = 0;
  Index annotations = 0;
  CategoryCounts counts;
};

/// Reads images (from in/images or in) with YOLO labels (from in/labels or
/// alongside, or from `coco` when given) and writes
/// out/{train,val}/{images,labels}, per-partition manifest.csv and stats.csv.
TileSummary tile_directory(const std::filesystem::path& in, const std::filesystem::path& out,
                           const TileOptions& options, const std::filesystem::path& coco = {});

struct Sample {
  std::string id;
  Image image;
  std::vector<Annotation> annotations;
};

/// Loads dir/images/* with dir/labels/<stem>.txt (missing label file = no boxes).
std::vector<Sample> load_samples(const std::filesystem::path& dir);
/// Writes samples in the same layout.
void save_samples(const std::filesystem::path& dir, const std::vector<Sample>& samples);

/// Stacks equally sized images into (n, channels, h, w) scaled to [0, 1];
/// single-channel images are replicated to `channels`.
Tensor images_to_tensor(const std::vector<const Image*>& images, Index channels = 3);

}  // namespace fabme
