#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cafpn/tensor.hpp"

namespace cafpn::data {

enum class Split { Train, Val };

struct Entry {
  std::string path;  // relative to the dataset root
  std::int64_t label = 0;
  Split split = Split::Train;
};

// Dataset layout: root/<class_name>/<image>.tnsr, each an H x W x 3 TAR0
// tensor with values in [0, 1]. Labels follow the sorted class names.
struct Manifest {
  std::filesystem::path root;
  std::vector<std::string> classes;
  std::vector<Entry> entries;
  std::uint64_t seed = 0;

  std::int64_t num_classes() const { return static_cast<std::int64_t>(classes.size()); }
  std::vector<std::size_t> indices(Split split) const;
  std::int64_t count(std::int64_t label, Split split) const;
};

struct IngestOptions {
  std::uint64_t seed = 0;
  // Single-image classes go entirely to train instead of failing.
  bool allow_train_only = false;
};

// Walks the class directories and performs the per-class 4:1 split:
// max(1, round(n / 5)) images of a class with n >= 2 go to val.
Manifest ingest(const std::filesystem::path& root, const IngestOptions& options = {});
std::int64_t val_count(std::int64_t n);

// CSV "path,label,split".
void write_manifest_csv(const Manifest& m, const std::filesystem::path& path);
Manifest read_manifest_csv(const std::filesystem::path& path, const std::filesystem::path& root);

// Height x width x 3, row-major, values in [0, 1].
struct Image {
  std::int64_t height = 0, width = 0;
  std::vector<double> pixels;

  double& at(std::int64_t y, std::int64_t x, int c) {
    return pixels[static_cast<std::size_t>((y * width + x) * 3 + c)];
  }
  double at(std::int64_t y, std::int64_t x, int c) const {
    return pixels[static_cast<std::size_t>((y * width + x) * 3 + c)];
  }
};

Image load_image(const std::filesystem::path& path);
void save_image(const std::filesystem::path& path, const Image& img);
Image image_from_tensor(const Tensor& t);
Tensor image_to_tensor(const Image& img);

// ---- Tiling -------------------------------------------------------------

struct TileRect {
  std::int64_t y = 0, x = 0;
};

// Top-left corners of the floor(h / tile) x floor(w / tile) grid, row-major.
std::vector<TileRect> tile_grid(std::int64_t height, std::int64_t width, std::int64_t tile);

struct TileFilter {
  double min_variance = 1e-3;     // luminance variance below this is blank
  double border_delta = 0.02;     // |tile mean - image border mean| below this is background
};

double luminance(const Image& img, std::int64_t y, std::int64_t x);
// Mean luminance of the one-pixel frame around the image.
double border_mean(const Image& img);

enum class TileVerdict { Keep, Blank, Background };
TileVerdict classify_tile(const Image& img, const TileRect& r, std::int64_t tile, double border,
                          const TileFilter& filter);

struct TilingReport {
  std::int64_t images = 0;
  std::int64_t skipped_images = 0;  // smaller than one tile
  std::int64_t raw_tiles = 0;       // before filtering
  std::int64_t blank = 0;
  std::int64_t background = 0;
  std::int64_t kept = 0;
  std::vector<std::string> warnings;
};

// Cuts every image under `src` into tiles written to dst/<class>/<stem>_r<i>_c<j>.tnsr.
TilingReport generate_tiny(const std::filesystem::path& src, const std::filesystem::path& dst,
                           std::int64_t tile = 32, const TileFilter& filter = {});

// ---- Preprocessing ------------------------------------------------------

enum class Regime { None, Standard, Mixup };
Regime parse_regime(const std::string& name);
std::string regime_name(Regime r);

struct Normalization {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};
};

// Two-pass per-channel statistics over every pixel of the images.
Normalization compute_normalization(const std::vector<const Image*>& images);

Image flip_horizontal(const Image& img);
// Bilinear resize (half-pixel centres, edge clamp) so the shorter side is `side`.
Image resize_shorter(const Image& img, std::int64_t side);
Image crop(const Image& img, std::int64_t y, std::int64_t x, std::int64_t h, std::int64_t w);
Image pad(const Image& img, std::int64_t p);

// Geometric transform to crop x crop. For crop 224 the shorter side is first
// resized to 256; smaller crops work on a pad-4 border. train = random crop and
// mirror with p = 0.5; eval = centre crop.
Image augment(const Image& img, std::int64_t crop_size, bool train, std::mt19937_64& rng);
// Writes (x - mean) / std into `out` (3 x H x W, channel-major).
void normalize_into(const Image& img, const Normalization& norm, double* out);

// ---- Mixup --------------------------------------------------------------

struct MixedBatch {
  Tensor inputs;
  Tensor targets;
};
// lambda * a + (1 - lambda) * b for both the inputs and the target distributions.
MixedBatch mixup_batch(const Tensor& xa, const Tensor& ya, const Tensor& xb, const Tensor& yb,
                       double lambda);
double sample_beta(double alpha, std::mt19937_64& rng);
Tensor one_hot(const std::vector<std::int64_t>& labels, std::int64_t classes);

// ---- In-memory dataset --------------------------------------------------

struct Dataset {
  Manifest manifest;
  std::vector<Image> images;  // parallel to manifest.entries

  static Dataset load(Manifest manifest);
  std::vector<const Image*> images_of(Split split) const;
};

struct Batch {
  Tensor inputs;  // N x 3 x S x S
  std::vector<std::int64_t> labels;
};

Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& indices, std::int64_t crop_size,
                 bool train, const Normalization& norm, std::mt19937_64& rng);

// ---- Statistics ---------------------------------------------------------

struct ClassCount {
  std::string name;
  std::int64_t train = 0, val = 0;
  std::int64_t total() const { return train + val; }
};

std::vector<ClassCount> class_counts(const Manifest& m);
// "class,train,val,total" rows, then a grouped "category,..." section when a
// class -> category map is given.
std::string stats_csv(const Manifest& m, const std::optional<std::filesystem::path>& category_map);

// ---- Synthetic textures -------------------------------------------------

struct SynthOptions {
  std::int64_t classes = 5;
  std::int64_t per_class = 20;
  std::int64_t size = 32;
  std::uint64_t seed = 0;
};

// Class k is an oriented colour grating with its own frequency, angle and
// hue, plus per-image phase jitter and pixel noise.
Image synth_texture(std::int64_t label, std::int64_t size, std::mt19937_64& rng,
                    std::int64_t classes = 5);
void write_synthetic_dataset(const std::filesystem::path& root, const SynthOptions& options);

}  // namespace cafpn::data
