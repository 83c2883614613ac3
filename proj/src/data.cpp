#include "cafpn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <sstream>

#include "cafpn/archive.hpp"
#include "cafpn/error.hpp"

namespace fs = std::filesystem;

namespace cafpn::data {

namespace {

std::vector<fs::path> sorted_children(const fs::path& dir, bool directories) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (directories ? e.is_directory() : (e.is_regular_file() && e.path().extension() == ".tnsr")) {
      out.push_back(e.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string split_name(Split s) { return s == Split::Train ? "train" : "val"; }

}  // namespace

std::vector<std::size_t> Manifest::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].split == split) out.push_back(i);
  return out;
}

std::int64_t Manifest::count(std::int64_t label, Split split) const {
  return std::count_if(entries.begin(), entries.end(),
                       [&](const Entry& e) { return e.label == label && e.split == split; });
}

std::int64_t val_count(std::int64_t n) {
  if (n < 2) return 0;
  return std::max<std::int64_t>(1, std::llround(static_cast<double>(n) / 5.0));
}

Manifest ingest(const fs::path& root, const IngestOptions& options) {
  if (!fs::is_directory(root)) throw IoError("dataset root " + root.string() + " is not a directory");
  Manifest m;
  m.root = root;
  m.seed = options.seed;
  std::mt19937_64 rng(options.seed);
  for (const auto& dir : sorted_children(root, true)) {
    auto files = sorted_children(dir, false);
    const std::string name = dir.filename().string();
    if (files.empty()) throw IoError("class directory '" + name + "' contains no .tnsr images");
    if (files.size() == 1 && !options.allow_train_only) {
      throw ConfigError("class '" + name + "' has a single image and cannot be split 4:1");
    }
    const auto label = m.num_classes();
    m.classes.push_back(name);
    std::vector<std::size_t> order(files.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_val = static_cast<std::size_t>(val_count(static_cast<std::int64_t>(files.size())));
    std::vector<Split> split(files.size(), Split::Train);
    for (std::size_t i = 0; i < n_val; ++i) split[order[i]] = Split::Val;
    for (std::size_t i = 0; i < files.size(); ++i) {
      m.entries.push_back({fs::relative(files[i], root).generic_string(), label, split[i]});
    }
  }
  if (m.classes.empty()) throw IoError("dataset root " + root.string() + " has no class directories");
  return m;
}

void write_manifest_csv(const Manifest& m, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "path,label,split\n";
  for (const auto& e : m.entries) out << e.path << ',' << e.label << ',' << split_name(e.split) << '\n';
}

Manifest read_manifest_csv(const fs::path& path, const fs::path& root) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  Manifest m;
  m.root = root;
  std::string line;
  std::getline(in, line);
  if (line != "path,label,split") throw IoError(path.string() + ": unexpected header '" + line + "'");
  std::map<std::int64_t, std::string> names;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto a = line.find(','), b = line.rfind(',');
    if (a == std::string::npos || a == b) throw IoError(path.string() + ": malformed row '" + line + "'");
    Entry e;
    e.path = line.substr(0, a);
    e.label = std::stoll(line.substr(a + 1, b - a - 1));
    const std::string s = line.substr(b + 1);
    if (s != "train" && s != "val") throw IoError(path.string() + ": unknown split '" + s + "'");
    e.split = s == "train" ? Split::Train : Split::Val;
    names[e.label] = fs::path(e.path).parent_path().generic_string();
    m.entries.push_back(std::move(e));
  }
  std::int64_t expected = 0;
  for (const auto& [label, name] : names) {
    if (label != expected++) throw IoError(path.string() + ": labels are not dense");
    m.classes.push_back(name);
  }
  return m;
}

Image image_from_tensor(const Tensor& t) {
  if (t.rank() != 3 || t.dim(2) != 3) {
    throw ShapeError("image tensors must be H x W x 3, got " + to_string(t.shape()));
  }
  return {t.dim(0), t.dim(1), {t.data().begin(), t.data().end()}};
}

Tensor image_to_tensor(const Image& img) {
  return Tensor::from_data({img.height, img.width, 3}, img.pixels);
}

Image load_image(const fs::path& path) {
  try {
    return image_from_tensor(archive::load_tensor(path));
  } catch (const ShapeError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void save_image(const fs::path& path, const Image& img) {
  archive::save_tensor(path, image_to_tensor(img), archive::DType::F32);
}

std::vector<TileRect> tile_grid(std::int64_t height, std::int64_t width, std::int64_t tile) {
  if (tile < 1) throw ConfigError("tile size must be positive");
  std::vector<TileRect> out;
  for (std::int64_t r = 0; r < height / tile; ++r)
    for (std::int64_t c = 0; c < width / tile; ++c) out.push_back({r * tile, c * tile});
  return out;
}

double luminance(const Image& img, std::int64_t y, std::int64_t x) {
  return 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
}

double border_mean(const Image& img) {
  double s = 0;
  std::int64_t n = 0;
  for (std::int64_t y = 0; y < img.height; ++y)
    for (std::int64_t x = 0; x < img.width; ++x) {
      if (y != 0 && y != img.height - 1 && x != 0 && x != img.width - 1) continue;
      s += luminance(img, y, x);
      ++n;
    }
  return n ? s / static_cast<double>(n) : 0.0;
}

TileVerdict classify_tile(const Image& img, const TileRect& r, std::int64_t tile, double border,
                          const TileFilter& filter) {
  double sum = 0;
  for (std::int64_t y = r.y; y < r.y + tile; ++y)
    for (std::int64_t x = r.x; x < r.x + tile; ++x) sum += luminance(img, y, x);
  const double n = static_cast<double>(tile * tile);
  const double mean = sum / n;
  double ss = 0;
  for (std::int64_t y = r.y; y < r.y + tile; ++y)
    for (std::int64_t x = r.x; x < r.x + tile; ++x) {
      const double d = luminance(img, y, x) - mean;
      ss += d * d;
    }
  if (ss / n < filter.min_variance) return TileVerdict::Blank;
  if (std::abs(mean - border) < filter.border_delta) return TileVerdict::Background;
  return TileVerdict::Keep;
}

TilingReport generate_tiny(const fs::path& src, const fs::path& dst, std::int64_t tile,
                           const TileFilter& filter) {
  if (!fs::is_directory(src)) throw IoError("source " + src.string() + " is not a directory");
  TilingReport report;
  for (const auto& dir : sorted_children(src, true)) {
    for (const auto& file : sorted_children(dir, false)) {
      const Image img = load_image(file);
      ++report.images;
      if (img.height < tile || img.width < tile) {
        ++report.skipped_images;
        std::string w = file.string() + ": " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                        " is smaller than one " + std::to_string(tile) + "px tile, skipped";
        std::cerr << "warning: " << w << '\n';
        report.warnings.push_back(std::move(w));
        continue;
      }
      const double border = border_mean(img);
      for (const auto& r : tile_grid(img.height, img.width, tile)) {
        ++report.raw_tiles;
        switch (classify_tile(img, r, tile, border, filter)) {
          case TileVerdict::Blank: ++report.blank; continue;
          case TileVerdict::Background: ++report.background; continue;
          case TileVerdict::Keep: break;
        }
        const fs::path out_dir = dst / dir.filename();
        fs::create_directories(out_dir);
        const std::string name = file.stem().string() + "_r" + std::to_string(r.y / tile) + "_c" +
                                 std::to_string(r.x / tile) + ".tnsr";
        save_image(out_dir / name, crop(img, r.y, r.x, tile, tile));
        ++report.kept;
      }
    }
  }
  return report;
}

Regime parse_regime(const std::string& name) {
  if (name == "none") return Regime::None;
  if (name == "standard") return Regime::Standard;
  if (name == "mixup") return Regime::Mixup;
  throw ConfigError("unknown augmentation regime '" + name + "' (expected none, standard, mixup)");
}

std::string regime_name(Regime r) {
  switch (r) {
    case Regime::None: return "none";
    case Regime::Standard: return "standard";
    case Regime::Mixup: return "mixup";
  }
  return "?";
}

Normalization compute_normalization(const std::vector<const Image*>& images) {
  Normalization norm;
  std::array<double, 3> sum{};
  double n = 0;
  for (const Image* img : images) {
    for (std::size_t i = 0; i < img->pixels.size(); ++i) sum[i % 3] += img->pixels[i];
    n += static_cast<double>(img->height * img->width);
  }
  if (n == 0) throw ConfigError("cannot compute normalization statistics of an empty image set");
  for (int c = 0; c < 3; ++c) norm.mean[static_cast<std::size_t>(c)] = sum[static_cast<std::size_t>(c)] / n;
  std::array<double, 3> ss{};
  for (const Image* img : images) {
    for (std::size_t i = 0; i < img->pixels.size(); ++i) {
      const double d = img->pixels[i] - norm.mean[i % 3];
      ss[i % 3] += d * d;
    }
  }
  for (std::size_t c = 0; c < 3; ++c) {
    const double sd = std::sqrt(ss[c] / n);
    norm.stddev[c] = sd > 1e-12 ? sd : 1.0;
  }
  return norm;
}

Image flip_horizontal(const Image& img) {
  Image out = img;
  for (std::int64_t y = 0; y < img.height; ++y)
    for (std::int64_t x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
  return out;
}

Image resize_shorter(const Image& img, std::int64_t side) {
  const std::int64_t shorter = std::min(img.height, img.width);
  if (shorter == side) return img;
  const auto scaled = [&](std::int64_t e) {
    return std::max<std::int64_t>(1, std::llround(static_cast<double>(e) * static_cast<double>(side) /
                                                  static_cast<double>(shorter)));
  };
  Image out{scaled(img.height), scaled(img.width), {}};
  out.pixels.resize(static_cast<std::size_t>(out.height * out.width * 3));
  const auto source = [](std::int64_t o, std::int64_t in, std::int64_t outn, std::int64_t& lo,
                         std::int64_t& hi, double& t) {
    double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    lo = static_cast<std::int64_t>(s);
    hi = std::min(lo + 1, in - 1);
    t = s - static_cast<double>(lo);
  };
  for (std::int64_t y = 0; y < out.height; ++y) {
    std::int64_t y0, y1;
    double ty;
    source(y, img.height, out.height, y0, y1, ty);
    for (std::int64_t x = 0; x < out.width; ++x) {
      std::int64_t x0, x1;
      double tx;
      source(x, img.width, out.width, x0, x1, tx);
      for (int c = 0; c < 3; ++c) {
        const double top = img.at(y0, x0, c) + tx * (img.at(y0, x1, c) - img.at(y0, x0, c));
        const double bottom = img.at(y1, x0, c) + tx * (img.at(y1, x1, c) - img.at(y1, x0, c));
        out.at(y, x, c) = top + ty * (bottom - top);
      }
    }
  }
  return out;
}

Image crop(const Image& img, std::int64_t y0, std::int64_t x0, std::int64_t h, std::int64_t w) {
  if (y0 < 0 || x0 < 0 || y0 + h > img.height || x0 + w > img.width) {
    throw ShapeError("crop " + std::to_string(h) + "x" + std::to_string(w) + " at (" + std::to_string(y0) +
                     "," + std::to_string(x0) + ") leaves the " + std::to_string(img.height) + "x" +
                     std::to_string(img.width) + " image");
  }
  Image out{h, w, std::vector<double>(static_cast<std::size_t>(h * w * 3))};
  for (std::int64_t y = 0; y < h; ++y) {
    const auto* row = &img.pixels[static_cast<std::size_t>(((y0 + y) * img.width + x0) * 3)];
    std::copy(row, row + w * 3, &out.pixels[static_cast<std::size_t>(y * w * 3)]);
  }
  return out;
}

Image pad(const Image& img, std::int64_t p) {
  Image out{img.height + 2 * p, img.width + 2 * p, {}};
  out.pixels.assign(static_cast<std::size_t>(out.height * out.width * 3), 0.0);
  for (std::int64_t y = 0; y < img.height; ++y)
    for (std::int64_t x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y + p, x + p, c) = img.at(y, x, c);
  return out;
}

namespace {

Image centre_crop(const Image& img, std::int64_t size) {
  return crop(img, (img.height - size) / 2, (img.width - size) / 2, size, size);
}

}  // namespace

Image augment(const Image& img, std::int64_t crop_size, bool train, std::mt19937_64& rng) {
  const bool large = crop_size > 64;
  Image base = large ? resize_shorter(img, crop_size * 256 / 224) : img;
  if (!large && (base.height != crop_size || base.width != crop_size)) {
    base = centre_crop(resize_shorter(base, crop_size), crop_size);
  }
  if (!train) return large ? centre_crop(base, crop_size) : base;

  if (!large) base = pad(base, 4);
  std::uniform_int_distribution<std::int64_t> dy(0, base.height - crop_size), dx(0, base.width - crop_size);
  const auto y = dy(rng);
  const auto x = dx(rng);
  Image out = crop(base, y, x, crop_size, crop_size);
  if (std::bernoulli_distribution(0.5)(rng)) out = flip_horizontal(out);
  return out;
}

void normalize_into(const Image& img, const Normalization& norm, double* out) {
  const std::int64_t plane = img.height * img.width;
  for (std::int64_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      out[static_cast<std::int64_t>(c) * plane + i] =
          (img.pixels[static_cast<std::size_t>(i * 3) + c] - norm.mean[c]) / norm.stddev[c];
    }
}

MixedBatch mixup_batch(const Tensor& xa, const Tensor& ya, const Tensor& xb, const Tensor& yb,
                       double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("mixup lambda must lie in [0, 1]");
  if (xa.shape() != xb.shape() || ya.shape() != yb.shape()) {
    throw ShapeError("mixup operands differ: " + to_string(xa.shape()) + " vs " + to_string(xb.shape()));
  }
  auto mix = [lambda](const Tensor& a, const Tensor& b) {
    std::vector<double> v(a.data().size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = lambda * a.data()[i] + (1.0 - lambda) * b.data()[i];
    return Tensor::from_data(a.shape(), std::move(v));
  };
  return {mix(xa, xb), mix(ya, yb)};
}

double sample_beta(double alpha, std::mt19937_64& rng) {
  if (!(alpha > 0)) throw ConfigError("mixup alpha must be positive");
  std::gamma_distribution<double> g(alpha, 1.0);
  const double a = g(rng), b = g(rng);
  return a + b > 0 ? a / (a + b) : 0.5;
}

Tensor one_hot(const std::vector<std::int64_t>& labels, std::int64_t classes) {
  auto t = Tensor::zeros({static_cast<std::int64_t>(labels.size()), classes});
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) throw ConfigError("label out of range");
    d[i * static_cast<std::size_t>(classes) + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return t;
}

Dataset Dataset::load(Manifest manifest) {
  Dataset ds;
  ds.images.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) ds.images.push_back(load_image(manifest.root / e.path));
  ds.manifest = std::move(manifest);
  return ds;
}

std::vector<const Image*> Dataset::images_of(Split split) const {
  std::vector<const Image*> out;
  for (auto i : manifest.indices(split)) out.push_back(&images[i]);
  return out;
}

Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& indices, std::int64_t crop_size,
                 bool train, const Normalization& norm, std::mt19937_64& rng) {
  const auto n = static_cast<std::int64_t>(indices.size());
  const std::int64_t per = 3 * crop_size * crop_size;
  std::vector<double> buf(static_cast<std::size_t>(n * per));
  Batch b;
  for (std::int64_t i = 0; i < n; ++i) {
    const auto idx = indices[static_cast<std::size_t>(i)];
    Image img = augment(ds.images[idx], crop_size, train, rng);
    normalize_into(img, norm, &buf[static_cast<std::size_t>(i * per)]);
    b.labels.push_back(ds.manifest.entries[idx].label);
  }
  b.inputs = Tensor::from_data({n, 3, crop_size, crop_size}, std::move(buf));
  return b;
}

std::vector<ClassCount> class_counts(const Manifest& m) {
  std::vector<ClassCount> out;
  for (const auto& c : m.classes) out.push_back({c, 0, 0});
  for (const auto& e : m.entries) {
    auto& c = out[static_cast<std::size_t>(e.label)];
    (e.split == Split::Train ? c.train : c.val) += 1;
  }
  return out;
}

std::string stats_csv(const Manifest& m, const std::optional<fs::path>& category_map) {
  const auto counts = class_counts(m);
  std::ostringstream out;
  out << "class,train,val,total\n";
  for (const auto& c : counts) out << c.name << ',' << c.train << ',' << c.val << ',' << c.total() << '\n';
  if (!category_map) return out.str();

  std::ifstream in(*category_map);
  if (!in) throw IoError("cannot read category map " + category_map->string());
  std::map<std::string, std::string> category_of;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line == "class,category") continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw IoError(category_map->string() + ": malformed row '" + line + "'");
    category_of[line.substr(0, comma)] = line.substr(comma + 1);
  }
  if (category_of.empty()) return out.str();

  std::map<std::string, ClassCount> groups;
  std::map<std::string, std::int64_t> members;
  for (const auto& c : counts) {
    auto it = category_of.find(c.name);
    const std::string cat = it == category_of.end() ? "uncategorized" : it->second;
    groups[cat].train += c.train;
    groups[cat].val += c.val;
    ++members[cat];
  }
  out << "\ncategory,classes,train,val,total\n";
  for (const auto& [cat, g] : groups) {
    out << cat << ',' << members[cat] << ',' << g.train << ',' << g.val << ',' << g.total() << '\n';
  }
  return out.str();
}

Image synth_texture(std::int64_t label, std::int64_t size, std::mt19937_64& rng, std::int64_t classes) {
  constexpr double pi = std::numbers::pi;
  const double k = static_cast<double>(label) / static_cast<double>(std::max<std::int64_t>(classes, 1));
  const double angle = pi * k;
  const double freq = 2.0 + 1.5 * static_cast<double>(label % 4);
  std::array<double, 3> tint;
  for (int c = 0; c < 3; ++c) tint[static_cast<std::size_t>(c)] = 0.5 + 0.5 * std::cos(2 * pi * (k + c / 3.0));

  std::uniform_real_distribution<double> phase(0.0, 2 * pi);
  std::normal_distribution<double> noise(0.0, 0.05);
  const double ph = phase(rng);
  Image img{size, size, std::vector<double>(static_cast<std::size_t>(size * size * 3))};
  for (std::int64_t y = 0; y < size; ++y)
    for (std::int64_t x = 0; x < size; ++x) {
      const double u = (static_cast<double>(x) * std::cos(angle) + static_cast<double>(y) * std::sin(angle)) /
                       static_cast<double>(size);
      const double wave = std::sin(2 * pi * freq * u + ph);
      for (int c = 0; c < 3; ++c) {
        const double v = 0.5 + 0.35 * wave * tint[static_cast<std::size_t>(c)] + noise(rng);
        img.at(y, x, c) = std::clamp(v, 0.0, 1.0);
      }
    }
  return img;
}

void write_synthetic_dataset(const fs::path& root, const SynthOptions& o) {
  if (o.classes < 2 || o.per_class < 1 || o.size < 1) throw ConfigError("invalid synthetic dataset options");
  std::mt19937_64 rng(o.seed);
  for (std::int64_t c = 0; c < o.classes; ++c) {
    char cls[32];
    std::snprintf(cls, sizeof cls, "texture_%02lld", static_cast<long long>(c));
    fs::create_directories(root / cls);
    for (std::int64_t i = 0; i < o.per_class; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "img_%04lld.tnsr", static_cast<long long>(i));
      save_image(root / cls / name, synth_texture(c, o.size, rng, o.classes));
    }
  }
}

}  // namespace cafpn::data
