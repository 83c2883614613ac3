#include "cafpn/backbone.hpp"

#include "cafpn/error.hpp"
#include "cafpn/ops.hpp"

namespace cafpn {

BackboneSpec BackboneSpec::from_depth(int depth) {
  switch (depth) {
    case 18:
      return {BackboneFamily::ImageNet, 18, {2, 2, 2, 2}, {64, 128, 256, 512}, 64, 224};
    case 34:
      return {BackboneFamily::ImageNet, 34, {3, 4, 6, 3}, {64, 128, 256, 512}, 64, 224};
    case 20:
      return {BackboneFamily::Cifar, 20, {3, 3, 3}, {16, 32, 64}, 16, 32};
    case 56:
      return {BackboneFamily::Cifar, 56, {9, 9, 9}, {16, 32, 64}, 16, 32};
    default:
      throw ConfigError("unsupported backbone depth " + std::to_string(depth) +
                        " (supported: 18, 34, 20, 56)");
  }
}

BackboneSpec BackboneSpec::custom(BackboneFamily family, std::vector<int> blocks,
                                  std::vector<std::int64_t> stage_channels,
                                  std::int64_t stem_channels, std::int64_t input_size) {
  BackboneSpec s{family, 0, std::move(blocks), std::move(stage_channels), stem_channels, input_size};
  s.validate();
  return s;
}

std::vector<std::int64_t> BackboneSpec::level_extents() const {
  std::vector<std::int64_t> out;
  std::int64_t e = input_size;
  if (family == BackboneFamily::ImageNet) {
    e = (e + 2 * 3 - 7) / 2 + 1;  // stem conv
    e = (e + 2 * 1 - 3) / 2 + 1;  // max pool
  }
  for (std::size_t s = 0; s < levels(); ++s) {
    if (s > 0) e = (e + 2 - 3) / 2 + 1;
    out.push_back(e);
  }
  return out;
}

void BackboneSpec::validate() const {
  if (blocks.empty() || blocks.size() != stage_channels.size()) {
    throw ConfigError("backbone needs one block count per stage");
  }
  for (int b : blocks) {
    if (b < 1) throw ConfigError("every backbone stage needs at least one block");
  }
  for (auto c : stage_channels) {
    if (c < 1) throw ConfigError("backbone stage channels must be positive");
  }
  if (stem_channels < 1 || input_size < 1) throw ConfigError("invalid backbone stem or input size");
  auto extents = level_extents();
  for (std::size_t i = 0; i + 1 < extents.size(); ++i) {
    if (extents[i] != 2 * extents[i + 1]) {
      throw ConfigError("input size " + std::to_string(input_size) +
                        " does not give a factor-2 level chain");
    }
  }
}

Backbone::Backbone(const BackboneSpec& spec, nn::Registry& reg, const std::string& prefix,
                   std::mt19937_64& rng)
    : spec_(spec) {
  spec_.validate();
  if (spec_.family == BackboneFamily::ImageNet) {
    stem_ = nn::Conv2d::create(reg, prefix + "/stem/conv", 3, spec_.stem_channels, 7, 2, 3, false, rng);
  } else {
    stem_ = nn::Conv2d::create(reg, prefix + "/stem/conv", 3, spec_.stem_channels, 3, 1, 1, false, rng);
  }
  std::int64_t in = spec_.stem_channels;
  for (std::size_t s = 0; s < spec_.levels(); ++s) {
    std::vector<Block> blocks;
    const std::int64_t out = spec_.stage_channels[s];
    for (int b = 0; b < spec_.blocks[s]; ++b) {
      const int stride = (s > 0 && b == 0) ? 2 : 1;
      const std::string p = prefix + "/stage" + std::to_string(s + 1) + "/block" + std::to_string(b + 1);
      Block blk;
      blk.bn1 = nn::BatchNorm2d::create(reg, p + "/bn1", in);
      blk.conv1 = nn::Conv2d::create(reg, p + "/conv1", in, out, 3, stride, 1, false, rng);
      blk.bn2 = nn::BatchNorm2d::create(reg, p + "/bn2", out);
      blk.conv2 = nn::Conv2d::create(reg, p + "/conv2", out, out, 3, 1, 1, false, rng);
      if (stride != 1 || in != out) {
        blk.shortcut = nn::Conv2d::create(reg, p + "/shortcut", in, out, 1, stride, 0, false, rng);
      }
      blocks.push_back(std::move(blk));
      in = out;
    }
    stages_.push_back(std::move(blocks));
  }
  final_bn_ = nn::BatchNorm2d::create(reg, prefix + "/final_bn", in);
}

Tensor Backbone::Block::preact(const Tensor& x, nn::Mode mode) const {
  return ops::relu(bn1(x, mode));
}

Tensor Backbone::Block::forward(const Tensor& x, const Tensor& activated, nn::Mode mode) const {
  Tensor skip = shortcut ? (*shortcut)(activated) : x;
  Tensor h = conv1(activated);
  h = conv2(ops::relu(bn2(h, mode)));
  return ops::add(h, skip);
}

LevelFeatures Backbone::extract_levels(const Tensor& x, nn::Mode mode) const {
  if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != spec_.input_size ||
      x.dim(3) != spec_.input_size) {
    throw ShapeError("backbone expects N x 3 x " + std::to_string(spec_.input_size) + " x " +
                     std::to_string(spec_.input_size) + " input, got " + to_string(x.shape()));
  }
  Tensor h = stem_(x);
  if (spec_.family == BackboneFamily::ImageNet) h = ops::max_pool2d(h, 3, 2, 1);

  LevelFeatures levels;
  Tensor pending;  // pre-activation of the next block, already computed as a level output
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    const auto& blocks = stages_[s];
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      Tensor a = pending.defined() ? pending : blocks[b].preact(h, mode);
      pending = Tensor();
      h = blocks[b].forward(h, a, mode);
    }
    if (s + 1 < stages_.size()) {
      pending = stages_[s + 1].front().preact(h, mode);
      levels.push_back(pending);
    } else {
      levels.push_back(ops::relu(final_bn_(h, mode)));
    }
  }
  return levels;
}

BuiltBackbone build_backbone(const BackboneSpec& spec, std::uint64_t seed) {
  BuiltBackbone out;
  std::mt19937_64 rng(seed);
  out.backbone = Backbone(spec, out.registry, "backbone", rng);
  return out;
}

}  // namespace cafpn
