#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cafpn/nn.hpp"

namespace cafpn {

enum class BackboneFamily {
  ImageNet,  // 7x7/2 conv + 3x3/2 max pool stem, four stages
  Cifar,     // 3x3 conv stem, three stages
};

struct BackboneSpec {
  BackboneFamily family = BackboneFamily::Cifar;
  int depth = 0;                              // 0 for custom layouts
  std::vector<int> blocks;                    // residual blocks per stage
  std::vector<std::int64_t> stage_channels;   // output channels per stage
  std::int64_t stem_channels = 16;
  std::int64_t input_size = 32;

  // Pre-activation ResNet-18/34 (224 input) or ResNet-20/56 (32 input).
  static BackboneSpec from_depth(int depth);
  // Free-form layout, used for tiny gradient-check models.
  static BackboneSpec custom(BackboneFamily family, std::vector<int> blocks,
                             std::vector<std::int64_t> stage_channels,
                             std::int64_t stem_channels, std::int64_t input_size);

  std::size_t levels() const { return stage_channels.size(); }
  // Spatial extent of each level output (level 1 first).
  std::vector<std::int64_t> level_extents() const;
  void validate() const;
};

// Stage outputs ordered fine -> coarse; extents halve from one to the next.
using LevelFeatures = std::vector<Tensor>;

// Pre-activation ResNet (BN -> ReLU -> conv inside every residual unit).
class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneSpec& spec, nn::Registry& reg, const std::string& prefix,
           std::mt19937_64& rng);

  // One feature map per stage: the stage output after the pre-activation
  // that the next stage (or the final BN-ReLU) applies to it.
  LevelFeatures extract_levels(const Tensor& x, nn::Mode mode) const;

  const BackboneSpec& spec() const { return spec_; }

 private:
  struct Block {
    nn::BatchNorm2d bn1;
    nn::Conv2d conv1;
    nn::BatchNorm2d bn2;
    nn::Conv2d conv2;
    std::optional<nn::Conv2d> shortcut;

    Tensor preact(const Tensor& x, nn::Mode mode) const;
    Tensor forward(const Tensor& x, const Tensor& activated, nn::Mode mode) const;
  };

  BackboneSpec spec_;
  nn::Conv2d stem_;
  std::vector<std::vector<Block>> stages_;
  nn::BatchNorm2d final_bn_;
};

struct BuiltBackbone {
  nn::Registry registry;
  Backbone backbone;
};

BuiltBackbone build_backbone(const BackboneSpec& spec, std::uint64_t seed);

}  // namespace cafpn
