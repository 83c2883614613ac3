#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cafpn/backbone.hpp"
#include "cafpn/nn.hpp"

namespace cafpn {

enum class Upsampling { Bilinear, Nearest, Deconvolution };

enum class Fusion {
  Plain,                 // X_P = X_L + X_U
  CompetitiveAttention,  // channel gates from both flows' global descriptors
  SpatialRecalibration,  // pixel gates from both flows' cross-channel means
  SrrCa,                 // both gates, then per-flow 1x1 conv + BN before the sum
};

struct PyramidConfig {
  std::int64_t width = 256;      // lateral width C_d
  Upsampling upsampling = Upsampling::Bilinear;
  Fusion fusion = Fusion::Plain;
  std::int64_t reduction = 16;   // excitation bottleneck divisor t
  // Adds a sigmoid to each SRR-CA branch after its combination conv + BN.
  bool output_sigmoid = false;

  std::int64_t bottleneck() const { return 2 * width / reduction; }
  void validate() const;
};

// The two inputs of one merge: X_L (lateral projection of the bottom-up
// "spatial flow") and X_U (upsampled top-down "semantic flow").
struct FlowPair {
  Tensor lateral;
  Tensor upsampled;
};

// Excitation weights of one competitive-attention site (no biases).
struct CAParams {
  Tensor w1;  // (2C/t) x 2C
  Tensor w2;  // 2C x (2C/t)

  static CAParams create(nn::Registry& reg, const std::string& prefix, std::int64_t width,
                         std::int64_t reduction, std::mt19937_64& rng);
};

// Channel gates in (0, 1): the first and second halves of the excitation
// output, applied to X_L and X_U respectively. Each is N x C.
struct CAActivations {
  Tensor spatial;
  Tensor semantic;
};

struct SRRParams {
  nn::Conv2d reduce;        // 2 -> 2, 3x3, stride 2, pad 1
  nn::BatchNorm2d reduce_bn;
  nn::Conv2d rescale;       // 2 -> 2, 1x1 (anti-aliasing after the bilinear resize)

  static SRRParams create(nn::Registry& reg, const std::string& prefix, std::mt19937_64& rng);
};

// Per-flow 1x1 C_d -> C_d convolutions with BN used by SRR-CA.
struct CombinationParams {
  nn::Conv2d conv_lateral;
  nn::BatchNorm2d bn_lateral;
  nn::Conv2d conv_upsampled;
  nn::BatchNorm2d bn_upsampled;

  static CombinationParams create(nn::Registry& reg, const std::string& prefix,
                                  std::int64_t width, std::mt19937_64& rng);
};

// Pixel gates in (0, 1), N x 1 x H x W each.
struct SRRMaps {
  Tensor spatial;
  Tensor semantic;
};

struct FusionOptions {
  nn::Mode mode = nn::Mode::Eval;
  // Test hook: replaces every attention gate (channel and pixel) by this
  // constant.
  std::optional<double> forced_attention;
  bool output_sigmoid = false;
};

Tensor fuse_plain(const FlowPair& pair);

struct CAResult {
  CAActivations activations;
  Tensor fused;
};
CAResult competitive_attention(const FlowPair& pair, const CAParams& params,
                               const FusionOptions& options = {});

SRRMaps srr_maps(const FlowPair& pair, const SRRParams& params, const FusionOptions& options = {});

struct SRRResult {
  SRRMaps maps;
  Tensor fused;
};
SRRResult fuse_srr(const FlowPair& pair, const SRRParams& params, const FusionOptions& options = {});

struct SrrCaResult {
  CAActivations activations;
  SRRMaps maps;
  Tensor fused;
};
SrrCaResult fuse_srr_ca(const FlowPair& pair, const CAParams& ca, const SRRParams& srr,
                        const CombinationParams& combo, const FusionOptions& options = {});

// Doubles the extents of the previous pyramid output. `deconv` is required
// for Upsampling::Deconvolution and ignored otherwise.
Tensor top_down_step(const Tensor& coarser, Upsampling strategy,
                     const nn::TransposedConv2d* deconv = nullptr);

// What one merge produced, for introspection. `level` is 1-based, 1 being
// the finest level.
struct MergeRecord {
  int level = 0;
  FlowPair inputs;
  std::optional<CAActivations> ca;
  std::optional<SRRMaps> srr;
};

struct PyramidOutput {
  std::vector<Tensor> laterals;  // X_L per level, finest first
  std::vector<Tensor> fused;     // X_P per level; the coarsest is its lateral
  std::vector<MergeRecord> merges;  // coarsest merge first
};

class Pyramid {
 public:
  struct Merge {
    std::optional<nn::TransposedConv2d> upsample;
    std::optional<CAParams> ca;
    std::optional<SRRParams> srr;
    std::optional<CombinationParams> combination;
  };

  Pyramid() = default;
  Pyramid(const PyramidConfig& cfg, const std::vector<std::int64_t>& level_channels,
          nn::Registry& reg, const std::string& prefix, std::mt19937_64& rng);

  std::vector<Tensor> lateral_project(const LevelFeatures& levels) const;
  PyramidOutput build(const LevelFeatures& levels, const FusionOptions& options) const;

  const PyramidConfig& config() const { return cfg_; }
  std::size_t levels() const { return laterals_.size(); }
  // Merge that produces X_P at `level` (1-based, 1 .. levels()-1).
  Merge& merge(int level);
  const Merge& merge(int level) const;
  nn::Conv2d& lateral(int level);

 private:
  PyramidConfig cfg_;
  std::vector<nn::Conv2d> laterals_;
  std::vector<Merge> merges_;  // index 0 -> level 1
};

}  // namespace cafpn
