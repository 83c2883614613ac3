#include "cafpn/pyramid.hpp"

#include "cafpn/error.hpp"
#include "cafpn/ops.hpp"

namespace cafpn {

void PyramidConfig::validate() const {
  if (width < 1) throw ConfigError("pyramid width must be positive");
  if (reduction < 1) throw ConfigError("reduction ratio must be positive");
  if ((2 * width) % reduction != 0) {
    throw ConfigError("2 * width (" + std::to_string(2 * width) +
                      ") must be divisible by the reduction ratio " + std::to_string(reduction));
  }
}

CAParams CAParams::create(nn::Registry& reg, const std::string& prefix, std::int64_t width,
                          std::int64_t reduction, std::mt19937_64& rng) {
  const std::int64_t joint = 2 * width;
  const std::int64_t hidden = joint / reduction;
  CAParams p;
  p.w1 = reg.param(prefix + "/w1", nn::he_normal({hidden, joint}, joint, rng));
  p.w2 = reg.param(prefix + "/w2", nn::he_normal({joint, hidden}, hidden, rng));
  return p;
}

SRRParams SRRParams::create(nn::Registry& reg, const std::string& prefix, std::mt19937_64& rng) {
  SRRParams p;
  p.reduce = nn::Conv2d::create(reg, prefix + "/reduce", 2, 2, 3, 2, 1, false, rng);
  p.reduce_bn = nn::BatchNorm2d::create(reg, prefix + "/reduce_bn", 2);
  p.rescale = nn::Conv2d::create(reg, prefix + "/rescale", 2, 2, 1, 1, 0, true, rng);
  return p;
}

CombinationParams CombinationParams::create(nn::Registry& reg, const std::string& prefix,
                                            std::int64_t width, std::mt19937_64& rng) {
  CombinationParams p;
  p.conv_lateral = nn::Conv2d::create(reg, prefix + "/combo_lateral", width, width, 1, 1, 0, false, rng);
  p.bn_lateral = nn::BatchNorm2d::create(reg, prefix + "/combo_lateral_bn", width);
  p.conv_upsampled =
      nn::Conv2d::create(reg, prefix + "/combo_upsampled", width, width, 1, 1, 0, false, rng);
  p.bn_upsampled = nn::BatchNorm2d::create(reg, prefix + "/combo_upsampled_bn", width);
  return p;
}

namespace {

void check_pair(const FlowPair& pair) {
  if (pair.lateral.rank() != 4 || pair.lateral.shape() != pair.upsampled.shape()) {
    throw ShapeError("flow pair shapes differ: lateral " + to_string(pair.lateral.shape()) +
                     " vs upsampled " + to_string(pair.upsampled.shape()));
  }
}

CAActivations forced_channel_gates(const FlowPair& pair, double value) {
  const Shape s{pair.lateral.dim(0), pair.lateral.dim(1)};
  return {Tensor::full(s, value), Tensor::full(s, value)};
}

SRRMaps forced_pixel_gates(const FlowPair& pair, double value) {
  const Shape s{pair.lateral.dim(0), 1, pair.lateral.dim(2), pair.lateral.dim(3)};
  return {Tensor::full(s, value), Tensor::full(s, value)};
}

CAActivations channel_gates(const FlowPair& pair, const CAParams& params) {
  const std::int64_t c = pair.lateral.dim(1);
  if (params.w1.dim(1) != 2 * c) {
    throw ConfigError("competitive attention weights " + to_string(params.w1.shape()) +
                      " do not match flow width " + std::to_string(c));
  }
  Tensor squeezed = ops::concat_channels(
      {ops::global_avg_pool(pair.lateral), ops::global_avg_pool(pair.upsampled)});
  Tensor gates = ops::sigmoid(ops::linear(ops::relu(ops::linear(squeezed, params.w1)), params.w2));
  return {ops::slice_channels(gates, 0, c), ops::slice_channels(gates, c, 2 * c)};
}

}  // namespace

Tensor fuse_plain(const FlowPair& pair) {
  check_pair(pair);
  return ops::add(pair.lateral, pair.upsampled);
}

CAResult competitive_attention(const FlowPair& pair, const CAParams& params,
                               const FusionOptions& options) {
  check_pair(pair);
  CAActivations s = options.forced_attention ? forced_channel_gates(pair, *options.forced_attention)
                                             : channel_gates(pair, params);
  Tensor fused = ops::add(ops::broadcast_mul(s.spatial, pair.lateral),
                          ops::broadcast_mul(s.semantic, pair.upsampled));
  return {std::move(s), std::move(fused)};
}

SRRMaps srr_maps(const FlowPair& pair, const SRRParams& params, const FusionOptions& options) {
  check_pair(pair);
  const std::int64_t h = pair.lateral.dim(2), w = pair.lateral.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ConfigError("spatial recalibration needs even extents, got " +
                      to_string(pair.lateral.shape()));
  }
  if (options.forced_attention) return forced_pixel_gates(pair, *options.forced_attention);

  Tensor summary = ops::concat_channels(
      {ops::cross_channel_mean(pair.lateral), ops::cross_channel_mean(pair.upsampled)});
  Tensor reduced = params.reduce_bn(params.reduce(summary), options.mode);
  Tensor gates = ops::sigmoid(params.rescale(ops::bilinear_resize2x(reduced)));
  return {ops::slice_channels(gates, 0, 1), ops::slice_channels(gates, 1, 2)};
}

SRRResult fuse_srr(const FlowPair& pair, const SRRParams& params, const FusionOptions& options) {
  SRRMaps m = srr_maps(pair, params, options);
  Tensor fused = ops::add(ops::broadcast_mul(m.spatial, pair.lateral),
                          ops::broadcast_mul(m.semantic, pair.upsampled));
  return {std::move(m), std::move(fused)};
}

SrrCaResult fuse_srr_ca(const FlowPair& pair, const CAParams& ca, const SRRParams& srr,
                        const CombinationParams& combo, const FusionOptions& options) {
  check_pair(pair);
  CAActivations s = options.forced_attention ? forced_channel_gates(pair, *options.forced_attention)
                                             : channel_gates(pair, ca);
  SRRMaps m = srr_maps(pair, srr, options);
  // Channel and pixel gates are both diagonal scalings, so their order is immaterial.
  Tensor lateral = ops::broadcast_mul(s.spatial, ops::broadcast_mul(m.spatial, pair.lateral));
  Tensor upsampled = ops::broadcast_mul(s.semantic, ops::broadcast_mul(m.semantic, pair.upsampled));
  lateral = combo.bn_lateral(combo.conv_lateral(lateral), options.mode);
  upsampled = combo.bn_upsampled(combo.conv_upsampled(upsampled), options.mode);
  if (options.output_sigmoid) {
    lateral = ops::sigmoid(lateral);
    upsampled = ops::sigmoid(upsampled);
  }
  Tensor fused = ops::add(lateral, upsampled);
  return {std::move(s), std::move(m), std::move(fused)};
}

Tensor top_down_step(const Tensor& coarser, Upsampling strategy, const nn::TransposedConv2d* deconv) {
  switch (strategy) {
    case Upsampling::Bilinear:
      return ops::bilinear_resize2x(coarser);
    case Upsampling::Nearest:
      return ops::nearest_resize2x(coarser);
    case Upsampling::Deconvolution:
      if (!deconv) throw ConfigError("deconvolution upsampling requires learnable weights");
      return (*deconv)(coarser);
  }
  throw ConfigError("unknown upsampling strategy");
}

Pyramid::Pyramid(const PyramidConfig& cfg, const std::vector<std::int64_t>& level_channels,
                 nn::Registry& reg, const std::string& prefix, std::mt19937_64& rng)
    : cfg_(cfg) {
  cfg_.validate();
  if (level_channels.size() < 2) throw ConfigError("a feature pyramid needs at least 2 levels");
  for (std::size_t i = 0; i < level_channels.size(); ++i) {
    laterals_.push_back(nn::Conv2d::create(reg, prefix + "/lateral" + std::to_string(i + 1),
                                           level_channels[i], cfg_.width, 1, 1, 0, true, rng));
  }
  for (std::size_t i = 0; i + 1 < level_channels.size(); ++i) {
    const std::string p = prefix + "/merge" + std::to_string(i + 1);
    Merge m;
    if (cfg_.upsampling == Upsampling::Deconvolution) {
      m.upsample = nn::TransposedConv2d::create(reg, p + "/upsample", cfg_.width, cfg_.width, rng);
    }
    if (cfg_.fusion == Fusion::CompetitiveAttention || cfg_.fusion == Fusion::SrrCa) {
      m.ca = CAParams::create(reg, p + "/ca", cfg_.width, cfg_.reduction, rng);
    }
    if (cfg_.fusion == Fusion::SpatialRecalibration || cfg_.fusion == Fusion::SrrCa) {
      m.srr = SRRParams::create(reg, p + "/srr", rng);
    }
    if (cfg_.fusion == Fusion::SrrCa) {
      m.combination = CombinationParams::create(reg, p, cfg_.width, rng);
    }
    merges_.push_back(std::move(m));
  }
}

std::vector<Tensor> Pyramid::lateral_project(const LevelFeatures& levels) const {
  if (levels.size() != laterals_.size()) {
    throw ShapeError("pyramid built for " + std::to_string(laterals_.size()) + " levels, got " +
                     std::to_string(levels.size()));
  }
  std::vector<Tensor> out;
  out.reserve(levels.size());
  for (std::size_t i = 0; i < levels.size(); ++i) out.push_back(laterals_[i](levels[i]));
  return out;
}

PyramidOutput Pyramid::build(const LevelFeatures& levels, const FusionOptions& options) const {
  PyramidOutput out;
  out.laterals = lateral_project(levels);
  const std::size_t n = out.laterals.size();
  out.fused.resize(n);
  out.fused[n - 1] = out.laterals[n - 1];
  FusionOptions opts = options;
  opts.output_sigmoid = opts.output_sigmoid || cfg_.output_sigmoid;

  for (std::size_t k = n - 1; k-- > 0;) {
    const Merge& m = merges_[k];
    FlowPair pair{out.laterals[k],
                  top_down_step(out.fused[k + 1], cfg_.upsampling, m.upsample ? &*m.upsample : nullptr)};
    if (pair.lateral.shape() != pair.upsampled.shape()) {
      throw ShapeError("level " + std::to_string(k + 1) + ": lateral " +
                       to_string(pair.lateral.shape()) + " vs upsampled " +
                       to_string(pair.upsampled.shape()));
    }
    MergeRecord rec;
    rec.level = static_cast<int>(k + 1);
    rec.inputs = pair;
    switch (cfg_.fusion) {
      case Fusion::Plain:
        out.fused[k] = fuse_plain(pair);
        break;
      case Fusion::CompetitiveAttention: {
        auto r = competitive_attention(pair, *m.ca, opts);
        rec.ca = std::move(r.activations);
        out.fused[k] = std::move(r.fused);
        break;
      }
      case Fusion::SpatialRecalibration: {
        auto r = fuse_srr(pair, *m.srr, opts);
        rec.srr = std::move(r.maps);
        out.fused[k] = std::move(r.fused);
        break;
      }
      case Fusion::SrrCa: {
        auto r = fuse_srr_ca(pair, *m.ca, *m.srr, *m.combination, opts);
        rec.ca = std::move(r.activations);
        rec.srr = std::move(r.maps);
        out.fused[k] = std::move(r.fused);
        break;
      }
    }
    out.merges.push_back(std::move(rec));
  }
  return out;
}

Pyramid::Merge& Pyramid::merge(int level) {
  if (level < 1 || static_cast<std::size_t>(level) > merges_.size()) {
    throw ConfigError("no merge at level " + std::to_string(level));
  }
  return merges_[static_cast<std::size_t>(level - 1)];
}

const Pyramid::Merge& Pyramid::merge(int level) const {
  return const_cast<Pyramid*>(this)->merge(level);
}

nn::Conv2d& Pyramid::lateral(int level) {
  if (level < 1 || static_cast<std::size_t>(level) > laterals_.size()) {
    throw ConfigError("no lateral at level " + std::to_string(level));
  }
  return laterals_[static_cast<std::size_t>(level - 1)];
}

}  // namespace cafpn
