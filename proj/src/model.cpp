#include "cafpn/model.hpp"

#include <cmath>
#include <random>

#include "cafpn/error.hpp"
#include "cafpn/ops.hpp"

namespace cafpn {

Fusion parse_fusion(std::string_view variant) {
  if (variant == "fpn") return Fusion::Plain;
  if (variant == "fpn-ca") return Fusion::CompetitiveAttention;
  if (variant == "fpn-srr") return Fusion::SpatialRecalibration;
  if (variant == "fpn-srr-ca") return Fusion::SrrCa;
  throw ConfigError("unknown model variant '" + std::string(variant) +
                    "' (expected fpn, fpn-ca, fpn-srr, fpn-srr-ca)");
}

std::string variant_name(Fusion fusion) {
  switch (fusion) {
    case Fusion::Plain: return "fpn";
    case Fusion::CompetitiveAttention: return "fpn-ca";
    case Fusion::SpatialRecalibration: return "fpn-srr";
    case Fusion::SrrCa: return "fpn-srr-ca";
  }
  return "?";
}

Upsampling parse_upsampling(std::string_view name) {
  if (name == "bilinear") return Upsampling::Bilinear;
  if (name == "nearest") return Upsampling::Nearest;
  if (name == "deconv" || name == "deconvolution") return Upsampling::Deconvolution;
  throw ConfigError("unknown upsampling '" + std::string(name) +
                    "' (expected bilinear, nearest, deconv)");
}

std::string upsampling_name(Upsampling u) {
  switch (u) {
    case Upsampling::Bilinear: return "bilinear";
    case Upsampling::Nearest: return "nearest";
    case Upsampling::Deconvolution: return "deconv";
  }
  return "?";
}

ModelSpec ModelSpec::standard(std::string_view variant, int depth, std::int64_t num_classes,
                              Upsampling upsampling) {
  ModelSpec spec;
  spec.backbone = BackboneSpec::from_depth(depth);
  spec.pyramid.fusion = parse_fusion(variant);
  spec.pyramid.upsampling = upsampling;
  spec.pyramid.width = spec.backbone.family == BackboneFamily::ImageNet ? 256 : 64;
  spec.pyramid.reduction = 16;
  spec.num_classes = num_classes;
  spec.validate();
  return spec;
}

void ModelSpec::validate() const {
  backbone.validate();
  pyramid.validate();
  if (num_classes < 2) throw ConfigError("a classifier needs at least 2 classes");
  if (backbone.levels() < 2) throw ConfigError("a feature pyramid needs at least 2 levels");
}

Model::Model(const ModelSpec& spec, std::uint64_t seed) : spec_(spec) {
  spec_.validate();
  std::mt19937_64 rng(seed);
  backbone_ = Backbone(spec_.backbone, registry_, "backbone", rng);
  pyramid_ = Pyramid(spec_.pyramid, spec_.backbone.stage_channels, registry_, "pyramid", rng);
  const std::int64_t features = spec_.head == HeadKind::ConcatGap
                                    ? spec_.pyramid.width * static_cast<std::int64_t>(spec_.backbone.levels())
                                    : spec_.pyramid.width;
  classifier_ = nn::Linear::create(registry_, "head/fc", features, spec_.num_classes, true, rng);
  options_.output_sigmoid = spec_.pyramid.output_sigmoid;
}

Tensor Model::forward(const Tensor& x, ForwardTrace* trace) const {
  LevelFeatures levels = backbone_.extract_levels(x, options_.mode);
  PyramidOutput pyr = pyramid_.build(levels, options_);
  Tensor pooled;
  if (spec_.head == HeadKind::ConcatGap) {
    std::vector<Tensor> parts;
    for (const auto& p : pyr.fused) parts.push_back(ops::global_avg_pool(p));
    pooled = ops::concat_channels(parts);
  } else {
    pooled = ops::global_avg_pool(pyr.fused.front());
    for (std::size_t i = 1; i < pyr.fused.size(); ++i) {
      pooled = ops::add(pooled, ops::global_avg_pool(pyr.fused[i]));
    }
  }
  Tensor logits = classifier_(pooled);
  if (trace) {
    trace->levels = std::move(levels);
    trace->pyramid = std::move(pyr);
  }
  return logits;
}

std::vector<archive::NamedTensor> Model::checkpoint_records(
    const std::vector<archive::NamedTensor>& extra) const {
  std::vector<archive::NamedTensor> out{{"meta/model_spec", encode_model_spec(spec_)}};
  for (auto& r : registry_.state()) out.push_back(std::move(r));
  for (const auto& r : extra) out.push_back(r);
  return out;
}

void Model::save(const std::filesystem::path& path,
                 const std::vector<archive::NamedTensor>& extra) const {
  archive::save_named(path, checkpoint_records(extra));
}

// Layout: version, family, depth, input, stem, stages, blocks..., channels...,
// classes, width, reduction, fusion, upsampling, head, output_sigmoid.
Tensor encode_model_spec(const ModelSpec& spec) {
  std::vector<double> v{1.0,
                        static_cast<double>(spec.backbone.family),
                        static_cast<double>(spec.backbone.depth),
                        static_cast<double>(spec.backbone.input_size),
                        static_cast<double>(spec.backbone.stem_channels),
                        static_cast<double>(spec.backbone.levels())};
  for (int b : spec.backbone.blocks) v.push_back(b);
  for (auto c : spec.backbone.stage_channels) v.push_back(static_cast<double>(c));
  v.push_back(static_cast<double>(spec.num_classes));
  v.push_back(static_cast<double>(spec.pyramid.width));
  v.push_back(static_cast<double>(spec.pyramid.reduction));
  v.push_back(static_cast<double>(spec.pyramid.fusion));
  v.push_back(static_cast<double>(spec.pyramid.upsampling));
  v.push_back(static_cast<double>(spec.head));
  v.push_back(spec.pyramid.output_sigmoid ? 1.0 : 0.0);
  const auto n = static_cast<std::int64_t>(v.size());
  return Tensor::from_data({n}, std::move(v));
}

ModelSpec decode_model_spec(const Tensor& encoded) {
  auto v = encoded.data();
  auto at = [&](std::size_t i) {
    if (i >= v.size()) throw IoError("model spec record truncated");
    return static_cast<std::int64_t>(std::llround(v[i]));
  };
  if (at(0) != 1) throw IoError("unsupported model spec version");
  ModelSpec s;
  s.backbone.family = static_cast<BackboneFamily>(at(1));
  s.backbone.depth = static_cast<int>(at(2));
  s.backbone.input_size = at(3);
  s.backbone.stem_channels = at(4);
  const auto stages = static_cast<std::size_t>(at(5));
  std::size_t i = 6;
  for (std::size_t k = 0; k < stages; ++k) s.backbone.blocks.push_back(static_cast<int>(at(i++)));
  for (std::size_t k = 0; k < stages; ++k) s.backbone.stage_channels.push_back(at(i++));
  s.num_classes = at(i++);
  s.pyramid.width = at(i++);
  s.pyramid.reduction = at(i++);
  s.pyramid.fusion = static_cast<Fusion>(at(i++));
  s.pyramid.upsampling = static_cast<Upsampling>(at(i++));
  s.head = static_cast<HeadKind>(at(i++));
  s.pyramid.output_sigmoid = at(i++) != 0;
  s.validate();
  return s;
}

LoadedModel load_checkpoint(const std::filesystem::path& path) {
  auto records = archive::load_named(path);
  const archive::NamedTensor* spec_rec = nullptr;
  std::vector<archive::NamedTensor> meta;
  for (const auto& r : records) {
    if (r.name == "meta/model_spec") spec_rec = &r;
    if (r.name.rfind("meta/", 0) == 0) meta.push_back(r);
  }
  if (!spec_rec) throw IoError(path.string() + " has no meta/model_spec record");
  Model model(decode_model_spec(spec_rec->tensor), 0);
  model.registry().load_state(records, true);
  return {std::move(model), std::move(meta)};
}

std::int64_t count_checkpoint_parameters(const std::vector<archive::NamedTensor>& records) {
  auto ends_with = [](const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  std::int64_t n = 0;
  for (const auto& r : records) {
    if (r.name.rfind("meta/", 0) == 0) continue;
    if (ends_with(r.name, "/running_mean") || ends_with(r.name, "/running_var")) continue;
    n += r.tensor.numel();
  }
  return n;
}

}  // namespace cafpn
