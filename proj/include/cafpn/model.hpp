#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "cafpn/archive.hpp"
#include "cafpn/backbone.hpp"
#include "cafpn/pyramid.hpp"

namespace cafpn {

enum class HeadKind {
  ConcatGap,  // GAP of every pyramid level, concatenated, one FC layer
  SumGap,     // GAP of every level, summed, one FC layer
};

struct ModelSpec {
  BackboneSpec backbone;
  PyramidConfig pyramid;
  std::int64_t num_classes = 98;
  HeadKind head = HeadKind::ConcatGap;

  // Named variant ("fpn", "fpn-ca", "fpn-srr", "fpn-srr-ca") over a
  // standard-depth backbone, with the default lateral width for its family.
  static ModelSpec standard(std::string_view variant, int depth, std::int64_t num_classes = 98,
                            Upsampling upsampling = Upsampling::Bilinear);
  void validate() const;
};

Fusion parse_fusion(std::string_view variant);
std::string variant_name(Fusion fusion);
Upsampling parse_upsampling(std::string_view name);
std::string upsampling_name(Upsampling u);

// Intermediate values of one forward pass.
struct ForwardTrace {
  LevelFeatures levels;
  PyramidOutput pyramid;
};

class Model {
 public:
  Model(const ModelSpec& spec, std::uint64_t seed);
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  // x: N x 3 x S x S -> logits N x K. Filling `trace` does not alter the
  // computation.
  Tensor forward(const Tensor& x, ForwardTrace* trace = nullptr) const;

  void set_mode(nn::Mode mode) { options_.mode = mode; }
  nn::Mode mode() const { return options_.mode; }
  // Fusion hooks (forced attention, optional output sigmoid).
  FusionOptions& fusion_options() { return options_; }

  std::int64_t count_parameters() const { return registry_.count_parameters(); }

  const ModelSpec& spec() const { return spec_; }
  nn::Registry& registry() { return registry_; }
  const nn::Registry& registry() const { return registry_; }
  Backbone& backbone() { return backbone_; }
  Pyramid& pyramid() { return pyramid_; }
  nn::Linear& classifier() { return classifier_; }

  // Named-TAR0 records: "meta/model_spec", then every registry tensor, then
  // `extra` (names should start with "meta/").
  std::vector<archive::NamedTensor> checkpoint_records(
      const std::vector<archive::NamedTensor>& extra = {}) const;
  void save(const std::filesystem::path& path,
            const std::vector<archive::NamedTensor>& extra = {}) const;

 private:
  ModelSpec spec_;
  nn::Registry registry_;
  Backbone backbone_;
  Pyramid pyramid_;
  nn::Linear classifier_;
  FusionOptions options_;
};

Tensor encode_model_spec(const ModelSpec& spec);
ModelSpec decode_model_spec(const Tensor& encoded);

struct LoadedModel {
  Model model;
  std::vector<archive::NamedTensor> meta;  // every "meta/..." record
};

LoadedModel load_checkpoint(const std::filesystem::path& path);

// Sum of numel over the trainable records of a checkpoint (skips meta/ and
// running statistics).
std::int64_t count_checkpoint_parameters(const std::vector<archive::NamedTensor>& records);

}  // namespace cafpn
