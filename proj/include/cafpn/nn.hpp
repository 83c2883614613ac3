#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cafpn/archive.hpp"
#include "cafpn/tensor.hpp"

namespace cafpn::nn {

enum class Mode { Train, Eval };

struct RegistryEntry {
  std::string name;
  Tensor tensor;
  bool trainable;  // false for running statistics
};

// Owns the name -> tensor table of a model. Layers keep aliasing handles to
// the tensors registered here, so updates through either side are shared.
class Registry {
 public:
  Tensor param(const std::string& name, Tensor t);
  Tensor buffer(const std::string& name, Tensor t);

  const std::vector<RegistryEntry>& entries() const { return entries_; }
  std::vector<RegistryEntry> trainable() const;
  std::int64_t count_parameters() const;
  void zero_grad();

  std::vector<archive::NamedTensor> state() const;
  // Copies values by name. With strict = false, names missing on either side
  // are skipped; shapes must always agree.
  void load_state(const std::vector<archive::NamedTensor>& records, bool strict = true);

 private:
  Tensor add(const std::string& name, Tensor t, bool trainable);
  std::vector<RegistryEntry> entries_;
};

// He-normal initialisation with the given fan-in.
Tensor he_normal(Shape shape, std::int64_t fan_in, std::mt19937_64& rng);

struct Conv2d {
  Tensor weight;  // Cout x Cin x k x k
  Tensor bias;    // Cout, or undefined
  int stride = 1;
  int pad = 0;

  static Conv2d create(Registry& reg, const std::string& prefix, std::int64_t cin,
                       std::int64_t cout, int kernel, int stride, int pad, bool with_bias,
                       std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const;
};

// 4x4 / stride 2 / pad 1 learnable upsampler (exactly doubles extents).
struct TransposedConv2d {
  Tensor weight;  // Cin x Cout x 4 x 4

  static TransposedConv2d create(Registry& reg, const std::string& prefix, std::int64_t cin,
                                 std::int64_t cout, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const;
};

struct BatchNorm2d {
  Tensor gamma, beta, running_mean, running_var;
  // Test hook: when set the layer returns its input unchanged.
  bool passthrough = false;

  static BatchNorm2d create(Registry& reg, const std::string& prefix, std::int64_t channels);
  Tensor operator()(const Tensor& x, Mode mode) const;
};

struct Linear {
  Tensor weight;  // out x in
  Tensor bias;

  static Linear create(Registry& reg, const std::string& prefix, std::int64_t in,
                       std::int64_t out, bool with_bias, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const;
};

}  // namespace cafpn::nn
