#include "cafpn/nn.hpp"

#include <cmath>
#include <unordered_map>

#include "cafpn/error.hpp"
#include "cafpn/ops.hpp"

namespace cafpn::nn {

Tensor Registry::add(const std::string& name, Tensor t, bool trainable) {
  for (const auto& e : entries_) {
    if (e.name == name) throw ConfigError("duplicate tensor name '" + name + "'");
  }
  if (trainable) t.set_requires_grad(true);
  entries_.push_back({name, t, trainable});
  return t;
}

Tensor Registry::param(const std::string& name, Tensor t) { return add(name, std::move(t), true); }

Tensor Registry::buffer(const std::string& name, Tensor t) { return add(name, std::move(t), false); }

std::vector<RegistryEntry> Registry::trainable() const {
  std::vector<RegistryEntry> out;
  for (const auto& e : entries_) {
    if (e.trainable) out.push_back(e);
  }
  return out;
}

std::int64_t Registry::count_parameters() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) {
    if (e.trainable) n += e.tensor.numel();
  }
  return n;
}

void Registry::zero_grad() {
  for (auto& e : entries_) {
    if (e.trainable) e.tensor.zero_grad();
  }
}

std::vector<archive::NamedTensor> Registry::state() const {
  std::vector<archive::NamedTensor> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back({e.name, e.tensor.detach()});
  return out;
}

void Registry::load_state(const std::vector<archive::NamedTensor>& records, bool strict) {
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& r : records) by_name[r.name] = &r.tensor;
  std::size_t matched = 0;
  for (auto& e : entries_) {
    auto it = by_name.find(e.name);
    if (it == by_name.end()) {
      if (strict) throw IoError("checkpoint is missing tensor '" + e.name + "'");
      continue;
    }
    const Tensor& src = *it->second;
    if (src.shape() != e.tensor.shape()) {
      throw IoError("checkpoint tensor '" + e.name + "' has shape " + to_string(src.shape()) +
                    ", model expects " + to_string(e.tensor.shape()));
    }
    std::copy(src.data().begin(), src.data().end(), e.tensor.mutable_data().begin());
    ++matched;
  }
  if (strict) {
    for (const auto& r : records) {
      bool known = r.name.rfind("meta/", 0) == 0;
      for (const auto& e : entries_) known = known || e.name == r.name;
      if (!known) throw IoError("checkpoint tensor '" + r.name + "' is not part of the model");
    }
  }
}

Tensor he_normal(Shape shape, std::int64_t fan_in, std::mt19937_64& rng) {
  return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

Conv2d Conv2d::create(Registry& reg, const std::string& prefix, std::int64_t cin,
                      std::int64_t cout, int kernel, int stride, int pad, bool with_bias,
                      std::mt19937_64& rng) {
  Conv2d c;
  c.weight = reg.param(prefix + "/w", he_normal({cout, cin, kernel, kernel}, cin * kernel * kernel, rng));
  if (with_bias) c.bias = reg.param(prefix + "/b", Tensor::zeros({cout}));
  c.stride = stride;
  c.pad = pad;
  return c;
}

Tensor Conv2d::operator()(const Tensor& x) const { return ops::conv2d(x, weight, bias, stride, pad); }

TransposedConv2d TransposedConv2d::create(Registry& reg, const std::string& prefix,
                                          std::int64_t cin, std::int64_t cout,
                                          std::mt19937_64& rng) {
  TransposedConv2d d;
  // Each output pixel receives 2x2 taps from each input channel.
  d.weight = reg.param(prefix + "/w", he_normal({cin, cout, 4, 4}, cin * 4, rng));
  return d;
}

Tensor TransposedConv2d::operator()(const Tensor& x) const {
  return ops::transposed_conv2d(x, weight, {}, 2, 1);
}

BatchNorm2d BatchNorm2d::create(Registry& reg, const std::string& prefix, std::int64_t channels) {
  BatchNorm2d bn;
  bn.gamma = reg.param(prefix + "/gamma", Tensor::full({channels}, 1.0));
  bn.beta = reg.param(prefix + "/beta", Tensor::zeros({channels}));
  bn.running_mean = reg.buffer(prefix + "/running_mean", Tensor::zeros({channels}));
  bn.running_var = reg.buffer(prefix + "/running_var", Tensor::full({channels}, 1.0));
  return bn;
}

Tensor BatchNorm2d::operator()(const Tensor& x, Mode mode) const {
  if (passthrough) return x;
  Tensor rm = running_mean;
  Tensor rv = running_var;
  return ops::batch_norm(x, gamma, beta, rm, rv,
                         mode == Mode::Train ? ops::BatchNormMode::Train : ops::BatchNormMode::Eval);
}

Linear Linear::create(Registry& reg, const std::string& prefix, std::int64_t in, std::int64_t out,
                      bool with_bias, std::mt19937_64& rng) {
  Linear l;
  l.weight = reg.param(prefix + "/w", he_normal({out, in}, in, rng));
  if (with_bias) l.bias = reg.param(prefix + "/b", Tensor::zeros({out}));
  return l;
}

Tensor Linear::operator()(const Tensor& x) const { return ops::linear(x, weight, bias); }

}  // namespace cafpn::nn
