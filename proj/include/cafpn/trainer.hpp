#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cafpn/data.hpp"
#include "cafpn/model.hpp"

namespace cafpn::train {

struct Milestone {
  int epoch = 0;  // 0-based; the divisor applies from this epoch on
  double divisor = 1.0;
};

struct TrainConfig {
  std::string preset = "custom";
  std::int64_t batch_size = 64;
  int epochs = 1;
  double base_lr = 0.1;
  std::vector<Milestone> milestones;
  double weight_decay = 0.0;
  double momentum = 0.9;
  data::Regime regime = data::Regime::None;
  double mixup_alpha = 1.0;
  int mixup_hard_epochs = 20;  // final epochs of a mixup run use hard targets
  std::uint64_t seed = 0;
  // Stop once an epoch's train accuracy reaches this value.
  std::optional<double> stop_at_train_acc;
  BackboneFamily family = BackboneFamily::Cifar;

  std::int64_t crop_size() const { return family == BackboneFamily::ImageNet ? 224 : 32; }
  void validate() const;
};

TrainConfig preset(std::string_view name);
std::vector<std::string> preset_names();

double learning_rate(const TrainConfig& cfg, int epoch);
bool mixup_active(const TrainConfig& cfg, int epoch);

// One Nesterov step on a flat parameter:
//   g = grad + wd * theta;  v = mu * v + g;  theta -= lr * (g + mu * v)
void nesterov_update(std::span<double> theta, std::span<const double> grad, std::span<double> velocity,
                     double lr, double momentum, double weight_decay);

class SgdNesterov {
 public:
  SgdNesterov(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  // Checks every gradient for NaN/Inf before touching any parameter.
  void step(const std::vector<nn::RegistryEntry>& params, double lr);
  const std::vector<double>& velocity(const std::string& name) const { return velocity_.at(name); }

 private:
  double momentum_, weight_decay_;
  std::unordered_map<std::string, std::vector<double>> velocity_;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  std::optional<double> val_acc;  // empty when there is no val split
};

struct RunRecord {
  std::vector<EpochRecord> epochs;
  std::string checkpoint;

  // "epoch,lr,train_loss,train_acc,val_acc"
  std::string to_csv() const;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Trains on the train split with normalization computed from it.
RunRecord train(Model& model, const data::Dataset& ds, const TrainConfig& cfg, const data::Normalization& norm,
                const EpochCallback& on_epoch = {});

// Top-1 accuracy, eval mode, centre crop. Restores the previous mode.
double evaluate(Model& model, const data::Dataset& ds, data::Split split, const data::Normalization& norm,
                std::int64_t batch_size = 64);

// Checkpoint meta records for the input normalization and the split seed.
std::vector<archive::NamedTensor> run_meta(const data::Normalization& norm, std::uint64_t split_seed);

struct TrainedModel {
  Model model;
  data::Normalization norm;
  std::uint64_t split_seed = 0;
};

TrainedModel load_trained(const std::filesystem::path& path);

}  // namespace cafpn::train
