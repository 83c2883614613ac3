#include "cafpn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cafpn/error.hpp"
#include "cafpn/ops.hpp"

namespace cafpn::train {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (epochs < 1) throw ConfigError("epochs must be positive");
  if (!(base_lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
  if (!(mixup_alpha > 0.0)) throw ConfigError("mixup alpha must be positive");
  if (mixup_hard_epochs < 0) throw ConfigError("mixup hard epochs must be non-negative");
  int prev = -1;
  for (const auto& m : milestones) {
    if (m.epoch <= prev) throw ConfigError("milestones must be strictly increasing");
    if (m.epoch >= epochs) throw ConfigError("milestone epoch " + std::to_string(m.epoch) + " is not below " + std::to_string(epochs));
    if (!(m.divisor > 1.0)) throw ConfigError("milestone divisors must exceed 1");
    prev = m.epoch;
  }
}

TrainConfig preset(std::string_view name) {
  TrainConfig c;
  c.preset = std::string(name);
  if (name == "cnh_aug" || name == "cnh_mixup" || name == "cnh_noaug") {
    c.family = BackboneFamily::ImageNet;
    c.batch_size = 64;
    c.weight_decay = 5e-4;
    if (name == "cnh_noaug") {
      c.epochs = 120;
      c.milestones = {{30, 5}, {60, 5}, {90, 5}};
    } else {
      c.epochs = 300;
      c.milestones = {{120, 5}, {200, 5}, {260, 5}};
      c.regime = name == "cnh_aug" ? data::Regime::Standard : data::Regime::Mixup;
      if (name == "cnh_mixup") c.weight_decay = 1e-4;
    }
  } else if (name == "tcnh_aug" || name == "tcnh_mixup" || name == "tcnh_noaug") {
    c.family = BackboneFamily::Cifar;
    c.batch_size = 128;
    c.weight_decay = 1e-4;
    if (name == "tcnh_noaug") {
      c.epochs = 120;
      c.milestones = {{30, 5}, {60, 5}, {90, 5}};
    } else {
      c.epochs = 300;
      c.milestones = {{100, 10}, {150, 10}, {200, 10}};
      c.regime = name == "tcnh_aug" ? data::Regime::Standard : data::Regime::Mixup;
    }
  } else if (name == "smoke") {
    c.batch_size = 20;
    c.epochs = 3;
    c.base_lr = 0.05;
    c.weight_decay = 1e-4;
    c.regime = data::Regime::Standard;
  } else if (name == "overfit") {
    c.batch_size = 20;
    c.epochs = 200;
    c.base_lr = 0.05;
    c.weight_decay = 0.0;
    c.stop_at_train_acc = 0.99;
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "'");
  }
  return c;
}

std::vector<std::string> preset_names() {
  return {"cnh_aug", "cnh_mixup", "cnh_noaug", "tcnh_aug", "tcnh_mixup", "tcnh_noaug", "smoke", "overfit"};
}

double learning_rate(const TrainConfig& cfg, int epoch) {
  double divisor = 1.0;
  for (const auto& m : cfg.milestones)
    if (epoch >= m.epoch) divisor *= m.divisor;
  return cfg.base_lr / divisor;
}

bool mixup_active(const TrainConfig& cfg, int epoch) {
  return cfg.regime == data::Regime::Mixup && epoch < cfg.epochs - cfg.mixup_hard_epochs;
}

void nesterov_update(std::span<double> theta, std::span<const double> grad, std::span<double> velocity, double lr,
                     double momentum, double weight_decay) {
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double g = grad[i] + weight_decay * theta[i];
    velocity[i] = momentum * velocity[i] + g;
    theta[i] -= lr * (g + momentum * velocity[i]);
  }
}

void SgdNesterov::step(const std::vector<nn::RegistryEntry>& params, double lr) {
  for (const auto& p : params) {
    const auto grad = p.tensor.grad();
    for (std::size_t i = 0; i < grad.size(); ++i)
      if (!std::isfinite(grad[i]))
        throw NumericError("non-finite gradient in " + p.name + " at flat index " + std::to_string(i));
  }
  for (const auto& p : params) {
    Tensor t = p.tensor;
    auto& v = velocity_[p.name];
    if (v.empty()) v.assign(static_cast<std::size_t>(t.numel()), 0.0);
    const auto grad = t.grad();
    if (grad.empty()) continue;
    nesterov_update(t.mutable_data(), grad, v, lr, momentum_, weight_decay_);
  }
}

std::string RunRecord::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,lr,train_loss,train_acc,val_acc\n";
  for (const auto& e : epochs) {
    out << e.epoch << ',' << e.lr << ',' << e.train_loss << ',' << e.train_acc << ',';
    if (e.val_acc) out << *e.val_acc;
    out << '\n';
  }
  return out.str();
}

namespace {

std::int64_t argmax_row(const Tensor& logits, std::int64_t row) {
  const auto k = logits.dim(1);
  const auto d = logits.data().subspan(static_cast<std::size_t>(row * k), static_cast<std::size_t>(k));
  return std::max_element(d.begin(), d.end()) - d.begin();
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  Shape shape = x.shape();
  const auto per = static_cast<std::size_t>(x.numel() / shape[0]);
  std::vector<double> out;
  out.reserve(rows.size() * per);
  const auto d = x.data();
  for (auto r : rows) out.insert(out.end(), d.begin() + static_cast<std::ptrdiff_t>(r * per),
                                 d.begin() + static_cast<std::ptrdiff_t>((r + 1) * per));
  shape[0] = static_cast<std::int64_t>(rows.size());
  return Tensor::from_data(std::move(shape), std::move(out));
}

void check_compatible(const Model& model, const data::Dataset& ds, std::int64_t crop) {
  if (model.spec().num_classes != ds.manifest.num_classes())
    throw ConfigError("model has " + std::to_string(model.spec().num_classes) + " classes but the dataset has " +
                      std::to_string(ds.manifest.num_classes()));
  if (model.spec().backbone.input_size != crop)
    throw ConfigError("model expects " + std::to_string(model.spec().backbone.input_size) + "px inputs, run crops " +
                      std::to_string(crop) + "px");
}

}  // namespace

RunRecord train(Model& model, const data::Dataset& ds, const TrainConfig& cfg, const data::Normalization& norm,
                const EpochCallback& on_epoch) {
  cfg.validate();
  const auto crop = cfg.crop_size();
  check_compatible(model, ds, crop);
  const auto train_idx = ds.manifest.indices(data::Split::Train);
  if (train_idx.empty()) throw ConfigError("the train split is empty");
  const bool has_val = !ds.manifest.indices(data::Split::Val).empty();
  const auto classes = model.spec().num_classes;
  const bool augment = cfg.regime != data::Regime::None;

  SgdNesterov opt(cfg.momentum, cfg.weight_decay);
  const auto params = model.registry().trainable();
  RunRecord record;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(epoch)};
    std::mt19937_64 rng(seq);
    auto order = train_idx;
    std::shuffle(order.begin(), order.end(), rng);

    const double lr = learning_rate(cfg, epoch);
    const bool mix = mixup_active(cfg, epoch);
    double loss_sum = 0.0, correct = 0.0;
    model.set_mode(nn::Mode::Train);
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch_size)) {
      const auto end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      std::vector<std::size_t> chunk(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                     order.begin() + static_cast<std::ptrdiff_t>(end));
      auto batch = data::make_batch(ds, chunk, crop, augment, norm, rng);
      const auto n = static_cast<std::int64_t>(chunk.size());
      Tensor inputs = batch.inputs;
      Tensor targets = data::one_hot(batch.labels, classes);
      double lambda = 1.0;
      std::vector<std::size_t> perm(chunk.size());
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      if (mix) {
        lambda = data::sample_beta(cfg.mixup_alpha, rng);
        std::shuffle(perm.begin(), perm.end(), rng);
        auto mixed = data::mixup_batch(inputs, targets, gather_rows(inputs, perm), gather_rows(targets, perm), lambda);
        inputs = mixed.inputs;
        targets = mixed.targets;
      }

      model.registry().zero_grad();
      Tensor logits = model.forward(inputs);
      Tensor loss = ops::softmax_cross_entropy(logits, targets);
      loss.backward();
      opt.step(params, lr);

      loss_sum += loss.item() * static_cast<double>(n);
      for (std::int64_t i = 0; i < n; ++i) {
        const auto pred = argmax_row(logits, i);
        const auto ua = static_cast<std::size_t>(i);
        correct += lambda * (pred == batch.labels[ua]) + (1.0 - lambda) * (pred == batch.labels[perm[ua]]);
      }
    }

    EpochRecord e;
    e.epoch = epoch;
    e.lr = lr;
    e.train_loss = loss_sum / static_cast<double>(order.size());
    e.train_acc = correct / static_cast<double>(order.size());
    if (has_val) e.val_acc = evaluate(model, ds, data::Split::Val, norm);
    record.epochs.push_back(e);
    if (on_epoch) on_epoch(e);
    if (cfg.stop_at_train_acc && e.train_acc >= *cfg.stop_at_train_acc) break;
  }
  model.set_mode(nn::Mode::Eval);
  return record;
}

double evaluate(Model& model, const data::Dataset& ds, data::Split split, const data::Normalization& norm,
                std::int64_t batch_size) {
  const auto crop = model.spec().backbone.input_size;
  check_compatible(model, ds, crop);
  const auto idx = ds.manifest.indices(split);
  if (idx.empty()) throw ConfigError("cannot evaluate an empty split");

  autograd::NoGradGuard no_grad;
  auto& m = model;
  const auto previous = m.mode();
  m.set_mode(nn::Mode::Eval);
  std::mt19937_64 unused(0);
  std::int64_t correct = 0;
  for (std::size_t begin = 0; begin < idx.size(); begin += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(idx.size(), begin + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(begin),
                                   idx.begin() + static_cast<std::ptrdiff_t>(end));
    auto batch = data::make_batch(ds, chunk, crop, false, norm, unused);
    auto logits = m.forward(batch.inputs);
    for (std::size_t i = 0; i < chunk.size(); ++i)
      correct += argmax_row(logits, static_cast<std::int64_t>(i)) == batch.labels[i];
  }
  m.set_mode(previous);
  return static_cast<double>(correct) / static_cast<double>(idx.size());
}

std::vector<archive::NamedTensor> run_meta(const data::Normalization& norm, std::uint64_t split_seed) {
  return {
      {"meta/norm_mean", Tensor::from_data({3}, {norm.mean[0], norm.mean[1], norm.mean[2]})},
      {"meta/norm_std", Tensor::from_data({3}, {norm.stddev[0], norm.stddev[1], norm.stddev[2]})},
      // Two 32-bit halves so the seed survives the f64 round trip.
      {"meta/split_seed", Tensor::from_data({2}, {static_cast<double>(split_seed >> 32),
                                                   static_cast<double>(split_seed & 0xffffffffu)})},
  };
}

TrainedModel load_trained(const std::filesystem::path& path) {
  auto loaded = load_checkpoint(path);
  TrainedModel out{std::move(loaded.model), {}, 0};
  bool has_mean = false, has_std = false;
  for (const auto& r : loaded.meta) {
    const auto d = r.tensor.data();
    if (r.name == "meta/norm_mean" && d.size() == 3) {
      std::copy(d.begin(), d.end(), out.norm.mean.begin());
      has_mean = true;
    } else if (r.name == "meta/norm_std" && d.size() == 3) {
      std::copy(d.begin(), d.end(), out.norm.stddev.begin());
      has_std = true;
    } else if (r.name == "meta/split_seed" && d.size() == 2) {
      out.split_seed = (static_cast<std::uint64_t>(d[0]) << 32) | static_cast<std::uint64_t>(d[1]);
    }
  }
  if (!has_mean || !has_std) throw IoError(path.string() + ": checkpoint lacks normalization records");
  out.model.set_mode(nn::Mode::Eval);
  return out;
}

}  // namespace cafpn::train
