#include "cafpn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "cafpn/model.hpp"
#include "cafpn/ops.hpp"

namespace cafpn::gradcheck {

namespace {

using Loss = std::function<Tensor()>;

Result check(std::string name, std::vector<Tensor> inputs, const Loss& loss, const Options& opt) {
  for (auto& t : inputs) t.zero_grad();
  loss().backward();

  Result r;
  r.name = std::move(name);
  autograd::NoGradGuard no_grad;
  for (auto& t : inputs) {
    auto data = t.mutable_data();
    auto grad = t.grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + opt.step;
      const double up = loss().item();
      data[i] = orig - opt.step;
      const double down = loss().item();
      data[i] = orig;
      const double numeric = (up - down) / (2 * opt.step);
      const double denom = std::max({std::abs(grad[i]), std::abs(numeric), 1e-6});
      r.max_rel_error = std::max(r.max_rel_error, std::abs(grad[i] - numeric) / denom);
      ++r.entries;
    }
  }
  r.passed = r.max_rel_error < opt.tolerance;
  return r;
}

// Scalar loss touching every output entry with a distinct weight.
Loss projected(std::function<Tensor()> f, const Shape& shape, std::mt19937_64& rng) {
  Tensor probe = Tensor::randn(shape, rng);
  return [f = std::move(f), probe] { return ops::sum(ops::mul(f(), probe)); };
}

Tensor leaf(Shape s, std::mt19937_64& rng, double scale = 1.0) {
  return Tensor::randn(std::move(s), rng, scale, true);
}

}  // namespace

std::vector<Result> check_ops(const Options& opt) {
  std::mt19937_64 rng(opt.seed);
  std::vector<Result> out;
  auto add = [&](const std::string& name, std::vector<Tensor> in, std::function<Tensor()> f) {
    Shape s;
    {
      autograd::NoGradGuard g;
      s = f().shape();
    }
    out.push_back(check(name, std::move(in), projected(std::move(f), s, rng), opt));
  };

  auto x = leaf({2, 3, 5, 5}, rng);
  auto w = leaf({4, 3, 3, 3}, rng), b = leaf({4}, rng);
  add("conv2d", {x, w, b}, [=] { return ops::conv2d(x, w, b, 2, 1); });
  auto w1 = leaf({2, 3, 1, 1}, rng);
  add("conv2d_1x1", {x, w1}, [=] { return ops::conv2d(x, w1); });
  auto tw = leaf({3, 2, 4, 4}, rng);
  add("transposed_conv2d", {x, tw}, [=] { return ops::transposed_conv2d(x, tw); });

  auto r = leaf({2, 2, 3, 4}, rng);
  add("bilinear_resize2x", {r}, [=] { return ops::bilinear_resize2x(r); });
  add("nearest_resize2x", {r}, [=] { return ops::nearest_resize2x(r); });
  add("max_pool2d", {x}, [=] { return ops::max_pool2d(x, 3, 2, 1); });
  add("global_avg_pool", {x}, [=] { return ops::global_avg_pool(x); });
  add("cross_channel_mean", {x}, [=] { return ops::cross_channel_mean(x); });

  auto gamma = leaf({3}, rng), beta = leaf({3}, rng);
  auto rm = Tensor::zeros({3}), rv = Tensor::full({3}, 1.0);
  add("batch_norm_train", {x, gamma, beta}, [=]() mutable {
    return ops::batch_norm(x, gamma, beta, rm, rv, ops::BatchNormMode::Train);
  });
  auto erm = Tensor::randn({3}, rng, 0.3), erv = Tensor::uniform({3}, rng, 0.5, 1.5);
  add("batch_norm_eval", {x, gamma, beta}, [=]() mutable {
    return ops::batch_norm(x, gamma, beta, erm, erv, ops::BatchNormMode::Eval);
  });

  auto m = leaf({3, 4}, rng), m2 = leaf({3, 4}, rng);
  add("relu", {m}, [=] { return ops::relu(m); });
  add("sigmoid", {m}, [=] { return ops::sigmoid(m); });
  add("add_sub_mul_scale", {m, m2}, [=] { return ops::mul(ops::add(m, m2), ops::sub(m2, ops::scale(m, 0.5))); });
  auto lw = leaf({5, 4}, rng), lb = leaf({5}, rng);
  add("linear", {m, lw, lb}, [=] { return ops::linear(m, lw, lb); });

  auto sc = leaf({2, 3}, rng), sp = leaf({2, 1, 5, 5}, rng);
  add("broadcast_mul_channel", {sc, x}, [=] { return ops::broadcast_mul(sc, x); });
  add("broadcast_mul_pixel", {sp, x}, [=] { return ops::broadcast_mul(sp, x); });
  auto y = leaf({2, 2, 5, 5}, rng);
  add("concat_slice", {x, y}, [=] { return ops::slice_channels(ops::concat_channels({x, y}), 1, 4); });

  auto target = Tensor::from_data({3, 4}, {0.2, 0.8, 0, 0, 0, 0, 1, 0, 0.25, 0.25, 0.25, 0.25});
  out.push_back(check("softmax_cross_entropy", {m}, [=] { return ops::softmax_cross_entropy(m, target); }, opt));
  out.push_back(check("sum_mean", {m}, [=] { return ops::add(ops::sum(m), ops::mean(ops::mul(m, m))); }, opt));
  return out;
}

std::vector<Result> check_fusion_modules(const Options& opt) {
  std::mt19937_64 rng(opt.seed + 1);
  nn::Registry reg;
  const std::int64_t c = 4;
  auto ca = CAParams::create(reg, "ca", c, 2, rng);
  auto srr = SRRParams::create(reg, "srr", rng);
  auto combo = CombinationParams::create(reg, "combo", c, rng);
  FlowPair pair{leaf({2, c, 4, 4}, rng), leaf({2, c, 4, 4}, rng)};
  for (auto* bn : {&srr.reduce_bn, &combo.bn_lateral, &combo.bn_upsampled}) {
    auto mean = bn->running_mean.mutable_data();
    auto var = bn->running_var.mutable_data();
    std::uniform_real_distribution<double> shift(-0.3, 0.3), spread(0.5, 1.5);
    for (auto& v : mean) v = shift(rng);
    for (auto& v : var) v = spread(rng);
  }

  auto params = [&](const std::string& prefix) {
    std::vector<Tensor> in{pair.lateral, pair.upsampled};
    for (const auto& e : reg.trainable())
      if (e.name.rfind(prefix, 0) == 0) in.push_back(e.tensor);
    return in;
  };
  const Shape shape = pair.lateral.shape();
  std::vector<Result> out;
  out.push_back(check("competitive_attention", params("ca"),
                      projected([=] { return competitive_attention(pair, ca).fused; }, shape, rng), opt));
  out.push_back(check("spatial_recalibration", params("srr"),
                      projected([=] { return fuse_srr(pair, srr).fused; }, shape, rng), opt));
  std::vector<Tensor> all{pair.lateral, pair.upsampled};
  for (const auto& e : reg.trainable()) all.push_back(e.tensor);
  out.push_back(check("srr_ca", all, projected([=] { return fuse_srr_ca(pair, ca, srr, combo).fused; }, shape, rng),
                      opt));
  return out;
}

Result check_model(Fusion fusion, const Options& opt) {
  ModelSpec spec;
  spec.backbone = BackboneSpec::custom(BackboneFamily::Cifar, {1, 1, 1}, {4, 4, 8}, 4, 16);
  spec.pyramid.width = 8;
  spec.pyramid.reduction = 2;
  spec.pyramid.fusion = fusion;
  spec.num_classes = 3;
  Model model(spec, opt.seed + 7);
  model.set_mode(nn::Mode::Eval);

  std::mt19937_64 rng(opt.seed + 2);
  // Non-trivial running statistics so eval-mode BN is not an identity map.
  for (const auto& e : model.registry().entries()) {
    if (e.trainable) continue;
    const bool is_var = e.name.ends_with("/running_var");
    std::uniform_real_distribution<double> d(is_var ? 0.5 : -0.2, is_var ? 1.5 : 0.2);
    Tensor stat = e.tensor;
    for (auto& v : stat.mutable_data()) v = d(rng);
  }
  Tensor x = leaf({2, 3, 16, 16}, rng);
  Tensor target = Tensor::from_data({2, 3}, {1, 0, 0, 0, 0.3, 0.7});
  std::vector<Tensor> inputs{x};
  for (const auto& e : model.registry().trainable()) inputs.push_back(e.tensor);
  const Model* m = &model;
  return check("model_" + variant_name(fusion), inputs,
               [=] { return ops::softmax_cross_entropy(m->forward(x), target); }, opt);
}

std::vector<Result> run_suite(const Options& opt) {
  auto out = check_ops(opt);
  for (auto& r : check_fusion_modules(opt)) out.push_back(std::move(r));
  for (auto f : {Fusion::Plain, Fusion::CompetitiveAttention, Fusion::SpatialRecalibration, Fusion::SrrCa})
    out.push_back(check_model(f, opt));
  return out;
}

}  // namespace cafpn::gradcheck
