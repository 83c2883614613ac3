#include "cafpn/ops.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cafpn;

namespace {

constexpr double kGradTol = 1e-5;

// Random projection so the scalar loss depends on every output entry.
Tensor probe(const Shape& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor::randn(s, rng);
}

double check(std::vector<Tensor> inputs, const std::function<Tensor()>& f) {
  for (auto& t : inputs) t.zero_grad();
  f().backward();
  double worst = 0;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto numeric = oracle::numeric_grad(t, [&] {
      autograd::NoGradGuard g;
      return f().item();
    });
    worst = std::max(worst, oracle::max_rel_err(numeric, analytic));
  }
  return worst;
}

Tensor project(const Tensor& y, std::uint64_t seed) { return ops::sum(ops::mul(y, probe(y.shape(), seed))); }

}  // namespace

TEST_CASE("conv2d gradients") {
  std::mt19937_64 rng(1);
  auto x = Tensor::randn({2, 3, 5, 5}, rng, 1.0, true);
  auto w = Tensor::randn({4, 3, 3, 3}, rng, 1.0, true);
  auto b = Tensor::randn({4}, rng, 1.0, true);
  CHECK(check({x, w, b}, [&] { return project(ops::conv2d(x, w, b, 2, 1), 10); }) < kGradTol);
  auto w1 = Tensor::randn({2, 3, 1, 1}, rng, 1.0, true);
  CHECK(check({x, w1}, [&] { return project(ops::conv2d(x, w1), 11); }) < kGradTol);
}

TEST_CASE("transposed_conv2d gradients") {
  std::mt19937_64 rng(2);
  auto x = Tensor::randn({2, 3, 3, 4}, rng, 1.0, true);
  auto w = Tensor::randn({3, 2, 4, 4}, rng, 1.0, true);
  CHECK(check({x, w}, [&] { return project(ops::transposed_conv2d(x, w), 20); }) < kGradTol);
}

TEST_CASE("resize and pool gradients") {
  std::mt19937_64 rng(3);
  auto x = Tensor::randn({2, 2, 3, 5}, rng, 1.0, true);
  CHECK(check({x}, [&] { return project(ops::bilinear_resize2x(x), 30); }) < kGradTol);
  CHECK(check({x}, [&] { return project(ops::nearest_resize2x(x), 31); }) < kGradTol);
  CHECK(check({x}, [&] { return project(ops::max_pool2d(x, 3, 2, 1), 32); }) < kGradTol);
  CHECK(check({x}, [&] { return project(ops::global_avg_pool(x), 33); }) < kGradTol);
  CHECK(check({x}, [&] { return project(ops::cross_channel_mean(x), 34); }) < kGradTol);
}

TEST_CASE("batch norm gradients in both modes") {
  std::mt19937_64 rng(4);
  auto x = Tensor::randn({3, 2, 3, 3}, rng, 1.0, true);
  auto gamma = Tensor::randn({2}, rng, 1.0, true);
  auto beta = Tensor::randn({2}, rng, 1.0, true);
  auto rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1.0);
  CHECK(check({x, gamma, beta}, [&] {
          auto m = rm, v = rv;  // handles: running stats move, outputs do not depend on them in train mode
          return project(ops::batch_norm(x, gamma, beta, m, v, ops::BatchNormMode::Train), 40);
        }) < kGradTol);
  auto erm = Tensor::randn({2}, rng), erv = Tensor::uniform({2}, rng, 0.5, 1.5);
  CHECK(check({x, gamma, beta}, [&] {
          return project(ops::batch_norm(x, gamma, beta, erm, erv, ops::BatchNormMode::Eval), 41);
        }) < kGradTol);
}

TEST_CASE("elementwise, linear and loss gradients") {
  std::mt19937_64 rng(5);
  auto a = Tensor::randn({3, 4}, rng, 1.0, true);
  auto b = Tensor::randn({3, 4}, rng, 1.0, true);
  CHECK(check({a}, [&] { return project(ops::relu(a), 50); }) < kGradTol);
  CHECK(check({a}, [&] { return project(ops::sigmoid(a), 51); }) < kGradTol);
  CHECK(check({a, b}, [&] { return project(ops::mul(a, ops::sub(b, ops::scale(a, 0.3))), 52); }) < kGradTol);
  auto w = Tensor::randn({5, 4}, rng, 1.0, true);
  auto bias = Tensor::randn({5}, rng, 1.0, true);
  CHECK(check({a, w, bias}, [&] { return project(ops::linear(a, w, bias), 53); }) < kGradTol);
  auto target = Tensor::from_data({3, 4}, {0.2, 0.8, 0, 0, 0, 0, 1, 0, 0.25, 0.25, 0.25, 0.25});
  CHECK(check({a}, [&] { return ops::softmax_cross_entropy(a, target); }) < kGradTol);
  CHECK(check({a}, [&] { return ops::mean(ops::mul(a, a)); }) < kGradTol);
}

TEST_CASE("broadcast, concat and slice gradients") {
  std::mt19937_64 rng(6);
  auto x = Tensor::randn({2, 3, 3, 3}, rng, 1.0, true);
  auto sc = Tensor::randn({2, 3}, rng, 1.0, true);
  auto sp = Tensor::randn({2, 1, 3, 3}, rng, 1.0, true);
  CHECK(check({x, sc}, [&] { return project(ops::broadcast_mul(sc, x), 60); }) < kGradTol);
  CHECK(check({x, sp}, [&] { return project(ops::broadcast_mul(sp, x), 61); }) < kGradTol);
  auto y = Tensor::randn({2, 2, 3, 3}, rng, 1.0, true);
  CHECK(check({x, y}, [&] { return project(ops::slice_channels(ops::concat_channels({x, y}), 1, 4), 62); }) <
        kGradTol);
}
