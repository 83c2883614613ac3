#include "cafpn/error.hpp"
#include "cafpn/ops.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cafpn;
using oracle::Array4;
using oracle::uniform_int;

namespace {

constexpr int kCases = 100;
constexpr double kTol = 1e-12;

std::vector<double> vec(const Tensor& t) { return oracle::values(t); }

}  // namespace

TEST_CASE("conv2d: identity and zero kernels") {
  std::mt19937_64 rng(1);
  auto x = Tensor::randn({2, 1, 5, 4}, rng);
  auto id = ops::conv2d(x, Tensor::full({1, 1, 1, 1}, 1.0));
  CHECK(vec(id) == vec(x));
  auto x3 = Tensor::randn({2, 3, 5, 5}, rng);
  auto zero = ops::conv2d(x3, Tensor::zeros({4, 3, 3, 3}), {}, 2, 1);
  for (double v : zero.data()) CHECK(v == 0.0);
}

TEST_CASE("conv2d: 2x3x5x5 input, 4x3x3x3 kernel, stride 2, pad 1 matches the loop oracle") {
  std::mt19937_64 rng(7);
  auto x = Tensor::randn({2, 3, 5, 5}, rng);
  auto w = Tensor::randn({4, 3, 3, 3}, rng);
  auto y = ops::conv2d(x, w, {}, 2, 1);
  CHECK(y.shape() == Shape{2, 4, 3, 3});
  CHECK(oracle::max_abs_diff(oracle::conv2d(Array4::of(x), Array4::of(w), {}, 2, 1), y) < kTol);
}

TEST_CASE("conv2d: randomized shapes match the loop oracle (property)") {
  std::mt19937_64 rng(101);
  for (int t = 0; t < kCases; ++t) {
    const auto n = uniform_int(rng, 1, 3), cin = uniform_int(rng, 1, 4), cout = uniform_int(rng, 1, 4);
    const auto k = uniform_int(rng, 1, 4), stride = uniform_int(rng, 1, 3), pad = uniform_int(rng, 0, 2);
    const auto h = uniform_int(rng, std::max<std::int64_t>(1, k - 2 * pad), 9);
    const auto w = uniform_int(rng, std::max<std::int64_t>(1, k - 2 * pad), 9);
    auto x = Tensor::randn({n, cin, h, w}, rng);
    auto wt = Tensor::randn({cout, cin, k, k}, rng);
    auto b = Tensor::randn({cout}, rng);
    auto y = ops::conv2d(x, wt, b, static_cast<int>(stride), static_cast<int>(pad));
    auto ref = oracle::conv2d(Array4::of(x), Array4::of(wt), vec(b), stride, pad);
    REQUIRE(y.shape() == Shape{ref.n, ref.c, ref.h, ref.w});
    CHECK(oracle::max_abs_diff(ref, y) < kTol);
  }
}

TEST_CASE("conv2d: channel mismatch names both shapes") {
  auto x = Tensor::zeros({1, 3, 4, 4});
  auto w = Tensor::zeros({2, 2, 3, 3});
  try {
    ops::conv2d(x, w);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[1x3x4x4]") != std::string::npos);
    CHECK(msg.find("[2x2x3x3]") != std::string::npos);
  }
  CHECK_THROWS_AS(ops::conv2d(x, Tensor::zeros({1, 3, 7, 7}), {}, 1, 1), ShapeError);
}

TEST_CASE("transposed_conv2d: zero weights, single pixel scatter, doubling") {
  CHECK(vec(ops::transposed_conv2d(Tensor::full({1, 2, 3, 3}, 1.0), Tensor::zeros({2, 2, 4, 4}))) ==
        std::vector<double>(2 * 36, 0.0));

  // 1x1 input of value v, all-ones 4x4 kernel, stride 2, pad 1: output is
  // the 2x2 patch of the kernel centred on the pixel, every entry v.
  auto y = ops::transposed_conv2d(Tensor::full({1, 1, 1, 1}, 2.5), Tensor::full({1, 1, 4, 4}, 1.0));
  REQUIRE(y.shape() == Shape{1, 1, 2, 2});
  auto ref = oracle::transposed_conv2d(Array4(1, 1, 1, 1, 2.5), Array4(1, 1, 4, 4, 1.0), 2, 1);
  CHECK(vec(y) == ref.v);
  CHECK(ref.v == std::vector<double>{2.5, 2.5, 2.5, 2.5});
}

TEST_CASE("transposed_conv2d: randomized cases match the scatter oracle (property)") {
  std::mt19937_64 rng(202);
  for (int t = 0; t < kCases; ++t) {
    const auto n = uniform_int(rng, 1, 3), cin = uniform_int(rng, 1, 4), cout = uniform_int(rng, 1, 4);
    const auto h = uniform_int(rng, 1, 7), w = uniform_int(rng, 1, 7);
    auto x = Tensor::randn({n, cin, h, w}, rng);
    auto wt = Tensor::randn({cin, cout, 4, 4}, rng);
    auto y = ops::transposed_conv2d(x, wt);
    CHECK(y.shape() == Shape{n, cout, 2 * h, 2 * w});
    CHECK(oracle::max_abs_diff(oracle::transposed_conv2d(Array4::of(x), Array4::of(wt), 2, 1), y) < kTol);
  }
}

TEST_CASE("transposed_conv2d: geometry that cannot double is rejected") {
  auto x = Tensor::zeros({1, 1, 3, 3});
  CHECK_THROWS_AS(ops::transposed_conv2d(x, Tensor::zeros({1, 1, 3, 3})), ConfigError);
  CHECK_THROWS_AS(ops::transposed_conv2d(x, Tensor::zeros({1, 1, 4, 4}), {}, 2, 0), ConfigError);
  CHECK_THROWS_AS(ops::transposed_conv2d(x, Tensor::zeros({2, 1, 4, 4})), ConfigError);
}

TEST_CASE("bilinear_resize2x: constants, 1x1 replication, hand-evaluated 2x2") {
  auto c = ops::bilinear_resize2x(Tensor::full({2, 3, 3, 5}, 0.1 + 1.0 / 3.0));
  CHECK(c.shape() == Shape{2, 3, 6, 10});
  for (double v : c.data()) CHECK(v == 0.1 + 1.0 / 3.0);

  auto one = ops::bilinear_resize2x(Tensor::full({1, 1, 1, 1}, -4.25));
  CHECK(vec(one) == std::vector<double>(4, -4.25));

  // Source coordinates for outputs 0..3 are 0, 0.25, 0.75, 1 (after the clamp).
  auto y = ops::bilinear_resize2x(Tensor::from_data({1, 1, 2, 2}, {0, 1, 2, 3}));
  const std::vector<double> expected{0.0,  0.25, 0.75, 1.0,  0.5, 0.75, 1.25, 1.5,
                                     1.5,  1.75, 2.25, 2.5,  2.0, 2.25, 2.75, 3.0};
  CHECK(oracle::max_abs_diff(expected, y.data()) < kTol);
  CHECK(oracle::max_abs_diff(oracle::bilinear2x(Array4::of(Tensor::from_data({1, 1, 2, 2}, {0, 1, 2, 3}))), y) < kTol);
}

TEST_CASE("bilinear and nearest resize match loop oracles (property)") {
  std::mt19937_64 rng(303);
  for (int t = 0; t < kCases; ++t) {
    auto x = Tensor::randn({uniform_int(rng, 1, 3), uniform_int(rng, 1, 3), uniform_int(rng, 1, 8),
                            uniform_int(rng, 1, 8)},
                           rng);
    CHECK(oracle::max_abs_diff(oracle::bilinear2x(Array4::of(x)), ops::bilinear_resize2x(x)) < kTol);
    CHECK(oracle::max_abs_diff(oracle::nearest2x(Array4::of(x)), ops::nearest_resize2x(x)) == 0.0);
  }
}

TEST_CASE("nearest_resize2x: 2x2 block replication") {
  auto y = ops::nearest_resize2x(Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4}));
  CHECK(vec(y) == std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
}

TEST_CASE("max_pool2d matches the loop oracle (property)") {
  std::mt19937_64 rng(404);
  for (int t = 0; t < kCases; ++t) {
    auto x = Tensor::randn({uniform_int(rng, 1, 2), uniform_int(rng, 1, 3), uniform_int(rng, 2, 9),
                            uniform_int(rng, 2, 9)},
                           rng);
    CHECK(oracle::max_abs_diff(oracle::max_pool(Array4::of(x), 3, 2, 1), ops::max_pool2d(x, 3, 2, 1)) == 0.0);
  }
}

TEST_CASE("global_avg_pool and cross_channel_mean: trivial cases") {
  CHECK(ops::global_avg_pool(Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4})).item() == 2.5);
  auto c = ops::global_avg_pool(Tensor::full({2, 3, 4, 5}, 1.75));
  for (double v : c.data()) CHECK(v == 1.75);
  auto z = ops::global_avg_pool(Tensor::zeros({1, 2, 3, 3}));
  for (double v : z.data()) CHECK(v == 0.0);

  std::vector<double> two_channels(2 * 9);
  std::fill(two_channels.begin(), two_channels.begin() + 9, 1.0);
  std::fill(two_channels.begin() + 9, two_channels.end(), 3.0);
  auto m = ops::cross_channel_mean(Tensor::from_data({1, 2, 3, 3}, two_channels));
  CHECK(m.shape() == Shape{1, 1, 3, 3});
  for (double v : m.data()) CHECK(v == 2.0);

  std::mt19937_64 rng(9);
  auto single = Tensor::randn({2, 1, 3, 4}, rng);
  CHECK(vec(ops::cross_channel_mean(single)) == vec(single));
}

TEST_CASE("pools match loop oracles (property)") {
  std::mt19937_64 rng(505);
  for (int t = 0; t < kCases; ++t) {
    auto x = Tensor::randn({uniform_int(rng, 1, 3), uniform_int(rng, 1, 5), uniform_int(rng, 1, 7),
                            uniform_int(rng, 1, 7)},
                           rng);
    CHECK(oracle::max_abs_diff(oracle::gap(Array4::of(x)), ops::global_avg_pool(x).data()) < kTol);
    CHECK(oracle::max_abs_diff(oracle::channel_mean(Array4::of(x)), ops::cross_channel_mean(x)) < kTol);
  }
}

TEST_CASE("batch_norm: trivial cases and running statistics") {
  // Batch already zero-mean / unit-variance per channel.
  auto x = Tensor::from_data({4, 1, 1, 1}, {1, -1, 1, -1});
  auto gamma = Tensor::full({1}, 1.0), beta = Tensor::zeros({1});
  auto rm = Tensor::zeros({1}), rv = Tensor::full({1}, 1.0);
  auto y = ops::batch_norm(x, gamma, beta, rm, rv, ops::BatchNormMode::Train);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-5));
  CHECK(rm.data()[0] == 0.0);
  CHECK(rv.data()[0] == doctest::Approx(0.9 + 0.1 * 4.0 / 3.0).epsilon(1e-15));

  // beta shift on zero input.
  auto z = Tensor::zeros({2, 2, 3, 3});
  auto b2 = Tensor::from_data({2}, {0.5, -2.0});
  auto rm2 = Tensor::zeros({2}), rv2 = Tensor::full({2}, 1.0);
  auto out = ops::batch_norm(z, Tensor::full({2}, 1.0), b2, rm2, rv2, ops::BatchNormMode::Train);
  for (std::int64_t i = 0; i < 2; ++i)
    for (std::int64_t c = 0; c < 2; ++c) CHECK(out.at({i, c, 1, 1}) == b2.data()[static_cast<std::size_t>(c)]);

  // Eval before any training step uses mean 0 / var 1.
  auto rm3 = Tensor::zeros({1}), rv3 = Tensor::full({1}, 1.0);
  auto e = ops::batch_norm(Tensor::full({1, 1, 1, 1}, 2.0), gamma, beta, rm3, rv3, ops::BatchNormMode::Eval);
  CHECK(e.item() == doctest::Approx(2.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-15));
}

TEST_CASE("batch_norm matches the direct formula in both modes (property)") {
  std::mt19937_64 rng(606);
  for (int t = 0; t < kCases; ++t) {
    const auto c = uniform_int(rng, 1, 4);
    auto x = Tensor::randn({uniform_int(rng, 1, 3), c, uniform_int(rng, 1, 5), uniform_int(rng, 1, 5)}, rng, 2.0);
    if (x.numel() / c < 2) continue;
    auto gamma = Tensor::randn({c}, rng), beta = Tensor::randn({c}, rng);
    auto rm = Tensor::randn({c}, rng), rv = Tensor::uniform({c}, rng, 0.5, 2.0);
    const auto rm0 = vec(rm), rv0 = vec(rv);

    auto eval = ops::batch_norm(x, gamma, beta, rm, rv, ops::BatchNormMode::Eval);
    CHECK(oracle::max_abs_diff(oracle::batch_norm(Array4::of(x), vec(gamma), vec(beta), rm0, rv0, false), eval) < kTol);

    auto train = ops::batch_norm(x, gamma, beta, rm, rv, ops::BatchNormMode::Train);
    CHECK(oracle::max_abs_diff(oracle::batch_norm(Array4::of(x), vec(gamma), vec(beta), rm0, rv0, true), train) < 1e-11);
  }
}

TEST_CASE("elementwise activations") {
  CHECK(ops::sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  for (double v : {0.1, 1.0, 40.0}) CHECK(ops::relu(Tensor::scalar(-v)).item() == 0.0);
  CHECK(ops::relu(Tensor::scalar(2.0)).item() == 2.0);
  CHECK(ops::sigmoid(Tensor::scalar(-800.0)).item() >= 0.0);
  CHECK(ops::sigmoid(Tensor::scalar(800.0)).item() == 1.0);
}

TEST_CASE("broadcast_mul accepts per-channel and per-pixel scales only") {
  auto x = Tensor::full({2, 3, 2, 2}, 2.0);
  auto per_channel = ops::broadcast_mul(Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}), x);
  CHECK(per_channel.at({1, 2, 1, 0}) == 12.0);
  auto per_pixel = ops::broadcast_mul(Tensor::from_data({2, 1, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}), x);
  CHECK(per_pixel.at({1, 0, 0, 1}) == 12.0);
  CHECK(per_pixel.at({1, 2, 0, 1}) == 12.0);
  CHECK_THROWS_AS(ops::broadcast_mul(Tensor::zeros({2, 2}), x), ConfigError);
  CHECK_THROWS_AS(ops::broadcast_mul(Tensor::zeros({2, 1, 3, 2}), x), ConfigError);
  CHECK_THROWS_AS(ops::add(x, Tensor::zeros({2, 3, 2, 1})), ConfigError);
}

TEST_CASE("concat and slice along channels are inverse") {
  std::mt19937_64 rng(8);
  auto a = Tensor::randn({2, 3, 2, 2}, rng), b = Tensor::randn({2, 1, 2, 2}, rng);
  auto cat = ops::concat_channels({a, b});
  CHECK(cat.shape() == Shape{2, 4, 2, 2});
  CHECK(vec(ops::slice_channels(cat, 0, 3)) == vec(a));
  CHECK(vec(ops::slice_channels(cat, 3, 4)) == vec(b));
  CHECK_THROWS_AS(ops::concat_channels({a, Tensor::zeros({1, 1, 2, 2})}), ConfigError);
}

TEST_CASE("cross entropy matches log-sum-exp oracle and vanishes on confident hits") {
  double previous = 1e9;
  for (double peak : {1.0, 5.0, 20.0, 60.0}) {
    auto logits = Tensor::from_data({1, 3}, {0.0, peak, 0.0});
    auto target = Tensor::from_data({1, 3}, {0.0, 1.0, 0.0});
    double loss = ops::softmax_cross_entropy(logits, target).item();
    double lse = std::log(2.0 + std::exp(peak));
    CHECK(loss == doctest::Approx(lse - peak).epsilon(1e-12));
    CHECK(loss < previous);
    previous = loss;
  }
  CHECK(previous < 1e-25);

  // Soft targets: mean over the batch of -sum t log p.
  auto logits = Tensor::from_data({2, 2}, {1.0, 2.0, 0.5, -0.5});
  auto target = Tensor::from_data({2, 2}, {0.3, 0.7, 1.0, 0.0});
  auto lp = [](double a, double b) { return a - std::log(std::exp(a) + std::exp(b)); };
  double expected = -(0.3 * lp(1.0, 2.0) + 0.7 * lp(2.0, 1.0) + 1.0 * lp(0.5, -0.5)) / 2.0;
  CHECK(ops::softmax_cross_entropy(logits, target).item() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one") {
  std::mt19937_64 rng(77);
  auto p = ops::softmax(Tensor::randn({5, 7}, rng, 10.0));
  for (int i = 0; i < 5; ++i) {
    double s = 0;
    for (int j = 0; j < 7; ++j) s += p.at({i, j});
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("conv kernels give bit-identical values and gradients for any thread count") {
  std::mt19937_64 rng(12);
  auto x = Tensor::randn({11, 3, 6, 6}, rng, 1.0, true);
  auto w = Tensor::randn({4, 3, 3, 3}, rng, 1.0, true);
  auto tw = Tensor::randn({3, 2, 4, 4}, rng, 1.0, true);
  auto run = [&](int threads) {
    ops::set_num_threads(threads);
    for (auto* t : {&x, &w, &tw}) t->zero_grad();
    auto y = ops::conv2d(x, w, {}, 1, 1);
    auto z = ops::transposed_conv2d(x, tw);
    ops::add(ops::sum(ops::sigmoid(y)), ops::sum(ops::mul(z, z))).backward();
    std::vector<double> all = vec(y);
    for (double v : z.data()) all.push_back(v);
    for (const auto* t : {&x, &w, &tw}) all.insert(all.end(), t->grad().begin(), t->grad().end());
    return all;
  };
  const auto reference = run(1);
  for (int threads : {2, 3, 5}) CHECK(run(threads) == reference);
  ops::set_num_threads(1);
}
