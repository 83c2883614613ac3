#include "cafpn/backbone.hpp"
#include "cafpn/error.hpp"
#include "cafpn/ops.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cafpn;

namespace {

// Learnable scalars of a pre-activation ResNet counted from its layout:
// stem conv, then per block BN(in) conv3x3(in,out) BN(out) conv3x3(out,out)
// and a 1x1 projection whenever the shape changes, then the final BN.
std::int64_t layout_count(bool imagenet, std::vector<int> blocks, std::vector<std::int64_t> ch,
                          std::int64_t stem) {
  std::int64_t n = 3 * stem * (imagenet ? 49 : 9);
  std::int64_t in = stem;
  for (std::size_t s = 0; s < blocks.size(); ++s) {
    for (int b = 0; b < blocks[s]; ++b) {
      const std::int64_t out = ch[s];
      n += 2 * in + 9 * in * out + 2 * out + 9 * out * out;
      if ((s > 0 && b == 0) || in != out) n += in * out;
      in = out;
    }
  }
  return n + 2 * in;
}

Tensor input_for(const BackboneSpec& spec, std::int64_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor::randn({n, 3, spec.input_size, spec.input_size}, rng);
}

}  // namespace

TEST_CASE("parameter counts equal the closed-form layout count") {
  CHECK(build_backbone(BackboneSpec::from_depth(18), 0).registry.count_parameters() ==
        layout_count(true, {2, 2, 2, 2}, {64, 128, 256, 512}, 64));
  CHECK(build_backbone(BackboneSpec::from_depth(34), 0).registry.count_parameters() ==
        layout_count(true, {3, 4, 6, 3}, {64, 128, 256, 512}, 64));
  CHECK(build_backbone(BackboneSpec::from_depth(20), 0).registry.count_parameters() ==
        layout_count(false, {3, 3, 3}, {16, 32, 64}, 16));
  CHECK(build_backbone(BackboneSpec::from_depth(56), 0).registry.count_parameters() ==
        layout_count(false, {9, 9, 9}, {16, 32, 64}, 16));
}

TEST_CASE("unsupported depth lists the supported ones") {
  try {
    BackboneSpec::from_depth(50);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    for (const char* d : {"18", "34", "20", "56"}) CHECK(msg.find(d) != std::string::npos);
  }
}

TEST_CASE("depth 18 at 224 gives four levels of extents 56, 28, 14, 7") {
  auto spec = BackboneSpec::from_depth(18);
  CHECK(spec.level_extents() == std::vector<std::int64_t>{56, 28, 14, 7});
  auto bb = build_backbone(spec, 1);
  auto levels = bb.backbone.extract_levels(input_for(spec, 1, 2), nn::Mode::Eval);
  REQUIRE(levels.size() == 4);
  const std::vector<std::int64_t> ext{56, 28, 14, 7};
  for (std::size_t i = 0; i < 4; ++i) CHECK(levels[i].shape() == Shape{1, spec.stage_channels[i], ext[i], ext[i]});
}

TEST_CASE("depth 20 and 56 at 32 give three levels of extents 32, 16, 8") {
  for (int depth : {20, 56}) {
    auto spec = BackboneSpec::from_depth(depth);
    auto bb = build_backbone(spec, 3);
    auto levels = bb.backbone.extract_levels(input_for(spec, 2, 4), nn::Mode::Train);
    REQUIRE(levels.size() == 3);
    for (std::size_t i = 0; i + 1 < levels.size(); ++i) {
      CHECK(levels[i].dim(2) == 2 * levels[i + 1].dim(2));
      CHECK(levels[i].dim(3) == 2 * levels[i + 1].dim(3));
    }
    CHECK(levels[0].dim(2) == 32);
    CHECK(levels[2].dim(1) == 64);
  }
}

TEST_CASE("zero input gives finite features") {
  auto spec = BackboneSpec::from_depth(20);
  auto bb = build_backbone(spec, 5);
  for (auto mode : {nn::Mode::Eval, nn::Mode::Train}) {
    for (const auto& level : bb.backbone.extract_levels(Tensor::zeros({2, 3, 32, 32}), mode))
      for (double v : level.data()) REQUIRE(std::isfinite(v));
  }
}

TEST_CASE("wrong input extents are a shape error") {
  auto bb = build_backbone(BackboneSpec::from_depth(20), 0);
  CHECK_THROWS_AS(bb.backbone.extract_levels(Tensor::zeros({1, 3, 30, 32}), nn::Mode::Eval), ShapeError);
  CHECK_THROWS_AS(bb.backbone.extract_levels(Tensor::zeros({1, 1, 32, 32}), nn::Mode::Eval), ShapeError);
}

TEST_CASE("identical images give identical features; seeds reproduce bit-exactly") {
  auto spec = BackboneSpec::from_depth(20);
  auto img = input_for(spec, 1, 8);
  std::vector<double> twice(img.data().begin(), img.data().end());
  twice.insert(twice.end(), img.data().begin(), img.data().end());
  auto pair = Tensor::from_data({2, 3, 32, 32}, twice);
  auto a = build_backbone(spec, 9), b = build_backbone(spec, 9);
  auto la = a.backbone.extract_levels(pair, nn::Mode::Eval);
  auto lb = b.backbone.extract_levels(pair, nn::Mode::Eval);
  for (std::size_t l = 0; l < la.size(); ++l) {
    auto v = la[l].data();
    const auto half = v.size() / 2;
    CHECK(std::equal(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(half), v.begin() + static_cast<std::ptrdiff_t>(half)));
    CHECK(oracle::values(la[l]) == oracle::values(lb[l]));
  }
}

TEST_CASE("permuting the batch permutes the features (property)") {
  auto spec = BackboneSpec::custom(BackboneFamily::Cifar, {1, 1, 1}, {4, 8, 8}, 4, 16);
  auto bb = build_backbone(spec, 10);
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const std::int64_t n = 4;
    auto x = Tensor::randn({n, 3, 16, 16}, rng);
    std::vector<std::int64_t> perm{0, 1, 2, 3};
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto per = x.numel() / n;
    std::vector<double> px(static_cast<std::size_t>(x.numel()));
    for (std::int64_t i = 0; i < n; ++i)
      std::copy_n(x.data().begin() + perm[static_cast<std::size_t>(i)] * per, per, px.begin() + i * per);
    auto base = bb.backbone.extract_levels(x, nn::Mode::Eval);
    auto permuted = bb.backbone.extract_levels(Tensor::from_data(x.shape(), px), nn::Mode::Eval);
    for (std::size_t l = 0; l < base.size(); ++l) {
      const auto lp = base[l].numel() / n;
      for (std::int64_t i = 0; i < n; ++i) {
        auto src = base[l].data().subspan(static_cast<std::size_t>(perm[static_cast<std::size_t>(i)] * lp), static_cast<std::size_t>(lp));
        auto dst = permuted[l].data().subspan(static_cast<std::size_t>(i * lp), static_cast<std::size_t>(lp));
        CHECK(std::equal(src.begin(), src.end(), dst.begin()));
      }
    }
  }
}

TEST_CASE("custom layouts must keep the factor-2 chain") {
  CHECK_THROWS_AS(BackboneSpec::custom(BackboneFamily::Cifar, {1, 1, 1}, {4, 8, 8}, 4, 18), ConfigError);
  CHECK_THROWS_AS(BackboneSpec::custom(BackboneFamily::Cifar, {1, 1}, {4, 8, 8}, 4, 16), ConfigError);
  CHECK_NOTHROW(BackboneSpec::custom(BackboneFamily::Cifar, {1, 1, 1}, {4, 4, 8}, 4, 16));
}
