#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "cafpn/error.hpp"
#include "cafpn/introspection.hpp"
#include "doctest.h"

using namespace cafpn;
using namespace cafpn::introspect;
namespace fs = std::filesystem;

namespace {

ModelSpec toy_spec(Fusion fusion) {
  ModelSpec spec;
  spec.backbone = BackboneSpec::custom(BackboneFamily::Cifar, {1, 1, 1}, {4, 4, 8}, 4, 16);
  spec.pyramid.width = 8;
  spec.pyramid.reduction = 2;
  spec.pyramid.fusion = fusion;
  spec.num_classes = 4;
  return spec;
}

Tensor images(std::int64_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor::randn({n, 3, 16, 16}, rng);
}

void zero_ca(Model& m) {
  for (int level = 1; level < static_cast<int>(m.pyramid().levels()); ++level) {
    auto& ca = m.pyramid().merge(level).ca;
    REQUIRE(ca.has_value());
    for (auto& v : ca->w1.mutable_data()) v = 0.0;
    for (auto& v : ca->w2.mutable_data()) v = 0.0;
  }
}

// Welford's streaming mean / variance.
struct Streaming {
  std::int64_t n = 0;
  double mean = 0, m2 = 0, lo = 1e300, hi = -1e300;
  void push(double x) {
    ++n;
    const double d = x - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (x - mean);
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  double stddev() const { return std::sqrt(m2 / static_cast<double>(n)); }
};

}  // namespace

TEST_CASE("tracing is observation-only: logits bit-equal") {
  for (auto f : {Fusion::Plain, Fusion::CompetitiveAttention, Fusion::SpatialRecalibration, Fusion::SrrCa}) {
    Model model(toy_spec(f), 3);
    auto x = images(2, 4);
    auto plain = model.forward(x);
    auto t = trace_forward(model, x);
    REQUIRE(t.logits.shape() == plain.shape());
    CHECK(std::equal(plain.data().begin(), plain.data().end(), t.logits.data().begin()));
    auto again = model.forward(x);
    CHECK(std::equal(plain.data().begin(), plain.data().end(), again.data().begin()));
  }
}

TEST_CASE("trace shapes follow the model configuration") {
  auto spec = toy_spec(Fusion::SrrCa);
  Model model(spec, 5);
  auto t = trace_forward(model, images(3, 6), {"a", "b", "c"});
  const auto extents = spec.backbone.level_extents();
  REQUIRE(t.levels.size() == extents.size() - 1);
  REQUIRE(t.backbone.size() == extents.size());
  REQUIRE(t.pyramid.size() == extents.size());
  for (std::size_t i = 0; i < t.levels.size(); ++i) {
    const auto& l = t.levels[i];
    CHECK(l.level == static_cast<int>(i) + 1);
    REQUIRE(l.ca.has_value());
    REQUIRE(l.srr.has_value());
    CHECK(l.ca->spatial.shape() == Shape{3, spec.pyramid.width});
    CHECK(l.ca->semantic.shape() == Shape{3, spec.pyramid.width});
    CHECK(l.srr->spatial.shape() == Shape{3, 1, extents[i], extents[i]});
    for (const auto* g : {&l.ca->spatial, &l.ca->semantic, &l.srr->spatial, &l.srr->semantic})
      for (double v : g->data()) REQUIRE((v > 0.0 && v < 1.0));
  }
  for (std::size_t i = 0; i < extents.size(); ++i) CHECK(t.pyramid[i].shape() == Shape{3, 8, extents[i], extents[i]});
  CHECK_THROWS_AS(trace_forward(model, images(3, 6), {"only-one"}), ConfigError);
}

TEST_CASE("zero CA weights: every traced activation is 0.5 and the summary reports mean 0.5, std 0") {
  for (auto f : {Fusion::CompetitiveAttention, Fusion::SrrCa}) {
    Model model(toy_spec(f), 7);
    zero_ca(model);
    auto t = trace_forward(model, images(2, 8));
    for (const auto& l : t.levels) {
      REQUIRE(l.ca.has_value());
      for (double v : l.ca->spatial.data()) CHECK(v == 0.5);
      for (double v : l.ca->semantic.data()) CHECK(v == 0.5);
    }
    for (const auto& r : summarize({t}))
      if (r.kind == "ca") {
        CHECK(r.mean == 0.5);
        CHECK(r.stddev == 0.0);
        CHECK(r.min == 0.5);
        CHECK(r.max == 0.5);
      }
  }
}

TEST_CASE("summary equals a streaming-statistics recomputation") {
  Model model(toy_spec(Fusion::SrrCa), 9);
  std::vector<AttentionTrace> traces{trace_forward(model, images(2, 10)), trace_forward(model, images(3, 11))};
  auto rows = summarize(traces);
  CHECK(rows.size() == 2 * 2 * 2);
  for (const auto& r : rows) {
    Streaming s;
    for (const auto& t : traces)
      for (const auto& l : t.levels) {
        if (l.level != r.level) continue;
        const Tensor* g = nullptr;
        if (r.kind == "ca") g = r.flow == Flow::Spatial ? &l.ca->spatial : &l.ca->semantic;
        else g = r.flow == Flow::Spatial ? &l.srr->spatial : &l.srr->semantic;
        for (double v : g->data()) s.push(v);
      }
    CHECK(r.count == s.n);
    CHECK(std::abs(r.mean - s.mean) < 1e-12);
    CHECK(std::abs(r.stddev - s.stddev()) < 1e-12);
    CHECK(r.min == s.lo);
    CHECK(r.max == s.hi);
  }
  CHECK_THROWS_AS(summarize({}), ConfigError);
}

TEST_CASE("two equal-size traces: summary mean is the average of their means") {
  Model model(toy_spec(Fusion::CompetitiveAttention), 12);
  auto a = trace_forward(model, images(2, 13)), b = trace_forward(model, images(2, 14));
  auto ra = summarize({a}), rb = summarize({b}), both = summarize({a, b});
  REQUIRE(ra.size() == both.size());
  for (std::size_t i = 0; i < both.size(); ++i)
    CHECK(std::abs(both[i].mean - (ra[i].mean + rb[i].mean) / 2) < 1e-15);
}

TEST_CASE("summary is symmetric in the order of traces") {
  Model model(toy_spec(Fusion::SrrCa), 15);
  auto a = trace_forward(model, images(1, 16)), b = trace_forward(model, images(2, 17));
  auto ab = summarize({a, b}), ba = summarize({b, a});
  for (std::size_t i = 0; i < ab.size(); ++i) {
    CHECK(std::abs(ab[i].mean - ba[i].mean) < 1e-15);
    CHECK(std::abs(ab[i].stddev - ba[i].stddev) < 1e-15);
  }
}

TEST_CASE("PGM quantization is round(v * 255) with no renormalization") {
  Heatmap h{2, 3, {0.0, 0.5, 1.0, 0.25, 0.001, 0.999}};
  const auto pgm = to_pgm(h);
  const std::string header = "P5\n3 2\n255\n";
  REQUIRE(pgm.size() == header.size() + 6);
  CHECK(pgm.substr(0, header.size()) == header);
  const std::vector<int> expected{0, 128, 255, 64, 0, 255};
  for (std::size_t i = 0; i < 6; ++i)
    CHECK(static_cast<int>(static_cast<unsigned char>(pgm[header.size() + i])) == expected[i]);
  CHECK_THROWS_AS(to_pgm(Heatmap{1, 1, {1.5}}), NumericError);

  Model model(toy_spec(Fusion::SpatialRecalibration), 18);
  auto t = trace_forward(model, images(2, 19));
  auto map = srr_heatmap(t, 1, Flow::Semantic, 1);
  const auto& sem = t.levels[0].srr->semantic;
  const auto plane = static_cast<std::size_t>(map.rows * map.cols);
  for (std::size_t i = 0; i < plane; ++i) CHECK(map.values[i] == sem.data()[plane + i]);
  CHECK_THROWS_AS(srr_heatmap(t, 7, Flow::Spatial, 0), ConfigError);
}

TEST_CASE("curves: batch-mean rows average the per-image rows") {
  Model model(toy_spec(Fusion::CompetitiveAttention), 20);
  auto t = trace_forward(model, images(2, 21), {"x", "y"});
  std::istringstream csv(curves_csv(t));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "level,flow,image,channel,value");
  std::map<std::string, std::map<std::string, double>> by_key;
  while (std::getline(csv, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    REQUIRE(f.size() == 5);
    by_key[f[0] + "/" + f[1] + "/" + f[3]][f[2]] = std::stod(f[4]);
  }
  CHECK(by_key.size() == 2 * 2 * 8);
  for (const auto& [k, v] : by_key) CHECK(std::abs(v.at("mean") - (v.at("x") + v.at("y")) / 2) < 1e-15);
}

TEST_CASE("export writes the trace archive, summary, curves and heatmaps") {
  const auto out = fs::temp_directory_path() / "cafpn_test_introspection_export";
  fs::remove_all(out);
  Model model(toy_spec(Fusion::SrrCa), 22);
  auto t = trace_forward(model, images(2, 23));
  auto report = export_trace(t, out);
  CHECK(report.heatmaps == 2 * 2 * 2);
  for (const auto& p : report.files) CHECK(fs::exists(p));

  auto records = archive::load_named(out / "trace" / "attention.tar0");
  std::vector<std::string> names;
  for (const auto& r : records) names.push_back(r.name);
  for (const char* k : {"ca/level1/spa", "ca/level1/sem", "ca/level2/spa", "srr/level1/spa", "srr/level2/sem"})
    CHECK_MESSAGE(std::find(names.begin(), names.end(), k) != names.end(), k);
  for (const auto& r : records)
    if (r.name == "srr/level2/sem") {
      const auto& src = t.levels[1].srr->semantic;
      CHECK(std::equal(src.data().begin(), src.data().end(), r.tensor.data().begin()));
    }
  auto features = archive::load_named(out / "trace" / "features.tar0");
  CHECK(features.back().name == "logits");

  std::ifstream summary(out / "summary.csv");
  std::string header;
  std::getline(summary, header);
  CHECK(header == "kind,level,flow,count,mean,std,min,max");
  fs::remove_all(out);
}
