#include "cafpn/introspection.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <span>
#include <tuple>

#include "cafpn/error.hpp"

namespace cafpn::introspect {

namespace fs = std::filesystem;

std::string flow_key(Flow f) { return f == Flow::Spatial ? "spa" : "sem"; }

AttentionTrace trace_forward(const Model& model, const Tensor& x, std::vector<std::string> inputs) {
  ForwardTrace ft;
  AttentionTrace t;
  t.logits = model.forward(x, &ft);
  if (inputs.empty())
    for (std::int64_t n = 0; n < x.dim(0); ++n) inputs.push_back("input" + std::to_string(n));
  if (static_cast<std::int64_t>(inputs.size()) != x.dim(0))
    throw ConfigError("need one identifier per traced image");
  t.inputs = std::move(inputs);
  t.backbone = ft.levels;
  t.pyramid = ft.pyramid.fused;
  for (const auto& m : ft.pyramid.merges) t.levels.push_back({m.level, m.ca, m.srr});
  std::sort(t.levels.begin(), t.levels.end(), [](const auto& a, const auto& b) { return a.level < b.level; });
  return t;
}

namespace {

std::string key(const std::string& kind, int level, Flow f) {
  return kind + "/level" + std::to_string(level) + "/" + flow_key(f);
}

template <class Fn>
void for_each_gate(const AttentionTrace& t, Fn&& fn) {
  for (const auto& l : t.levels) {
    if (l.ca) {
      fn("ca", l.level, Flow::Spatial, l.ca->spatial);
      fn("ca", l.level, Flow::Semantic, l.ca->semantic);
    }
    if (l.srr) {
      fn("srr", l.level, Flow::Spatial, l.srr->spatial);
      fn("srr", l.level, Flow::Semantic, l.srr->semantic);
    }
  }
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << content;
}

}  // namespace

std::vector<archive::NamedTensor> attention_records(const AttentionTrace& t) {
  std::vector<archive::NamedTensor> out;
  for_each_gate(t, [&](const std::string& kind, int level, Flow f, const Tensor& v) {
    out.push_back({key(kind, level, f), v.detach()});
  });
  return out;
}

std::vector<archive::NamedTensor> feature_records(const AttentionTrace& t) {
  std::vector<archive::NamedTensor> out;
  for (std::size_t i = 0; i < t.backbone.size(); ++i)
    out.push_back({"backbone/level" + std::to_string(i + 1), t.backbone[i].detach()});
  for (std::size_t i = 0; i < t.pyramid.size(); ++i)
    out.push_back({"pyramid/level" + std::to_string(i + 1), t.pyramid[i].detach()});
  out.push_back({"logits", t.logits.detach()});
  return out;
}

std::vector<SummaryRow> summarize(const std::vector<AttentionTrace>& traces) {
  if (traces.empty()) throw ConfigError("no traces to summarize");
  struct Acc {
    SummaryRow row;
    std::vector<std::span<const double>> parts;
  };
  std::vector<Acc> accs;
  for (const auto& t : traces) {
    for_each_gate(t, [&](const std::string& kind, int level, Flow f, const Tensor& v) {
      auto it = std::find_if(accs.begin(), accs.end(), [&](const Acc& a) {
        return a.row.kind == kind && a.row.level == level && a.row.flow == f;
      });
      if (it == accs.end()) {
        accs.push_back({{kind, level, f}, {}});
        it = std::prev(accs.end());
      }
      it->parts.push_back(v.data());
    });
  }
  std::vector<SummaryRow> rows;
  for (auto& a : accs) {
    auto& r = a.row;
    double sum = 0;
    r.min = std::numeric_limits<double>::infinity();
    r.max = -std::numeric_limits<double>::infinity();
    for (auto p : a.parts)
      for (double v : p) {
        sum += v;
        r.min = std::min(r.min, v);
        r.max = std::max(r.max, v);
        ++r.count;
      }
    r.mean = sum / static_cast<double>(r.count);
    double ss = 0;
    for (auto p : a.parts)
      for (double v : p) ss += (v - r.mean) * (v - r.mean);
    r.stddev = std::sqrt(ss / static_cast<double>(r.count));
    rows.push_back(r);
  }
  std::sort(rows.begin(), rows.end(), [](const SummaryRow& a, const SummaryRow& b) {
    return std::tie(a.kind, a.level, a.flow) < std::tie(b.kind, b.level, b.flow);
  });
  return rows;
}

std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::ostringstream out;
  out.precision(17);
  out << "kind,level,flow,count,mean,std,min,max\n";
  for (const auto& r : rows)
    out << r.kind << ',' << r.level << ',' << flow_key(r.flow) << ',' << r.count << ',' << r.mean << ','
        << r.stddev << ',' << r.min << ',' << r.max << '\n';
  return out.str();
}

std::string curves_csv(const AttentionTrace& t) {
  std::ostringstream out;
  out.precision(17);
  out << "level,flow,image,channel,value\n";
  for (const auto& l : t.levels) {
    if (!l.ca) continue;
    for (Flow f : {Flow::Spatial, Flow::Semantic}) {
      const Tensor& s = f == Flow::Spatial ? l.ca->spatial : l.ca->semantic;
      const auto n = s.dim(0), c = s.dim(1);
      const auto d = s.data();
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t k = 0; k < c; ++k)
          out << l.level << ',' << flow_key(f) << ',' << t.inputs[static_cast<std::size_t>(i)] << ',' << k << ','
              << d[static_cast<std::size_t>(i * c + k)] << '\n';
      for (std::int64_t k = 0; k < c; ++k) {
        double sum = 0;
        for (std::int64_t i = 0; i < n; ++i) sum += d[static_cast<std::size_t>(i * c + k)];
        out << l.level << ',' << flow_key(f) << ",mean," << k << ',' << sum / static_cast<double>(n) << '\n';
      }
    }
  }
  return out.str();
}

Heatmap srr_heatmap(const AttentionTrace& t, int level, Flow flow, std::int64_t image) {
  for (const auto& l : t.levels) {
    if (l.level != level) continue;
    if (!l.srr) throw ConfigError("level " + std::to_string(level) + " has no spatial recalibration");
    const Tensor& m = flow == Flow::Spatial ? l.srr->spatial : l.srr->semantic;
    if (image < 0 || image >= m.dim(0)) throw ConfigError("image index out of range");
    Heatmap h{m.dim(2), m.dim(3), {}};
    const auto plane = static_cast<std::size_t>(h.rows * h.cols);
    const auto d = m.data().subspan(static_cast<std::size_t>(image) * plane, plane);
    h.values.assign(d.begin(), d.end());
    return h;
  }
  throw ConfigError("no merge at level " + std::to_string(level));
}

std::string to_pgm(const Heatmap& h) {
  std::string out = "P5\n" + std::to_string(h.cols) + " " + std::to_string(h.rows) + "\n255\n";
  for (double v : h.values) {
    if (!(v >= 0.0 && v <= 1.0)) throw NumericError("heatmap value outside [0, 1]");
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  }
  return out;
}

ExportReport export_trace(const AttentionTrace& t, const fs::path& out) {
  ExportReport report;
  fs::create_directories(out / "trace");
  fs::create_directories(out / "heatmaps");
  auto add = [&](const fs::path& p) { report.files.push_back(p); };

  archive::save_named(out / "trace" / "attention.tar0", attention_records(t));
  add(out / "trace" / "attention.tar0");
  archive::save_named(out / "trace" / "features.tar0", feature_records(t));
  add(out / "trace" / "features.tar0");
  bool any_gate = false;
  for_each_gate(t, [&](const std::string&, int, Flow, const Tensor&) { any_gate = true; });
  if (any_gate) {
    write_file(out / "summary.csv", summary_csv(summarize({t})));
    add(out / "summary.csv");
  }
  write_file(out / "curves.csv", curves_csv(t));
  add(out / "curves.csv");
  for (const auto& l : t.levels) {
    if (!l.srr) continue;
    for (Flow f : {Flow::Spatial, Flow::Semantic})
      for (std::int64_t n = 0; n < l.srr->spatial.dim(0); ++n) {
        const auto p = out / "heatmaps" /
                       ("srr_level" + std::to_string(l.level) + "_" + flow_key(f) + "_img" + std::to_string(n) + ".pgm");
        write_file(p, to_pgm(srr_heatmap(t, l.level, f, n)));
        add(p);
        ++report.heatmaps;
      }
  }
  return report;
}

}  // namespace cafpn::introspect
