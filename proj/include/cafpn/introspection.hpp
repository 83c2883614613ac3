#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cafpn/model.hpp"

namespace cafpn::introspect {

enum class Flow { Spatial, Semantic };
std::string flow_key(Flow f);  // "spa" / "sem"

// Gates recorded at one merge. Level is 1-based, 1 being the finest.
struct LevelTrace {
  int level = 0;
  std::optional<CAActivations> ca;  // N x C each
  std::optional<SRRMaps> srr;       // N x 1 x H x W each
};

struct AttentionTrace {
  std::vector<std::string> inputs;  // identifiers, one per image
  std::vector<LevelTrace> levels;   // finest first
  std::vector<Tensor> backbone;     // per-level backbone features, finest first
  std::vector<Tensor> pyramid;      // per-level fused outputs, finest first
  Tensor logits;
};

// Runs `model` on x and records every gate; the logits are those of an
// untraced call.
AttentionTrace trace_forward(const Model& model, const Tensor& x, std::vector<std::string> inputs = {});

// "ca/level{i}/{spa|sem}", "srr/level{i}/{spa|sem}"
std::vector<archive::NamedTensor> attention_records(const AttentionTrace& t);
// "backbone/level{i}", "pyramid/level{i}", "logits"
std::vector<archive::NamedTensor> feature_records(const AttentionTrace& t);

struct SummaryRow {
  std::string kind;  // "ca" or "srr"
  int level = 0;
  Flow flow = Flow::Spatial;
  std::int64_t count = 0;
  double mean = 0, stddev = 0, min = 0, max = 0;
};

// Statistics over every recorded gate value of all traces, per kind, level
// and flow. Throws ConfigError on an empty trace set.
std::vector<SummaryRow> summarize(const std::vector<AttentionTrace>& traces);
// "kind,level,flow,count,mean,std,min,max"
std::string summary_csv(const std::vector<SummaryRow>& rows);

// Channel-activation curves of every CA site, per image and averaged over
// the batch: "level,flow,image,channel,value" with image = "mean" for the
// batch average.
std::string curves_csv(const AttentionTrace& t);

struct Heatmap {
  std::int64_t rows = 0, cols = 0;
  std::vector<double> values;  // row-major, unscaled gate values
};

Heatmap srr_heatmap(const AttentionTrace& t, int level, Flow flow, std::int64_t image);
// Binary PGM; each value v in [0, 1] maps to round(v * 255).
std::string to_pgm(const Heatmap& h);

struct ExportReport {
  std::int64_t heatmaps = 0;
  std::vector<std::filesystem::path> files;
};

// Writes trace/attention.tar0, trace/features.tar0, summary.csv, curves.csv
// and heatmaps/srr_level{i}_{flow}_img{n}.pgm under `out`.
ExportReport export_trace(const AttentionTrace& t, const std::filesystem::path& out);

}  // namespace cafpn::introspect
