#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gvq/rar.hpp"
#include "gvq/schedule.hpp"
#include "gvq/types.hpp"

namespace gvq {

/// One measurement per iteration. Per-layer relative loss is -1 when it
/// was not measured (written to CSV as an empty field).
struct MetricsRecord {
  long iteration = 0;
  Phase phase = Phase::Warmup;
  AggMode mode = AggMode::Raw;
  std::vector<std::uint64_t> node_bytes_sent;
  std::vector<double> layer_rel_loss;
  std::vector<Index> layer_d;
  std::vector<double> layer_ratio;
  double sim_agg_seconds = 0.0;
  double wall_seconds = 0.0;

  bool operator==(const MetricsRecord&) const = default;
};

inline constexpr const char* kMetricsCsvHeader =
    "iteration,phase,mode,node,bytes_sent,layer,rel_loss,d,ratio,sim_agg_s,wall_s";

/// Streams records to a CSV, one row per (node, layer), flushed on every
/// iteration boundary.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& csv_path);

  void append(const MetricsRecord& record);
  const std::string& path() const { return path_; }

 private:
  std::ofstream out_;
  std::string path_;
  long last_iteration_ = -1;
};

std::vector<MetricsRecord> read_metrics_csv(const std::string& path);

struct RunSummary {
  long iterations = 0;
  long compressed_iterations = 0;
  double mean_ratio = 1.0;  // over compressed-phase records
  std::map<std::string, std::uint64_t> bytes_by_mode;
  std::uint64_t total_bytes = 0;
  std::uint64_t compressed_bytes = 0;
  double loss_p50 = 0.0, loss_p90 = 0.0, loss_p99 = 0.0;
  double total_sim_seconds = 0.0;
  double compressed_sim_seconds = 0.0;

  bool operator==(const RunSummary&) const = default;
};

RunSummary summarize(std::span<const MetricsRecord> records);

}  // namespace gvq
