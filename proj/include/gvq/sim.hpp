#pragma once

#include <limits>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "gvq/metrics.hpp"
#include "gvq/rar.hpp"
#include "gvq/schedule.hpp"
#include "gvq/sources.hpp"
#include "gvq/transport.hpp"
#include "gvq/types.hpp"

namespace gvq {

enum class TransportKind : std::uint8_t { Inproc = 0, Tcp = 1 };

TransportKind transport_from_string(const std::string& name);
const char* to_string(TransportKind kind);

enum class SourceKind : std::uint8_t { Synthetic = 0, Toy = 1, Dump = 2 };

struct SourceConfig {
  SourceKind kind = SourceKind::Synthetic;
  // synthetic
  std::vector<LayerShape> layers{{4, 4, 4, 16}};
  std::vector<Index> slice_len{64};  // K per layer
  Index latent_rank = 8;
  double noise_sigma = 1e-4;
  double drift_rate = 0.0;
  // toy
  ToyTaskConfig toy;
  Index toy_conv_slice_len = 24;
  Index toy_dense_slice_len = 96;
  // dump
  std::string dump_path;
  std::vector<Index> dump_slice_len{64};
};

/// Full run configuration. Defaults: N = 6, warm-up 2500, L_t = 100,
/// L_c = 400, lambda = 0.01, one compressor per layer, 4-bit scalar
/// fallback during sampling. `scale` divides the schedule windows for
/// desk-size runs.
struct RunConfig {
  int nodes = 6;
  AggMode mode = AggMode::Gvq;
  TransportKind transport = TransportKind::Inproc;
  WirePrecision wire = WirePrecision::F32;
  std::uint64_t seed = 1;
  double scale = 1.0;
  long iterations = 4000;
  std::string out_dir = "out";
  Schedule schedule;
  bool sample_scalar = true;  // quantize sampling/uncompressed iterations
  int scalar_bits = 4;
  SourceConfig source;
  NetModel net;
  std::string tcp_host = "127.0.0.1";
  std::uint16_t tcp_base_port = 0;  // 0 = pick free ports

  /// Schedule with warm-up / L_t / L_c divided by `scale`.
  Schedule scaled_schedule() const;
};

nlohmann::json config_to_json(const RunConfig& cfg);
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config_file(const std::string& path);

struct RunResult {
  std::vector<MetricsRecord> records;
  RunSummary summary;
  std::string csv_path;
  std::string manifest_path;
  std::vector<double> training_loss;  // toy runs, per iteration
  double final_training_loss = std::numeric_limits<double>::quiet_NaN();
  long stop_events = 0;
};

/// Per-node gradient provider. `advance` runs after aggregation so
/// trainable sources can apply the decoded update.
class GradientStream {
 public:
  virtual ~GradientStream() = default;
  virtual VecXd next(long t, int node) = 0;
  virtual void advance(long /*t*/, int /*node*/, const VecXd& /*aggregated*/) {}
  virtual double last_loss(int /*node*/) const { return std::numeric_limits<double>::quiet_NaN(); }
  virtual const FlatLayout& layout() const = 0;
};

std::unique_ptr<GradientStream> make_stream(const RunConfig& cfg);

/// Runs the full schedule-driven pipeline and writes metrics.csv plus
/// manifest.json under cfg.out_dir.
RunResult run_simulation(const RunConfig& cfg);

void write_manifest(const std::string& path, const RunConfig& cfg);

/// One slice-sweep row: the first slice's compressor applied to the rest
/// of the layer. `transfer_loss` < 0 means undefined (single slice).
struct SweepRow {
  Index k = 0;
  Index d = 0;
  double ratio = 1.0;
  double self_loss = 0.0;
  double transfer_loss = -1.0;
};

std::vector<SweepRow> slice_sweep(const RunConfig& cfg,
                                  const std::vector<Index>& k_values,
                                  double lambda, long sample_iters,
                                  int layer_index = 0);

struct BenchRow {
  AggMode mode = AggMode::Raw;
  double payload_bytes_per_iter = 0.0;
  double sim_seconds_per_iter = 0.0;
  double bytes_ratio_vs_raw = 1.0;
  double time_ratio_vs_raw = 1.0;
};

/// Runs raw / gvq / scalar with identical seeds and compares them over
/// the iterations where gvq actually compresses.
std::vector<BenchRow> run_bench(const RunConfig& cfg);

std::vector<std::uint16_t> find_free_ports(int count);

}  // namespace gvq
