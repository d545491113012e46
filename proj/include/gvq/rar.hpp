#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "gvq/binio.hpp"
#include "gvq/pca.hpp"
#include "gvq/tensor_layout.hpp"
#include "gvq/transport.hpp"
#include "gvq/types.hpp"
#include "gvq/vq_codec.hpp"

namespace gvq {

enum class RarPhase : std::uint8_t { CompressRound = 0, CirculateRound = 1 };
enum class AggMode : std::uint8_t { Raw = 0, Gvq = 1, Scalar = 2 };
enum class WirePrecision : std::uint8_t { F32 = 0, F64 = 1 };

const char* to_string(AggMode mode);
const char* to_string(RarPhase phase);
AggMode agg_mode_from_string(const std::string& name);

inline std::size_t wire_scalar_bytes(WirePrecision wp) {
  return wp == WirePrecision::F32 ? 4 : 8;
}

/// One ring message. Wire layout: u32 iteration, u8 phase, u8 mode,
/// u16 step, u16 segment, u32 payload length, payload bytes (all LE).
struct RarFrame {
  std::uint32_t iteration = 0;
  RarPhase phase = RarPhase::CompressRound;
  AggMode mode = AggMode::Raw;
  std::uint16_t step = 0;
  std::uint16_t segment = 0;
  std::vector<std::uint8_t> payload;
};

inline constexpr std::size_t kRarHeaderBytes = 14;

std::vector<std::uint8_t> encode_frame(const RarFrame& frame);
RarFrame decode_frame(const std::vector<std::uint8_t>& bytes);

/// How one slice travels this iteration.
enum class SliceCoding : std::uint8_t { RawValues = 0, Coefficients = 1 };

struct SlicePlan {
  SliceSpec spec;
  SliceCoding coding = SliceCoding::RawValues;
  std::shared_ptr<const CompressorD> comp;  // set when coding == Coefficients
};

/// Everything all nodes must agree on before an iteration starts: the
/// mode, the segment map and the per-slice coding plan.
struct IterationPlan {
  std::uint32_t iteration = 0;
  AggMode mode = AggMode::Raw;
  int nodes = 1;
  int layers = 1;
  WirePrecision wire = WirePrecision::F32;
  int scalar_bits = 4;
  std::uint64_t seed = 0;  // base for per-hop requantization seeds
  bool monitor_loss = false;
  double stop_threshold = 0.0;  // per-slice relative loss considered "large"
  std::vector<SegmentSpec> segments;
  std::vector<SlicePlan> slices;

  Index total_elements() const {
    Index n = 0;
    for (const auto& s : segments) n += s.length;
    return n;
  }
};

/// Loss report and compressor-table fingerprint a node piggybacks on its
/// compression-round frames.
struct NodeControlInput {
  std::vector<std::uint8_t> layer_loss_above;  // 1 if last monitored loss > threshold
  std::vector<std::uint8_t> layer_reported;    // 1 if a loss was measured at all
  std::uint64_t table_hash = 0;
};

/// Ring-aggregated control data: after the compression round every node
/// holds counts over all N nodes.
struct ControlSummary {
  std::vector<std::uint32_t> layer_loss_above;
  std::vector<std::uint32_t> layer_reported;
  bool hash_consistent = true;
};

struct SegmentOpCounts {
  std::vector<std::uint32_t> encode_own;        // own-share compress / quantize
  std::vector<std::uint32_t> merge_quantize;    // scalar requantize at a merge
  std::vector<std::uint32_t> merge_dequantize;  // scalar dequantize at a merge
  std::vector<std::uint32_t> decode_output;     // final decompress / dequantize

  explicit SegmentOpCounts(std::size_t segments = 0)
      : encode_own(segments, 0),
        merge_quantize(segments, 0),
        merge_dequantize(segments, 0),
        decode_output(segments, 0) {}
};

struct PayloadBytes {
  std::uint64_t total = 0;
  std::uint64_t coefficients = 0;
  std::uint64_t raw_values = 0;  // residual + passthrough + raw-mode data
  std::uint64_t scalar = 0;
  std::uint64_t control = 0;
};

/// Work profile of one global step, for the simulated-time model:
/// `overlapped_*` items may run concurrently with the download,
/// `serial_elements` strictly follow it.
struct StepWork {
  std::uint64_t bytes_in = 0;
  std::uint64_t overlapped_elements = 0;
  std::uint64_t serial_elements = 0;
};

struct RarNodeResult {
  VecXd aggregated;
  std::vector<double> layer_rel_loss;  // own-gradient monitored loss, -1 if none
  ControlSummary control;
  SegmentOpCounts ops;
  PayloadBytes sent;
  std::vector<StepWork> steps;
  std::uint64_t startup_elements = 0;  // own-segment encode before the ring starts
  std::uint64_t final_decode_elements = 0;
};

struct RarIterationResult {
  std::vector<RarNodeResult> nodes;
  double sim_agg_seconds = 0.0;
};

/// Ordering of the two work items inside one compression-round step.
/// They have no mutual ordering constraint; tests run both to show the
/// results are identical.
enum class StepOrder : std::uint8_t { DownloadThenCompress, CompressThenDownload };

/// Per-element codec cost for the simulated-time model; transfer times
/// come from the BandwidthModel.
struct NetModel {
  BandwidthModel bandwidth;
  double codec_seconds_per_element = 1e-9;
};

/// State machine of one ring node for one iteration. Global steps
/// k = 0 .. 2N-3: at each step the node first emits `outgoing(k)`, then
/// consumes exactly one frame via `incoming(k)`. `finalize()` performs
/// the last local decode, which has no concurrent download.
class RarNodeEngine {
 public:
  RarNodeEngine(int node, const IterationPlan& plan,
                const NodeControlInput& control, VecXd gradient);

  int total_steps() const;
  std::optional<RarFrame> outgoing(int k);
  void incoming(int k, RarFrame frame,
                StepOrder order = StepOrder::DownloadThenCompress);
  void finalize();
  RarNodeResult take_result();

  int node() const { return node_; }

 private:
  std::vector<std::uint8_t> encode_own_segment(int segment, bool count_startup);
  std::vector<std::uint8_t> encode_merged(int segment, RarPhase phase, int step);
  void merge_segment(int segment, int step,
                     const std::vector<std::uint8_t>& payload, StepOrder order);
  void decode_segment(int segment, const std::vector<std::uint8_t>& payload,
                      bool overlapped, int step);
  std::vector<std::uint8_t> control_bytes() const;
  void absorb_control(ByteReader& reader);

  int node_;
  const IterationPlan& plan_;
  NodeControlInput control_in_;
  VecXd gradient_;
  RarNodeResult result_;

  // Working buffers, all indexed by segment id.
  std::vector<VecXd> raw_accum_;                         // RAW working sums
  std::vector<std::vector<CompressedSliceD>> gvq_accum_; // coefficient sums
  std::vector<VecXd> gvq_raw_accum_;                     // raw blocks in GVQ mode
  std::vector<VecXd> scalar_accum_;                      // dequantized sums
  std::vector<std::vector<std::uint8_t>> hold_;          // circulating frames kept for the successor
  int pending_decode_ = -1;                              // segment decoded one step late
  ControlSummary control_accum_;
  std::vector<double> loss_num_, loss_den_;              // per layer
  std::vector<std::uint32_t> loss_slices_;
  bool finalized_ = false;
};

/// Lowest-level driver: one plan per node (they must agree on everything
/// but may hold their own compressor instances), explicit transports,
/// lockstep or threaded execution.
RarIterationResult run_ring_custom(
    std::span<const IterationPlan> plans,
    const std::vector<NodeControlInput>& control,
    const std::vector<VecXd>& gradients, const NetModel& net,
    const std::function<Transport&(int)>& endpoint, bool threaded,
    StepOrder order = StepOrder::DownloadThenCompress,
    std::chrono::milliseconds timeout = std::chrono::milliseconds(30000));

/// Runs one full iteration over in-process queues under a deterministic
/// round-robin scheduler: every node sends, then every node receives, one
/// global step at a time.
RarIterationResult run_ring_iteration(
    const IterationPlan& plan, const std::vector<NodeControlInput>& control,
    const std::vector<VecXd>& gradients, const NetModel& net,
    StepOrder order = StepOrder::DownloadThenCompress);

/// Same protocol, one thread per node over arbitrary transports.
RarIterationResult run_ring_iteration_threaded(
    const IterationPlan& plan, const std::vector<NodeControlInput>& control,
    const std::vector<VecXd>& gradients, const NetModel& net,
    const std::function<Transport&(int)>& endpoint,
    std::chrono::milliseconds timeout = std::chrono::milliseconds(30000));

/// Nominal per-node traffic of one aggregation (payload only, float32
/// elements): every node forwards 2(N-1) segments of M/N elements.
double bytes_per_node(AggMode mode, double m_elements, int nodes,
                      double compression_ratio, double residual_elements = 0,
                      int scalar_bits = 4);

/// Derives the sim-time total from per-node step work profiles.
double simulated_aggregation_seconds(const RarIterationResult& result,
                                     const NetModel& net);

}  // namespace gvq
