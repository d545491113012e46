#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <vector>

#include "gvq/pca.hpp"
#include "gvq/tensor_layout.hpp"
#include "gvq/types.hpp"

namespace gvq {

/// Compression stops for a layer when more than `quorum * N` nodes report
/// a relative local loss above `loss_threshold`.
struct StopRule {
  double loss_threshold = 0.1;
  double quorum = 0.5;
};

/// Warm-up, then repeating cycles of L_t uncompressed (sampling)
/// iterations followed by L_c compressed iterations. A stop event cuts a
/// compressed window short and starts the next cycle immediately.
struct Schedule {
  long warmup = 2500;
  long sample_iters = 100;      // L_t
  long compressed_iters = 400;  // L_c
  double loss_budget = 0.01;    // lambda for dimension selection
  long reuse_factor = 0;        // s; 0 means one compressor per layer
  StopRule stop;

  void validate() const {
    if (warmup < 0) throw ConfigError("schedule: warmup must be >= 0");
    if (sample_iters < 2) throw ConfigError("schedule: L_t must be >= 2");
    if (compressed_iters < 0) throw ConfigError("schedule: L_c must be >= 0");
    if (loss_budget < 0 || loss_budget >= 1)
      throw ConfigError("schedule: loss budget must be in [0, 1)");
    if (reuse_factor < 0) throw ConfigError("schedule: reuse factor must be >= 0");
    if (stop.quorum <= 0 || stop.quorum > 1)
      throw ConfigError("schedule: quorum must be in (0, 1]");
  }
};

enum class Phase : std::uint8_t { Warmup = 0, Sample = 1, Compressed = 2 };

const char* to_string(Phase phase);
Phase phase_from_string(const std::string& name);

struct PhaseTag {
  Phase phase = Phase::Warmup;
  long cycle = 0;

  bool operator==(const PhaseTag&) const = default;
};

/// Deterministic function of the iteration number and the stop history
/// (sorted ascending); no coordination beyond shared stop events needed.
PhaseTag phase_of(long t, const Schedule& schedule,
                  std::span<const long> stop_events = {});

/// Strict-majority style quorum: stop only when *more than* quorum * N
/// nodes are above the threshold.
bool check_stop(std::span<const double> node_rel_losses, const StopRule& rule,
                int nodes);
bool check_stop_counts(std::uint32_t nodes_above, const StopRule& rule,
                       int nodes);

// ---------------------------------------------------------------------------
// Compressor reuse

using CompressorTable =
    std::map<std::uint32_t, std::shared_ptr<const CompressorD>>;

/// Slice ids whose samples feed PCA: the first slice of every group of
/// `reuse_factor` consecutive compressible slices (0 = one group).
std::vector<std::uint32_t> group_lead_slices(
    const std::vector<SliceSpec>& layer_slices, long reuse_factor);

/// Spreads each group lead's compressor over its whole group.
CompressorTable assign_compressors(
    const std::vector<SliceSpec>& layer_slices, long reuse_factor,
    const std::map<std::uint32_t, std::shared_ptr<const CompressorD>>& leads);

/// FNV-1a over ids, versions, dimensions and coefficient bytes. Equal
/// tables hash equal; nodes exchange this to detect divergence.
std::uint64_t table_hash(const CompressorTable& table);

// ---------------------------------------------------------------------------

/// Drives one layer's sampling and compressor lifecycle on one node. All
/// nodes run identical controllers over identical aggregated data, so
/// tables stay in lockstep without a broadcast.
class LayerController {
 public:
  LayerController(std::uint32_t layer, std::vector<SliceSpec> slices,
                  Schedule schedule);

  PhaseTag phase(long t) const;

  /// True when iteration t is a sampling iteration for this layer.
  bool wants_sample(long t) const { return phase(t).phase == Phase::Sample; }

  /// Feeds the aggregated vector of a sampling iteration. All slices were
  /// aggregated uncompressed; only group-lead slices are buffered. Builds
  /// compressors when the L_t-th sample of a cycle arrives.
  void record_sample(long t, const VecXd& aggregated);

  void record_stop(long t);

  bool has_compressors() const { return !table_.empty(); }
  const CompressorTable& table() const { return table_; }
  std::uint64_t hash() const;
  std::span<const long> stop_history() const { return stops_; }
  std::uint32_t version() const { return version_; }

  /// Representative dimension / mean ratio for reporting; {0, 1} before
  /// the first build.
  Index current_dimension() const;
  double current_ratio() const;

  const std::vector<SliceSpec>& slices() const { return slices_; }
  std::uint32_t layer() const { return layer_; }

 private:
  std::uint32_t layer_;
  std::vector<SliceSpec> slices_;        // this layer's slices, in order
  std::vector<SliceSpec> compressible_;  // subset eligible for coefficients
  Schedule schedule_;
  std::vector<std::uint32_t> leads_;
  std::vector<SampleBuffer> buffers_;  // one per group lead
  std::vector<long> stops_;
  CompressorTable table_;
  std::uint32_t version_ = 0;
  long buffer_cycle_ = -1;  // cycle the buffers belong to
};

}  // namespace gvq
