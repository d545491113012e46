#include "gvq/schedule.hpp"

#include <algorithm>

namespace gvq {

const char* to_string(Phase phase) {
  switch (phase) {
    case Phase::Warmup: return "warmup";
    case Phase::Sample: return "sample";
    case Phase::Compressed: return "compressed";
  }
  return "?";
}

Phase phase_from_string(const std::string& name) {
  if (name == "warmup") return Phase::Warmup;
  if (name == "sample") return Phase::Sample;
  if (name == "compressed") return Phase::Compressed;
  throw ConfigError("unknown phase '" + name + "'");
}

PhaseTag phase_of(long t, const Schedule& schedule,
                  std::span<const long> stop_events) {
  if (t < 0) throw Error("phase_of: iteration must be >= 0");
  schedule.validate();
  if (t < schedule.warmup) return {Phase::Warmup, 0};

  std::size_t next_event = 0;
  long cursor = schedule.warmup;
  long cycle = 0;
  for (;;) {
    const long sample_end = cursor + schedule.sample_iters;
    if (t < sample_end) return {Phase::Sample, cycle};

    long compressed_end = sample_end + schedule.compressed_iters;
    // A stop event inside the compressed window truncates it; the next
    // cycle starts on the following iteration.
    while (next_event < stop_events.size() && stop_events[next_event] < sample_end)
      ++next_event;  // events outside any compressed window are ignored
    if (next_event < stop_events.size() &&
        stop_events[next_event] < compressed_end)
      compressed_end = stop_events[next_event] + 1;
    if (t < compressed_end) return {Phase::Compressed, cycle};
    cursor = compressed_end;
    ++cycle;
  }
}

bool check_stop_counts(std::uint32_t nodes_above, const StopRule& rule,
                       int nodes) {
  return static_cast<double>(nodes_above) >
         rule.quorum * static_cast<double>(nodes);
}

bool check_stop(std::span<const double> node_rel_losses, const StopRule& rule,
                int nodes) {
  std::uint32_t above = 0;
  for (double loss : node_rel_losses)
    if (loss > rule.loss_threshold) ++above;
  return check_stop_counts(above, rule, nodes);
}

std::vector<std::uint32_t> group_lead_slices(
    const std::vector<SliceSpec>& layer_slices, long reuse_factor) {
  std::vector<std::uint32_t> leads;
  long position = 0;
  for (const auto& s : layer_slices) {
    if (!s.compressible) continue;
    if (reuse_factor == 0) {
      if (leads.empty()) leads.push_back(s.id);
    } else if (position % reuse_factor == 0) {
      leads.push_back(s.id);
    }
    ++position;
  }
  return leads;
}

CompressorTable assign_compressors(
    const std::vector<SliceSpec>& layer_slices, long reuse_factor,
    const std::map<std::uint32_t, std::shared_ptr<const CompressorD>>& leads) {
  CompressorTable table;
  std::shared_ptr<const CompressorD> current;
  long position = 0;
  for (const auto& s : layer_slices) {
    if (!s.compressible) continue;
    const bool is_lead =
        reuse_factor == 0 ? position == 0 : position % reuse_factor == 0;
    if (is_lead) {
      auto it = leads.find(s.id);
      if (it == leads.end())
        throw Error("assign_compressors: missing compressor for group lead slice " +
                    std::to_string(s.id));
      current = it->second;
    }
    if (!current)
      throw Error("assign_compressors: no compressor for slice " +
                  std::to_string(s.id));
    if (current->dim_in() != s.length)
      throw Error("assign_compressors: compressor K does not match slice length");
    table[s.id] = current;
    ++position;
  }
  return table;
}

std::uint64_t table_hash(const CompressorTable& table) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](const void* data, std::size_t size) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& [id, comp] : table) {
    mix(&id, sizeof(id));
    mix(&comp->version, sizeof(comp->version));
    const Index k = comp->dim_in(), d = comp->dim_out();
    mix(&k, sizeof(k));
    mix(&d, sizeof(d));
    mix(comp->mean.data(), sizeof(double) * k);
    mix(comp->basis.data(), sizeof(double) * k * d);
  }
  return h;
}

// ---------------------------------------------------------------------------

LayerController::LayerController(std::uint32_t layer,
                                 std::vector<SliceSpec> slices,
                                 Schedule schedule)
    : layer_(layer), slices_(std::move(slices)), schedule_(schedule) {
  schedule_.validate();
  for (const auto& s : slices_) {
    if (s.layer != layer_)
      throw Error("LayerController: slice from another layer");
    if (s.compressible) compressible_.push_back(s);
  }
  leads_ = group_lead_slices(slices_, schedule_.reuse_factor);
  for (std::uint32_t lead : leads_) {
    const auto it =
        std::find_if(slices_.begin(), slices_.end(),
                     [lead](const SliceSpec& s) { return s.id == lead; });
    buffers_.emplace_back(lead, it->length, schedule_.sample_iters);
  }
}

PhaseTag LayerController::phase(long t) const {
  return phase_of(t, schedule_, stops_);
}

void LayerController::record_sample(long t, const VecXd& aggregated) {
  const PhaseTag tag = phase(t);
  if (tag.phase != Phase::Sample)
    throw Error("record_sample: iteration " + std::to_string(t) +
                " is not a sampling iteration for layer " +
                std::to_string(layer_));
  if (tag.cycle != buffer_cycle_) {
    for (auto& b : buffers_) b.reset();  // fresh samples every cycle
    buffer_cycle_ = tag.cycle;
  }
  for (std::size_t g = 0; g < leads_.size(); ++g) {
    const auto it = std::find_if(
        slices_.begin(), slices_.end(),
        [&](const SliceSpec& s) { return s.id == leads_[g]; });
    buffers_[g].add(aggregated.segment(it->start, it->length));
  }
  if (!buffers_.empty() && buffers_.front().full()) {
    ++version_;
    std::map<std::uint32_t, std::shared_ptr<const CompressorD>> built;
    for (auto& b : buffers_) {
      auto comp = std::make_shared<CompressorD>(
          build_compressor(b, schedule_.loss_budget, version_));
      built[b.slice] = std::move(comp);
    }
    table_ = assign_compressors(slices_, schedule_.reuse_factor, built);
  }
}

void LayerController::record_stop(long t) {
  if (phase(t).phase != Phase::Compressed)
    throw Error("record_stop: iteration " + std::to_string(t) +
                " is not in a compressed window");
  stops_.push_back(t);
}

std::uint64_t LayerController::hash() const { return table_hash(table_); }

Index LayerController::current_dimension() const {
  if (table_.empty()) return 0;
  return table_.begin()->second->dim_out();
}

double LayerController::current_ratio() const {
  if (table_.empty()) return 1.0;
  double sum = 0.0;
  std::size_t groups = 0;
  const CompressorD* last = nullptr;
  for (const auto& [id, comp] : table_) {
    if (comp.get() != last) {
      sum += comp->ratio();
      ++groups;
      last = comp.get();
    }
  }
  return groups == 0 ? 1.0 : sum / static_cast<double>(groups);
}

}  // namespace gvq
