#include "gvq/rar.hpp"

#include <algorithm>
#include <thread>

#include "gvq/binio.hpp"
#include "gvq/rng.hpp"
#include "gvq/scalar_codec.hpp"

namespace gvq {

const char* to_string(AggMode mode) {
  switch (mode) {
    case AggMode::Raw: return "raw";
    case AggMode::Gvq: return "gvq";
    case AggMode::Scalar: return "scalar";
  }
  return "?";
}

const char* to_string(RarPhase phase) {
  return phase == RarPhase::CompressRound ? "compress" : "circulate";
}

AggMode agg_mode_from_string(const std::string& name) {
  if (name == "raw") return AggMode::Raw;
  if (name == "gvq") return AggMode::Gvq;
  if (name == "scalar") return AggMode::Scalar;
  throw ConfigError("unknown mode '" + name + "' (raw | gvq | scalar)");
}

std::vector<std::uint8_t> encode_frame(const RarFrame& frame) {
  std::vector<std::uint8_t> out;
  out.reserve(kRarHeaderBytes + frame.payload.size());
  put_u32(out, frame.iteration);
  out.push_back(static_cast<std::uint8_t>(frame.phase));
  out.push_back(static_cast<std::uint8_t>(frame.mode));
  put_u16(out, frame.step);
  put_u16(out, frame.segment);
  put_u32(out, static_cast<std::uint32_t>(frame.payload.size()));
  out.insert(out.end(), frame.payload.begin(), frame.payload.end());
  return out;
}

RarFrame decode_frame(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  RarFrame frame;
  frame.iteration = r.u32();
  const std::uint8_t phase = r.bytes(1)[0];
  const std::uint8_t mode = r.bytes(1)[0];
  if (phase > 1) throw ProtocolError("decode_frame: bad phase byte");
  if (mode > 2) throw ProtocolError("decode_frame: bad mode byte");
  frame.phase = static_cast<RarPhase>(phase);
  frame.mode = static_cast<AggMode>(mode);
  frame.step = r.u16();
  frame.segment = r.u16();
  const std::uint32_t len = r.u32();
  if (len != r.remaining())
    throw ProtocolError("decode_frame: payload length mismatch");
  const std::uint8_t* p = r.bytes(len);
  frame.payload.assign(p, p + len);
  return frame;
}

namespace {

void put_wire(std::vector<std::uint8_t>& out, double v, WirePrecision wp) {
  if (wp == WirePrecision::F32)
    put_f32(out, static_cast<float>(v));
  else
    put_f64(out, v);
}

double get_wire(ByteReader& r, WirePrecision wp) {
  return wp == WirePrecision::F32 ? static_cast<double>(r.f32()) : r.f64();
}

std::uint64_t requant_seed(const IterationPlan& plan, RarPhase phase, int step,
                           int segment, int node) {
  return mix_seed(plan.seed, plan.iteration,
                  static_cast<std::uint64_t>(phase),
                  static_cast<std::uint64_t>(step),
                  static_cast<std::uint64_t>(segment),
                  static_cast<std::uint64_t>(node));
}

}  // namespace

// ---------------------------------------------------------------------------

RarNodeEngine::RarNodeEngine(int node, const IterationPlan& plan,
                             const NodeControlInput& control, VecXd gradient)
    : node_(node), plan_(plan), control_in_(control), gradient_(std::move(gradient)) {
  if (plan.nodes < 1) throw ConfigError("RarNodeEngine: bad node count");
  if (node < 0 || node >= plan.nodes)
    throw ConfigError("RarNodeEngine: node id out of range");
  if (static_cast<int>(plan.segments.size()) != plan.nodes)
    throw ConfigError("RarNodeEngine: plan needs one segment per node");
  if (gradient_.size() != plan.total_elements())
    throw Error("RarNodeEngine: gradient length does not match segment map");
  if (control_in_.layer_loss_above.size() != static_cast<std::size_t>(plan.layers) ||
      control_in_.layer_reported.size() != static_cast<std::size_t>(plan.layers))
    throw ConfigError("RarNodeEngine: control input needs one flag per layer");

  const std::size_t n_seg = plan.segments.size();
  raw_accum_.resize(n_seg);
  gvq_accum_.resize(n_seg);
  gvq_raw_accum_.resize(n_seg);
  scalar_accum_.resize(n_seg);
  hold_.resize(n_seg);

  result_.aggregated = VecXd::Zero(gradient_.size());
  result_.layer_rel_loss.assign(plan.layers, -1.0);
  result_.ops = SegmentOpCounts(n_seg);
  result_.steps.resize(std::max(0, total_steps()));
  loss_num_.assign(plan.layers, 0.0);
  loss_den_.assign(plan.layers, 0.0);
  loss_slices_.assign(plan.layers, 0);

  control_accum_.layer_loss_above.assign(plan.layers, 0);
  control_accum_.layer_reported.assign(plan.layers, 0);
  for (int l = 0; l < plan.layers; ++l) {
    control_accum_.layer_loss_above[l] = control.layer_loss_above[l] ? 1 : 0;
    control_accum_.layer_reported[l] = control.layer_reported[l] ? 1 : 0;
  }
}

int RarNodeEngine::total_steps() const {
  return plan_.nodes == 1 ? 0 : 2 * plan_.nodes - 2;
}

std::vector<std::uint8_t> RarNodeEngine::control_bytes() const {
  std::vector<std::uint8_t> out;
  put_u32(out, static_cast<std::uint32_t>(plan_.layers));
  for (int l = 0; l < plan_.layers; ++l) {
    put_u32(out, control_accum_.layer_loss_above[l]);
    put_u32(out, control_accum_.layer_reported[l]);
  }
  put_u64(out, control_in_.table_hash);
  out.push_back(control_accum_.hash_consistent ? 1 : 0);
  return out;
}

void RarNodeEngine::absorb_control(ByteReader& r) {
  const std::uint32_t layers = r.u32();
  if (layers != static_cast<std::uint32_t>(plan_.layers))
    throw ProtocolError("control block: layer count mismatch");
  // The incoming chain replaces the previous one (each compression-round
  // frame carries the chain of its own segment); our contribution is
  // re-added on top.
  for (int l = 0; l < plan_.layers; ++l) {
    const std::uint32_t above = r.u32();
    const std::uint32_t reported = r.u32();
    control_accum_.layer_loss_above[l] =
        above + (control_in_.layer_loss_above[l] ? 1 : 0);
    control_accum_.layer_reported[l] =
        reported + (control_in_.layer_reported[l] ? 1 : 0);
  }
  const std::uint64_t hash = r.u64();
  const bool ok = r.bytes(1)[0] != 0;
  control_accum_.hash_consistent = ok && (hash == control_in_.table_hash);
}

std::vector<std::uint8_t> RarNodeEngine::encode_own_segment(int segment,
                                                            bool count_startup) {
  const SegmentSpec& seg = plan_.segments[segment];
  std::vector<std::uint8_t> out;
  switch (plan_.mode) {
    case AggMode::Raw: {
      out.reserve(seg.length * wire_scalar_bytes(plan_.wire));
      for (Index i = 0; i < seg.length; ++i)
        put_wire(out, gradient_[seg.start + i], plan_.wire);
      result_.sent.raw_values += out.size();
      break;
    }
    case AggMode::Gvq: {
      auto& coeffs = gvq_accum_[segment];
      auto& raws = gvq_raw_accum_[segment];
      raws = VecXd::Zero(seg.length);
      for (std::uint32_t s = seg.first_slice; s < seg.first_slice + seg.slice_count; ++s) {
        const SlicePlan& sp = plan_.slices[s];
        const VecXd own = gradient_.segment(sp.spec.start, sp.spec.length);
        if (sp.coding == SliceCoding::Coefficients) {
          auto cs = compress(own, *sp.comp, plan_.nodes, sp.spec.id);
          if (plan_.monitor_loss) {
            const VecXd share = sp.comp->mean / double(plan_.nodes);
            const double num =
                (own - (sp.comp->basis * cs.coefficients + share)).squaredNorm();
            const double den = (own - share).squaredNorm();
            loss_num_[sp.spec.layer] += num;
            loss_den_[sp.spec.layer] += den;
            loss_slices_[sp.spec.layer] += 1;
          }
          const std::size_t before = out.size();
          for (Index i = 0; i < cs.coefficients.size(); ++i)
            put_wire(out, cs.coefficients[i], plan_.wire);
          result_.sent.coefficients += out.size() - before;
          coeffs.push_back(std::move(cs));
        } else {
          const std::size_t before = out.size();
          for (Index i = 0; i < own.size(); ++i) put_wire(out, own[i], plan_.wire);
          result_.sent.raw_values += out.size() - before;
          raws.segment(sp.spec.start - seg.start, sp.spec.length) = own;
        }
      }
      result_.ops.encode_own[segment] += 1;
      if (count_startup) result_.startup_elements += seg.length;
      break;
    }
    case AggMode::Scalar: {
      const VecXd own = gradient_.segment(seg.start, seg.length);
      const auto q = quantize(own, plan_.scalar_bits,
                              requant_seed(plan_, RarPhase::CompressRound, 0,
                                           segment, node_));
      out = quantized_to_bytes(q);
      result_.sent.scalar += out.size();
      result_.ops.encode_own[segment] += 1;
      if (count_startup) result_.startup_elements += seg.length;
      break;
    }
  }
  return out;
}

std::optional<RarFrame> RarNodeEngine::outgoing(int k) {
  const int n = plan_.nodes;
  if (n == 1) return std::nullopt;
  if (k < 0 || k > total_steps() - 1)
    throw ProtocolError("outgoing: step out of range");

  RarFrame frame;
  frame.iteration = plan_.iteration;
  frame.mode = plan_.mode;

  if (k == 0) {
    frame.phase = RarPhase::CompressRound;
    frame.step = 0;
    frame.segment = static_cast<std::uint16_t>(node_);
    frame.payload = control_bytes();
    result_.sent.control += frame.payload.size();
    auto data = encode_own_segment(node_, /*count_startup=*/true);
    frame.payload.insert(frame.payload.end(), data.begin(), data.end());
  } else if (k <= n - 2) {
    // Forward the segment merged at the previous step.
    const int segment = ((node_ - k) % n + n) % n;
    frame.phase = RarPhase::CompressRound;
    frame.step = static_cast<std::uint16_t>(k);
    frame.segment = static_cast<std::uint16_t>(segment);
    frame.payload = control_bytes();
    result_.sent.control += frame.payload.size();
    auto data = encode_merged(segment, RarPhase::CompressRound, k);
    frame.payload.insert(frame.payload.end(), data.begin(), data.end());
  } else if (k == n - 1) {
    // The segment finished at the last merge starts circulating.
    const int segment = (node_ + 1) % n;
    frame.phase = RarPhase::CirculateRound;
    frame.step = 0;
    frame.segment = static_cast<std::uint16_t>(segment);
    frame.payload = encode_merged(segment, RarPhase::CirculateRound, 0);
    hold_[segment] = frame.payload;  // our own copy is decoded from the wire form
  } else {
    // Pure forwarding: the frame downloaded one step earlier.
    const int j = k - (n - 1);
    const int segment = ((node_ + 1 - j) % n + n) % n;
    frame.phase = RarPhase::CirculateRound;
    frame.step = static_cast<std::uint16_t>(j);
    frame.segment = static_cast<std::uint16_t>(segment);
    frame.payload = hold_[segment];
    if (frame.payload.empty() && plan_.segments[segment].length > 0)
      throw ProtocolError("outgoing: nothing held for segment " +
                          std::to_string(segment));
    switch (plan_.mode) {
      case AggMode::Raw: result_.sent.raw_values += frame.payload.size(); break;
      case AggMode::Gvq: result_.sent.coefficients += frame.payload.size(); break;
      case AggMode::Scalar: result_.sent.scalar += frame.payload.size(); break;
    }
  }
  result_.sent.total += frame.payload.size();
  return frame;
}

void RarNodeEngine::incoming(int k, RarFrame frame, StepOrder order) {
  const int n = plan_.nodes;
  if (n == 1) throw ProtocolError("incoming: single-node ring has no frames");
  if (k < 0 || k > total_steps() - 1)
    throw ProtocolError("incoming: step out of range");
  if (frame.iteration != plan_.iteration)
    throw ProtocolError("incoming: frame for iteration " +
                        std::to_string(frame.iteration) + ", expected " +
                        std::to_string(plan_.iteration));
  if (frame.mode != plan_.mode)
    throw ProtocolError("incoming: frame mode mismatch");

  result_.steps[k].bytes_in = frame.payload.size() + kRarHeaderBytes +
                              kFrameHeaderBytes;

  if (k <= n - 2) {
    // Compression round, step i = k + 1: download segment [n - i] while
    // compressing our own share of the same segment.
    const int i = k + 1;
    const int segment = ((node_ - i) % n + n) % n;
    if (frame.phase != RarPhase::CompressRound ||
        frame.step != static_cast<std::uint16_t>(k) ||
        frame.segment != static_cast<std::uint16_t>(segment))
      throw ProtocolError(
          "incoming: expected compress step " + std::to_string(k) +
          " segment " + std::to_string(segment) + ", got phase " +
          std::to_string(static_cast<int>(frame.phase)) + " step " +
          std::to_string(frame.step) + " segment " +
          std::to_string(frame.segment));
    merge_segment(segment, i, frame.payload, order);
  } else {
    const int j = k - (n - 1);
    const int segment = ((node_ - j) % n + n) % n;
    if (frame.phase != RarPhase::CirculateRound ||
        frame.step != static_cast<std::uint16_t>(j) ||
        frame.segment != static_cast<std::uint16_t>(segment))
      throw ProtocolError("incoming: unexpected circulate frame");
    // Decode of the previously downloaded segment overlaps this download.
    if (j == 0) {
      const int own_finished = (node_ + 1) % n;
      decode_segment(own_finished, hold_[own_finished], /*overlapped=*/true, k);
    } else {
      decode_segment(pending_decode_, hold_[pending_decode_], true, k);
    }
    hold_[segment] = std::move(frame.payload);
    pending_decode_ = segment;
  }
}

void RarNodeEngine::finalize() {
  if (finalized_) return;
  const int n = plan_.nodes;
  if (n == 1) {
    // Degenerate loop: the codec is applied to our own vector only.
    auto payload = encode_own_segment(0, true);
    // Nothing was sent anywhere.
    result_.sent = PayloadBytes{};
    decode_segment(0, payload, /*overlapped=*/false, -1);
  } else {
    decode_segment(pending_decode_, hold_[pending_decode_], false, -1);
  }
  for (int l = 0; l < plan_.layers; ++l)
    if (loss_slices_[l] > 0)
      result_.layer_rel_loss[l] =
          loss_den_[l] > 0 ? loss_num_[l] / loss_den_[l] : 0.0;
  result_.control = control_accum_;
  finalized_ = true;
}

RarNodeResult RarNodeEngine::take_result() {
  if (!finalized_) throw Error("take_result: finalize() first");
  return std::move(result_);
}

void RarNodeEngine::merge_segment(int segment, int step,
                                  const std::vector<std::uint8_t>& payload,
                                  StepOrder order) {
  const SegmentSpec& seg = plan_.segments[segment];
  ByteReader r(payload);
  absorb_control(r);

  // The two work items of one step: parsing the download and encoding our
  // own share. They touch disjoint state, so either order gives the same
  // result; tests drive both.
  VecXd own_raw;
  std::vector<CompressedSliceD> own_coeffs;
  VecXd own_gvq_raw;

  auto local_item = [&] {
    switch (plan_.mode) {
      case AggMode::Raw:
        own_raw = gradient_.segment(seg.start, seg.length);
        break;
      case AggMode::Gvq: {
        own_gvq_raw = VecXd::Zero(seg.length);
        for (std::uint32_t s = seg.first_slice;
             s < seg.first_slice + seg.slice_count; ++s) {
          const SlicePlan& sp = plan_.slices[s];
          const VecXd own = gradient_.segment(sp.spec.start, sp.spec.length);
          if (sp.coding == SliceCoding::Coefficients) {
            auto cs = compress(own, *sp.comp, plan_.nodes, sp.spec.id);
            if (plan_.monitor_loss) {
              const VecXd share = sp.comp->mean / double(plan_.nodes);
              loss_num_[sp.spec.layer] +=
                  (own - (sp.comp->basis * cs.coefficients + share)).squaredNorm();
              loss_den_[sp.spec.layer] += (own - share).squaredNorm();
              loss_slices_[sp.spec.layer] += 1;
            }
            own_coeffs.push_back(std::move(cs));
          } else {
            own_gvq_raw.segment(sp.spec.start - seg.start, sp.spec.length) = own;
          }
        }
        result_.ops.encode_own[segment] += 1;
        result_.steps[step - 1].overlapped_elements += seg.length;
        break;
      }
      case AggMode::Scalar:
        // Nothing can be prepared before the download arrives.
        break;
    }
  };

  VecXd downloaded_raw;
  std::vector<CompressedSliceD> downloaded_coeffs;
  VecXd downloaded_gvq_raw;
  QuantizedVector downloaded_q;

  auto download_item = [&] {
    switch (plan_.mode) {
      case AggMode::Raw: {
        downloaded_raw.resize(seg.length);
        for (Index i = 0; i < seg.length; ++i)
          downloaded_raw[i] = get_wire(r, plan_.wire);
        break;
      }
      case AggMode::Gvq: {
        downloaded_gvq_raw = VecXd::Zero(seg.length);
        for (std::uint32_t s = seg.first_slice;
             s < seg.first_slice + seg.slice_count; ++s) {
          const SlicePlan& sp = plan_.slices[s];
          if (sp.coding == SliceCoding::Coefficients) {
            CompressedSliceD cs;
            cs.slice = sp.spec.id;
            cs.version = sp.comp->version;
            cs.coefficients.resize(sp.comp->dim_out());
            for (Index i = 0; i < cs.coefficients.size(); ++i)
              cs.coefficients[i] = get_wire(r, plan_.wire);
            cs.contributors = static_cast<std::uint32_t>(step);
            downloaded_coeffs.push_back(std::move(cs));
          } else {
            for (Index i = 0; i < sp.spec.length; ++i)
              downloaded_gvq_raw[sp.spec.start - seg.start + i] =
                  get_wire(r, plan_.wire);
          }
        }
        break;
      }
      case AggMode::Scalar: {
        const std::size_t expect =
            quantized_size_bytes(seg.length, plan_.scalar_bits);
        if (r.remaining() != expect)
          throw ProtocolError("merge: scalar payload size mismatch");
        downloaded_q = quantized_from_bytes(r.bytes(expect), expect, seg.length,
                                            plan_.scalar_bits);
        break;
      }
    }
    if (r.remaining() != 0)
      throw ProtocolError("merge: trailing bytes in payload");
  };

  if (order == StepOrder::CompressThenDownload) {
    local_item();
    download_item();
  } else {
    download_item();
    local_item();
  }

  // Join: combine the two halves in the compressed domain.
  switch (plan_.mode) {
    case AggMode::Raw:
      raw_accum_[segment] = downloaded_raw + own_raw;
      result_.steps[step - 1].serial_elements += seg.length;
      break;
    case AggMode::Gvq: {
      auto& acc = gvq_accum_[segment];
      acc.clear();
      std::uint64_t coeff_elems = 0;
      for (std::size_t i = 0; i < downloaded_coeffs.size(); ++i) {
        acc.push_back(aggregate(downloaded_coeffs[i], own_coeffs[i]));
        coeff_elems += acc.back().coefficients.size();
      }
      gvq_raw_accum_[segment] = downloaded_gvq_raw + own_gvq_raw;
      // Coefficient sums plus element-wise adds for the raw blocks.
      result_.steps[step - 1].serial_elements += coeff_elems;
      for (std::uint32_t s = seg.first_slice;
           s < seg.first_slice + seg.slice_count; ++s)
        if (plan_.slices[s].coding == SliceCoding::RawValues)
          result_.steps[step - 1].serial_elements += plan_.slices[s].spec.length;
      break;
    }
    case AggMode::Scalar: {
      const VecXd decoded = dequantize(downloaded_q);
      result_.ops.merge_dequantize[segment] += 1;
      scalar_accum_[segment] =
          decoded + gradient_.segment(seg.start, seg.length);
      // dequantize + add + (requantize happens at the next encode, but it
      // is part of the same non-overlapped chain)
      result_.steps[step - 1].serial_elements += 3 * seg.length;
      break;
    }
  }
}

std::vector<std::uint8_t> RarNodeEngine::encode_merged(int segment,
                                                       RarPhase phase,
                                                       int step) {
  const SegmentSpec& seg = plan_.segments[segment];
  std::vector<std::uint8_t> out;
  switch (plan_.mode) {
    case AggMode::Raw: {
      const VecXd& acc = raw_accum_[segment];
      if (acc.size() != seg.length)
        throw ProtocolError("encode_merged: segment not merged yet");
      for (Index i = 0; i < seg.length; ++i) put_wire(out, acc[i], plan_.wire);
      result_.sent.raw_values += out.size();
      break;
    }
    case AggMode::Gvq: {
      const auto& acc = gvq_accum_[segment];
      const VecXd& raws = gvq_raw_accum_[segment];
      std::size_t next_coeff = 0;
      for (std::uint32_t s = seg.first_slice;
           s < seg.first_slice + seg.slice_count; ++s) {
        const SlicePlan& sp = plan_.slices[s];
        if (sp.coding == SliceCoding::Coefficients) {
          const auto& cs = acc.at(next_coeff++);
          const std::size_t before = out.size();
          for (Index i = 0; i < cs.coefficients.size(); ++i)
            put_wire(out, cs.coefficients[i], plan_.wire);
          result_.sent.coefficients += out.size() - before;
        } else {
          const std::size_t before = out.size();
          for (Index i = 0; i < sp.spec.length; ++i)
            put_wire(out, raws[sp.spec.start - seg.start + i], plan_.wire);
          result_.sent.raw_values += out.size() - before;
        }
      }
      break;
    }
    case AggMode::Scalar: {
      const VecXd& acc = scalar_accum_[segment];
      if (acc.size() != seg.length)
        throw ProtocolError("encode_merged: segment not merged yet");
      const auto q = quantize(acc, plan_.scalar_bits,
                              requant_seed(plan_, phase, step, segment, node_));
      out = quantized_to_bytes(q);
      result_.ops.merge_quantize[segment] += 1;
      result_.sent.scalar += out.size();
      break;
    }
  }
  return out;
}

void RarNodeEngine::decode_segment(int segment,
                                   const std::vector<std::uint8_t>& payload,
                                   bool overlapped, int step) {
  const SegmentSpec& seg = plan_.segments[segment];
  ByteReader r(payload.data(), payload.size());
  VecXd values(seg.length);
  std::uint64_t codec_elements = 0;
  switch (plan_.mode) {
    case AggMode::Raw: {
      for (Index i = 0; i < seg.length; ++i) values[i] = get_wire(r, plan_.wire);
      break;
    }
    case AggMode::Gvq: {
      for (std::uint32_t s = seg.first_slice;
           s < seg.first_slice + seg.slice_count; ++s) {
        const SlicePlan& sp = plan_.slices[s];
        if (sp.coding == SliceCoding::Coefficients) {
          CompressedSliceD cs;
          cs.slice = sp.spec.id;
          cs.version = sp.comp->version;
          cs.coefficients.resize(sp.comp->dim_out());
          for (Index i = 0; i < cs.coefficients.size(); ++i)
            cs.coefficients[i] = get_wire(r, plan_.wire);
          cs.contributors = static_cast<std::uint32_t>(plan_.nodes);
          values.segment(sp.spec.start - seg.start, sp.spec.length) =
              decompress(cs, *sp.comp, plan_.nodes);
          codec_elements += sp.spec.length;
        } else {
          for (Index i = 0; i < sp.spec.length; ++i)
            values[sp.spec.start - seg.start + i] = get_wire(r, plan_.wire);
        }
      }
      result_.ops.decode_output[segment] += 1;
      break;
    }
    case AggMode::Scalar: {
      const std::size_t expect =
          quantized_size_bytes(seg.length, plan_.scalar_bits);
      if (r.remaining() != expect)
        throw ProtocolError("decode: scalar payload size mismatch");
      values = dequantize(quantized_from_bytes(r.bytes(expect), expect,
                                               seg.length, plan_.scalar_bits));
      codec_elements += seg.length;
      result_.ops.decode_output[segment] += 1;
      break;
    }
  }
  if (r.remaining() != 0)
    throw ProtocolError("decode: trailing bytes in payload");
  result_.aggregated.segment(seg.start, seg.length) = values;
  if (overlapped && step >= 0)
    result_.steps[step].overlapped_elements += codec_elements;
  else
    result_.final_decode_elements += codec_elements;
}

// ---------------------------------------------------------------------------

double simulated_aggregation_seconds(const RarIterationResult& result,
                                     const NetModel& net) {
  const double c = net.codec_seconds_per_element;
  double total = 0.0;
  std::uint64_t startup = 0, final_decode = 0;
  std::size_t steps = 0;
  for (const auto& nr : result.nodes) {
    startup = std::max(startup, nr.startup_elements);
    final_decode = std::max(final_decode, nr.final_decode_elements);
    steps = std::max(steps, nr.steps.size());
  }
  total += static_cast<double>(startup) * c;
  for (std::size_t k = 0; k < steps; ++k) {
    double step_time = 0.0;
    for (const auto& nr : result.nodes) {
      if (k >= nr.steps.size()) continue;
      const StepWork& w = nr.steps[k];
      const double transfer = w.bytes_in == 0
                                  ? 0.0
                                  : simulated_transfer_time(w.bytes_in, net.bandwidth);
      const double overlapped = static_cast<double>(w.overlapped_elements) * c;
      const double serial = static_cast<double>(w.serial_elements) * c;
      step_time = std::max(step_time, std::max(transfer, overlapped) + serial);
    }
    total += step_time;
  }
  total += static_cast<double>(final_decode) * c;
  return total;
}

RarIterationResult run_ring_custom(
    std::span<const IterationPlan> plans,
    const std::vector<NodeControlInput>& control,
    const std::vector<VecXd>& gradients, const NetModel& net,
    const std::function<Transport&(int)>& endpoint, bool threaded,
    StepOrder order, std::chrono::milliseconds timeout) {
  if (plans.empty()) throw ConfigError("run_ring_custom: no plans");
  const int n = plans[0].nodes;
  if (static_cast<int>(plans.size()) != n ||
      static_cast<int>(gradients.size()) != n ||
      static_cast<int>(control.size()) != n)
    throw ConfigError("run_ring_custom: need one plan, gradient and control per node");

  std::vector<std::unique_ptr<RarNodeEngine>> engines(n);
  for (int i = 0; i < n; ++i)
    engines[i] =
        std::make_unique<RarNodeEngine>(i, plans[i], control[i], gradients[i]);

  const int steps = n == 1 ? 0 : 2 * n - 2;
  if (!threaded) {
    // Deterministic round-robin: all sends, then all receives, per step.
    for (int k = 0; k < steps; ++k) {
      for (int i = 0; i < n; ++i) {
        auto frame = engines[i]->outgoing(k);
        if (frame) endpoint(i).send((i + 1) % n, encode_frame(*frame));
      }
      for (int i = 0; i < n; ++i) {
        auto bytes = endpoint(i).recv((i + n - 1) % n, timeout);
        engines[i]->incoming(k, decode_frame(bytes), order);
      }
    }
    for (int i = 0; i < n; ++i) engines[i]->finalize();
  } else {
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> threads;
    for (int i = 0; i < n; ++i) {
      threads.emplace_back([&, i] {
        try {
          Transport& tp = endpoint(i);
          for (int k = 0; k < steps; ++k) {
            auto frame = engines[i]->outgoing(k);
            if (frame) tp.send((i + 1) % n, encode_frame(*frame));
            auto bytes = tp.recv((i + n - 1) % n, timeout);
            engines[i]->incoming(k, decode_frame(bytes), order);
          }
          engines[i]->finalize();
        } catch (...) {
          errors[i] = std::current_exception();
        }
      });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  RarIterationResult result;
  for (int i = 0; i < n; ++i) result.nodes.push_back(engines[i]->take_result());
  result.sim_agg_seconds = simulated_aggregation_seconds(result, net);
  return result;
}

RarIterationResult run_ring_iteration(const IterationPlan& plan,
                                      const std::vector<NodeControlInput>& control,
                                      const std::vector<VecXd>& gradients,
                                      const NetModel& net, StepOrder order) {
  InprocRing ring(plan.nodes);
  std::vector<IterationPlan> plans(plan.nodes, plan);
  return run_ring_custom(plans, control, gradients, net,
                         [&ring](int i) -> Transport& { return ring.endpoint(i); },
                         /*threaded=*/false, order);
}

RarIterationResult run_ring_iteration_threaded(
    const IterationPlan& plan, const std::vector<NodeControlInput>& control,
    const std::vector<VecXd>& gradients, const NetModel& net,
    const std::function<Transport&(int)>& endpoint,
    std::chrono::milliseconds timeout) {
  std::vector<IterationPlan> plans(plan.nodes, plan);
  return run_ring_custom(plans, control, gradients, net, endpoint,
                         /*threaded=*/true, StepOrder::CompressThenDownload,
                         timeout);
}

double bytes_per_node(AggMode mode, double m_elements, int nodes,
                      double compression_ratio, double residual_elements,
                      int scalar_bits) {
  if (nodes < 1) throw Error("bytes_per_node: need at least one node");
  if (compression_ratio < 1) throw Error("bytes_per_node: ratio must be >= 1");
  const double hops = 2.0 * (nodes - 1);
  const double seg_elements = m_elements / nodes;
  switch (mode) {
    case AggMode::Raw:
      return hops * seg_elements * 4.0;
    case AggMode::Gvq:
      return hops * ((m_elements / compression_ratio + residual_elements) / nodes) * 4.0;
    case AggMode::Scalar:
      return hops * (seg_elements * (scalar_bits + 1) / 8.0 + 4.0);
  }
  return 0.0;
}

}  // namespace gvq
