#include <doctest.h>

#include "gvq/rar.hpp"
#include "gvq/rng.hpp"
#include "gvq/scalar_codec.hpp"
#include "gvq/sim.hpp"

using namespace gvq;

namespace {

MatXd random_matrix(Index rows, Index cols, std::uint64_t seed) {
  Rng rng(seed);
  MatXd m(rows, cols);
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r) m(r, c) = rng.normal();
  return m;
}

std::shared_ptr<const CompressorD> random_compressor(Index k, Index d,
                                                     std::uint64_t seed) {
  auto comp = std::make_shared<CompressorD>();
  Eigen::HouseholderQR<MatXd> qr(random_matrix(k, k, seed));
  comp->basis = (qr.householderQ() * MatXd::Identity(k, k)).leftCols(d);
  comp->mean = VecXd(random_matrix(k, 1, seed + 1));
  comp->spectrum = VecXd::Zero(k);
  comp->version = 1;
  return comp;
}

/// Plan over one conv layer of `slices` slices of length k, all
/// compressible in GVQ mode with per-slice random compressors.
struct TestRig {
  FlatLayout layout;
  std::vector<SliceSpec> slices;
  IterationPlan plan;
  std::vector<NodeControlInput> control;
  std::vector<VecXd> gradients;

  TestRig(int nodes, Index n_slices, Index k, AggMode mode,
          WirePrecision wire = WirePrecision::F64, std::uint64_t seed = 1,
          Index d = 0) {
    layout = make_layout({{LayerShape{1, 1, n_slices, k}, LayerKind::Conv}});
    slices = make_slices(layout, k);
    plan.iteration = 3;
    plan.mode = mode;
    plan.nodes = nodes;
    plan.layers = 1;
    plan.wire = wire;
    plan.scalar_bits = 4;
    plan.seed = seed;
    plan.segments = make_segments(slices, nodes);
    for (const auto& s : slices) {
      SlicePlan sp;
      sp.spec = s;
      if (mode == AggMode::Gvq) {
        sp.coding = SliceCoding::Coefficients;
        sp.comp = random_compressor(k, d == 0 ? std::max<Index>(1, k / 2) : d,
                                    seed + 10 * s.id);
      }
      plan.slices.push_back(sp);
    }
    control.resize(nodes);
    for (auto& c : control) {
      c.layer_loss_above.assign(1, 0);
      c.layer_reported.assign(1, 0);
      c.table_hash = 0x1234;
    }
    for (int n = 0; n < nodes; ++n)
      gradients.push_back(random_matrix(layout.total, 1, seed + 100 + n));
  }

  VecXd exact_sum() const {
    VecXd total = VecXd::Zero(layout.total);
    for (const auto& g : gradients) total += g;
    return total;
  }
};

/// Centralized oracle for GVQ mode: per slice, sum the per-node
/// projections, then decode once.
VecXd centralized_gvq(const TestRig& rig) {
  VecXd out = VecXd::Zero(rig.layout.total);
  const int n = rig.plan.nodes;
  for (const auto& sp : rig.plan.slices) {
    CompressedSliceD acc;
    bool first = true;
    for (int node = 0; node < n; ++node) {
      const VecXd share =
          rig.gradients[node].segment(sp.spec.start, sp.spec.length);
      const auto cs = compress(share, *sp.comp, n, sp.spec.id);
      acc = first ? cs : aggregate(acc, cs);
      first = false;
    }
    out.segment(sp.spec.start, sp.spec.length) = decompress(acc, *sp.comp, n);
  }
  return out;
}

/// Sequential hop-by-hop oracle for scalar mode, replaying the exact
/// requantization seeds the ring uses.
VecXd sequential_scalar(const TestRig& rig) {
  const int n = rig.plan.nodes;
  const int bits = rig.plan.scalar_bits;
  VecXd out = VecXd::Zero(rig.layout.total);
  for (const auto& seg : rig.plan.segments) {
    // Segment `seg.id` starts at node seg.id and finishes at its
    // predecessor after N-1 merges.
    const int origin = static_cast<int>(seg.id);
    auto seed_for = [&](RarPhase phase, int step, int node) {
      return mix_seed(rig.plan.seed, rig.plan.iteration,
                      static_cast<std::uint64_t>(phase),
                      static_cast<std::uint64_t>(step),
                      static_cast<std::uint64_t>(seg.id),
                      static_cast<std::uint64_t>(node));
    };
    auto q = quantize(
        VecXd(rig.gradients[origin].segment(seg.start, seg.length)), bits,
        seed_for(RarPhase::CompressRound, 0, origin));
    std::vector<std::uint8_t> wire = quantized_to_bytes(q);
    for (int i = 1; i < n; ++i) {
      const int node = (origin + i) % n;
      const VecXd decoded = dequantize(
          quantized_from_bytes(wire.data(), wire.size(), seg.length, bits));
      const VecXd merged =
          decoded + rig.gradients[node].segment(seg.start, seg.length);
      const bool last = i == n - 1;
      const auto phase = last ? RarPhase::CirculateRound : RarPhase::CompressRound;
      const int step = last ? 0 : i;
      wire = quantized_to_bytes(quantize(merged, bits, seed_for(phase, step, node)));
    }
    out.segment(seg.start, seg.length) = dequantize(
        quantized_from_bytes(wire.data(), wire.size(), seg.length, bits));
  }
  return out;
}

}  // namespace

TEST_CASE("frame encode/decode round trip") {
  RarFrame f;
  f.iteration = 12;
  f.phase = RarPhase::CirculateRound;
  f.mode = AggMode::Gvq;
  f.step = 3;
  f.segment = 5;
  f.payload = {9, 8, 7};
  const auto bytes = encode_frame(f);
  CHECK(bytes.size() == kRarHeaderBytes + 3);
  const RarFrame back = decode_frame(bytes);
  CHECK(back.iteration == 12);
  CHECK(back.phase == RarPhase::CirculateRound);
  CHECK(back.mode == AggMode::Gvq);
  CHECK(back.step == 3);
  CHECK(back.segment == 5);
  CHECK(back.payload == f.payload);

  auto corrupt = bytes;
  corrupt[4] = 7;  // phase byte
  CHECK_THROWS_AS(decode_frame(corrupt), ProtocolError);
  auto truncated = bytes;
  truncated.pop_back();
  CHECK_THROWS_AS(decode_frame(truncated), ProtocolError);
}

TEST_CASE("raw mode: the 3-node walkthrough sums to 6 everywhere") {
  TestRig rig(3, 6, 4, AggMode::Raw);
  for (int n = 0; n < 3; ++n)
    rig.gradients[n] = VecXd::Constant(rig.layout.total, n + 1.0);
  const auto result =
      run_ring_iteration(rig.plan, rig.control, rig.gradients, NetModel{});
  for (int n = 0; n < 3; ++n)
    CHECK(result.nodes[n].aggregated == VecXd::Constant(rig.layout.total, 6.0));
}

TEST_CASE("raw mode matches direct summation at 1e-9") {
  for (int nodes : {2, 3, 4, 6}) {
    TestRig rig(nodes, 8, 8, AggMode::Raw, WirePrecision::F64, 17 + nodes);
    const auto result =
        run_ring_iteration(rig.plan, rig.control, rig.gradients, NetModel{});
    const VecXd exact = rig.exact_sum();
    for (int n = 0; n < nodes; ++n)
      CHECK((result.nodes[n].aggregated - exact).cwiseAbs().maxCoeff() <= 1e-9);
  }
}

TEST_CASE("single-node ring degenerates to the local vector") {
  TestRig rig(1, 2, 4, AggMode::Raw);
  const auto result =
      run_ring_iteration(rig.plan, rig.control, rig.gradients, NetModel{});
  CHECK(result.nodes[0].aggregated == rig.gradients[0]);
  CHECK(result.nodes[0].sent.total == 0);
}

TEST_CASE("gvq mode equals the centralized compress-sum-decompress oracle") {
  for (int nodes : {2, 3, 6}) {
    TestRig rig(nodes, 6, 12, AggMode::Gvq, WirePrecision::F64, 31 + nodes);
    const auto result =
        run_ring_iteration(rig.plan, rig.control, rig.gradients, NetModel{});
    const VecXd oracle = centralized_gvq(rig);
    for (int n = 0; n < nodes; ++n)
      CHECK((result.nodes[n].aggregated - oracle).cwiseAbs().maxCoeff() <= 1e-8);
  }
}

TEST_CASE("all nodes hold bitwise-identical results") {
  for (AggMode mode : {AggMode::Raw, AggMode::Gvq, AggMode::Scalar}) {
    for (WirePrecision wire : {WirePrecision::F32, WirePrecision::F64}) {
      TestRig rig(4, 8, 8, mode, wire, 53);
      const auto result =
          run_ring_iteration(rig.plan, rig.control, rig.gradients, NetModel{});
      for (int n = 1; n < 4; ++n)
        REQUIRE(result.nodes[n].aggregated == result.nodes[0].aggregated);
    }
  }
}

TEST_CASE("scalar mode equals the sequential hop-by-hop oracle exactly") {
  for (int nodes : {2, 3, 6}) {
    TestRig rig(nodes, 6, 16, AggMode::Scalar, WirePrecision::F32, 77 + nodes);
    const auto result =
        run_ring_iteration(rig.plan, rig.control, rig.gradients, NetModel{});
    const VecXd oracle = sequential_scalar(rig);
    for (int n = 0; n < nodes; ++n)
      REQUIRE(result.nodes[n].aggregated == oracle);  // exact, same seeds
  }
}

TEST_CASE("both work-item orders give identical results") {
  for (AggMode mode : {AggMode::Raw, AggMode::Gvq, AggMode::Scalar}) {
    TestRig rig(5, 10, 8, mode, WirePrecision::F64, 91);
    const auto a = run_ring_iteration(rig.plan, rig.control, rig.gradients,
                                      NetModel{}, StepOrder::DownloadThenCompress);
    const auto b = run_ring_iteration(rig.plan, rig.control, rig.gradients,
                                      NetModel{}, StepOrder::CompressThenDownload);
    for (int n = 0; n < 5; ++n)
      REQUIRE(a.nodes[n].aggregated == b.nodes[n].aggregated);
  }
}

TEST_CASE("mode-independent schedule: same frame counts and routing") {
  const int nodes = 4;
  std::vector<std::uint64_t> frames_per_mode;
  for (AggMode mode : {AggMode::Raw, AggMode::Gvq, AggMode::Scalar}) {
    TestRig rig(nodes, 8, 8, mode, WirePrecision::F32, 7);
    InprocRing ring(nodes);
    std::vector<IterationPlan> plans(nodes, rig.plan);
    const auto result = run_ring_custom(
        plans, rig.control, rig.gradients, NetModel{},
        [&](int i) -> Transport& { return ring.endpoint(i); }, false);
    std::uint64_t frames = 0;
    for (int n = 0; n < nodes; ++n) {
      frames += ring.endpoint(n).stats().messages_sent;
      CHECK(ring.endpoint(n).stats().messages_sent == 2 * (nodes - 1));
      CHECK(ring.endpoint(n).stats().messages_received == 2 * (nodes - 1));
    }
    frames_per_mode.push_back(frames);
  }
  CHECK(frames_per_mode[0] == frames_per_mode[1]);
  CHECK(frames_per_mode[1] == frames_per_mode[2]);
}

TEST_CASE("codec op counts: gvq does one compress and one decompress per "
          "segment per node; scalar re-codes at every merge") {
  const int nodes = 5;
  TestRig gvq_rig(nodes, 10, 8, AggMode::Gvq, WirePrecision::F64, 111);
  const auto gvq_result = run_ring_iteration(gvq_rig.plan, gvq_rig.control,
                                             gvq_rig.gradients, NetModel{});
  for (int n = 0; n < nodes; ++n) {
    const auto& ops = gvq_result.nodes[n].ops;
    for (int s = 0; s < nodes; ++s) {
      CHECK(ops.encode_own[s] == 1);
      CHECK(ops.decode_output[s] == 1);
      CHECK(ops.merge_quantize[s] == 0);
      CHECK(ops.merge_dequantize[s] == 0);
    }
  }

  TestRig sc_rig(nodes, 10, 8, AggMode::Scalar, WirePrecision::F32, 112);
  const auto sc_result = run_ring_iteration(sc_rig.plan, sc_rig.control,
                                            sc_rig.gradients, NetModel{});
  for (int s = 0; s < nodes; ++s) {
    std::uint32_t requant = 0, dequant = 0;
    for (int n = 0; n < nodes; ++n) {
      requant += sc_result.nodes[n].ops.merge_quantize[s];
      dequant += sc_result.nodes[n].ops.merge_dequantize[s];
    }
    // N-1 merges along the aggregation path, each decode-add-requantize.
    CHECK(requant == nodes - 1);
    CHECK(dequant == nodes - 1);
  }
}

TEST_CASE("stepwise protocol: frame sequence and misdelivery") {
  const int nodes = 3;
  TestRig rig(nodes, 6, 4, AggMode::Raw, WirePrecision::F64, 13);
  std::vector<RarNodeEngine> engines;
  for (int n = 0; n < nodes; ++n)
    engines.emplace_back(n, rig.plan, rig.control[n], rig.gradients[n]);

  // k = 0: initial compress-round frames with the node's own segment.
  std::vector<RarFrame> frames;
  for (int n = 0; n < nodes; ++n) {
    auto f = engines[n].outgoing(0);
    REQUIRE(f.has_value());
    CHECK(f->phase == RarPhase::CompressRound);
    CHECK(f->step == 0);
    CHECK(f->segment == n);
    frames.push_back(*f);
  }
  // Wrong segment: node 1 expects node 0's frame, not node 2's.
  CHECK_THROWS_AS(engines[1].incoming(0, frames[2]), ProtocolError);
  // Wrong iteration.
  RarFrame stale = frames[0];
  stale.iteration = 99;
  CHECK_THROWS_AS(engines[1].incoming(0, stale), ProtocolError);
  engines[1].incoming(0, frames[0]);

  auto f1 = engines[1].outgoing(1);
  REQUIRE(f1.has_value());
  CHECK(f1->phase == RarPhase::CompressRound);
  CHECK(f1->step == 1);
  CHECK(f1->segment == 0);  // node 1 forwards segment [1-1]
}

TEST_CASE("control blocks aggregate loss reports over the full ring") {
  const int nodes = 6;
  TestRig rig(nodes, 8, 4, AggMode::Raw, WirePrecision::F64, 19);
  for (int n = 0; n < nodes; ++n) {
    rig.control[n].layer_reported[0] = 1;
    rig.control[n].layer_loss_above[0] = (n % 2 == 0) ? 1 : 0;  // 3 of 6
  }
  const auto result =
      run_ring_iteration(rig.plan, rig.control, rig.gradients, NetModel{});
  for (int n = 0; n < nodes; ++n) {
    CHECK(result.nodes[n].control.layer_reported[0] == 6);
    CHECK(result.nodes[n].control.layer_loss_above[0] == 3);
    CHECK(result.nodes[n].control.hash_consistent);
  }
}

TEST_CASE("hash divergence is detected by every node") {
  const int nodes = 4;
  TestRig rig(nodes, 8, 4, AggMode::Raw, WirePrecision::F64, 23);
  rig.control[2].table_hash = 0xdead;  // one node disagrees
  const auto result =
      run_ring_iteration(rig.plan, rig.control, rig.gradients, NetModel{});
  for (int n = 0; n < nodes; ++n)
    CHECK(!result.nodes[n].control.hash_consistent);
}

TEST_CASE("gvq loss monitoring reports per-layer relative loss") {
  TestRig rig(3, 6, 12, AggMode::Gvq, WirePrecision::F64, 29, /*d=*/3);
  auto plan = rig.plan;
  plan.monitor_loss = true;
  plan.stop_threshold = 0.1;
  const auto result = run_ring_iteration(plan, rig.control, rig.gradients, NetModel{});
  for (int n = 0; n < 3; ++n) {
    const double rel = result.nodes[n].layer_rel_loss[0];
    CHECK(rel >= 0.0);  // random data against a random basis: lossy
    CHECK(rel <= 1.5);
  }
}

TEST_CASE("threaded tcp run matches the deterministic scheduler bitwise") {
  const int nodes = 3;
  TestRig rig(nodes, 6, 8, AggMode::Gvq, WirePrecision::F64, 37);
  const auto lockstep =
      run_ring_iteration(rig.plan, rig.control, rig.gradients, NetModel{});

  TcpRingConfig tcfg;
  tcfg.listen_hosts.assign(nodes, "127.0.0.1");
  tcfg.listen_ports = find_free_ports(nodes);
  TcpRing tcp(tcfg);
  const auto threaded = run_ring_iteration_threaded(
      rig.plan, rig.control, rig.gradients, NetModel{},
      [&](int i) -> Transport& { return tcp.endpoint(i); });
  for (int n = 0; n < nodes; ++n)
    REQUIRE(threaded.nodes[n].aggregated == lockstep.nodes[n].aggregated);
}

TEST_CASE("bytes_per_node formula") {
  CHECK(bytes_per_node(AggMode::Raw, 6000, 6, 1.0) == 40000.0);
  CHECK(bytes_per_node(AggMode::Gvq, 6000, 6, 8.0) == 5000.0);
  CHECK(bytes_per_node(AggMode::Raw, 6000, 1, 1.0) == 0.0);
  CHECK(bytes_per_node(AggMode::Gvq, 6000, 1, 8.0) == 0.0);
  CHECK(bytes_per_node(AggMode::Scalar, 6000, 1, 1.0) == 0.0);
  // Residual elements ride along uncompressed.
  CHECK(bytes_per_node(AggMode::Gvq, 6000, 6, 8.0, 300) ==
        doctest::Approx(2.0 * 5.0 * ((750.0 + 300.0) / 6.0) * 4.0));
  CHECK_THROWS_AS(bytes_per_node(AggMode::Raw, 100, 0, 1.0), Error);
}

TEST_CASE("simulated time: gvq overlaps codec work, scalar serializes it") {
  const int nodes = 4;
  const NetModel net{{1e8, 0.0}, 1e-9};
  TestRig raw_rig(nodes, 8, 64, AggMode::Raw, WirePrecision::F32, 41);
  TestRig gvq_rig(nodes, 8, 64, AggMode::Gvq, WirePrecision::F32, 41, /*d=*/8);
  TestRig sc_rig(nodes, 8, 64, AggMode::Scalar, WirePrecision::F32, 41);
  const double t_raw =
      run_ring_iteration(raw_rig.plan, raw_rig.control, raw_rig.gradients, net)
          .sim_agg_seconds;
  const double t_gvq =
      run_ring_iteration(gvq_rig.plan, gvq_rig.control, gvq_rig.gradients, net)
          .sim_agg_seconds;
  const double t_scalar =
      run_ring_iteration(sc_rig.plan, sc_rig.control, sc_rig.gradients, net)
          .sim_agg_seconds;
  CHECK(t_gvq < t_raw);
  CHECK(t_gvq < t_scalar);  // same nominal ratio, but scalar pays per hop
}

TEST_CASE("byte conservation across the ring") {
  TestRig rig(4, 8, 8, AggMode::Gvq, WirePrecision::F32, 43);
  InprocRing ring(4);
  std::vector<IterationPlan> plans(4, rig.plan);
  run_ring_custom(plans, rig.control, rig.gradients, NetModel{},
                  [&](int i) -> Transport& { return ring.endpoint(i); }, false);
  std::uint64_t sent = 0, received = 0;
  for (int n = 0; n < 4; ++n) {
    sent += ring.endpoint(n).stats().bytes_sent;
    received += ring.endpoint(n).stats().bytes_received;
  }
  CHECK(sent == received);
}
