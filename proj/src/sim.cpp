#include "gvq/sim.hpp"

#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "gvq/rng.hpp"
#include "gvq/vq_codec.hpp"

namespace gvq {

namespace fs = std::filesystem;
using nlohmann::json;

TransportKind transport_from_string(const std::string& name) {
  if (name == "inproc") return TransportKind::Inproc;
  if (name == "tcp") return TransportKind::Tcp;
  throw ConfigError("unknown transport '" + name + "' (inproc | tcp)");
}

const char* to_string(TransportKind kind) {
  return kind == TransportKind::Inproc ? "inproc" : "tcp";
}

Schedule RunConfig::scaled_schedule() const {
  if (scale <= 0) throw ConfigError("config.scale: must be positive");
  Schedule s = schedule;
  if (scale != 1.0) {
    s.warmup = std::lround(static_cast<double>(s.warmup) / scale);
    s.sample_iters =
        std::max<long>(2, std::lround(static_cast<double>(s.sample_iters) / scale));
    s.compressed_iters =
        std::lround(static_cast<double>(s.compressed_iters) / scale);
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Config <-> JSON

namespace {

template <typename T>
T get_or(const json& j, const std::string& path, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config field '" + (path.empty() ? key : path + "." + key) +
                      "': " + e.what());
  }
}

LayerShape layer_from_json(const json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 4)
    throw ConfigError("config field '" + path + "': expected [H, W, D, F]");
  LayerShape l{j[0].get<Index>(), j[1].get<Index>(), j[2].get<Index>(),
               j[3].get<Index>()};
  if (!l.valid())
    throw ConfigError("config field '" + path + "': dimensions must be >= 1");
  return l;
}

}  // namespace

json config_to_json(const RunConfig& c) {
  json j;
  j["nodes"] = c.nodes;
  j["mode"] = to_string(c.mode);
  j["transport"] = to_string(c.transport);
  j["wire"] = c.wire == WirePrecision::F32 ? "f32" : "f64";
  j["seed"] = c.seed;
  j["scale"] = c.scale;
  j["iterations"] = c.iterations;
  j["out_dir"] = c.out_dir;
  j["schedule"] = {{"warmup", c.schedule.warmup},
                   {"sample_iters", c.schedule.sample_iters},
                   {"compressed_iters", c.schedule.compressed_iters},
                   {"loss_budget", c.schedule.loss_budget},
                   {"reuse_factor", c.schedule.reuse_factor},
                   {"stop_threshold", c.schedule.stop.loss_threshold},
                   {"stop_quorum", c.schedule.stop.quorum}};
  j["sample_scalar"] = c.sample_scalar;
  j["scalar_bits"] = c.scalar_bits;
  json layers = json::array();
  for (const auto& l : c.source.layers)
    layers.push_back({l.height, l.width, l.depth, l.filters});
  j["source"] = {
      {"kind", c.source.kind == SourceKind::Synthetic
                   ? "synthetic"
                   : (c.source.kind == SourceKind::Toy ? "toy" : "dump")},
      {"layers", layers},
      {"slice_len", c.source.slice_len},
      {"latent_rank", c.source.latent_rank},
      {"noise_sigma", c.source.noise_sigma},
      {"drift_rate", c.source.drift_rate},
      {"toy",
       {{"conv", {c.source.toy.conv.height, c.source.toy.conv.width,
                  c.source.toy.conv.depth, c.source.toy.conv.filters}},
        {"image_h", c.source.toy.image_h},
        {"image_w", c.source.toy.image_w},
        {"classes", c.source.toy.classes},
        {"minibatch", c.source.toy.minibatch},
        {"eta", c.source.toy.eta},
        {"template_scale", c.source.toy.template_scale},
        {"data_noise", c.source.toy.data_noise}}},
      {"toy_conv_slice_len", c.source.toy_conv_slice_len},
      {"toy_dense_slice_len", c.source.toy_dense_slice_len},
      {"dump_path", c.source.dump_path},
      {"dump_slice_len", c.source.dump_slice_len}};
  j["net"] = {{"bandwidth", c.net.bandwidth.bytes_per_second},
              {"latency", c.net.bandwidth.latency_seconds},
              {"codec_per_element_s", c.net.codec_seconds_per_element}};
  j["tcp_host"] = c.tcp_host;
  j["tcp_base_port"] = c.tcp_base_port;
  return j;
}

RunConfig config_from_json(const json& j) {
  RunConfig c;
  c.nodes = get_or(j, "", "nodes", c.nodes);
  if (c.nodes < 1) throw ConfigError("config field 'nodes': must be >= 1");
  c.mode = agg_mode_from_string(get_or<std::string>(j, "", "mode", "gvq"));
  c.transport =
      transport_from_string(get_or<std::string>(j, "", "transport", "inproc"));
  const std::string wire = get_or<std::string>(j, "", "wire", "f32");
  if (wire != "f32" && wire != "f64")
    throw ConfigError("config field 'wire': expected f32 or f64");
  c.wire = wire == "f32" ? WirePrecision::F32 : WirePrecision::F64;
  c.seed = get_or<std::uint64_t>(j, "", "seed", c.seed);
  c.scale = get_or(j, "", "scale", c.scale);
  c.iterations = get_or(j, "", "iterations", c.iterations);
  if (c.iterations < 1)
    throw ConfigError("config field 'iterations': must be >= 1");
  c.out_dir = get_or<std::string>(j, "", "out_dir", c.out_dir);
  if (j.contains("schedule")) {
    const json& s = j.at("schedule");
    c.schedule.warmup = get_or(s, "schedule", "warmup", c.schedule.warmup);
    c.schedule.sample_iters =
        get_or(s, "schedule", "sample_iters", c.schedule.sample_iters);
    c.schedule.compressed_iters =
        get_or(s, "schedule", "compressed_iters", c.schedule.compressed_iters);
    c.schedule.loss_budget =
        get_or(s, "schedule", "loss_budget", c.schedule.loss_budget);
    if (s.contains("reuse_factor") && s.at("reuse_factor").is_string()) {
      const std::string r = s.at("reuse_factor").get<std::string>();
      if (r != "inf")
        throw ConfigError("config field 'schedule.reuse_factor': number or \"inf\"");
      c.schedule.reuse_factor = 0;
    } else {
      c.schedule.reuse_factor =
          get_or(s, "schedule", "reuse_factor", c.schedule.reuse_factor);
    }
    c.schedule.stop.loss_threshold = get_or(
        s, "schedule", "stop_threshold", 10.0 * c.schedule.loss_budget);
    c.schedule.stop.quorum =
        get_or(s, "schedule", "stop_quorum", c.schedule.stop.quorum);
  } else {
    c.schedule.stop.loss_threshold = 10.0 * c.schedule.loss_budget;
  }
  c.schedule.validate();
  c.sample_scalar = get_or(j, "", "sample_scalar", c.sample_scalar);
  c.scalar_bits = get_or(j, "", "scalar_bits", c.scalar_bits);
  if (c.scalar_bits < 1 || c.scalar_bits > 8)
    throw ConfigError("config field 'scalar_bits': must be in [1, 8]");
  if (j.contains("source")) {
    const json& s = j.at("source");
    const std::string kind = get_or<std::string>(s, "source", "kind", "synthetic");
    if (kind == "synthetic")
      c.source.kind = SourceKind::Synthetic;
    else if (kind == "toy")
      c.source.kind = SourceKind::Toy;
    else if (kind == "dump")
      c.source.kind = SourceKind::Dump;
    else
      throw ConfigError("config field 'source.kind': synthetic | toy | dump");
    if (s.contains("layers")) {
      c.source.layers.clear();
      std::size_t i = 0;
      for (const auto& l : s.at("layers"))
        c.source.layers.push_back(
            layer_from_json(l, "source.layers[" + std::to_string(i++) + "]"));
      if (c.source.layers.empty())
        throw ConfigError("config field 'source.layers': need at least one layer");
    }
    c.source.slice_len =
        get_or(s, "source", "slice_len", c.source.slice_len);
    c.source.latent_rank = get_or(s, "source", "latent_rank", c.source.latent_rank);
    c.source.noise_sigma = get_or(s, "source", "noise_sigma", c.source.noise_sigma);
    c.source.drift_rate = get_or(s, "source", "drift_rate", c.source.drift_rate);
    if (s.contains("toy")) {
      const json& t = s.at("toy");
      if (t.contains("conv"))
        c.source.toy.conv = layer_from_json(t.at("conv"), "source.toy.conv");
      c.source.toy.image_h = get_or(t, "source.toy", "image_h", c.source.toy.image_h);
      c.source.toy.image_w = get_or(t, "source.toy", "image_w", c.source.toy.image_w);
      c.source.toy.classes = get_or(t, "source.toy", "classes", c.source.toy.classes);
      c.source.toy.minibatch =
          get_or(t, "source.toy", "minibatch", c.source.toy.minibatch);
      c.source.toy.eta = get_or(t, "source.toy", "eta", c.source.toy.eta);
      c.source.toy.template_scale =
          get_or(t, "source.toy", "template_scale", c.source.toy.template_scale);
      c.source.toy.data_noise =
          get_or(t, "source.toy", "data_noise", c.source.toy.data_noise);
    }
    c.source.toy_conv_slice_len =
        get_or(s, "source", "toy_conv_slice_len", c.source.toy_conv_slice_len);
    c.source.toy_dense_slice_len =
        get_or(s, "source", "toy_dense_slice_len", c.source.toy_dense_slice_len);
    c.source.dump_path = get_or<std::string>(s, "source", "dump_path", "");
    c.source.dump_slice_len =
        get_or(s, "source", "dump_slice_len", c.source.dump_slice_len);
  }
  if (j.contains("net")) {
    const json& n = j.at("net");
    c.net.bandwidth.bytes_per_second =
        get_or(n, "net", "bandwidth", c.net.bandwidth.bytes_per_second);
    c.net.bandwidth.latency_seconds =
        get_or(n, "net", "latency", c.net.bandwidth.latency_seconds);
    c.net.codec_seconds_per_element = get_or(
        n, "net", "codec_per_element_s", c.net.codec_seconds_per_element);
    if (c.net.bandwidth.bytes_per_second <= 0)
      throw ConfigError("config field 'net.bandwidth': must be positive");
  }
  c.tcp_host = get_or<std::string>(j, "", "tcp_host", c.tcp_host);
  c.tcp_base_port = get_or<std::uint16_t>(j, "", "tcp_base_port", c.tcp_base_port);
  return c;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return config_from_json(j);
}

void write_manifest(const std::string& path, const RunConfig& cfg) {
  json j;
  j["format"] = "gvq-run-manifest";
  j["version"] = 1;
  j["config"] = config_to_json(cfg);
  j["csv_schema"] = kMetricsCsvHeader;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path);
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Streams

namespace {

class SyntheticStream : public GradientStream {
 public:
  explicit SyntheticStream(const RunConfig& cfg) {
    SyntheticSpec spec;
    std::vector<std::pair<LayerShape, LayerKind>> layers;
    for (const auto& l : cfg.source.layers) layers.emplace_back(l, LayerKind::Conv);
    spec.layout = make_layout(
        std::span<const std::pair<LayerShape, LayerKind>>(layers));
    spec.slice_len = cfg.source.slice_len;
    if (spec.slice_len.size() == 1 && cfg.source.layers.size() > 1)
      spec.slice_len.assign(cfg.source.layers.size(), cfg.source.slice_len[0]);
    spec.latent_rank = cfg.source.latent_rank;
    spec.seed = mix_seed(cfg.seed, 0x5f);
    spec.noise_sigma = cfg.source.noise_sigma;
    spec.drift_rate = cfg.source.drift_rate;
    spec.nodes = cfg.nodes;
    source_ = std::make_unique<SyntheticSource>(std::move(spec));
    layout_ = source_->spec().layout;
  }

  VecXd next(long t, int node) override { return source_->next(t, node); }
  const FlatLayout& layout() const override { return layout_; }

 private:
  std::unique_ptr<SyntheticSource> source_;
  FlatLayout layout_;
};

class ToyStream : public GradientStream {
 public:
  explicit ToyStream(const RunConfig& cfg)
      : task_([&] {
          ToyTaskConfig t = cfg.source.toy;
          t.seed = mix_seed(cfg.seed, 0xda7a);
          return t;
        }()),
        nodes_(cfg.nodes) {
    const std::uint64_t weight_seed = mix_seed(cfg.seed, 0x3e16);
    for (int n = 0; n < nodes_; ++n)
      models_.emplace_back(task_.config(), weight_seed);  // replicated model
    layout_ = models_.front().layout();
    losses_.assign(nodes_, std::numeric_limits<double>::quiet_NaN());
  }

  VecXd next(long t, int node) override {
    auto [loss, grad] =
        models_[node].forward_backward(task_.minibatch(t, node, nodes_));
    losses_[node] = loss;
    return grad;
  }

  void advance(long, int node, const VecXd& aggregated) override {
    models_[node].apply_update(aggregated, task_.config().eta);
  }

  double last_loss(int node) const override { return losses_[node]; }
  const FlatLayout& layout() const override { return layout_; }

 private:
  ToyTask task_;
  std::vector<ToyModel> models_;
  std::vector<double> losses_;
  FlatLayout layout_;
  int nodes_;
};

class DumpStream : public GradientStream {
 public:
  explicit DumpStream(const RunConfig& cfg)
      : reader_(cfg.source.dump_path), layout_(reader_.layout()) {
    if (static_cast<int>(reader_.header().nodes) != cfg.nodes)
      throw ConfigError("dump has " + std::to_string(reader_.header().nodes) +
                        " nodes, config wants " + std::to_string(cfg.nodes));
  }

  VecXd next(long t, int node) override { return reader_.gradient(t, node); }
  const FlatLayout& layout() const override { return layout_; }
  const DumpHeader& header() const { return reader_.header(); }

 private:
  DumpReader reader_;
  FlatLayout layout_;
};

std::vector<Index> slice_lengths(const RunConfig& cfg, const FlatLayout& layout) {
  std::vector<Index> ks;
  switch (cfg.source.kind) {
    case SourceKind::Synthetic:
      ks = cfg.source.slice_len;
      break;
    case SourceKind::Toy:
      ks = {cfg.source.toy_conv_slice_len, cfg.source.toy_dense_slice_len};
      break;
    case SourceKind::Dump:
      ks = cfg.source.dump_slice_len;
      break;
  }
  if (ks.size() == 1 && layout.layers.size() > 1)
    ks.assign(layout.layers.size(), ks[0]);
  if (ks.size() != layout.layers.size())
    throw ConfigError("slice_len: need one K per layer (" +
                      std::to_string(layout.layers.size()) + " layers)");
  return ks;
}

std::uint64_t combined_table_hash(
    const std::vector<std::unique_ptr<LayerController>>& controllers) {
  std::uint64_t h = 0x9e3779b97f4a7c15ull;
  for (const auto& c : controllers) h = mix_seed(h, c->hash());
  return h;
}

}  // namespace

std::unique_ptr<GradientStream> make_stream(const RunConfig& cfg) {
  switch (cfg.source.kind) {
    case SourceKind::Synthetic: return std::make_unique<SyntheticStream>(cfg);
    case SourceKind::Toy: return std::make_unique<ToyStream>(cfg);
    case SourceKind::Dump: return std::make_unique<DumpStream>(cfg);
  }
  throw ConfigError("unknown source kind");
}

std::vector<std::uint16_t> find_free_ports(int count) {
  std::vector<int> fds;
  std::vector<std::uint16_t> ports;
  for (int i = 0; i < count; ++i) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw TransportError("socket() failed");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      ::close(fd);
      throw TransportError("bind failed while picking ports");
    }
    socklen_t len = sizeof(addr);
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
    ports.push_back(ntohs(addr.sin_port));
    fds.push_back(fd);  // keep open so subsequent picks differ
  }
  for (int fd : fds) ::close(fd);
  return ports;
}

// ---------------------------------------------------------------------------
// Full pipeline

RunResult run_simulation(const RunConfig& cfg) {
  const Schedule sched = cfg.scaled_schedule();
  auto stream = make_stream(cfg);
  const FlatLayout& layout = stream->layout();
  const auto ks = slice_lengths(cfg, layout);
  const auto slices = make_slices(layout, ks);
  const auto segments = make_segments(slices, cfg.nodes);
  const int n_layers = static_cast<int>(layout.layers.size());
  const int n = cfg.nodes;

  // One controller per (node, layer); identical construction everywhere.
  std::vector<std::vector<std::unique_ptr<LayerController>>> controllers(n);
  for (int node = 0; node < n; ++node) {
    for (int l = 0; l < n_layers; ++l) {
      std::vector<SliceSpec> layer_slices;
      for (const auto& s : slices)
        if (s.layer == static_cast<std::uint32_t>(l)) layer_slices.push_back(s);
      controllers[node].push_back(
          std::make_unique<LayerController>(l, layer_slices, sched));
    }
  }

  fs::create_directories(cfg.out_dir);
  const std::string csv_path = cfg.out_dir + "/metrics.csv";
  const std::string manifest_path = cfg.out_dir + "/manifest.json";
  MetricsWriter writer(csv_path);
  write_manifest(manifest_path, cfg);

  std::unique_ptr<InprocRing> inproc;
  std::unique_ptr<TcpRing> tcp;
  if (cfg.transport == TransportKind::Inproc) {
    inproc = std::make_unique<InprocRing>(n);
  } else {
    TcpRingConfig tc;
    tc.listen_hosts.assign(n, cfg.tcp_host);
    if (cfg.tcp_base_port == 0) {
      tc.listen_ports = find_free_ports(n);
    } else {
      for (int i = 0; i < n; ++i)
        tc.listen_ports.push_back(static_cast<std::uint16_t>(cfg.tcp_base_port + i));
    }
    tcp = std::make_unique<TcpRing>(std::move(tc));
  }
  auto endpoint = [&](int i) -> Transport& {
    return inproc ? inproc->endpoint(i) : tcp->endpoint(i);
  };

  RunResult out;
  out.csv_path = csv_path;
  out.manifest_path = manifest_path;

  // Per-node loss flags from the previous iteration, by layer.
  std::vector<NodeControlInput> control(n);
  for (auto& c : control) {
    c.layer_loss_above.assign(n_layers, 0);
    c.layer_reported.assign(n_layers, 0);
  }
  std::vector<std::uint64_t> prev_bytes(n, 0);

  for (long t = 0; t < cfg.iterations; ++t) {
    // 1. Local gradients.
    std::vector<VecXd> gradients;
    gradients.reserve(n);
    for (int node = 0; node < n; ++node) gradients.push_back(stream->next(t, node));
    if (cfg.source.kind == SourceKind::Toy) {
      double mean_loss = 0;
      for (int node = 0; node < n; ++node) mean_loss += stream->last_loss(node);
      out.training_loss.push_back(mean_loss / n);
    }

    // 2. Frame mode for this iteration, from the (shared) schedule state.
    std::vector<PhaseTag> tags(n_layers);
    bool any_compressed = false;
    for (int l = 0; l < n_layers; ++l) {
      tags[l] = controllers[0][l]->phase(t);
      if (tags[l].phase == Phase::Compressed && controllers[0][l]->has_compressors())
        any_compressed = true;
    }
    AggMode frame_mode = cfg.mode;
    if (cfg.mode == AggMode::Gvq) {
      if (any_compressed)
        frame_mode = AggMode::Gvq;
      else if (t < sched.warmup || !cfg.sample_scalar)
        frame_mode = AggMode::Raw;
      else
        frame_mode = AggMode::Scalar;
    }

    // 3. Per-node plans (identical content, node-local compressor tables).
    std::vector<IterationPlan> plans(n);
    for (int node = 0; node < n; ++node) {
      IterationPlan& plan = plans[node];
      plan.iteration = static_cast<std::uint32_t>(t);
      plan.mode = frame_mode;
      plan.nodes = n;
      plan.layers = n_layers;
      plan.wire = cfg.wire;
      plan.scalar_bits = cfg.scalar_bits;
      plan.seed = cfg.seed;
      plan.monitor_loss = frame_mode == AggMode::Gvq;
      plan.stop_threshold = sched.stop.loss_threshold;
      plan.segments = segments;
      for (const auto& s : slices) {
        SlicePlan sp;
        sp.spec = s;
        if (frame_mode == AggMode::Gvq && s.compressible &&
            tags[s.layer].phase == Phase::Compressed) {
          const auto& table = controllers[node][s.layer]->table();
          auto it = table.find(s.id);
          if (it != table.end() && !it->second->degenerate) {
            sp.coding = SliceCoding::Coefficients;
            sp.comp = it->second;
          }
        }
        plan.slices.push_back(std::move(sp));
      }
      control[node].table_hash = combined_table_hash(controllers[node]);
    }

    // 4. Ring aggregation.
    const auto result = run_ring_custom(
        plans, control, gradients, cfg.net, endpoint,
        cfg.transport == TransportKind::Tcp, StepOrder::DownloadThenCompress);

    for (int node = 0; node < n; ++node)
      if (!result.nodes[node].control.hash_consistent)
        throw ProtocolError("compressor tables diverged at iteration " +
                            std::to_string(t));

    // 5. Stop events: counts aggregated over the ring are identical at
    // all nodes, so every controller records the same event.
    if (frame_mode == AggMode::Gvq) {
      for (int l = 0; l < n_layers; ++l) {
        if (tags[l].phase != Phase::Compressed) continue;
        const auto& counts = result.nodes[0].control;
        if (counts.layer_reported[l] > 0 &&
            check_stop_counts(counts.layer_loss_above[l], sched.stop, n)) {
          for (int node = 0; node < n; ++node)
            controllers[node][l]->record_stop(t);
          ++out.stop_events;
        }
      }
    }

    // 6. Model update and PCA sampling, each node on its own decoded copy.
    for (int node = 0; node < n; ++node) {
      stream->advance(t, node, result.nodes[node].aggregated);
      for (int l = 0; l < n_layers; ++l)
        if (controllers[node][l]->wants_sample(t))
          controllers[node][l]->record_sample(t, result.nodes[node].aggregated);
    }

    // 7. Next iteration's loss reports.
    for (int node = 0; node < n; ++node) {
      for (int l = 0; l < n_layers; ++l) {
        const double rel = result.nodes[node].layer_rel_loss[l];
        control[node].layer_reported[l] = rel >= 0 ? 1 : 0;
        control[node].layer_loss_above[l] =
            (rel >= 0 && rel > sched.stop.loss_threshold) ? 1 : 0;
      }
    }

    // 8. Metrics: codec loss of the decoded aggregate against the exact
    // sum (the simulator is omniscient; nodes never see this).
    VecXd exact = VecXd::Zero(layout.total);
    for (const auto& g : gradients) exact += g;
    MetricsRecord rec;
    rec.iteration = t;
    // Warmup is uniform across layers; afterwards layers may desync via
    // stop events, so the record carries the first layer's tag.
    rec.phase = tags[0].phase;
    for (int l = 0; l < n_layers; ++l)
      if (tags[l].phase == Phase::Compressed) rec.phase = Phase::Compressed;
    rec.mode = frame_mode;
    for (int node = 0; node < n; ++node) {
      const std::uint64_t sent = endpoint(node).stats().bytes_sent;
      rec.node_bytes_sent.push_back(sent - prev_bytes[node]);
      prev_bytes[node] = sent;
    }
    for (int l = 0; l < n_layers; ++l) {
      const auto& layer = layout.layers[l];
      const auto approx =
          result.nodes[0].aggregated.segment(layer.offset, layer.shape.size());
      const auto reference = exact.segment(layer.offset, layer.shape.size());
      const auto rel = relative_loss<double>(approx, reference);
      rec.layer_rel_loss.push_back(rel ? *rel : -1.0);
      rec.layer_d.push_back(controllers[0][l]->current_dimension());
      rec.layer_ratio.push_back(controllers[0][l]->current_ratio());
    }
    rec.sim_agg_seconds = result.sim_agg_seconds;
    rec.wall_seconds = 0.0;  // deterministic scheduler: no wall-clock in the CSV
    writer.append(rec);
    out.records.push_back(std::move(rec));
  }

  out.summary = summarize(out.records);
  if (!out.training_loss.empty()) {
    const std::size_t window =
        std::min<std::size_t>(100, std::max<std::size_t>(1, out.training_loss.size() / 10));
    double acc = 0;
    for (std::size_t i = out.training_loss.size() - window;
         i < out.training_loss.size(); ++i)
      acc += out.training_loss[i];
    out.final_training_loss = acc / static_cast<double>(window);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Slice sweep

std::vector<SweepRow> slice_sweep(const RunConfig& cfg,
                                  const std::vector<Index>& k_values,
                                  double lambda, long sample_iters,
                                  int layer_index) {
  if (sample_iters < 2) throw ConfigError("slice_sweep: need at least 2 samples");
  auto stream = make_stream(cfg);
  const FlatLayout& layout = stream->layout();
  if (layer_index < 0 || layer_index >= static_cast<int>(layout.layers.size()))
    throw ConfigError("slice_sweep: layer index out of range");
  const auto& layer = layout.layers[layer_index];
  const Index m = layer.shape.size();

  // Aggregated layer gradients, exactly summed (uncompressed aggregation).
  MatXd samples(m, sample_iters);
  for (long t = 0; t < sample_iters; ++t) {
    VecXd exact = VecXd::Zero(layout.total);
    for (int node = 0; node < cfg.nodes; ++node) exact += stream->next(t, node);
    for (int node = 0; node < cfg.nodes; ++node) stream->advance(t, node, exact);
    samples.col(t) = exact.segment(layer.offset, m);
  }

  std::vector<SweepRow> rows;
  for (Index k : k_values) {
    if (k < 1) throw ConfigError("slice_sweep: K must be >= 1");
    if (k > m) {
      std::fprintf(stderr, "slice-sweep: K=%lld exceeds layer size %lld, skipped\n",
                   static_cast<long long>(k), static_cast<long long>(m));
      continue;
    }
    const Index full = m / k;
    SampleBuffer buf(0, k, sample_iters);
    for (long t = 0; t < sample_iters; ++t)
      buf.add(samples.block(0, t, k, 1));
    const CompressorD comp = build_compressor(buf, lambda);

    auto mean_loss = [&](Index slice_start) {
      double acc = 0;
      long counted = 0;
      for (long t = 0; t < sample_iters; ++t) {
        const VecXd x = samples.block(slice_start, t, k, 1);
        const VecXd x_hat =
            comp.basis * (comp.basis.transpose() * (x - comp.mean)) + comp.mean;
        const auto rel = relative_loss<double>(x_hat, x);
        if (rel) {
          acc += *rel;
          ++counted;
        }
      }
      return counted > 0 ? acc / counted : 0.0;
    };

    SweepRow row;
    row.k = k;
    row.d = comp.dim_out();
    row.ratio = comp.ratio();
    row.self_loss = mean_loss(0);
    if (full > 1) {
      double acc = 0;
      for (Index s = 1; s < full; ++s) acc += mean_loss(s * k);
      row.transfer_loss = acc / static_cast<double>(full - 1);
    }
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Bench

std::vector<BenchRow> run_bench(const RunConfig& cfg) {
  std::vector<BenchRow> rows;
  double raw_bytes = 0, raw_time = 0;
  for (AggMode mode : {AggMode::Raw, AggMode::Gvq, AggMode::Scalar}) {
    RunConfig c = cfg;
    c.mode = mode;
    c.out_dir = cfg.out_dir + "/" + to_string(mode);
    const RunResult r = run_simulation(c);
    BenchRow row;
    row.mode = mode;
    // Compare over the iterations where gvq actually compresses; the
    // schedule is recorded in every mode, so the windows line up.
    const long iters = r.summary.compressed_iterations > 0
                           ? r.summary.compressed_iterations
                           : r.summary.iterations;
    const std::uint64_t bytes = r.summary.compressed_iterations > 0
                                    ? r.summary.compressed_bytes
                                    : r.summary.total_bytes;
    const double secs = r.summary.compressed_iterations > 0
                            ? r.summary.compressed_sim_seconds
                            : r.summary.total_sim_seconds;
    row.payload_bytes_per_iter = static_cast<double>(bytes) / iters / cfg.nodes;
    row.sim_seconds_per_iter = secs / iters;
    if (mode == AggMode::Raw) {
      raw_bytes = row.payload_bytes_per_iter;
      raw_time = row.sim_seconds_per_iter;
    }
    row.bytes_ratio_vs_raw =
        raw_bytes > 0 ? row.payload_bytes_per_iter / raw_bytes : 1.0;
    row.time_ratio_vs_raw =
        raw_time > 0 ? row.sim_seconds_per_iter / raw_time : 1.0;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace gvq
