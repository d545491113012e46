#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "gvq/sim.hpp"

namespace {

struct SharedFlags {
  std::string config_path;
  std::string out_dir;
  std::string mode;
  std::string transport;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int nodes = 0;
  double scale = 0;
};

void add_shared(CLI::App* cmd, SharedFlags& f) {
  cmd->add_option("--config", f.config_path, "JSON run configuration");
  cmd->add_option("--seed", f.seed, "run seed (overrides config)")
      ->each([&f](const std::string&) { f.seed_set = true; });
  cmd->add_option("--out-dir", f.out_dir, "output directory");
  cmd->add_option("--mode", f.mode, "raw | gvq | scalar | all");
  cmd->add_option("--transport", f.transport, "inproc | tcp");
  cmd->add_option("--nodes", f.nodes, "ring size N");
  cmd->add_option("--scale", f.scale,
                  "divide schedule windows for desk-size runs");
}

gvq::RunConfig build_config(const SharedFlags& f) {
  gvq::RunConfig cfg = f.config_path.empty()
                           ? gvq::RunConfig{}
                           : gvq::load_config_file(f.config_path);
  if (f.seed_set) cfg.seed = f.seed;
  if (!f.out_dir.empty()) cfg.out_dir = f.out_dir;
  if (!f.mode.empty() && f.mode != "all")
    cfg.mode = gvq::agg_mode_from_string(f.mode);
  if (!f.transport.empty())
    cfg.transport = gvq::transport_from_string(f.transport);
  if (f.nodes > 0) cfg.nodes = f.nodes;
  if (f.scale > 0) cfg.scale = f.scale;
  return cfg;
}

void print_summary(const gvq::RunConfig& cfg, const gvq::RunResult& r) {
  std::printf("run %-6s N=%d iterations=%ld out=%s\n", gvq::to_string(cfg.mode),
              cfg.nodes, r.summary.iterations, cfg.out_dir.c_str());
  std::printf("  compressed iterations: %ld  mean ratio K/d: %.3f\n",
              r.summary.compressed_iterations, r.summary.mean_ratio);
  std::printf("  bytes total: %llu  (compressed window: %llu)\n",
              static_cast<unsigned long long>(r.summary.total_bytes),
              static_cast<unsigned long long>(r.summary.compressed_bytes));
  std::printf("  rel loss p50/p90/p99: %.3g / %.3g / %.3g\n", r.summary.loss_p50,
              r.summary.loss_p90, r.summary.loss_p99);
  std::printf("  sim aggregation seconds: %.6f  stop events: %ld\n",
              r.summary.total_sim_seconds, r.stop_events);
  if (!std::isnan(r.final_training_loss))
    std::printf("  final training loss: %.6f\n", r.final_training_loss);
}

int cmd_simulate(const SharedFlags& flags) {
  const gvq::RunConfig base = build_config(flags);
  std::vector<gvq::AggMode> modes;
  if (flags.mode == "all")
    modes = {gvq::AggMode::Raw, gvq::AggMode::Gvq, gvq::AggMode::Scalar};
  else
    modes = {base.mode};
  for (gvq::AggMode m : modes) {
    gvq::RunConfig cfg = base;
    cfg.mode = m;
    if (modes.size() > 1) cfg.out_dir = base.out_dir + "/" + gvq::to_string(m);
    const auto result = gvq::run_simulation(cfg);
    print_summary(cfg, result);
  }
  return 0;
}

int cmd_slice_sweep(const SharedFlags& flags, std::vector<long long>& ks,
                    double lambda, long samples, int layer,
                    const std::string& csv_out) {
  gvq::RunConfig cfg = build_config(flags);
  std::vector<gvq::Index> k_values(ks.begin(), ks.end());
  const auto rows = gvq::slice_sweep(cfg, k_values, lambda, samples, layer);
  std::ostream* out = &std::cout;
  std::ofstream file;
  if (!csv_out.empty()) {
    std::filesystem::path p(csv_out);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    file.open(csv_out);
    if (!file) throw gvq::IoError("cannot write " + csv_out);
    out = &file;
  }
  *out << "k,d,ratio,self_loss,transfer_loss\n";
  for (const auto& r : rows) {
    *out << r.k << ',' << r.d << ',' << r.ratio << ',' << r.self_loss << ',';
    if (r.transfer_loss >= 0) *out << r.transfer_loss;
    *out << '\n';
  }
  return 0;
}

int cmd_bench(const SharedFlags& flags) {
  gvq::RunConfig cfg = build_config(flags);
  const auto rows = gvq::run_bench(cfg);
  std::printf("%-8s %18s %18s %12s %12s\n", "mode", "payload B/iter/node",
              "sim agg s/iter", "bytes vs raw", "time vs raw");
  for (const auto& r : rows)
    std::printf("%-8s %18.1f %18."
                "9f %12.4f %12.4f\n",
                gvq::to_string(r.mode), r.payload_bytes_per_iter,
                r.sim_seconds_per_iter, r.bytes_ratio_vs_raw,
                r.time_ratio_vs_raw);
  return 0;
}

int cmd_gen_dump(const SharedFlags& flags, const std::string& out_path,
                 long iterations) {
  gvq::RunConfig cfg = build_config(flags);
  auto stream = gvq::make_stream(cfg);
  gvq::DumpHeader header;
  for (const auto& l : stream->layout().layers) header.layers.push_back(l.shape);
  header.nodes = static_cast<std::uint32_t>(cfg.nodes);
  header.iterations = static_cast<std::uint32_t>(iterations);
  std::filesystem::path p(out_path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  gvq::DumpWriter writer(out_path, header);
  for (long t = 0; t < iterations; ++t) {
    std::vector<gvq::VecXd> grads;
    gvq::VecXd exact = gvq::VecXd::Zero(stream->layout().total);
    for (int node = 0; node < cfg.nodes; ++node) {
      grads.push_back(stream->next(t, node));
      exact += grads.back();
    }
    for (int node = 0; node < cfg.nodes; ++node) {
      writer.append(grads[node]);
      stream->advance(t, node, exact);  // exact aggregation while dumping
    }
  }
  writer.close();
  std::printf("wrote %s: %ld iterations x %d nodes x %lld values\n",
              out_path.c_str(), iterations, cfg.nodes,
              static_cast<long long>(header.elements_per_gradient()));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PCA-based gradient vector quantization with compressed-domain "
               "ring all-reduce: simulator and analysis tools"};
  app.require_subcommand(1);

  SharedFlags sim_flags, sweep_flags, bench_flags, dump_flags;

  auto* simulate = app.add_subcommand("simulate", "run the full pipeline");
  add_shared(simulate, sim_flags);

  auto* sweep = app.add_subcommand(
      "slice-sweep", "compressor-transfer loss across slice sizes");
  add_shared(sweep, sweep_flags);
  std::vector<long long> sweep_ks{16, 24, 40, 48};
  double sweep_lambda = 0.01;
  long sweep_samples = 100;
  int sweep_layer = 0;
  std::string sweep_csv;
  sweep->add_option("--k", sweep_ks, "slice sizes to test");
  sweep->add_option("--lambda", sweep_lambda, "loss budget for d selection");
  sweep->add_option("--samples", sweep_samples, "sampling iterations");
  sweep->add_option("--layer", sweep_layer, "layer index to sweep");
  sweep->add_option("--csv", sweep_csv, "output CSV (stdout if omitted)");

  auto* bench = app.add_subcommand("bench", "bytes/time comparison per mode");
  add_shared(bench, bench_flags);

  auto* gen = app.add_subcommand("gen-dump", "write a gradient dump file");
  add_shared(gen, dump_flags);
  std::string dump_out = "gradients.gvqdump";
  long dump_iterations = 200;
  gen->add_option("--out", dump_out, "output file");
  gen->add_option("--iterations", dump_iterations, "iterations to record");

  CLI11_PARSE(app, argc, argv);

  try {
    if (simulate->parsed()) return cmd_simulate(sim_flags);
    if (sweep->parsed())
      return cmd_slice_sweep(sweep_flags, sweep_ks, sweep_lambda, sweep_samples,
                             sweep_layer, sweep_csv);
    if (bench->parsed()) return cmd_bench(bench_flags);
    if (gen->parsed()) return cmd_gen_dump(dump_flags, dump_out, dump_iterations);
  } catch (const gvq::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const gvq::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
