#include "gvq/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <sstream>

namespace gvq {

namespace {

/// Shortest decimal form that parses back to the identical double.
std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(field);
      field.clear();
    } else {
      field.push_back(c);
    }
  }
  fields.push_back(field);
  return fields;
}

}  // namespace

MetricsWriter::MetricsWriter(const std::string& csv_path)
    : out_(csv_path), path_(csv_path) {
  if (!out_) throw IoError("MetricsWriter: cannot open " + csv_path);
  out_ << kMetricsCsvHeader << '\n';
  if (!out_) throw IoError("MetricsWriter: header write failed");
}

void MetricsWriter::append(const MetricsRecord& r) {
  if (r.iteration <= last_iteration_)
    throw Error("MetricsWriter: one record per iteration, ascending");
  if (r.layer_rel_loss.size() != r.layer_d.size() ||
      r.layer_d.size() != r.layer_ratio.size())
    throw Error("MetricsWriter: inconsistent per-layer fields");
  for (std::size_t n = 0; n < r.node_bytes_sent.size(); ++n) {
    for (std::size_t l = 0; l < r.layer_rel_loss.size(); ++l) {
      out_ << r.iteration << ',' << to_string(r.phase) << ','
           << to_string(r.mode) << ',' << n << ',' << r.node_bytes_sent[n]
           << ',' << l << ',';
      if (r.layer_rel_loss[l] >= 0) out_ << fmt_double(r.layer_rel_loss[l]);
      out_ << ',' << r.layer_d[l] << ',' << fmt_double(r.layer_ratio[l]) << ','
           << fmt_double(r.sim_agg_seconds) << ',' << fmt_double(r.wall_seconds)
           << '\n';
    }
  }
  out_.flush();
  if (!out_) throw IoError("MetricsWriter: write failed to " + path_);
  last_iteration_ = r.iteration;
}

std::vector<MetricsRecord> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("read_metrics_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw IoError("read_metrics_csv: empty file");
  if (line != kMetricsCsvHeader)
    throw IoError("read_metrics_csv: unexpected header in " + path);

  std::vector<MetricsRecord> records;
  long current = -1;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 11)
      throw IoError("read_metrics_csv: line " + std::to_string(line_no) +
                    " has " + std::to_string(f.size()) + " fields");
    const long iteration = std::strtol(f[0].c_str(), nullptr, 10);
    const std::size_t node = std::strtoul(f[3].c_str(), nullptr, 10);
    const std::size_t layer = std::strtoul(f[5].c_str(), nullptr, 10);
    if (iteration != current) {
      records.emplace_back();
      records.back().iteration = iteration;
      records.back().phase = phase_from_string(f[1]);
      records.back().mode = agg_mode_from_string(f[2]);
      records.back().sim_agg_seconds = std::strtod(f[9].c_str(), nullptr);
      records.back().wall_seconds = std::strtod(f[10].c_str(), nullptr);
      current = iteration;
    }
    MetricsRecord& r = records.back();
    if (node >= r.node_bytes_sent.size()) {
      r.node_bytes_sent.resize(node + 1);
      r.node_bytes_sent[node] = std::strtoull(f[4].c_str(), nullptr, 10);
    }
    if (layer >= r.layer_rel_loss.size()) {
      r.layer_rel_loss.resize(layer + 1);
      r.layer_d.resize(layer + 1);
      r.layer_ratio.resize(layer + 1);
      r.layer_rel_loss[layer] = f[6].empty() ? -1.0 : std::strtod(f[6].c_str(), nullptr);
      r.layer_d[layer] = std::strtol(f[7].c_str(), nullptr, 10);
      r.layer_ratio[layer] = std::strtod(f[8].c_str(), nullptr);
    }
  }
  return records;
}

namespace {
double nearest_rank(std::vector<double>& sorted, double p) {
  if (sorted.empty()) return 0.0;
  const std::size_t n = sorted.size();
  std::size_t rank = static_cast<std::size_t>(std::ceil(p * n));
  if (rank == 0) rank = 1;
  if (rank > n) rank = n;
  return sorted[rank - 1];
}
}  // namespace

RunSummary summarize(std::span<const MetricsRecord> records) {
  if (records.empty()) throw Error("summarize: empty run");
  RunSummary s;
  s.iterations = static_cast<long>(records.size());
  std::vector<double> compressed_losses;
  double ratio_sum = 0.0;
  long ratio_count = 0;
  for (const auto& r : records) {
    std::uint64_t iter_bytes = 0;
    for (auto b : r.node_bytes_sent) iter_bytes += b;
    s.total_bytes += iter_bytes;
    s.bytes_by_mode[to_string(r.mode)] += iter_bytes;
    s.total_sim_seconds += r.sim_agg_seconds;
    if (r.phase == Phase::Compressed) {
      ++s.compressed_iterations;
      s.compressed_bytes += iter_bytes;
      s.compressed_sim_seconds += r.sim_agg_seconds;
      for (std::size_t l = 0; l < r.layer_ratio.size(); ++l) {
        ratio_sum += r.layer_ratio[l];
        ++ratio_count;
        if (r.layer_rel_loss[l] >= 0)
          compressed_losses.push_back(r.layer_rel_loss[l]);
      }
    }
  }
  if (ratio_count > 0) s.mean_ratio = ratio_sum / ratio_count;
  std::sort(compressed_losses.begin(), compressed_losses.end());
  s.loss_p50 = nearest_rank(compressed_losses, 0.50);
  s.loss_p90 = nearest_rank(compressed_losses, 0.90);
  s.loss_p99 = nearest_rank(compressed_losses, 0.99);
  return s;
}

}  // namespace gvq
