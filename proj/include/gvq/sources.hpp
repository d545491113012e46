#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "gvq/tensor_layout.hpp"
#include "gvq/types.hpp"

namespace gvq {

// ---------------------------------------------------------------------------
// Synthetic low-rank gradients

/// Per-slice generative model: a slowly rotating rank-r basis plus a fixed
/// offset and white noise, so aggregated slices have near-rank-r
/// covariance and per-node shares sum to it.
struct SyntheticSpec {
  FlatLayout layout;
  std::vector<Index> slice_len;  // K per layer
  Index latent_rank = 4;
  std::uint64_t seed = 1;
  double noise_sigma = 0.0;
  double drift_rate = 0.0;  // radians of basis rotation per iteration
  int nodes = 1;
};

class SyntheticSource {
 public:
  explicit SyntheticSource(SyntheticSpec spec);

  /// g_n[t] = per slice (B_t z_{n,t} + mu0) / N + noise. Stateless:
  /// a pure function of (t, node).
  VecXd next(long t, int node) const;

  const std::vector<SliceSpec>& slices() const { return slices_; }
  const SyntheticSpec& spec() const { return spec_; }

 private:
  struct SliceModel {
    MatXd basis;   // K x r, orthonormal
    VecXd offset;  // mu0
    VecXd rot_from, rot_to;  // rotation plane mixing span into its complement
    bool can_drift = false;
  };

  SyntheticSpec spec_;
  std::vector<SliceSpec> slices_;
  std::vector<SliceModel> models_;  // parallel to slices_, empty model if not compressible
};

// ---------------------------------------------------------------------------
// Gradient dumps: magic "GVQ1", u32 version, u32 layer count, per layer
// u32 H, W, D, F, u32 node count, u32 iteration count, then float32 LE
// flattened values, iteration-major, node-major, layer-major.

inline constexpr std::uint32_t kDumpVersion = 1;

struct DumpHeader {
  std::uint32_t version = kDumpVersion;
  std::vector<LayerShape> layers;
  std::uint32_t nodes = 0;
  std::uint32_t iterations = 0;

  Index elements_per_gradient() const {
    Index m = 0;
    for (const auto& l : layers) m += l.size();
    return m;
  }
};

class DumpWriter {
 public:
  DumpWriter(const std::string& path, const DumpHeader& header);
  ~DumpWriter();

  /// Gradients must arrive iteration-major, node-major.
  void append(const VecXd& flat_gradient);
  void close();

 private:
  std::ofstream out_;
  DumpHeader header_;
  std::uint64_t written_ = 0;
  std::string path_;
};

class DumpReader {
 public:
  explicit DumpReader(const std::string& path);

  const DumpHeader& header() const { return header_; }

  /// Exact stored values for (t, node); errors carry the file offset.
  VecXd gradient(long t, int node);

  /// Layout implied by the dump; the format stores shapes only, so every
  /// layer reads back as convolutional.
  FlatLayout layout() const;

 private:
  std::ifstream in_;
  DumpHeader header_;
  std::uint64_t data_offset_ = 0;
  Index elements_ = 0;
  std::string path_;
};

// ---------------------------------------------------------------------------
// Toy conv + dense classifier with manual backprop; produces genuinely
// correlated conv gradients for end-to-end runs.

struct ToyTaskConfig {
  LayerShape conv{3, 3, 3, 8};
  Index image_h = 8;
  Index image_w = 8;  // image depth equals conv.depth
  int classes = 2;
  int minibatch = 8;
  double eta = 0.05;
  double template_scale = 1.0;
  double data_noise = 0.25;
  std::uint64_t seed = 1;
};

struct ToyBatch {
  std::vector<VecXd> images;  // row-major (h, w, c)
  std::vector<int> labels;
};

class ToyModel {
 public:
  ToyModel(const ToyTaskConfig& cfg, std::uint64_t weight_seed);

  /// Conv layer plus the dense layer as a trailing passthrough block.
  FlatLayout layout() const;
  Index feature_count() const { return out_h() * out_w() * cfg_.conv.filters; }

  /// Mean cross-entropy loss and the gradient in flat layout order.
  std::pair<double, VecXd> forward_backward(const ToyBatch& batch) const;

  void apply_update(const VecXd& aggregated_gradient, double eta);

  const VecXd& parameters() const { return params_; }
  void set_parameters(VecXd params);

  Index out_h() const { return image_h() - cfg_.conv.height + 1; }
  Index out_w() const { return image_w() - cfg_.conv.width + 1; }
  Index image_h() const { return cfg_.image_h; }
  Index image_w() const { return cfg_.image_w; }
  const ToyTaskConfig& config() const { return cfg_; }

 private:
  ToyTaskConfig cfg_;
  VecXd params_;  // conv weights ++ dense weights, flat layout order
};

/// Two Gaussian class templates plus noise; node n takes every N-th
/// sample of the global stream, deterministically from the run seed.
class ToyTask {
 public:
  explicit ToyTask(ToyTaskConfig cfg);

  ToyBatch minibatch(long t, int node, int nodes) const;
  const ToyTaskConfig& config() const { return cfg_; }

 private:
  VecXd sample_image(std::uint64_t index, int label) const;
  ToyTaskConfig cfg_;
  std::vector<VecXd> templates_;
};

/// w <- w - eta * g.
void apply_update(VecXd& weights, const VecXd& aggregated_gradient, double eta);

}  // namespace gvq
