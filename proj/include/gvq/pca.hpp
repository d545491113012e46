#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "gvq/jacobi.hpp"
#include "gvq/types.hpp"

namespace gvq {

/// Per-slice linear codec: top-d principal directions of the sample
/// covariance plus the sample-mean whitening vector.
template <typename Scalar>
struct Compressor {
  MatX<Scalar> basis;     // K x d, orthonormal columns
  VecX<Scalar> mean;      // length K
  VecX<Scalar> spectrum;  // length K, nonincreasing, nonnegative
  Scalar loss_threshold = 0;
  std::uint32_t version = 0;
  bool degenerate = false;  // all-zero spectrum; slice stays uncompressed

  Index dim_in() const { return basis.rows(); }
  Index dim_out() const { return basis.cols(); }
  double ratio() const {
    return static_cast<double>(dim_in()) / static_cast<double>(dim_out());
  }
};

using CompressorD = Compressor<double>;

/// Aggregated-slice samples collected during the uncompressed iterations;
/// columns are samples.
struct SampleBuffer {
  std::uint32_t slice = 0;
  MatXd samples;  // K x count
  Index count = 0;

  SampleBuffer() = default;
  SampleBuffer(std::uint32_t slice_id, Index k, Index capacity)
      : slice(slice_id), samples(k, capacity) {}

  Index dim() const { return samples.rows(); }
  Index capacity() const { return samples.cols(); }
  bool full() const { return count == capacity(); }

  void add(const VecXd& sample) {
    if (sample.size() != samples.rows())
      throw Error("SampleBuffer: sample length mismatch");
    if (count == samples.cols())
      throw Error("SampleBuffer: buffer already full");
    samples.col(count++) = sample;
  }

  void reset() { count = 0; }

  /// View of the filled columns.
  Eigen::Block<const MatXd> view() const {
    return samples.block(0, 0, samples.rows(), count);
  }
};

template <typename Derived>
VecX<typename Derived::Scalar> compute_mean(
    const Eigen::MatrixBase<Derived>& samples) {
  using Scalar = typename Derived::Scalar;
  if (samples.cols() < 1) throw Error("compute_mean: empty buffer");
  return samples.rowwise().sum() / Scalar(samples.cols());
}

inline VecXd compute_mean(const SampleBuffer& buffer) {
  return compute_mean(buffer.view());
}

/// Sample covariance with the 1/(L-1) convention. Exactly symmetric by
/// construction.
template <typename Derived>
MatX<typename Derived::Scalar> compute_covariance(
    const Eigen::MatrixBase<Derived>& samples,
    const VecX<typename Derived::Scalar>& mean) {
  using Scalar = typename Derived::Scalar;
  const Index count = samples.cols();
  if (count < 2) throw Error("compute_covariance: need at least 2 samples");
  MatX<Scalar> centered = samples.colwise() - mean;
  MatX<Scalar> cov = MatX<Scalar>::Zero(samples.rows(), samples.rows());
  for (Index t = 0; t < count; ++t)
    cov += centered.col(t) * centered.col(t).transpose();
  cov /= Scalar(count - 1);
  return cov;
}

inline MatXd compute_covariance(const SampleBuffer& buffer, const VecXd& mean) {
  return compute_covariance(buffer.view(), mean);
}

template <typename Scalar>
struct DimensionChoice {
  Index d = 1;
  bool degenerate = false;
};

/// Minimum d whose leading eigen-energy share reaches 1 - loss_threshold.
/// The running total reuses the same accumulation as the grand total, so
/// loss_threshold = 0 always lands on d = K for a strictly positive
/// spectrum tail and never overshoots.
template <typename Scalar>
DimensionChoice<Scalar> select_dimension(const VecX<Scalar>& spectrum,
                                         Scalar loss_threshold) {
  if (loss_threshold < Scalar(0) || loss_threshold >= Scalar(1))
    throw Error("select_dimension: loss threshold must be in [0, 1)");
  if (spectrum.size() == 0) throw Error("select_dimension: empty spectrum");
  for (Index k = 0; k + 1 < spectrum.size(); ++k)
    if (spectrum[k] < spectrum[k + 1])
      throw Error("select_dimension: spectrum must be nonincreasing");

  Scalar total = 0;
  for (Index k = 0; k < spectrum.size(); ++k) total += spectrum[k];
  if (total <= Scalar(0)) return {1, true};

  const Scalar needed = (Scalar(1) - loss_threshold) * total;
  Scalar cumulative = 0;
  for (Index k = 0; k < spectrum.size(); ++k) {
    cumulative += spectrum[k];
    if (cumulative >= needed) return {k + 1, false};
  }
  return {spectrum.size(), false};
}

/// mean -> covariance -> eigendecomposition -> dimension choice, chained.
/// Negative eigenvalues (covariance roundoff) are clamped to zero.
inline CompressorD build_compressor(const SampleBuffer& buffer, double lambda,
                                    std::uint32_t version = 0) {
  if (buffer.count < 2)
    throw Error("build_compressor: need at least 2 samples");
  CompressorD comp;
  comp.mean = compute_mean(buffer);
  const MatXd cov = compute_covariance(buffer, comp.mean);
  auto eig = jacobi_eigh(cov);

  comp.spectrum = eig.values;
  for (Index k = 0; k < comp.spectrum.size(); ++k) {
    if (comp.spectrum[k] < 0) {
      if (comp.spectrum[k] < -1e-9 * std::abs(comp.spectrum[0]) - 1e-12)
        throw Error("build_compressor: covariance spectrum is not PSD");
      comp.spectrum[k] = 0;
    }
  }

  const auto choice = select_dimension(comp.spectrum, lambda);
  comp.degenerate = choice.degenerate;
  comp.basis = eig.vectors.leftCols(choice.d);
  comp.loss_threshold = lambda;
  comp.version = version;
  return comp;
}

// ---------------------------------------------------------------------------
// Serialization (caching / debug): magic "GVQC", u32 K, u32 d, mean
// (K f64 LE), basis (K*d f64 LE column-major), spectrum (K f64 LE).

inline void save_compressor(std::ostream& out, const CompressorD& comp) {
  const std::uint32_t k = static_cast<std::uint32_t>(comp.dim_in());
  const std::uint32_t d = static_cast<std::uint32_t>(comp.dim_out());
  out.write("GVQC", 4);
  out.write(reinterpret_cast<const char*>(&k), 4);
  out.write(reinterpret_cast<const char*>(&d), 4);
  out.write(reinterpret_cast<const char*>(comp.mean.data()), 8 * k);
  out.write(reinterpret_cast<const char*>(comp.basis.data()),
            8 * static_cast<std::streamsize>(k) * d);
  out.write(reinterpret_cast<const char*>(comp.spectrum.data()), 8 * k);
  if (!out) throw IoError("save_compressor: write failed");
}

inline CompressorD load_compressor(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "GVQC")
    throw IoError("load_compressor: bad magic");
  std::uint32_t k = 0, d = 0;
  in.read(reinterpret_cast<char*>(&k), 4);
  in.read(reinterpret_cast<char*>(&d), 4);
  if (!in || k == 0 || d == 0 || d > k)
    throw IoError("load_compressor: bad dimensions");
  CompressorD comp;
  comp.mean.resize(k);
  comp.basis.resize(k, d);
  comp.spectrum.resize(k);
  in.read(reinterpret_cast<char*>(comp.mean.data()), 8 * k);
  in.read(reinterpret_cast<char*>(comp.basis.data()),
          8 * static_cast<std::streamsize>(k) * d);
  in.read(reinterpret_cast<char*>(comp.spectrum.data()), 8 * k);
  if (!in) throw IoError("load_compressor: truncated file");
  return comp;
}

}  // namespace gvq
