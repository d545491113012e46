#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "gvq/pca.hpp"
#include "gvq/types.hpp"

namespace gvq {

/// Projection coefficients of one slice. Directly summable across nodes
/// as long as slice id and compressor version agree; `contributors`
/// tracks how many node shares the coefficients already contain.
template <typename Scalar>
struct CompressedSlice {
  std::uint32_t slice = 0;
  std::uint32_t version = 0;
  VecX<Scalar> coefficients;
  std::uint32_t contributors = 0;
};

using CompressedSliceD = CompressedSlice<double>;

/// coefficients = U_d^T (g - mean/N). Each node removes its 1/N share of
/// the whitening vector so the fully aggregated coefficients describe
/// sum(g) - mean.
template <typename Scalar>
CompressedSlice<Scalar> compress(const VecX<Scalar>& slice_values,
                                 const Compressor<Scalar>& comp,
                                 int node_count, std::uint32_t slice_id = 0) {
  if (slice_values.size() != comp.dim_in())
    throw Error("compress: slice length " + std::to_string(slice_values.size()) +
                " does not match compressor K " + std::to_string(comp.dim_in()));
  if (node_count < 1) throw Error("compress: node count must be at least 1");
  CompressedSlice<Scalar> out;
  out.slice = slice_id;
  out.version = comp.version;
  out.coefficients = comp.basis.transpose() *
                     (slice_values - comp.mean / Scalar(node_count));
  out.contributors = 1;
  return out;
}

template <typename Scalar>
CompressedSlice<Scalar> aggregate(const CompressedSlice<Scalar>& a,
                                  const CompressedSlice<Scalar>& b) {
  if (a.slice != b.slice)
    throw ProtocolError("aggregate: slice id mismatch (" +
                        std::to_string(a.slice) + " vs " +
                        std::to_string(b.slice) + ")");
  if (a.version != b.version)
    throw ProtocolError("aggregate: compressor version mismatch (" +
                        std::to_string(a.version) + " vs " +
                        std::to_string(b.version) + ")");
  if (a.coefficients.size() != b.coefficients.size())
    throw ProtocolError("aggregate: coefficient length mismatch");
  CompressedSlice<Scalar> out;
  out.slice = a.slice;
  out.version = a.version;
  out.coefficients = a.coefficients + b.coefficients;
  out.contributors = a.contributors + b.contributors;
  return out;
}

/// g_hat = U_d * coefficients + mean. Only valid once every node has
/// contributed.
template <typename Scalar>
VecX<Scalar> decompress(const CompressedSlice<Scalar>& agg,
                        const Compressor<Scalar>& comp, int node_count) {
  if (agg.coefficients.size() != comp.dim_out())
    throw Error("decompress: coefficient length mismatch");
  if (agg.version != comp.version)
    throw ProtocolError("decompress: compressor version mismatch");
  if (agg.contributors != static_cast<std::uint32_t>(node_count))
    throw ProtocolError("decompress: slice has " +
                        std::to_string(agg.contributors) + " of " +
                        std::to_string(node_count) + " contributions");
  return comp.basis * agg.coefficients + comp.mean;
}

/// Local compression loss of one node's slice:
/// || g - (U_d U_d^T (g - mean/N) + mean/N) ||^2.
template <typename Scalar>
Scalar local_loss(const VecX<Scalar>& slice_values,
                  const Compressor<Scalar>& comp, int node_count) {
  const VecX<Scalar> share = comp.mean / Scalar(node_count);
  const VecX<Scalar> coeffs = comp.basis.transpose() * (slice_values - share);
  return (slice_values - (comp.basis * coeffs + share)).squaredNorm();
}

/// || g_hat - g ||^2 / || g ||^2; undefined for a zero reference.
template <typename Scalar>
std::optional<Scalar> relative_loss(const VecX<Scalar>& approx,
                                    const VecX<Scalar>& reference) {
  if (approx.size() != reference.size())
    throw Error("relative_loss: length mismatch");
  const Scalar ref = reference.squaredNorm();
  if (ref == Scalar(0)) return std::nullopt;
  return (approx - reference).squaredNorm() / ref;
}

}  // namespace gvq
