#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gvq/types.hpp"

namespace gvq {

/// Shape of one convolutional layer: F filters of dimension (H, W, D).
struct LayerShape {
  Index height = 0;
  Index width = 0;
  Index depth = 0;
  Index filters = 0;

  Index size() const { return height * width * depth * filters; }

  bool valid() const {
    return height >= 1 && width >= 1 && depth >= 1 && filters >= 1;
  }

  bool operator==(const LayerShape&) const = default;
};

/// Convolutional layers get the filter-collocated flat order and are
/// eligible for vector quantization; passthrough layers (dense, bias, ...)
/// travel uncompressed end to end.
enum class LayerKind : std::uint8_t { Conv, Passthrough };

/// Flat index of tensor element (h, w, d, f): the F gradients sharing one
/// (h, w, d) location are adjacent, and locations are traversed depth
/// first, then width, then height.
inline Index flat_index(const LayerShape& s, Index h, Index w, Index d,
                        Index f) {
  return ((h * s.width + w) * s.depth + d) * s.filters + f;
}

/// Dense 4-D value holder indexed (h, w, d, f).
template <typename Scalar>
class Tensor4 {
 public:
  explicit Tensor4(LayerShape shape) : shape_(shape) {
    if (!shape.valid())
      throw Error("Tensor4: all of H, W, D, F must be at least 1");
    values_ = VecX<Scalar>::Zero(shape.size());
  }

  Tensor4(LayerShape shape, VecX<Scalar> values) : Tensor4(shape) {
    if (values.size() != shape.size())
      throw Error("Tensor4: expected " + std::to_string(shape.size()) +
                  " values, got " + std::to_string(values.size()));
    values_ = std::move(values);
  }

  const LayerShape& shape() const { return shape_; }

  Scalar& operator()(Index h, Index w, Index d, Index f) {
    return values_[flat_index(shape_, h, w, d, f)];
  }
  Scalar operator()(Index h, Index w, Index d, Index f) const {
    return values_[flat_index(shape_, h, w, d, f)];
  }

 private:
  LayerShape shape_;
  VecX<Scalar> values_;

  template <typename S>
  friend VecX<S> flatten(const Tensor4<S>&);
};

/// Reorders a gradient tensor into the filter-collocated flat vector.
template <typename Scalar>
VecX<Scalar> flatten(const Tensor4<Scalar>& tensor) {
  return tensor.values_;  // storage already follows flat_index order
}

template <typename Scalar>
Tensor4<Scalar> unflatten(VecX<Scalar> flat, const LayerShape& shape) {
  if (!shape.valid())
    throw Error("unflatten: all of H, W, D, F must be at least 1");
  if (flat.size() != shape.size())
    throw Error("unflatten: expected " + std::to_string(shape.size()) +
                " values, got " + std::to_string(flat.size()));
  return Tensor4<Scalar>(shape, std::move(flat));
}

/// Concatenation of per-layer flat vectors for a whole model.
struct FlatLayout {
  struct Layer {
    LayerShape shape;
    LayerKind kind = LayerKind::Conv;
    Index offset = 0;
  };

  std::vector<Layer> layers;
  Index total = 0;
};

inline FlatLayout make_layout(
    std::span<const std::pair<LayerShape, LayerKind>> layers) {
  FlatLayout layout;
  Index offset = 0;
  for (const auto& [shape, kind] : layers) {
    if (!shape.valid())
      throw Error("make_layout: layer dimensions must be at least 1");
    layout.layers.push_back({shape, kind, offset});
    offset += shape.size();
  }
  layout.total = offset;
  return layout;
}

inline FlatLayout make_layout(std::initializer_list<std::pair<LayerShape, LayerKind>> layers) {
  std::vector<std::pair<LayerShape, LayerKind>> v(layers);
  return make_layout(std::span<const std::pair<LayerShape, LayerKind>>(v));
}

/// A contiguous run of K adjacent gradients, never crossing a layer
/// boundary. Residual runs (layer size not divisible by K) and runs in
/// passthrough layers are carried uncompressed.
struct SliceSpec {
  std::uint32_t id = 0;     // global slice index m
  std::uint32_t layer = 0;  // index into FlatLayout::layers
  Index start = 0;          // offset into the flat vector
  Index length = 0;
  bool residual = false;
  bool compressible = false;
};

/// Tiles every layer with slices of the layer's K; a trailing remainder
/// shorter than K becomes a final slice flagged residual.
inline std::vector<SliceSpec> make_slices(const FlatLayout& layout,
                                          std::span<const Index> slice_len) {
  if (slice_len.size() != layout.layers.size())
    throw Error("make_slices: need one K per layer");
  std::vector<SliceSpec> slices;
  for (std::size_t li = 0; li < layout.layers.size(); ++li) {
    const auto& layer = layout.layers[li];
    const Index k = slice_len[li];
    if (k < 1) throw Error("make_slices: K must be at least 1");
    Index done = 0;
    while (done < layer.shape.size()) {
      const Index len = std::min(k, layer.shape.size() - done);
      SliceSpec s;
      s.id = static_cast<std::uint32_t>(slices.size());
      s.layer = static_cast<std::uint32_t>(li);
      s.start = layer.offset + done;
      s.length = len;
      s.residual = len < k;
      s.compressible = !s.residual && layer.kind == LayerKind::Conv;
      slices.push_back(s);
      done += len;
    }
  }
  return slices;
}

inline std::vector<SliceSpec> make_slices(const FlatLayout& layout, Index k) {
  std::vector<Index> ks(layout.layers.size(), k);
  return make_slices(layout, ks);
}

/// The 1/N share of the flat vector one ring node initiates; always made
/// of whole slices.
struct SegmentSpec {
  std::uint32_t id = 0;
  std::uint32_t first_slice = 0;
  std::uint32_t slice_count = 0;
  Index start = 0;
  Index length = 0;
};

/// Splits the slice list into N contiguous segments, balanced greedily by
/// element count. Segment sizes in slices differ by at most one when all
/// slices have equal length.
inline std::vector<SegmentSpec> make_segments(
    const std::vector<SliceSpec>& slices, int nodes) {
  if (nodes < 1) throw Error("make_segments: need at least one node");
  if (static_cast<int>(slices.size()) < nodes)
    throw ConfigError("make_segments: " + std::to_string(slices.size()) +
                      " slices cannot fill " + std::to_string(nodes) +
                      " segments");
  Index remaining_elems = 0;
  for (const auto& s : slices) remaining_elems += s.length;

  std::vector<SegmentSpec> segments;
  std::size_t next = 0;
  for (int seg = 0; seg < nodes; ++seg) {
    const int segs_left = nodes - seg;
    const std::size_t max_take = slices.size() - next - (segs_left - 1);
    const double target =
        static_cast<double>(remaining_elems) / static_cast<double>(segs_left);
    SegmentSpec out;
    out.id = static_cast<std::uint32_t>(seg);
    out.first_slice = static_cast<std::uint32_t>(next);
    out.start = slices[next].start;
    Index taken = 0;
    std::size_t count = 0;
    while (count < max_take) {
      taken += slices[next + count].length;
      ++count;
      if (static_cast<double>(taken) >= target) break;
    }
    if (count == 0) count = 1;  // always at least one slice
    out.slice_count = static_cast<std::uint32_t>(count);
    out.length = taken;
    segments.push_back(out);
    next += count;
    remaining_elems -= taken;
  }
  return segments;
}

}  // namespace gvq
