#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "gvq/binio.hpp"
#include "gvq/rng.hpp"
#include "gvq/types.hpp"

namespace gvq {

/// Stochastically quantized vector: an L2 norm plus per-element sign and
/// level. Deliberately provides no aggregate operation — sums of
/// quantized vectors are undefined, which is exactly why ring aggregation
/// in scalar mode must dequantize-add-requantize at every hop.
struct QuantizedVector {
  float norm = 0.0f;  // stored at wire precision so byte round-trips are exact
  std::vector<std::uint8_t> signs;   // 1 = negative
  std::vector<std::uint8_t> levels;  // in [0, 2^bits - 1]
  int bits = 0;

  std::size_t size() const { return levels.size(); }
};

/// Stochastic rounding of |v_i| / ||v|| onto 2^bits - 1 levels so the
/// dequantized expectation equals v. Deterministic given the seed.
template <typename Scalar>
QuantizedVector quantize(const VecX<Scalar>& v, int bits, std::uint64_t seed) {
  if (bits < 1 || bits > 8) throw Error("quantize: bits must be in [1, 8]");
  if (!v.allFinite()) throw Error("quantize: input must be finite");

  QuantizedVector q;
  q.bits = bits;
  q.signs.resize(v.size());
  q.levels.resize(v.size());
  q.norm = static_cast<float>(std::sqrt(static_cast<double>(v.squaredNorm())));

  Rng rng(seed);
  const double max_level = static_cast<double>((1u << bits) - 1u);
  const double norm = static_cast<double>(q.norm);
  for (Index i = 0; i < v.size(); ++i) {
    const double u = rng.uniform();  // drawn unconditionally to keep streams aligned
    q.signs[i] = v[i] < Scalar(0) ? 1 : 0;
    if (norm == 0.0) {
      q.levels[i] = 0;
      continue;
    }
    double x = std::abs(static_cast<double>(v[i])) / norm * max_level;
    if (x > max_level) x = max_level;
    const double lower = std::floor(x);
    double level = lower + (u < (x - lower) ? 1.0 : 0.0);
    if (level > max_level) level = max_level;
    q.levels[i] = static_cast<std::uint8_t>(level);
  }
  return q;
}

inline VecXd dequantize(const QuantizedVector& q) {
  const double max_level = static_cast<double>((1u << q.bits) - 1u);
  VecXd out(static_cast<Index>(q.size()));
  for (Index i = 0; i < out.size(); ++i) {
    const double magnitude =
        static_cast<double>(q.norm) * static_cast<double>(q.levels[i]) / max_level;
    out[i] = q.signs[i] ? -magnitude : magnitude;
  }
  return out;
}

/// Wire size: float32 norm, then one unpadded bitstream of `len` sign
/// bits followed by `len * bits` level bits.
inline std::size_t quantized_size_bytes(std::size_t len, int bits) {
  return (len * static_cast<std::size_t>(bits + 1) + 7) / 8 + 4;
}

inline std::vector<std::uint8_t> quantized_to_bytes(const QuantizedVector& q) {
  std::vector<std::uint8_t> out;
  out.reserve(quantized_size_bytes(q.size(), q.bits));
  put_f32(out, q.norm);
  BitWriter bw(out);
  for (std::uint8_t s : q.signs) bw.put(s, 1);
  for (std::uint8_t l : q.levels) bw.put(l, q.bits);
  return out;
}

inline QuantizedVector quantized_from_bytes(const std::uint8_t* data,
                                            std::size_t size, std::size_t len,
                                            int bits) {
  if (size < quantized_size_bytes(len, bits))
    throw IoError("quantized_from_bytes: buffer too small");
  QuantizedVector q;
  q.bits = bits;
  std::memcpy(&q.norm, data, 4);
  BitReader br(data + 4, size - 4);
  q.signs.resize(len);
  q.levels.resize(len);
  for (std::size_t i = 0; i < len; ++i)
    q.signs[i] = static_cast<std::uint8_t>(br.get(1));
  for (std::size_t i = 0; i < len; ++i)
    q.levels[i] = static_cast<std::uint8_t>(br.get(bits));
  return q;
}

}  // namespace gvq
