#include <doctest.h>

#include <numeric>

#include "gvq/rng.hpp"
#include "gvq/tensor_layout.hpp"

using namespace gvq;

namespace {

// Independent index oracle: straight evaluation of the flat order
// contract, kept separate from the library helper on purpose.
Index oracle_index(const LayerShape& s, Index h, Index w, Index d, Index f) {
  return ((h * s.width + w) * s.depth + d) * s.filters + f;
}

Tensor4<double> tagged_tensor(const LayerShape& s) {
  // Value encodes the 4-D index so positions are recognizable.
  Tensor4<double> t(s);
  for (Index h = 0; h < s.height; ++h)
    for (Index w = 0; w < s.width; ++w)
      for (Index d = 0; d < s.depth; ++d)
        for (Index f = 0; f < s.filters; ++f)
          t(h, w, d, f) = static_cast<double>(((h * 100 + w) * 100 + d) * 100 + f);
  return t;
}

}  // namespace

TEST_CASE("flatten: (1,1,2,2) interleaves filters fastest") {
  const LayerShape s{1, 1, 2, 2};
  Tensor4<double> t(s);
  t(0, 0, 0, 0) = 1.0;
  t(0, 0, 0, 1) = 2.0;
  t(0, 0, 1, 0) = 3.0;
  t(0, 0, 1, 1) = 4.0;
  const VecXd flat = flatten(t);
  REQUIRE(flat.size() == 4);
  CHECK(flat[0] == 1.0);  // (d=0,f=0)
  CHECK(flat[1] == 2.0);  // (d=0,f=1)
  CHECK(flat[2] == 3.0);  // (d=1,f=0)
  CHECK(flat[3] == 4.0);  // (d=1,f=1)
}

TEST_CASE("flatten: degenerate (1,1,1,1) is the identity") {
  Tensor4<double> t(LayerShape{1, 1, 1, 1});
  t(0, 0, 0, 0) = 42.0;
  const VecXd flat = flatten(t);
  REQUIRE(flat.size() == 1);
  CHECK(flat[0] == 42.0);
}

TEST_CASE("flatten: (2,1,1,2) orders h slowest") {
  const LayerShape s{2, 1, 1, 2};
  Tensor4<double> t = tagged_tensor(s);
  const VecXd flat = flatten(t);
  CHECK(flat[0] == t(0, 0, 0, 0));
  CHECK(flat[1] == t(0, 0, 0, 1));
  CHECK(flat[2] == t(1, 0, 0, 0));
  CHECK(flat[3] == t(1, 0, 0, 1));
}

TEST_CASE("flatten matches the index oracle on a bigger shape") {
  const LayerShape s{3, 4, 2, 5};
  const Tensor4<double> t = tagged_tensor(s);
  const VecXd flat = flatten(t);
  for (Index h = 0; h < s.height; ++h)
    for (Index w = 0; w < s.width; ++w)
      for (Index d = 0; d < s.depth; ++d)
        for (Index f = 0; f < s.filters; ++f)
          CHECK(flat[oracle_index(s, h, w, d, f)] == t(h, w, d, f));
}

TEST_CASE("unflatten: explicit positions and round trip") {
  const LayerShape s{1, 1, 2, 2};
  VecXd flat(4);
  flat << 10, 20, 30, 40;
  const auto t = unflatten(flat, s);
  CHECK(t(0, 0, 0, 0) == 10);
  CHECK(t(0, 0, 1, 0) == 30);

  const LayerShape big{3, 3, 2, 4};
  Rng rng(7);
  VecXd values(big.size());
  for (Index i = 0; i < values.size(); ++i) values[i] = rng.normal();
  const VecXd back = flatten(unflatten(values, big));
  CHECK(back == values);
}

TEST_CASE("unflatten rejects bad shapes and lengths") {
  CHECK_THROWS_AS(unflatten(VecXd::Zero(0), LayerShape{0, 1, 2, 2}), Error);
  CHECK_THROWS_AS(unflatten(VecXd::Zero(3), LayerShape{1, 1, 2, 2}), Error);
  CHECK_THROWS_AS(Tensor4<double>(LayerShape{1, 1, 0, 1}), Error);
}

TEST_CASE("flatten/unflatten are exact inverses for all small shapes") {
  for (Index h = 1; h <= 8; ++h)
    for (Index w = 1; w <= 8; ++w)
      for (Index d = 1; d <= 8; ++d)
        for (Index f = 1; f <= 8; ++f) {
          const LayerShape s{h, w, d, f};
          VecXd values(s.size());
          std::iota(values.data(), values.data() + values.size(), 0.0);
          const VecXd round = flatten(unflatten(values, s));
          REQUIRE(round == values);
        }
}

TEST_CASE("the F gradients of one location are adjacent") {
  const LayerShape s{5, 3, 7, 6};
  for (Index h = 0; h < s.height; ++h)
    for (Index w = 0; w < s.width; ++w)
      for (Index d = 0; d < s.depth; ++d)
        for (Index f = 0; f + 1 < s.filters; ++f)
          CHECK(flat_index(s, h, w, d, f + 1) == flat_index(s, h, w, d, f) + 1);
}

TEST_CASE("make_slices tiles layers and flags residuals") {
  SUBCASE("768 params at K=256") {
    auto layout = make_layout({{LayerShape{1, 1, 48, 16}, LayerKind::Conv}});
    REQUIRE(layout.total == 768);
    const auto slices = make_slices(layout, 256);
    REQUIRE(slices.size() == 3);
    for (const auto& s : slices) {
      CHECK(s.length == 256);
      CHECK(!s.residual);
      CHECK(s.compressible);
    }
  }
  SUBCASE("the (3,3,16,16) layer at K = 3*F*D = 768") {
    auto layout = make_layout({{LayerShape{3, 3, 16, 16}, LayerKind::Conv}});
    REQUIRE(layout.total == 2304);
    const auto slices = make_slices(layout, 768);
    REQUIRE(slices.size() == 3);
    CHECK(slices[2].start == 1536);
    CHECK(!slices[2].residual);
  }
  SUBCASE("100 params at K=64 leaves a residual of 36") {
    auto layout = make_layout({{LayerShape{1, 1, 100, 1}, LayerKind::Conv}});
    const auto slices = make_slices(layout, 64);
    REQUIRE(slices.size() == 2);
    CHECK(slices[0].length == 64);
    CHECK(!slices[0].residual);
    CHECK(slices[1].length == 36);
    CHECK(slices[1].residual);
    CHECK(!slices[1].compressible);
  }
}

TEST_CASE("slices never cross layer boundaries") {
  auto layout = make_layout({{LayerShape{1, 1, 10, 1}, LayerKind::Conv},
                             {LayerShape{1, 1, 7, 1}, LayerKind::Conv}});
  const auto slices = make_slices(layout, 4);
  for (const auto& s : slices) {
    const auto& layer = layout.layers[s.layer];
    CHECK(s.start >= layer.offset);
    CHECK(s.start + s.length <= layer.offset + layer.shape.size());
  }
  // 10 -> 4+4+2(res), 7 -> 4+3(res)
  REQUIRE(slices.size() == 5);
  CHECK(slices[2].residual);
  CHECK(slices[4].residual);
}

TEST_CASE("passthrough layers are never compressible") {
  auto layout = make_layout({{LayerShape{1, 1, 8, 2}, LayerKind::Passthrough}});
  const auto slices = make_slices(layout, 8);
  REQUIRE(slices.size() == 2);
  CHECK(!slices[0].compressible);
  CHECK(!slices[0].residual);
}

TEST_CASE("make_segments balances whole slices") {
  auto layout = make_layout({{LayerShape{1, 1, 6, 32}, LayerKind::Conv}});
  SUBCASE("even split: 6 slices over 3 nodes") {
    const auto slices = make_slices(layout, 32);
    REQUIRE(slices.size() == 6);
    const auto segs = make_segments(slices, 3);
    REQUIRE(segs.size() == 3);
    for (const auto& s : segs) CHECK(s.slice_count == 2);
  }
  SUBCASE("7 slices over 3 nodes gives {3,2,2}") {
    auto l7 = make_layout({{LayerShape{1, 1, 7, 32}, LayerKind::Conv}});
    const auto slices = make_slices(l7, 32);
    REQUIRE(slices.size() == 7);
    const auto segs = make_segments(slices, 3);
    REQUIRE(segs.size() == 3);
    CHECK(segs[0].slice_count == 3);
    CHECK(segs[1].slice_count == 2);
    CHECK(segs[2].slice_count == 2);
  }
  SUBCASE("fewer slices than nodes is rejected") {
    auto l2 = make_layout({{LayerShape{1, 1, 2, 32}, LayerKind::Conv}});
    const auto slices = make_slices(l2, 32);
    REQUIRE(slices.size() == 2);
    CHECK_THROWS_AS(make_segments(slices, 3), ConfigError);
  }
}

TEST_CASE("segments cover every index exactly once") {
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const Index d1 = 1 + static_cast<Index>(rng.below(40));
    const Index d2 = 1 + static_cast<Index>(rng.below(40));
    auto layout = make_layout({{LayerShape{1, 2, d1, 3}, LayerKind::Conv},
                               {LayerShape{2, 1, d2, 2}, LayerKind::Passthrough}});
    const Index k = 1 + static_cast<Index>(rng.below(16));
    const auto slices = make_slices(layout, k);
    const int nodes = 1 + static_cast<int>(rng.below(4));
    if (static_cast<int>(slices.size()) < nodes) continue;
    const auto segs = make_segments(slices, nodes);
    std::vector<int> covered(layout.total, 0);
    std::uint32_t next_slice = 0;
    for (const auto& seg : segs) {
      CHECK(seg.first_slice == next_slice);  // contiguous in slice order
      next_slice += seg.slice_count;
      for (Index i = seg.start; i < seg.start + seg.length; ++i) covered[i] += 1;
    }
    CHECK(next_slice == slices.size());
    for (Index i = 0; i < layout.total; ++i) REQUIRE(covered[i] == 1);
  }
}
