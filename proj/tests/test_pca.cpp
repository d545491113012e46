#include <doctest.h>

#include <cstring>
#include <sstream>

#include "gvq/pca.hpp"
#include "gvq/rng.hpp"

using namespace gvq;

namespace {

MatXd random_matrix(Index rows, Index cols, std::uint64_t seed) {
  Rng rng(seed);
  MatXd m(rows, cols);
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r) m(r, c) = rng.normal();
  return m;
}

MatXd random_orthonormal(Index n, std::uint64_t seed) {
  Eigen::HouseholderQR<MatXd> qr(random_matrix(n, n, seed));
  return qr.householderQ() * MatXd::Identity(n, n);
}

MatXd random_psd(Index n, std::uint64_t seed) {
  const MatXd a = random_matrix(n, n, seed);
  return a * a.transpose() / static_cast<double>(n);
}

SampleBuffer fill_buffer(const MatXd& samples, std::uint32_t slice = 0) {
  SampleBuffer buf(slice, samples.rows(), samples.cols());
  for (Index c = 0; c < samples.cols(); ++c) buf.add(samples.col(c));
  return buf;
}

}  // namespace

TEST_CASE("compute_mean: examples and summation oracle") {
  MatXd two(2, 2);
  two << 1, 3, 1, 3;
  CHECK(compute_mean(two) == VecXd::Constant(2, 2.0));

  MatXd single = random_matrix(5, 1, 3);
  CHECK(compute_mean(single) == single.col(0));

  const MatXd samples = random_matrix(16, 100, 4);
  const VecXd mean = compute_mean(samples);
  for (Index k = 0; k < samples.rows(); ++k) {
    double acc = 0;  // independent naive re-summation
    for (Index t = 0; t < samples.cols(); ++t) acc += samples(k, t);
    CHECK(std::abs(mean[k] - acc / 100.0) <= 1e-12);
  }
  CHECK_THROWS_AS(compute_mean(MatXd(3, 0)), Error);
}

TEST_CASE("compute_covariance: examples") {
  SUBCASE("identical samples give the zero matrix") {
    MatXd samples(3, 4);
    for (Index t = 0; t < 4; ++t) samples.col(t) = VecXd::Constant(3, 1.5);
    const MatXd c = compute_covariance(samples, compute_mean(samples));
    CHECK(c.cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("hand-evaluated 2-sample case with the 1/(L-1) convention") {
    MatXd samples(2, 2);
    samples.col(0) << 1, 0;
    samples.col(1) << -1, 0;
    const MatXd c = compute_covariance(samples, compute_mean(samples));
    CHECK(c(0, 0) == 2.0);
    CHECK(c(0, 1) == 0.0);
    CHECK(c(1, 0) == 0.0);
    CHECK(c(1, 1) == 0.0);
  }
  SUBCASE("exactly symmetric by construction") {
    const MatXd samples = random_matrix(8, 20, 5);
    const MatXd c = compute_covariance(samples, compute_mean(samples));
    CHECK(c == c.transpose().eval());
  }
  CHECK_THROWS_AS(compute_covariance(random_matrix(4, 1, 6), VecXd::Zero(4)),
                  Error);
}

TEST_CASE("jacobi_eigh: identity, diagonal, reconstruction") {
  SUBCASE("identity matrix") {
    const auto eig = jacobi_eigh<double>(MatXd::Identity(6, 6));
    CHECK(eig.values == VecXd::Ones(6));
    // Accept any orthonormal set via the residual, not a fixed U.
    CHECK((MatXd::Identity(6, 6) * eig.vectors - eig.vectors).norm() <= 1e-12);
    CHECK((eig.vectors.transpose() * eig.vectors - MatXd::Identity(6, 6))
              .cwiseAbs()
              .maxCoeff() <= 1e-12);
  }
  SUBCASE("diag(4,1)") {
    MatXd c = MatXd::Zero(2, 2);
    c(0, 0) = 4;
    c(1, 1) = 1;
    const auto eig = jacobi_eigh(c);
    CHECK(eig.values[0] == 4.0);
    CHECK(eig.values[1] == 1.0);
    CHECK(eig.vectors == MatXd::Identity(2, 2));  // sign convention fixes U
  }
  SUBCASE("random PSD K=16 reconstructs") {
    const MatXd c = random_psd(16, 7);
    const auto eig = jacobi_eigh(c);
    const MatXd rebuilt =
        eig.vectors * eig.values.asDiagonal() * eig.vectors.transpose();
    CHECK((rebuilt - c).norm() <= 1e-8 * c.norm());
    // Eigen-equation residual and ordering.
    const double top = eig.values.cwiseAbs().maxCoeff();
    for (Index k = 0; k < 16; ++k) {
      const VecXd residual = c * eig.vectors.col(k) - eig.values[k] * eig.vectors.col(k);
      CHECK(residual.cwiseAbs().maxCoeff() <= 1e-7 * top);
      if (k > 0) CHECK(eig.values[k] <= eig.values[k - 1]);
    }
  }
  SUBCASE("sign convention: largest-magnitude entry positive") {
    const MatXd c = random_psd(9, 11);
    const auto eig = jacobi_eigh(c);
    for (Index k = 0; k < 9; ++k) {
      Index lead = 0;
      for (Index i = 1; i < 9; ++i)
        if (std::abs(eig.vectors(i, k)) > std::abs(eig.vectors(lead, k))) lead = i;
      CHECK(eig.vectors(lead, k) > 0);
    }
  }
  SUBCASE("non-symmetric input is rejected") {
    MatXd bad = MatXd::Zero(3, 3);
    bad(0, 1) = 1.0;  // asymmetric
    CHECK_THROWS_AS(jacobi_eigh(bad), Error);
  }
}

TEST_CASE("select_dimension: cumulative-energy oracle") {
  VecXd s3(3);
  s3 << 1, 0, 0;
  CHECK(select_dimension(s3, 0.01).d == 1);

  VecXd s4(4);
  s4 << 4, 3, 2, 1;  // cumulative 4,7,9,10; need >= 9.9
  CHECK(select_dimension(s4, 0.01).d == 4);

  VecXd skew(3);
  skew << 0.99, 0.005, 0.005;
  CHECK(select_dimension(skew, 0.01).d == 1);

  SUBCASE("lambda = 0 keeps everything") {
    VecXd full(5);
    full << 5, 4, 3, 2, 1;
    CHECK(select_dimension(full, 0.0).d == 5);
  }
  SUBCASE("all-zero spectrum is degenerate") {
    const auto choice = select_dimension(VecXd::Zero(4).eval(), 0.01);
    CHECK(choice.d == 1);
    CHECK(choice.degenerate);
  }
  SUBCASE("contract checks") {
    VecXd increasing(2);
    increasing << 1, 2;
    CHECK_THROWS_AS(select_dimension(increasing, 0.1), Error);
    VecXd ok(2);
    ok << 2, 1;
    CHECK_THROWS_AS(select_dimension(ok, 1.0), Error);
    CHECK_THROWS_AS(select_dimension(ok, -0.1), Error);
  }
}

TEST_CASE("build_compressor: rank-1 samples") {
  const Index k = 12;
  Rng rng(21);
  VecXd v = random_matrix(k, 1, 22);
  v /= v.norm();
  const VecXd mu0 = random_matrix(k, 1, 23);
  MatXd samples(k, 30);
  for (Index t = 0; t < 30; ++t) samples.col(t) = rng.normal() * v + mu0;
  const auto buf = fill_buffer(samples);
  const auto comp = build_compressor(buf, 0.01);
  CHECK(comp.dim_out() == 1);
  CHECK(std::abs(std::abs(comp.basis.col(0).dot(v)) - 1.0) <= 1e-9);
  // Reconstruction of the training samples is exact for rank-1 data.
  for (Index t = 0; t < 30; ++t) {
    const VecXd x = samples.col(t);
    const VecXd x_hat =
        comp.basis * (comp.basis.transpose() * (x - comp.mean)) + comp.mean;
    CHECK((x_hat - x).norm() <= 1e-9);
  }
}

TEST_CASE("build_compressor: lambda = 0 on full-rank noise keeps d = K") {
  const auto buf = fill_buffer(random_matrix(8, 64, 31));
  const auto comp = build_compressor(buf, 0.0);
  CHECK(comp.dim_out() == 8);
  CHECK(comp.ratio() == 1.0);
}

TEST_CASE("build_compressor: rank-4 signal plus small noise") {
  const Index k = 32, r = 4;
  Rng rng(41);
  const MatXd basis = random_orthonormal(k, 42).leftCols(r);
  MatXd samples(k, 100);
  for (Index t = 0; t < 100; ++t) {
    VecXd z(r);
    for (Index j = 0; j < r; ++j) z[j] = rng.normal();
    samples.col(t) = basis * z;
    for (Index i = 0; i < k; ++i) samples(i, t) += 1e-3 * rng.normal();
  }
  const auto comp = build_compressor(fill_buffer(samples), 0.01);
  CHECK(comp.dim_out() >= 4);
  CHECK(comp.dim_out() <= 6);
}

TEST_CASE("compressor invariants: orthonormal basis, clamped spectrum") {
  const auto buf = fill_buffer(random_matrix(10, 25, 51));
  const auto comp = build_compressor(buf, 0.1);
  const MatXd gram = comp.basis.transpose() * comp.basis;
  CHECK((gram - MatXd::Identity(comp.dim_out(), comp.dim_out()))
            .cwiseAbs()
            .maxCoeff() <= 1e-9);
  CHECK(comp.spectrum.minCoeff() >= 0.0);
  for (Index i = 0; i + 1 < comp.spectrum.size(); ++i)
    CHECK(comp.spectrum[i] >= comp.spectrum[i + 1]);
  CHECK(comp.dim_out() >= 1);
  CHECK(comp.dim_out() <= comp.dim_in());
}

TEST_CASE("PCA optimality: discarded energy bounds reconstruction error") {
  for (double lambda : {0.0, 0.01, 0.1}) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      const Index k = 6 + static_cast<Index>(seed % 7);
      const MatXd samples = random_matrix(k, 20 + 3 * seed, 100 + seed);
      const auto comp = build_compressor(fill_buffer(samples), lambda);
      double err = 0, centered = 0;
      for (Index t = 0; t < samples.cols(); ++t) {
        const VecXd x = samples.col(t);
        const VecXd x_hat =
            comp.basis * (comp.basis.transpose() * (x - comp.mean)) + comp.mean;
        err += (x_hat - x).squaredNorm();
        centered += (x - comp.mean).squaredNorm();
      }
      CHECK(err <= lambda * centered + 1e-9);
    }
  }
}

TEST_CASE("spectrum sums to the covariance trace") {
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    const MatXd samples = random_matrix(12, 40, 200 + seed);
    const VecXd mean = compute_mean(samples);
    const MatXd cov = compute_covariance(samples, mean);
    const auto eig = jacobi_eigh(cov);
    CHECK(std::abs(eig.values.sum() - cov.trace()) <= 1e-9 * cov.trace());
  }
}

TEST_CASE("identical buffers build bitwise-identical compressors") {
  const MatXd samples = random_matrix(16, 50, 77);
  const auto a = build_compressor(fill_buffer(samples), 0.01, 3);
  const auto b = build_compressor(fill_buffer(samples), 0.01, 3);
  REQUIRE(a.dim_out() == b.dim_out());
  CHECK(std::memcmp(a.basis.data(), b.basis.data(),
                    sizeof(double) * a.basis.size()) == 0);
  CHECK(std::memcmp(a.mean.data(), b.mean.data(),
                    sizeof(double) * a.mean.size()) == 0);
  CHECK(std::memcmp(a.spectrum.data(), b.spectrum.data(),
                    sizeof(double) * a.spectrum.size()) == 0);
}

TEST_CASE("compressor serialization round trip") {
  const auto comp = build_compressor(fill_buffer(random_matrix(9, 30, 88)), 0.05, 2);
  std::stringstream stream;
  save_compressor(stream, comp);
  // 4 magic + 4 K + 4 d + 8K mean + 8Kd basis + 8K spectrum
  const std::size_t k = 9, d = comp.dim_out();
  CHECK(stream.str().size() == 12 + 8 * k + 8 * k * d + 8 * k);
  const auto back = load_compressor(stream);
  CHECK(back.mean == comp.mean);
  CHECK(back.basis == comp.basis);
  CHECK(back.spectrum == comp.spectrum);

  std::stringstream bad("GVQX");
  CHECK_THROWS_AS(load_compressor(bad), IoError);
}

TEST_CASE("sample buffer contract checks") {
  SampleBuffer buf(0, 4, 2);
  CHECK_THROWS_AS(buf.add(VecXd::Zero(3)), Error);
  buf.add(VecXd::Zero(4));
  CHECK_THROWS_AS(build_compressor(buf, 0.01), Error);  // < 2 samples
  buf.add(VecXd::Zero(4));
  CHECK_THROWS_AS(buf.add(VecXd::Zero(4)), Error);  // full
  const auto comp = build_compressor(buf, 0.01);
  CHECK(comp.degenerate);  // zero variance
  CHECK(comp.dim_out() == 1);
}
