#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "gvq/types.hpp"

namespace gvq {

template <typename Scalar>
struct EigenDecomposition {
  MatX<Scalar> vectors;  // columns are eigenvectors, same order as values
  VecX<Scalar> values;   // sorted nonincreasing
  int sweeps = 0;
};

/// Symmetric eigendecomposition by cyclic Jacobi rotations with a fixed
/// (row-major) sweep order. The iteration path depends only on the input
/// matrix, so identical inputs produce bitwise-identical results — every
/// ring node can derive the same compressor without a broadcast.
///
/// Converges when the off-diagonal Frobenius norm falls below
/// tol * ||A||_F. Columns are sorted by descending eigenvalue (stable),
/// and each column is signed so its largest-magnitude entry is positive
/// (first such entry on ties).
template <typename Scalar>
EigenDecomposition<Scalar> jacobi_eigh(const MatX<Scalar>& input,
                                       Scalar tol = Scalar(1e-12),
                                       int max_sweeps = 64) {
  const Index n = input.rows();
  if (input.cols() != n) throw Error("jacobi_eigh: matrix must be square");

  // Contract: input symmetric within 1e-8 (absolute, relative to scale).
  const Scalar scale = std::max<Scalar>(Scalar(1), input.cwiseAbs().maxCoeff());
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j)
      if (std::abs(input(i, j) - input(j, i)) > Scalar(1e-8) * scale)
        throw Error("jacobi_eigh: input is not symmetric");

  MatX<Scalar> a = input;
  MatX<Scalar> v = MatX<Scalar>::Identity(n, n);
  const Scalar frob = a.norm();

  EigenDecomposition<Scalar> out;
  out.vectors = std::move(v);
  if (frob == Scalar(0)) {
    out.values = VecX<Scalar>::Zero(n);
    return out;
  }
  MatX<Scalar>& vec = out.vectors;

  auto off_norm = [&]() {
    Scalar sum = 0;
    for (Index p = 0; p < n; ++p)
      for (Index q = p + 1; q < n; ++q) sum += a(p, q) * a(p, q);
    return std::sqrt(Scalar(2) * sum);
  };

  int sweep = 0;
  while (off_norm() > tol * frob) {
    if (++sweep > max_sweeps)
      throw Error("jacobi_eigh: no convergence in " +
                  std::to_string(max_sweeps) + " sweeps");
    for (Index p = 0; p < n - 1; ++p) {
      for (Index q = p + 1; q < n; ++q) {
        const Scalar apq = a(p, q);
        if (apq == Scalar(0)) continue;
        const Scalar theta = (a(q, q) - a(p, p)) / (Scalar(2) * apq);
        Scalar t = Scalar(1) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        if (theta < Scalar(0)) t = -t;
        const Scalar c = Scalar(1) / std::sqrt(t * t + 1);
        const Scalar s = t * c;
        const Scalar tau = s / (Scalar(1) + c);
        const Scalar h = t * apq;

        a(p, p) -= h;
        a(q, q) += h;
        a(p, q) = 0;
        a(q, p) = 0;
        for (Index j = 0; j < n; ++j) {
          if (j == p || j == q) continue;
          const Scalar ajp = a(j, p);
          const Scalar ajq = a(j, q);
          a(j, p) = ajp - s * (ajq + tau * ajp);
          a(p, j) = a(j, p);
          a(j, q) = ajq + s * (ajp - tau * ajq);
          a(q, j) = a(j, q);
        }
        for (Index j = 0; j < n; ++j) {
          const Scalar vjp = vec(j, p);
          const Scalar vjq = vec(j, q);
          vec(j, p) = vjp - s * (vjq + tau * vjp);
          vec(j, q) = vjq + s * (vjp - tau * vjq);
        }
      }
    }
  }
  out.sweeps = sweep;

  // Stable descending sort, then the sign convention.
  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), Index(0));
  std::stable_sort(order.begin(), order.end(),
                   [&](Index i, Index j) { return a(i, i) > a(j, j); });

  MatX<Scalar> sorted_vec(n, n);
  VecX<Scalar> values(n);
  for (Index k = 0; k < n; ++k) {
    values[k] = a(order[k], order[k]);
    sorted_vec.col(k) = vec.col(order[k]);
    Index lead = 0;
    Scalar best = std::abs(sorted_vec(0, k));
    for (Index i = 1; i < n; ++i) {
      const Scalar m = std::abs(sorted_vec(i, k));
      if (m > best) {
        best = m;
        lead = i;
      }
    }
    if (sorted_vec(lead, k) < Scalar(0)) sorted_vec.col(k) = -sorted_vec.col(k);
  }
  out.vectors = std::move(sorted_vec);
  out.values = std::move(values);
  return out;
}

}  // namespace gvq
