#pragma once

// Dense kernels shared by the tape and the analysis code. Internal header.

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>

namespace safeft::kernels {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

/// C (m x n) = op(A) * op(B), where op transposes when the flag is set.
/// A is stored m x k (or k x m when transposed), B is k x n (or n x k).
inline void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
                 bool trans_a, bool trans_b, bool accumulate = false) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto K = static_cast<Eigen::Index>(k);
  const auto N = static_cast<Eigen::Index>(n);
  MapMat C(c, M, N);
  if (!trans_a && !trans_b) {
    if (accumulate) C.noalias() += ConstMapMat(a, M, K) * ConstMapMat(b, K, N);
    else C.noalias() = ConstMapMat(a, M, K) * ConstMapMat(b, K, N);
  } else if (trans_a && !trans_b) {
    if (accumulate) C.noalias() += ConstMapMat(a, K, M).transpose() * ConstMapMat(b, K, N);
    else C.noalias() = ConstMapMat(a, K, M).transpose() * ConstMapMat(b, K, N);
  } else if (!trans_a && trans_b) {
    if (accumulate) C.noalias() += ConstMapMat(a, M, K) * ConstMapMat(b, N, K).transpose();
    else C.noalias() = ConstMapMat(a, M, K) * ConstMapMat(b, N, K).transpose();
  } else {
    if (accumulate) C.noalias() += ConstMapMat(a, K, M).transpose() * ConstMapMat(b, N, K).transpose();
    else C.noalias() = ConstMapMat(a, K, M).transpose() * ConstMapMat(b, N, K).transpose();
  }
}

/// Counter-based uniform in [0, 1): a pure function of its four keys.
inline std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline double counter_uniform(std::uint64_t seed, std::uint64_t step, std::uint64_t node, std::uint64_t index) {
  std::uint64_t h = splitmix(seed);
  h = splitmix(h ^ step);
  h = splitmix(h ^ node);
  h = splitmix(h ^ index);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

}  // namespace safeft::kernels
