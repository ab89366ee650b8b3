#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <cstring>

namespace hookrt {

// Dense storage is row-major throughout so that one token's vector (a row)
// is contiguous in memory and serializes without repacking.
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using MatF = Mat<float>;
using VecF = Vec<float>;
using RowVecF = RowVec<float>;

// Ref that accepts arbitrary outer stride, so head-column blocks of a
// row-major matrix bind without copying.
template <typename Scalar>
using MatRef = Eigen::Ref<const Mat<Scalar>, 0, Eigen::OuterStride<>>;

template <typename Scalar>
using RowVecRef = Eigen::Ref<const RowVec<Scalar>>;

// FNV-1a over raw bytes; used for parameter and logit checksums.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t seed = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t digest_row(const RowVecF& row, std::uint64_t seed = 0xcbf29ce484222325ull) {
  return fnv1a64(row.data(), sizeof(float) * static_cast<std::size_t>(row.size()), seed);
}

}  // namespace hookrt
