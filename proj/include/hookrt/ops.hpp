#pragma once

#include "hookrt/tensor.hpp"

#include <cmath>
#include <stdexcept>

// Free-function kernels for the decoder forward pass. Everything operates
// row-by-row: the result for one token never depends on how many other rows
// are in the batch, which is what makes incremental decoding bit-identical
// to a full-prefix recompute.

namespace hookrt {

inline constexpr float kRmsNormEps = 1e-5f;

// x / rms(x) * w, one row at a time.
template <typename Scalar>
Mat<Scalar> rms_norm_rows(const MatRef<Scalar>& x, const Vec<Scalar>& w,
                          Scalar eps = Scalar(kRmsNormEps)) {
  Mat<Scalar> out(x.rows(), x.cols());
  const auto d = static_cast<Scalar>(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    Scalar ms = x.row(r).squaredNorm() / d;
    Scalar inv = Scalar(1) / std::sqrt(ms + eps);
    out.row(r) = x.row(r) * inv;
    out.row(r).array() *= w.transpose().array();
  }
  return out;
}

// y = x W^T for each row of x; W is [d_out, d_in]. Row-wise GEMV keeps the
// reduction order independent of the number of rows passed in.
template <typename Scalar>
Mat<Scalar> linear_rows(const MatRef<Scalar>& x, const Mat<Scalar>& w) {
  if (x.cols() != w.cols())
    throw std::invalid_argument("linear_rows: dimension mismatch");
  Mat<Scalar> out(x.rows(), w.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    out.row(r) = (w * x.row(r).transpose()).transpose();
  return out;
}

// Rotary position embedding over adjacent pairs (2i, 2i+1) of each head
// vector. Angles are formed in double and applied in the working scalar.
// qk is [n_rows, n_heads*d_head]; row i sits at absolute position pos0+i.
template <typename Scalar>
void rope_rows_inplace(Eigen::Ref<Mat<Scalar>, 0, Eigen::OuterStride<>> qk,
                       int n_heads, int d_head, int pos0, double theta) {
  for (Eigen::Index r = 0; r < qk.rows(); ++r) {
    const double pos = static_cast<double>(pos0) + static_cast<double>(r);
    for (int h = 0; h < n_heads; ++h) {
      for (int i = 0; i * 2 < d_head; ++i) {
        const double freq = std::pow(theta, -2.0 * i / d_head);
        const double angle = pos * freq;
        const Scalar c = static_cast<Scalar>(std::cos(angle));
        const Scalar s = static_cast<Scalar>(std::sin(angle));
        const int base = h * d_head + 2 * i;
        const Scalar x0 = qk(r, base);
        const Scalar x1 = qk(r, base + 1);
        qk(r, base) = x0 * c - x1 * s;
        qk(r, base + 1) = x0 * s + x1 * c;
      }
    }
  }
}

// softmax(q k^T / sqrt(d_head)) over the rows of k. Shared by the forward
// pass and the analyzer-side recomputation so both produce the same row.
template <typename Scalar>
RowVec<Scalar> attention_row(const RowVecRef<Scalar>& q, const MatRef<Scalar>& k) {
  if (k.rows() == 0) throw std::invalid_argument("attention_row: no key rows");
  if (q.size() != k.cols())
    throw std::invalid_argument("attention_row: q/k dimension mismatch");
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(q.size()));
  RowVec<Scalar> logits(k.rows());
  for (Eigen::Index j = 0; j < k.rows(); ++j)
    logits(j) = q.dot(k.row(j)) * scale;
  const Scalar m = logits.maxCoeff();
  RowVec<Scalar> e = (logits.array() - m).exp();
  return e / e.sum();
}

template <typename Scalar>
Mat<Scalar> silu_gate(const Mat<Scalar>& gate, const Mat<Scalar>& up) {
  // silu(g) * u, elementwise
  Mat<Scalar> out(gate.rows(), gate.cols());
  for (Eigen::Index r = 0; r < gate.rows(); ++r)
    for (Eigen::Index c = 0; c < gate.cols(); ++c) {
      const Scalar g = gate(r, c);
      out(r, c) = g / (Scalar(1) + std::exp(-g)) * up(r, c);
    }
  return out;
}

// Greedy pick; ties resolved toward the lowest index.
template <typename Scalar>
int argmax_lowest(const RowVec<Scalar>& row) {
  int best = 0;
  for (Eigen::Index i = 1; i < row.size(); ++i)
    if (row(i) > row(best)) best = static_cast<int>(i);
  return best;
}

}  // namespace hookrt
