#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "camel/error.hpp"

namespace camel {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline bool is_finite(const Vector& v) { return v.allFinite(); }

// Streaming mean over a fixed-dimension vector stream. After k updates the
// mean equals the batch mean of the k inputs within 1e-12 per component.
struct RunningMean {
  Vector mean;
  std::size_t count = 0;

  RunningMean() = default;
  explicit RunningMean(Eigen::Index d) : mean(Vector::Zero(d)) {}
};

// Running sum of weighted outer products. sum_outer stays symmetric and
// positive semidefinite up to accumulation noise.
struct ScatterMatrix {
  Matrix sum_outer;
  double weight = 0.0;

  ScatterMatrix() = default;
  explicit ScatterMatrix(Eigen::Index d) : sum_outer(Matrix::Zero(d, d)) {}
};

struct EigResult {
  std::vector<double> eigenvalues;  // descending
  std::vector<Vector> eigenvectors; // unit Euclidean norm, original coordinates
};

inline RunningMean welford_update(RunningMean rm, const Vector& x) {
  if (!is_finite(x)) fail(errc::rejected_input, "welford_update: non-finite input");
  if (rm.count == 0 && rm.mean.size() == 0) rm.mean = Vector::Zero(x.size());
  if (x.size() != rm.mean.size()) fail(errc::rejected_input, "welford_update: dimension mismatch");
  rm.mean += (x - rm.mean) / static_cast<double>(rm.count + 1);
  rm.count += 1;
  return rm;
}

inline Vector batch_mean(const std::vector<Vector>& xs) {
  if (xs.empty()) fail(errc::empty_input, "batch_mean: empty input");
  Vector acc = Vector::Zero(xs.front().size());
  for (const auto& x : xs) {
    if (x.size() != acc.size()) fail(errc::rejected_input, "batch_mean: mixed dimensions");
    acc += x;
  }
  return acc / static_cast<double>(xs.size());
}

inline ScatterMatrix scatter_accumulate(ScatterMatrix sm, const Vector& x, double w) {
  if (w < 0.0) fail(errc::rejected_input, "scatter_accumulate: negative weight");
  if (sm.sum_outer.size() == 0) sm.sum_outer = Matrix::Zero(x.size(), x.size());
  if (x.size() != sm.sum_outer.rows()) fail(errc::rejected_input, "scatter_accumulate: dimension mismatch");
  sm.sum_outer.noalias() += w * x * x.transpose();
  sm.weight += w;
  return sm;
}

// Fixes each eigenvector's sign so its largest-magnitude component is
// positive; keeps repeated solves bit-comparable.
inline void canonicalize_sign(Vector& v) {
  Eigen::Index arg = 0;
  v.cwiseAbs().maxCoeff(&arg);
  if (v[arg] < 0.0) v = -v;
}

// Solves Sb v = lambda (Sw + ridge I) v via Cholesky whitening. Eigenvalues
// descending; eigenvectors renormalized to unit Euclidean norm.
inline EigResult solve_generalized_eig(const ScatterMatrix& Sb, const ScatterMatrix& Sw, double ridge) {
  if (ridge <= 0.0) fail(errc::rejected_input, "solve_generalized_eig: ridge must be positive");
  const Eigen::Index d = Sw.sum_outer.rows();
  if (Sb.sum_outer.rows() != d || Sb.sum_outer.cols() != d || Sw.sum_outer.cols() != d)
    fail(errc::rejected_input, "solve_generalized_eig: shape mismatch");

  Matrix W = Matrix(0.5 * (Sw.sum_outer + Sw.sum_outer.transpose()));
  W.diagonal().array() += ridge;
  Matrix B = 0.5 * (Sb.sum_outer + Sb.sum_outer.transpose());

  Eigen::LLT<Matrix> llt(W);
  if (llt.info() != Eigen::Success)
    fail(errc::degeneracy, "solve_generalized_eig: whitening factorization failed after ridge");

  Eigen::GeneralizedSelfAdjointEigenSolver<Matrix> solver(B, W, Eigen::ComputeEigenvectors | Eigen::Ax_lBx);
  if (solver.info() != Eigen::Success)
    fail(errc::degeneracy, "solve_generalized_eig: eigensolver did not converge");

  EigResult out;
  out.eigenvalues.resize(static_cast<std::size_t>(d));
  out.eigenvectors.resize(static_cast<std::size_t>(d));
  for (Eigen::Index i = 0; i < d; ++i) {
    const Eigen::Index src = d - 1 - i;  // ascending -> descending
    out.eigenvalues[static_cast<std::size_t>(i)] = solver.eigenvalues()[src];
    Vector v = solver.eigenvectors().col(src);
    const double n = v.norm();
    if (n > 0.0) v /= n;
    canonicalize_sign(v);
    out.eigenvectors[static_cast<std::size_t>(i)] = std::move(v);
  }
  return out;
}

// Picks the dimension count at the sharpest drop of a descending spectrum:
// L = argmax_{i in [1, min(l_max, d-1)]} lambda_i / lambda_{i+1}, with the
// denominator floored at 1e-12 * lambda_1. Returns 0 when lambda_1 <=
// zero_floor (callers pass 1e-10 * trace(Sw)/d to declare the spectrum flat).
inline int elbow_select(std::vector<double> eigenvalues, int l_max, double zero_floor = 0.0) {
  for (auto& v : eigenvalues)
    if (v < 0.0) v = 0.0;
  if (eigenvalues.empty()) return 0;
  const double lambda1 = eigenvalues.front();
  if (lambda1 <= zero_floor) return 0;
  const int d = static_cast<int>(eigenvalues.size());
  const int hi = std::min(l_max, d - 1);
  int best = 0;
  double best_ratio = -1.0;
  const double denom_floor = 1e-12 * lambda1;
  for (int i = 1; i <= hi; ++i) {
    const double denom = std::max(eigenvalues[static_cast<std::size_t>(i)], denom_floor);
    const double ratio = eigenvalues[static_cast<std::size_t>(i - 1)] / denom;
    if (ratio > best_ratio) {
      best_ratio = ratio;
      best = i;
    }
  }
  return best;
}

// Gram-Schmidt with one re-orthogonalization pass. Vectors whose residual
// norm falls below 1e-10 are dropped; their input indices land in `dropped`.
inline std::vector<Vector> orthonormalize(const std::vector<Vector>& vs, std::vector<int>* dropped = nullptr) {
  std::vector<Vector> basis;
  basis.reserve(vs.size());
  for (std::size_t i = 0; i < vs.size(); ++i) {
    Vector v = vs[i];
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& b : basis) v -= b.dot(v) * b;
    const double n = v.norm();
    if (n < 1e-10) {
      if (dropped) dropped->push_back(static_cast<int>(i));
      continue;
    }
    basis.push_back(v / n);
  }
  return basis;
}

// Median of absolute values; even length takes the upper median. The upper
// median is what keeps the statistic exactly invariant when one dominant
// value joins an even-length list (third-smallest of five equals the upper
// median of the remaining four), which the stability reranker relies on.
inline double median_abs(std::vector<double> values) {
  if (values.empty()) fail(errc::empty_input, "median_abs: empty input");
  for (auto& v : values) v = std::fabs(v);
  const std::size_t k = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k), values.end());
  return values[k];
}

}  // namespace camel
