// Copyright 2026 The lmk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "lmk/matrix.hpp"

namespace lmk {

/// Singular values at or below this fraction of the largest one count as zero.
inline constexpr double kZeroSingularRel = 1e-12;

/// Thin SVD, x = u * diag(sigma) * v^T with q = min(rows, cols).
///
/// sigma is non-increasing. In every column of u the entry of largest
/// magnitude is positive (lowest index wins ties) and v is flipped to match,
/// so identical input bits always give identical factors.
struct SvdResult {
  Matrix u;                    // rows x q, orthonormal columns
  std::vector<double> sigma;   // q values, descending
  Matrix v;                    // cols x q, orthonormal columns

  std::size_t rank(double rel_tol = kZeroSingularRel) const;
  Matrix reconstruct() const;
};

/// One-sided Jacobi SVD run on the smaller dimension of x.
/// Throws std::invalid_argument when x holds non-finite entries.
SvdResult svd(const Matrix& x);

/// Singular values only (same algorithm, factors discarded).
std::vector<double> singular_values(const Matrix& x);

/// exp of the Shannon entropy of p_k = sigma_k^2 / sum sigma_j^2.
/// Entries at or below kZeroSingularRel * max(sigma) are ignored.
/// Throws std::domain_error("zero matrix has no effective rank") when no
/// entry is positive.
double effective_rank(std::span<const double> sigma);

/// Sum of elementwise products; throws std::invalid_argument on shape mismatch.
double frobenius_inner(const Matrix& a, const Matrix& b);

/// sigma_k^2 / sum_j sigma_j^2 (scree energy fractions). Zero spectrum gives zeros.
std::vector<double> energy_fractions(std::span<const double> sigma);

}  // namespace lmk
