// Copyright 2026 The lmk Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmk/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace lmk {
namespace {

constexpr int kMaxSweeps = 60;

// Columns stored contiguously: column j occupies [j*len, (j+1)*len).
struct JacobiWork {
  std::size_t len = 0;
  std::size_t n = 0;
  std::vector<double> a;  // n columns of length len
  std::vector<double> v;  // n columns of length n
  bool transposed = false;

  std::span<double> acol(std::size_t j) { return {a.data() + j * len, len}; }
  std::span<double> vcol(std::size_t j) { return {v.data() + j * n, n}; }
};

JacobiWork jacobi(const Matrix& x, bool want_v) {
  if (x.rows() == 0 || x.cols() == 0) throw std::invalid_argument("svd: empty matrix");
  if (!x.all_finite()) throw std::invalid_argument("svd: input contains non-finite entries");

  JacobiWork w;
  w.transposed = x.rows() < x.cols();
  w.len = w.transposed ? x.cols() : x.rows();
  w.n = w.transposed ? x.rows() : x.cols();
  w.a.resize(w.len * w.n);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) {
      if (w.transposed)
        w.a[r * w.len + c] = x(r, c);
      else
        w.a[c * w.len + r] = x(r, c);
    }
  if (want_v) {
    w.v.assign(w.n * w.n, 0.0);
    for (std::size_t j = 0; j < w.n; ++j) w.v[j * w.n + j] = 1.0;
  }

  // Pairs count as orthogonal once |a_p . a_q| <= tol * |a_p| |a_q|.
  const double tol =
      std::max(1e-15, std::sqrt(static_cast<double>(w.len)) * std::numeric_limits<double>::epsilon());

  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < w.n; ++p) {
      for (std::size_t q = p + 1; q < w.n; ++q) {
        auto ap = w.acol(p);
        auto aq = w.acol(q);
        const double alpha = dot(ap, ap);
        const double beta = dot(aq, aq);
        const double gamma = dot(ap, aq);
        if (gamma == 0.0 || alpha == 0.0 || beta == 0.0) continue;
        if (std::abs(gamma) <= tol * std::sqrt(alpha) * std::sqrt(beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::hypot(1.0, zeta));
        const double c = 1.0 / std::hypot(1.0, t);
        const double s = c * t;
        for (std::size_t i = 0; i < w.len; ++i) {
          const double xp = ap[i];
          const double xq = aq[i];
          ap[i] = c * xp - s * xq;
          aq[i] = s * xp + c * xq;
        }
        if (want_v) {
          auto vp = w.vcol(p);
          auto vq = w.vcol(q);
          for (std::size_t i = 0; i < w.n; ++i) {
            const double xp = vp[i];
            const double xq = vq[i];
            vp[i] = c * xp - s * xq;
            vq[i] = s * xp + c * xq;
          }
        }
      }
    }
    if (!rotated) break;
  }
  return w;
}

std::vector<std::size_t> descending_order(const std::vector<double>& s) {
  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return s[i] > s[j]; });
  return order;
}

// Fills columns flagged in `missing` so that all columns are orthonormal.
void complete_orthonormal(std::vector<std::vector<double>>& cols, const std::vector<bool>& missing) {
  const std::size_t len = cols.empty() ? 0 : cols.front().size();
  std::vector<std::size_t> done;
  for (std::size_t k = 0; k < cols.size(); ++k)
    if (!missing[k]) done.push_back(k);
  for (std::size_t k = 0; k < cols.size(); ++k) {
    if (!missing[k]) continue;
    std::vector<double> best;
    double best_norm = -1.0;
    for (std::size_t e = 0; e < len; ++e) {
      std::vector<double> cand(len, 0.0);
      cand[e] = 1.0;
      for (int pass = 0; pass < 2; ++pass)
        for (std::size_t j : done) {
          const double proj = dot(cols[j], cand);
          for (std::size_t i = 0; i < len; ++i) cand[i] -= proj * cols[j][i];
        }
      const double nrm = norm2(cand);
      if (nrm > best_norm) {
        best_norm = nrm;
        best = std::move(cand);
      }
    }
    for (double& x : best) x /= best_norm;
    cols[k] = std::move(best);
    done.push_back(k);
  }
}

}  // namespace

std::size_t SvdResult::rank(double rel_tol) const {
  if (sigma.empty() || sigma.front() <= 0.0) return 0;
  const double cut = rel_tol * sigma.front();
  return static_cast<std::size_t>(
      std::count_if(sigma.begin(), sigma.end(), [&](double s) { return s > cut; }));
}

Matrix SvdResult::reconstruct() const {
  Matrix out(u.rows(), v.rows());
  for (std::size_t k = 0; k < sigma.size(); ++k) add_outer(out, sigma[k], u.col(k), v.col(k));
  return out;
}

SvdResult svd(const Matrix& x) {
  JacobiWork w = jacobi(x, true);
  const std::size_t n = w.n;

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) norms[j] = norm2(w.acol(j));
  const auto order = descending_order(norms);
  const double smax = norms.empty() ? 0.0 : norms[order.front()];

  std::vector<std::vector<double>> left(n);   // length len
  std::vector<std::vector<double>> right(n);  // length n
  std::vector<bool> missing(n, false);
  std::vector<double> sigma(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    sigma[k] = norms[j];
    auto col = w.acol(j);
    auto vc = w.vcol(j);
    right[k].assign(vc.begin(), vc.end());
    if (smax == 0.0 || norms[j] <= 1e-14 * smax) {
      missing[k] = true;
      left[k].assign(w.len, 0.0);
    } else {
      left[k].resize(w.len);
      for (std::size_t i = 0; i < w.len; ++i) left[k][i] = col[i] / norms[j];
    }
  }
  complete_orthonormal(left, missing);

  // Orient: u spans the row space of x.
  const auto& ucols = w.transposed ? right : left;
  const auto& vcols = w.transposed ? left : right;
  SvdResult res;
  res.sigma = std::move(sigma);
  res.u = Matrix(x.rows(), n);
  res.v = Matrix(x.cols(), n);
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t imax = 0;
    for (std::size_t i = 1; i < ucols[k].size(); ++i)
      if (std::abs(ucols[k][i]) > std::abs(ucols[k][imax])) imax = i;
    const double sgn = ucols[k][imax] < 0.0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < x.rows(); ++i) res.u(i, k) = sgn * ucols[k][i];
    for (std::size_t i = 0; i < x.cols(); ++i) res.v(i, k) = sgn * vcols[k][i];
  }
  return res;
}

std::vector<double> singular_values(const Matrix& x) {
  JacobiWork w = jacobi(x, false);
  std::vector<double> s(w.n);
  for (std::size_t j = 0; j < w.n; ++j) s[j] = norm2(w.acol(j));
  std::stable_sort(s.begin(), s.end(), std::greater<>());
  return s;
}

double effective_rank(std::span<const double> sigma) {
  double smax = 0.0;
  for (double s : sigma) {
    if (!std::isfinite(s) || s < 0.0)
      throw std::invalid_argument("effective_rank: singular values must be finite and nonnegative");
    smax = std::max(smax, s);
  }
  if (smax <= 0.0) throw std::domain_error("zero matrix has no effective rank");
  const double cut = kZeroSingularRel * smax;
  double total = 0.0;
  std::size_t count = 0;
  for (double s : sigma)
    if (s > cut) {
      total += s * s;
      ++count;
    }
  double entropy = 0.0;
  for (double s : sigma) {
    if (s <= cut) continue;
    const double p = s * s / total;
    if (p > 0.0) entropy -= p * std::log(p);
  }
  return std::clamp(std::exp(entropy), 1.0, static_cast<double>(count));
}

double frobenius_inner(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw_shape_mismatch("frobenius_inner", a, b);
  return dot(a.data(), b.data());
}

std::vector<double> energy_fractions(std::span<const double> sigma) {
  double total = 0.0;
  for (double s : sigma) total += s * s;
  std::vector<double> out(sigma.size(), 0.0);
  if (total <= 0.0) return out;
  for (std::size_t k = 0; k < sigma.size(); ++k) out[k] = sigma[k] * sigma[k] / total;
  return out;
}

}  // namespace lmk
