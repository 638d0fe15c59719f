// Copyright 2026 The lmk Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmk/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace lmk {
namespace {

// log-softmax of one row into out.
void log_softmax(std::span<const double> o, std::span<double> out) {
  const double mx = *std::max_element(o.begin(), o.end());
  double s = 0.0;
  for (double v : o) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  for (std::size_t j = 0; j < o.size(); ++j) out[j] = o[j] - lse;
}

}  // namespace

ForwardCache forward(std::span<const Matrix> weights, const Matrix& head, const Matrix& x) {
  if (weights.empty()) throw std::invalid_argument("forward: no layers");
  ForwardCache c;
  c.inputs.reserve(weights.size());
  c.pre.reserve(weights.size());
  Matrix h = x;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (h.cols() != weights[l].cols())
      throw std::invalid_argument("forward: layer " + std::to_string(l) + " expects " +
                                  std::to_string(weights[l].cols()) + " inputs, got " +
                                  std::to_string(h.cols()));
    Matrix z = matmul_nt(h, weights[l]);
    c.inputs.push_back(std::move(h));
    if (l + 1 < weights.size()) {
      h = z;
      for (double& v : h.data()) v = std::tanh(v);
    } else {
      h = z;
    }
    c.pre.push_back(std::move(z));
  }
  c.logits = matmul_nt(h, head);
  c.features = std::move(h);
  return c;
}

Matrix predict_logits(std::span<const Matrix> weights, const Matrix& head, const Matrix& x) {
  return forward(weights, head, x).logits;
}

BackwardResult backward(const ForwardCache& cache, std::span<const Matrix> weights, const Matrix& head,
                        const Matrix& dlogits, bool want_head_grad) {
  BackwardResult r;
  if (want_head_grad) r.head_grad = matmul_tn(dlogits, cache.features);
  r.weight_grads.resize(weights.size());
  Matrix dz = matmul(dlogits, head);
  for (std::size_t l = weights.size(); l-- > 0;) {
    r.weight_grads[l] = matmul_tn(dz, cache.inputs[l]);
    if (l == 0) break;
    Matrix dh = matmul(dz, weights[l]);
    const Matrix& zprev = cache.pre[l - 1];
    for (std::size_t i = 0; i < dh.size(); ++i) {
      const double t = std::tanh(zprev.data()[i]);
      dh.data()[i] *= 1.0 - t * t;
    }
    dz = std::move(dh);
  }
  return r;
}

LossGrad entropy_loss_grad(const Matrix& logits) {
  const std::size_t n = logits.rows();
  const std::size_t c = logits.cols();
  if (n == 0) throw std::invalid_argument("entropy_loss_grad: empty batch");
  LossGrad out{0.0, Matrix(n, c)};
  std::vector<double> lp(c);
  for (std::size_t i = 0; i < n; ++i) {
    log_softmax(logits.row(i), lp);
    double h = 0.0;
    for (std::size_t j = 0; j < c; ++j) h -= std::exp(lp[j]) * lp[j];
    out.loss += h;
    auto g = out.dlogits.row(i);
    for (std::size_t j = 0; j < c; ++j) g[j] = -std::exp(lp[j]) * (lp[j] + h) / static_cast<double>(n);
  }
  out.loss /= static_cast<double>(n);
  return out;
}

LossGrad cross_entropy_loss_grad(const Matrix& logits, std::span<const int> labels) {
  const std::size_t n = logits.rows();
  const std::size_t c = logits.cols();
  if (n == 0 || labels.size() != n) throw std::invalid_argument("cross_entropy_loss_grad: bad batch");
  LossGrad out{0.0, Matrix(n, c)};
  std::vector<double> lp(c);
  for (std::size_t i = 0; i < n; ++i) {
    log_softmax(logits.row(i), lp);
    const auto y = static_cast<std::size_t>(labels[i]);
    out.loss -= lp[y];
    auto g = out.dlogits.row(i);
    for (std::size_t j = 0; j < c; ++j)
      g[j] = (std::exp(lp[j]) - (j == y ? 1.0 : 0.0)) / static_cast<double>(n);
  }
  out.loss /= static_cast<double>(n);
  return out;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    log_softmax(logits.row(i), p.row(i));
    for (double& v : p.row(i)) v = std::exp(v);
  }
  return p;
}

std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

double accuracy(const Matrix& logits, std::span<const int> labels) {
  if (labels.size() != logits.rows()) throw std::invalid_argument("accuracy: label count mismatch");
  if (labels.empty()) return 0.0;
  const auto pred = argmax_rows(logits);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

}  // namespace lmk
