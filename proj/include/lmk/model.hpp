// Copyright 2026 The lmk Authors
// SPDX-License-Identifier: Apache-2.0

// Toy network used by the synthetic harness:
//
//   h_0 = x
//   z_l = W_l h_{l-1}
//   h_l = tanh(z_l) for every layer but the last, h_{L-1} = z_{L-1}
//   logits = H h_{L-1}
//
// Batches are row-major: one sample per row.

#pragma once

#include <span>
#include <vector>

#include "lmk/matrix.hpp"

namespace lmk {

struct ForwardCache {
  std::vector<Matrix> inputs;  // h_{l-1}, n x in_l
  std::vector<Matrix> pre;     // z_l, n x d_l
  Matrix features;             // h_{L-1}
  Matrix logits;               // n x C
};

ForwardCache forward(std::span<const Matrix> weights, const Matrix& head, const Matrix& x);
Matrix predict_logits(std::span<const Matrix> weights, const Matrix& head, const Matrix& x);

struct BackwardResult {
  std::vector<Matrix> weight_grads;  // same shapes as the layer weights
  Matrix head_grad;                  // empty unless requested
};

/// Back-propagates dLoss/dlogits through the cached forward pass.
BackwardResult backward(const ForwardCache& cache, std::span<const Matrix> weights, const Matrix& head,
                        const Matrix& dlogits, bool want_head_grad);

struct LossGrad {
  double loss = 0.0;
  Matrix dlogits;
};

/// Mean Shannon entropy (natural log) of softmax(logits) over rows, with its gradient.
LossGrad entropy_loss_grad(const Matrix& logits);
/// Mean cross-entropy against integer class labels, with its gradient.
LossGrad cross_entropy_loss_grad(const Matrix& logits, std::span<const int> labels);

Matrix softmax_rows(const Matrix& logits);

/// Index of the largest entry per row; lowest index wins ties.
std::vector<int> argmax_rows(const Matrix& m);

double accuracy(const Matrix& logits, std::span<const int> labels);

}  // namespace lmk
