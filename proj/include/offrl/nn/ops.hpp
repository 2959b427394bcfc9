#pragma once

// Differentiable operations on Var. Shape mismatches throw ShapeError naming
// the op and the offending shapes.

#include "offrl/nn/tensor.hpp"

#include <span>
#include <vector>

namespace offrl::nn {

// Linear algebra and elementwise arithmetic.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// a[n x m] + row[1 x m] broadcast over rows.
Var add_row(Var a, Var row);
/// a[n x m] * col[n x 1] broadcast over columns.
Var mul_col(Var a, Var col);
Var detach(Var a);

// Pointwise nonlinearities.
Var relu(Var a);
Var gelu(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var exp(Var a);

// Indexing and layout.
Var embed(Var table, std::span<const int> ids);
/// out[i] = a(i, ids[i]) as an n x 1 column.
Var gather(Var a, std::span<const int> ids);
Var slice_rows(Var a, Index start, Index count);
Var slice_cols(Var a, Index start, Index count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);

// Normalization and distributions (row-wise).
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var softmax(Var a);
Var log_softmax(Var a);
/// Softmax over j <= i for every row i of a square score matrix; entries
/// above the diagonal are exactly zero.
Var causal_softmax(Var scores);

// Reductions and losses. Per-row `weights` may be empty (all ones).
Var sum(Var a);
Var mean(Var a);
/// sum_i w_i * (-log softmax(logits_i)[targets_i]); rows with w_i == 0 are skipped.
Var cross_entropy(Var logits, std::span<const int> targets, std::span<const double> weights = {});
/// sum_i w_i * KL(softmax(p_i) || softmax(q_i)).
Var kl_divergence(Var p_logits, Var q_logits, std::span<const double> weights = {});
/// sum_i w_i * (pred_i - target_i)^2 over every element.
Var squared_error(Var pred, Var target, std::span<const double> weights = {});
/// sum_i w_i * |tau - 1(u_i < 0)| * u_i^2 for a column u.
Var expectile_loss(Var u, double tau, std::span<const double> weights = {});
/// sum_i w_i * min(r_i * A_i, clip(r_i, 1 - eps, 1 + eps) * A_i) for columns r, A.
Var clipped_surrogate(Var ratio, std::span<const double> advantage, double clip_eps,
                      std::span<const double> weights = {});

// Value-only helpers shared by inference paths.
Matrix softmax_rows(const Matrix& logits);
Matrix log_softmax_rows(const Matrix& logits);

}  // namespace offrl::nn
