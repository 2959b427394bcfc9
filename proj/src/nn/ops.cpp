#include "offrl/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace offrl::nn {

namespace {

Tape& tape_of(Var a) {
  if (a.tape() == nullptr) throw std::invalid_argument("operation on an empty Var");
  return *a.tape();
}

void same_tape(Var a, Var b, const char* op) {
  if (a.tape() != b.tape()) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
}

[[noreturn]] void shape_fail(const char* op, const Matrix& a, const Matrix& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " + shape_string(b));
}

void require_same_shape(const char* op, Var a, Var b) {
  same_tape(a, b, op);
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail(op, a.value(), b.value());
}

double weight_at(std::span<const double> w, Index i) {
  return w.empty() ? 1.0 : w[static_cast<std::size_t>(i)];
}

void check_weights(const char* op, std::span<const double> w, Index rows) {
  if (!w.empty() && static_cast<Index>(w.size()) != rows) {
    throw ShapeError(std::string(op) + ": " + std::to_string(w.size()) + " weights for " +
                     std::to_string(rows) + " rows");
  }
}

void check_ids(const char* op, std::span<const int> ids, Index rows, Index limit) {
  if (static_cast<Index>(ids.size()) != rows) {
    throw ShapeError(std::string(op) + ": " + std::to_string(ids.size()) + " indices for " +
                     std::to_string(rows) + " rows");
  }
  for (int id : ids) {
    if (id < 0 || id >= limit) {
      throw std::out_of_range(std::string(op) + ": index " + std::to_string(id) + " outside [0, " +
                              std::to_string(limit) + ")");
    }
  }
}

Eigen::VectorXd row_logsumexp(const Matrix& x) {
  Eigen::VectorXd out(x.rows());
  for (Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    out(i) = m + std::log((x.row(i).array() - m).exp().sum());
  }
  return out;
}

Matrix scalar_matrix(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return m;
}

// Unary elementwise op: value computed by `f`, local derivative by `df(x, y)`.
template <class F, class DF>
Var unary(Var a, F f, DF df) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  Matrix y = a.value().unaryExpr(f);
  return t.push(std::move(y), a.needs_grad(), [ia, df](Tape& t, int self) {
    const Matrix& x = t.value(ia);
    const Matrix& y = t.value(self);
    Matrix local(x.rows(), x.cols());
    for (Index k = 0; k < x.size(); ++k) local.data()[k] = df(x.data()[k], y.data()[k]);
    t.grad_acc(ia).array() += t.grad(self).array() * local.array();
  });
}

}  // namespace

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

Matrix log_softmax_rows(const Matrix& logits) {
  const Eigen::VectorXd lse = row_logsumexp(logits);
  Matrix out = logits;
  out.colwise() -= lse;
  return out;
}

Var matmul(Var a, Var b) {
  same_tape(a, b, "matmul");
  if (a.cols() != b.rows()) shape_fail("matmul", a.value(), b.value());
  Tape& t = tape_of(a);
  const int ia = a.id(), ib = b.id();
  return t.push(a.value() * b.value(), a.needs_grad() || b.needs_grad(), [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad_acc(ia).noalias() += g * t.value(ib).transpose();
    if (t.needs_grad(ib)) t.grad_acc(ib).noalias() += t.value(ia).transpose() * g;
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  return t.push(a.value().transpose(), a.needs_grad(),
                [ia](Tape& t, int self) { t.grad_acc(ia) += t.grad(self).transpose(); });
}

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  Tape& t = tape_of(a);
  const int ia = a.id(), ib = b.id();
  return t.push(a.value() + b.value(), a.needs_grad() || b.needs_grad(), [ia, ib](Tape& t, int self) {
    if (t.needs_grad(ia)) t.grad_acc(ia) += t.grad(self);
    if (t.needs_grad(ib)) t.grad_acc(ib) += t.grad(self);
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  Tape& t = tape_of(a);
  const int ia = a.id(), ib = b.id();
  return t.push(a.value() - b.value(), a.needs_grad() || b.needs_grad(), [ia, ib](Tape& t, int self) {
    if (t.needs_grad(ia)) t.grad_acc(ia) += t.grad(self);
    if (t.needs_grad(ib)) t.grad_acc(ib) -= t.grad(self);
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a, b);
  Tape& t = tape_of(a);
  const int ia = a.id(), ib = b.id();
  Matrix y = a.value().cwiseProduct(b.value());
  return t.push(std::move(y), a.needs_grad() || b.needs_grad(), [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad_acc(ia) += g.cwiseProduct(t.value(ib));
    if (t.needs_grad(ib)) t.grad_acc(ib) += g.cwiseProduct(t.value(ia));
  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  return t.push(a.value() * s, a.needs_grad(),
                [ia, s](Tape& t, int self) { t.grad_acc(ia) += t.grad(self) * s; });
}

Var add_scalar(Var a, double s) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  Matrix y = a.value().array() + s;
  return t.push(std::move(y), a.needs_grad(), [ia](Tape& t, int self) { t.grad_acc(ia) += t.grad(self); });
}

Var add_row(Var a, Var row) {
  same_tape(a, row, "add_row");
  if (row.rows() != 1 || row.cols() != a.cols()) shape_fail("add_row", a.value(), row.value());
  Tape& t = tape_of(a);
  const int ia = a.id(), ir = row.id();
  Matrix y = a.value();
  y.rowwise() += row.value().row(0);
  return t.push(std::move(y), a.needs_grad() || row.needs_grad(), [ia, ir](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad_acc(ia) += g;
    if (t.needs_grad(ir)) t.grad_acc(ir) += g.colwise().sum();
  });
}

Var mul_col(Var a, Var col) {
  same_tape(a, col, "mul_col");
  if (col.cols() != 1 || col.rows() != a.rows()) shape_fail("mul_col", a.value(), col.value());
  Tape& t = tape_of(a);
  const int ia = a.id(), ic = col.id();
  Matrix y = a.value();
  for (Index i = 0; i < y.rows(); ++i) y.row(i) *= col.value()(i, 0);
  return t.push(std::move(y), a.needs_grad() || col.needs_grad(), [ia, ic](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    const Matrix& av = t.value(ia);
    const Matrix& cv = t.value(ic);
    if (t.needs_grad(ia)) {
      Matrix& ga = t.grad_acc(ia);
      for (Index i = 0; i < g.rows(); ++i) ga.row(i) += g.row(i) * cv(i, 0);
    }
    if (t.needs_grad(ic)) {
      Matrix& gc = t.grad_acc(ic);
      for (Index i = 0; i < g.rows(); ++i) gc(i, 0) += g.row(i).dot(av.row(i));
    }
  });
}

Var detach(Var a) { return tape_of(a).constant(a.value()); }

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var gelu(Var a) {
  // tanh approximation
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return unary(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
      [](double x, double) {
        const double u = c * (x + k * x * x * x);
        const double th = std::tanh(u);
        const double du = c * (1.0 + 3.0 * k * x * x);
        return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
      });
}

Var tanh(Var a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](double, double y) { return y * (1.0 - y); });
}

Var exp(Var a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var embed(Var table, std::span<const int> ids) {
  Tape& t = tape_of(table);
  const Matrix& tv = table.value();
  for (int id : ids) {
    if (id < 0 || id >= tv.rows()) {
      throw std::out_of_range("embed: token id " + std::to_string(id) + " outside table " + shape_string(tv));
    }
  }
  Matrix y(static_cast<Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) y.row(static_cast<Index>(i)) = tv.row(ids[i]);
  const int it = table.id();
  std::vector<int> idv(ids.begin(), ids.end());
  return t.push(std::move(y), table.needs_grad(), [it, idv = std::move(idv)](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    Matrix& gt = t.grad_acc(it);
    for (std::size_t i = 0; i < idv.size(); ++i) gt.row(idv[i]) += g.row(static_cast<Index>(i));
  });
}

Var gather(Var a, std::span<const int> ids) {
  Tape& t = tape_of(a);
  check_ids("gather", ids, a.rows(), a.cols());
  Matrix y(a.rows(), 1);
  for (Index i = 0; i < a.rows(); ++i) y(i, 0) = a.value()(i, ids[static_cast<std::size_t>(i)]);
  const int ia = a.id();
  std::vector<int> idv(ids.begin(), ids.end());
  return t.push(std::move(y), a.needs_grad(), [ia, idv = std::move(idv)](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad_acc(ia);
    for (std::size_t i = 0; i < idv.size(); ++i) ga(static_cast<Index>(i), idv[i]) += g(static_cast<Index>(i), 0);
  });
}

Var slice_rows(Var a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw ShapeError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(count) + ") out of " +
                     shape_string(a.value()));
  }
  Tape& t = tape_of(a);
  const int ia = a.id();
  return t.push(a.value().middleRows(start, count), a.needs_grad(), [ia, start, count](Tape& t, int self) {
    t.grad_acc(ia).middleRows(start, count) += t.grad(self);
  });
}

Var slice_cols(Var a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw ShapeError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) + ") out of " +
                     shape_string(a.value()));
  }
  Tape& t = tape_of(a);
  const int ia = a.id();
  return t.push(a.value().middleCols(start, count), a.needs_grad(), [ia, start, count](Tape& t, int self) {
    t.grad_acc(ia).middleCols(start, count) += t.grad(self);
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  Tape& t = tape_of(parts.front());
  Index rows = 0;
  bool needs = false;
  for (const Var& p : parts) {
    same_tape(parts.front(), p, "concat_rows");
    if (p.cols() != parts.front().cols()) shape_fail("concat_rows", parts.front().value(), p.value());
    rows += p.rows();
    needs = needs || p.needs_grad();
  }
  Matrix y(rows, parts.front().cols());
  std::vector<int> ids;
  Index r = 0;
  for (const Var& p : parts) {
    y.middleRows(r, p.rows()) = p.value();
    r += p.rows();
    ids.push_back(p.id());
  }
  return t.push(std::move(y), needs, [ids = std::move(ids)](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    Index r = 0;
    for (int id : ids) {
      const Index n = t.value(id).rows();
      if (t.needs_grad(id)) t.grad_acc(id) += g.middleRows(r, n);
      r += n;
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  Tape& t = tape_of(parts.front());
  Index cols = 0;
  bool needs = false;
  for (const Var& p : parts) {
    same_tape(parts.front(), p, "concat_cols");
    if (p.rows() != parts.front().rows()) shape_fail("concat_cols", parts.front().value(), p.value());
    cols += p.cols();
    needs = needs || p.needs_grad();
  }
  Matrix y(parts.front().rows(), cols);
  std::vector<int> ids;
  Index c = 0;
  for (const Var& p : parts) {
    y.middleCols(c, p.cols()) = p.value();
    c += p.cols();
    ids.push_back(p.id());
  }
  return t.push(std::move(y), needs, [ids = std::move(ids)](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    Index c = 0;
    for (int id : ids) {
      const Index n = t.value(id).cols();
      if (t.needs_grad(id)) t.grad_acc(id) += g.middleCols(c, n);
      c += n;
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  same_tape(x, gain, "layer_norm");
  same_tape(x, bias, "layer_norm");
  if (gain.rows() != 1 || gain.cols() != x.cols()) shape_fail("layer_norm", x.value(), gain.value());
  if (bias.rows() != 1 || bias.cols() != x.cols()) shape_fail("layer_norm", x.value(), bias.value());
  Tape& t = tape_of(x);
  const Matrix& xv = x.value();
  const Index n = xv.rows(), d = xv.cols();
  Matrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Index i = 0; i < n; ++i) {
    const double mu = xv.row(i).mean();
    const double var = (xv.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (xv.row(i).array() - mu) * inv_std(i);
  }
  Matrix y = xhat;
  for (Index i = 0; i < n; ++i) {
    y.row(i) = xhat.row(i).cwiseProduct(gain.value().row(0)) + bias.value().row(0);
  }
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  const bool needs = x.needs_grad() || gain.needs_grad() || bias.needs_grad();
  return t.push(std::move(y), needs,
                [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, int self) {
                  const Matrix& g = t.grad(self);
                  if (t.needs_grad(ig)) t.grad_acc(ig) += g.cwiseProduct(xhat).colwise().sum();
                  if (t.needs_grad(ib)) t.grad_acc(ib) += g.colwise().sum();
                  if (t.needs_grad(ix)) {
                    const Matrix& gain_v = t.value(ig);
                    Matrix& gx = t.grad_acc(ix);
                    for (Index i = 0; i < g.rows(); ++i) {
                      Eigen::RowVectorXd dxhat = g.row(i).cwiseProduct(gain_v.row(0));
                      const double m1 = dxhat.mean();
                      const double m2 = dxhat.cwiseProduct(xhat.row(i)).mean();
                      gx.row(i) += inv_std(i) * (dxhat.array() - m1 - xhat.row(i).array() * m2).matrix();
                    }
                  }
                });
}

Var softmax(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  return t.push(softmax_rows(a.value()), a.needs_grad(), [ia](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    const Matrix& y = t.value(self);
    Matrix& ga = t.grad_acc(ia);
    for (Index i = 0; i < y.rows(); ++i) {
      const double dot = g.row(i).dot(y.row(i));
      ga.row(i).array() += y.row(i).array() * (g.row(i).array() - dot);
    }
  });
}

Var log_softmax(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  return t.push(log_softmax_rows(a.value()), a.needs_grad(), [ia](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    const Matrix& y = t.value(self);
    Matrix& ga = t.grad_acc(ia);
    for (Index i = 0; i < y.rows(); ++i) {
      const double gs = g.row(i).sum();
      ga.row(i).array() += g.row(i).array() - y.row(i).array().exp() * gs;
    }
  });
}

Var causal_softmax(Var scores) {
  if (scores.rows() != scores.cols()) {
    throw ShapeError("causal_softmax: expected square scores, got " + shape_string(scores.value()));
  }
  Tape& t = tape_of(scores);
  const Matrix& s = scores.value();
  const Index n = s.rows();
  Matrix y = Matrix::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    auto head = s.row(i).head(i + 1);
    const double m = head.maxCoeff();
    y.row(i).head(i + 1) = (head.array() - m).exp();
    y.row(i).head(i + 1) /= y.row(i).head(i + 1).sum();
  }
  const int is = scores.id();
  return t.push(std::move(y), scores.needs_grad(), [is](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    const Matrix& y = t.value(self);
    Matrix& gs = t.grad_acc(is);
    for (Index i = 0; i < y.rows(); ++i) {
      const Index k = i + 1;
      const double dot = g.row(i).head(k).dot(y.row(i).head(k));
      gs.row(i).head(k).array() += y.row(i).head(k).array() * (g.row(i).head(k).array() - dot);
    }
  });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  return t.push(scalar_matrix(a.value().sum()), a.needs_grad(),
                [ia](Tape& t, int self) { t.grad_acc(ia).array() += t.grad(self)(0, 0); });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean: empty operand");
  return scale(sum(a), 1.0 / n);
}

Var cross_entropy(Var logits, std::span<const int> targets, std::span<const double> weights) {
  check_ids("cross_entropy", targets, logits.rows(), logits.cols());
  check_weights("cross_entropy", weights, logits.rows());
  Tape& t = tape_of(logits);
  const Matrix& z = logits.value();
  const Eigen::VectorXd lse = row_logsumexp(z);
  double loss = 0.0;
  for (Index i = 0; i < z.rows(); ++i) {
    const double w = weight_at(weights, i);
    if (w == 0.0) continue;
    loss += w * (lse(i) - z(i, targets[static_cast<std::size_t>(i)]));
  }
  const int il = logits.id();
  std::vector<int> tv(targets.begin(), targets.end());
  std::vector<double> wv(weights.begin(), weights.end());
  return t.push(scalar_matrix(loss), logits.needs_grad(),
                [il, tv = std::move(tv), wv = std::move(wv)](Tape& t, int self) {
                  const double g = t.grad(self)(0, 0);
                  const Matrix& z = t.value(il);
                  Matrix& gz = t.grad_acc(il);
                  for (Index i = 0; i < z.rows(); ++i) {
                    const double w = weight_at(wv, i);
                    if (w == 0.0) continue;
                    const double m = z.row(i).maxCoeff();
                    Eigen::RowVectorXd p = (z.row(i).array() - m).exp();
                    p /= p.sum();
                    p(tv[static_cast<std::size_t>(i)]) -= 1.0;
                    gz.row(i) += (g * w) * p;
                  }
                });
}

Var kl_divergence(Var p_logits, Var q_logits, std::span<const double> weights) {
  require_same_shape("kl_divergence", p_logits, q_logits);
  check_weights("kl_divergence", weights, p_logits.rows());
  Tape& t = tape_of(p_logits);
  const Matrix lp = log_softmax_rows(p_logits.value());
  const Matrix lq = log_softmax_rows(q_logits.value());
  const Matrix p = lp.array().exp();
  double loss = 0.0;
  for (Index i = 0; i < lp.rows(); ++i) {
    loss += weight_at(weights, i) * p.row(i).dot(lp.row(i) - lq.row(i));
  }
  const int ip = p_logits.id(), iq = q_logits.id();
  std::vector<double> wv(weights.begin(), weights.end());
  const bool needs = p_logits.needs_grad() || q_logits.needs_grad();
  return t.push(scalar_matrix(loss), needs, [ip, iq, lp, lq, p, wv = std::move(wv)](Tape& t, int self) {
    const double g = t.grad(self)(0, 0);
    for (Index i = 0; i < lp.rows(); ++i) {
      const double w = g * weight_at(wv, i);
      if (w == 0.0) continue;
      if (t.needs_grad(iq)) {
        t.grad_acc(iq).row(i) += w * (lq.row(i).array().exp() - p.row(i).array()).matrix();
      }
      if (t.needs_grad(ip)) {
        Eigen::RowVectorXd d = lp.row(i) - lq.row(i);
        const double avg = p.row(i).dot(d);
        t.grad_acc(ip).row(i) += w * (p.row(i).array() * (d.array() - avg)).matrix();
      }
    }
  });
}

Var squared_error(Var pred, Var target, std::span<const double> weights) {
  require_same_shape("squared_error", pred, target);
  check_weights("squared_error", weights, pred.rows());
  Tape& t = tape_of(pred);
  const Matrix diff = pred.value() - target.value();
  double loss = 0.0;
  for (Index i = 0; i < diff.rows(); ++i) loss += weight_at(weights, i) * diff.row(i).squaredNorm();
  const int ip = pred.id(), it = target.id();
  std::vector<double> wv(weights.begin(), weights.end());
  const bool needs = pred.needs_grad() || target.needs_grad();
  return t.push(scalar_matrix(loss), needs, [ip, it, diff, wv = std::move(wv)](Tape& t, int self) {
    const double g = t.grad(self)(0, 0);
    Matrix local = diff * (2.0 * g);
    for (Index i = 0; i < local.rows(); ++i) local.row(i) *= weight_at(wv, i);
    if (t.needs_grad(ip)) t.grad_acc(ip) += local;
    if (t.needs_grad(it)) t.grad_acc(it) -= local;
  });
}

Var expectile_loss(Var u, double tau, std::span<const double> weights) {
  if (u.cols() != 1) throw ShapeError("expectile_loss: expected a column, got " + shape_string(u.value()));
  if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("expectile_loss: tau must lie in (0, 1)");
  check_weights("expectile_loss", weights, u.rows());
  Tape& t = tape_of(u);
  const Matrix& uv = u.value();
  Eigen::VectorXd coef(uv.rows());
  double loss = 0.0;
  for (Index i = 0; i < uv.rows(); ++i) {
    const double x = uv(i, 0);
    coef(i) = weight_at(weights, i) * std::abs(tau - (x < 0.0 ? 1.0 : 0.0));
    loss += coef(i) * x * x;
  }
  const int iu = u.id();
  return t.push(scalar_matrix(loss), u.needs_grad(), [iu, coef = std::move(coef)](Tape& t, int self) {
    const double g = t.grad(self)(0, 0);
    const Matrix& uv = t.value(iu);
    Matrix& gu = t.grad_acc(iu);
    for (Index i = 0; i < uv.rows(); ++i) gu(i, 0) += 2.0 * g * coef(i) * uv(i, 0);
  });
}

Var clipped_surrogate(Var ratio, std::span<const double> advantage, double clip_eps,
                      std::span<const double> weights) {
  if (ratio.cols() != 1) throw ShapeError("clipped_surrogate: expected a column, got " + shape_string(ratio.value()));
  check_weights("clipped_surrogate", advantage, ratio.rows());
  check_weights("clipped_surrogate", weights, ratio.rows());
  if (advantage.empty() && ratio.rows() != 0) throw ShapeError("clipped_surrogate: missing advantages");
  Tape& t = tape_of(ratio);
  const Matrix& r = ratio.value();
  Eigen::VectorXd slope(r.rows());
  double obj = 0.0;
  for (Index i = 0; i < r.rows(); ++i) {
    const double a = advantage[static_cast<std::size_t>(i)];
    const double w = weight_at(weights, i);
    const double ri = r(i, 0);
    const double clipped = std::clamp(ri, 1.0 - clip_eps, 1.0 + clip_eps);
    const double unclipped_term = ri * a;
    const double clipped_term = clipped * a;
    if (unclipped_term <= clipped_term) {
      obj += w * unclipped_term;
      slope(i) = w * a;
    } else {
      obj += w * clipped_term;
      // The clipped branch is flat in r unless r lies inside the interval.
      slope(i) = (ri == clipped) ? w * a : 0.0;
    }
  }
  const int ir = ratio.id();
  return t.push(scalar_matrix(obj), ratio.needs_grad(), [ir, slope = std::move(slope)](Tape& t, int self) {
    const double g = t.grad(self)(0, 0);
    Matrix& gr = t.grad_acc(ir);
    for (Index i = 0; i < slope.size(); ++i) gr(i, 0) += g * slope(i);
  });
}

}  // namespace offrl::nn
