#include "offrl/nn/tensor.hpp"

#include <sstream>

namespace offrl::nn {

std::string shape_string(const Matrix& m) {
  std::ostringstream os;
  os << "[" << m.rows() << "x" << m.cols() << "]";
  return os.str();
}

Parameter& ParamStore::add(const std::string& name, Matrix init, bool trainable) {
  if (params_.count(name) != 0) {
    throw std::invalid_argument("duplicate parameter name: " + name);
  }
  Parameter p;
  p.name = name;
  p.grad = Matrix::Zero(init.rows(), init.cols());
  p.value = std::move(init);
  p.trainable = trainable;
  return params_.emplace(name, std::move(p)).first->second;
}

Parameter& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

const Parameter& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& [name, p] : params_) {
    p.grad.setZero(p.value.rows(), p.value.cols());
    p.has_grad = false;
  }
}

void ParamStore::set_trainable_prefix(const std::string& prefix, bool trainable) {
  for (auto& [name, p] : params_) {
    if (name.rfind(prefix, 0) == 0) p.trainable = trainable;
  }
}

std::size_t ParamStore::num_values() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

const Matrix& Var::value() const { return tape_->value(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ShapeError("scalar(): expected 1x1, got " + shape_string(v));
  return v(0, 0);
}

bool Var::needs_grad() const { return tape_->needs_grad(id_); }

Var Tape::push(Matrix value, bool needs_grad, Backprop backprop) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = record_ && needs_grad;
  if (n.needs_grad) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Var Tape::param(Parameter& p) {
  Var v = push(Matrix(), p.trainable, nullptr);
  nodes_.back().ref = &p.value;
  nodes_.back().param = &p;
  return v;
}

Var Tape::param(const Parameter& p) {
  Var v = push(Matrix(), false, nullptr);
  nodes_.back().ref = &p.value;
  return v;
}

Matrix& Tape::grad_acc(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) {
    const Matrix& v = n.ref != nullptr ? *n.ref : n.value;
    n.grad = Matrix::Zero(v.rows(), v.cols());
  }
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw std::invalid_argument("backward(): loss belongs to another tape");
  if (done_) throw std::logic_error("backward() called twice on the same tape; build a new tape");
  if (!record_) throw std::logic_error("backward() on a non-recording tape");
  const Matrix& lv = value(loss.id());
  if (lv.size() != 1) throw ShapeError("backward(): loss must be scalar, got " + shape_string(lv));
  done_ = true;
  if (!needs_grad(loss.id())) return;

  grad_acc(loss.id()).setOnes();
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.backprop) n.backprop(*this, id);
    if (n.param != nullptr) {
      n.param->grad += n.grad;
      n.param->has_grad = true;
    }
  }
}

}  // namespace offrl::nn
