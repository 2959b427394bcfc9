#pragma once

// Dense 2-D values, named parameters and a reverse-mode tape.
//
// Every value on the tape is a row-major matrix. Vectors are 1xN or Nx1,
// scalars are 1x1. Nodes are appended in creation order, so that order is
// already topological and backward() walks it in reverse.

#include <Eigen/Dense>

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace offrl::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_string(const Matrix& m);

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;
  bool has_grad = false;
  // Adam moments, same shape as value once the optimizer has touched them.
  Matrix adam_m;
  Matrix adam_v;
};

/// Named parameters plus the optimizer step counter.
///
/// Parameters are stored in a std::map so iteration order is by name and
/// stable across runs; references stay valid while the store lives.
class ParamStore {
 public:
  Parameter& add(const std::string& name, Matrix init, bool trainable = true);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  void zero_grad();
  void set_trainable_prefix(const std::string& prefix, bool trainable);

  std::size_t size() const { return params_.size(); }
  std::size_t num_values() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  long long step = 0;

 private:
  std::map<std::string, Parameter> params_;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const;
  bool needs_grad() const;

  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  /// With record == false no backward closures are kept (inference mode).
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Trainable parameters receive gradients; the node aliases p.value, so
  /// the parameter must outlive the tape and stay unmodified while it lives.
  Var param(Parameter& p);
  /// Read-only use of a parameter (no gradient).
  Var param(const Parameter& p);

  /// Propagates d(loss)/d(node) to every node and accumulates into the
  /// gradients of the parameters that appear on this tape.
  void backward(Var loss);

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  // Used by op implementations.
  using Backprop = std::function<void(Tape&, int self)>;
  Var push(Matrix value, bool needs_grad, Backprop backprop);
  const Matrix& value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.ref != nullptr ? *n.ref : n.value;
  }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  const Matrix& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  /// Gradient accumulator for node `id`, zero-initialized on first use.
  Matrix& grad_acc(int id);

 private:
  struct Node {
    Matrix value;
    const Matrix* ref = nullptr;
    Matrix grad;
    bool needs_grad = false;
    Backprop backprop;
    Parameter* param = nullptr;
  };

  std::deque<Node> nodes_;
  bool record_ = true;
  bool done_ = false;
};

}  // namespace offrl::nn
