#pragma once

#include <Eigen/Dense>

#include <functional>
#include <string>
#include <unordered_map>
#include <deque>
#include <vector>

namespace refer::nn {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A named trainable matrix with its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
  bool decay = true;    // subject to weight decay
  bool frozen = false;  // treated as a constant by tapes

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename T>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  const Matrix<T>& value() const { return tape_->value(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  T item() const { return value()(0, 0); }
  Tape<T>* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode autodiff over 2-D matrices. Ops append nodes; backward()
/// walks them in reverse and accumulates into parameter gradients.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<T> constant(Matrix<T> value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, int(nodes_.size()) - 1};
  }

  /// Leaf bound to a parameter; the same parameter maps to one node per tape.
  Var<T> param(Parameter<T>& p) {
    if (auto it = params_.find(&p); it != params_.end()) return {this, it->second};
    Node n;
    n.ref = &p.value;
    n.param = &p;
    n.requires_grad = grad_enabled_ && !p.frozen;
    nodes_.push_back(std::move(n));
    int id = int(nodes_.size()) - 1;
    params_.emplace(&p, id);
    return {this, id};
  }

  /// Used by ops: records a result and how to propagate its gradient.
  Var<T> push(Matrix<T> value, bool requires_grad, BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = grad_enabled_ && requires_grad;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, int(nodes_.size()) - 1};
  }

  const Matrix<T>& value(int id) const {
    const auto& n = nodes_[std::size_t(id)];
    return n.ref ? *n.ref : n.value;
  }
  bool requires_grad(int id) const { return nodes_[std::size_t(id)].requires_grad; }
  bool has_grad(int id) const { return nodes_[std::size_t(id)].grad.size() != 0; }
  const Matrix<T>& grad(int id) const { return nodes_[std::size_t(id)].grad; }

  /// Zero-initialised on first access.
  Matrix<T>& grad_ref(int id) {
    auto& n = nodes_[std::size_t(id)];
    if (n.grad.size() == 0) {
      const auto& v = value(id);
      n.grad.setZero(v.rows(), v.cols());
    }
    return n.grad;
  }

  /// Seeds d(root) = seed (root must be 1x1) and propagates. Parameter
  /// gradients are accumulated, not overwritten.
  void backward(Var<T> root, T seed = T(1)) {
    if (root.rows() != 1 || root.cols() != 1)
      throw std::logic_error("backward() needs a scalar root");
    if (!requires_grad(root.id())) return;
    grad_ref(root.id())(0, 0) += seed;
    for (int id = root.id(); id >= 0; --id) {
      auto& n = nodes_[std::size_t(id)];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, id);
      if (n.param) {
        if (n.param->grad.size() == 0) n.param->zero_grad();
        n.param->grad += n.grad;
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<T> value;
    const Matrix<T>* ref = nullptr;
    Matrix<T> grad;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
  };

  bool grad_enabled_;
  std::deque<Node> nodes_;  // stable references across push_back
  std::unordered_map<const Parameter<T>*, int> params_;
};

}  // namespace refer::nn
