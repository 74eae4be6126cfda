#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace fabme {

using Index = Eigen::Index;
using Buffer = Eigen::ArrayXd;
using Rng = std::mt19937_64;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixXd = RowMatrix<double>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN or infinity reached a place that requires finite values.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// NCHW extent. Channel vectors are carried as (n, c, 1, 1).
struct Shape {
  Index n = 1;
  Index c = 1;
  Index h = 1;
  Index w = 1;

  Index numel() const { return n * c * h * w; }
  Index plane() const { return h * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

namespace detail {

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Buffer& grad_buffer() {
    if (grad.size() != value.size()) grad = Buffer::Zero(value.size());
    return grad;
  }
  bool is_leaf() const { return parents.empty(); }
};

}  // namespace detail

/// Dense f64 NCHW tensor with an optional gradient slot.
///
/// Tensors are cheap handles onto a shared node. Values produced by an op are
/// never modified afterwards; only leaves (inputs, parameters, buffers) expose
/// mutable storage. Ops whose inputs require gradients record a backward
/// closure, and `backward()` replays them in reverse topological order.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, Buffer values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::initializer_list<double> values, bool requires_grad = false);
  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false);
  static Tensor normal(Shape shape, double mean, double stddev, Rng& rng, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  Index numel() const { return shape().numel(); }
  const Buffer& values() const;
  /// Leaf-only write access (optimizer updates, running statistics, tests).
  Buffer& mutable_values();
  double at(Index n, Index c, Index h, Index w) const;
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  const Buffer& grad() const;
  void zero_grad();

  /// Name of the op that produced this tensor ("leaf" for inputs).
  const std::string& op() const;

  /// Reverse-mode sweep seeded with ones (the gradient of sum(*this)).
  void backward() const;
  void backward(const Buffer& seed) const;

  /// Same values, no history.
  Tensor detach() const;
  Tensor clone() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

inline Index offset(const Shape& s, Index n, Index c, Index h, Index w) {
  return ((n * s.c + c) * s.h + h) * s.w + w;
}

/// Builds an op result. History is kept only if some parent requires a gradient.
Tensor make_result(Shape shape, Buffer values, std::string op, std::vector<Tensor> parents,
                   std::function<void(detail::Node&)> backward);

/// Nodes reachable from `root`, parents before children.
std::vector<detail::Node*> topological_order(const Tensor& root);

}  // namespace fabme
