#include "fabme/tensor.hpp"

#include <sstream>
#include <unordered_set>

namespace fabme {

std::string Shape::str() const {
  std::ostringstream os;
  os << n << "x" << c << "x" << h << "x" << w;
  return os.str();
}

Tensor::Tensor(Shape shape, Buffer values, bool requires_grad) {
  if (shape.n < 1 || shape.c < 1 || shape.h < 1 || shape.w < 1) {
    throw Error("tensor: non-positive extent in shape " + shape.str());
  }
  if (values.size() != shape.numel()) {
    throw Error("tensor: data length " + std::to_string(values.size()) + " does not match shape " +
                shape.str());
  }
  node_ = std::make_shared<detail::Node>();
  node_->shape = shape;
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return Tensor(shape, Buffer::Zero(shape.numel()), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  return Tensor(shape, Buffer::Constant(shape.numel(), value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values, bool requires_grad) {
  Buffer b(static_cast<Index>(values.size()));
  Index i = 0;
  for (double v : values) b[i++] = v;
  return Tensor(shape, std::move(b), requires_grad);
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Buffer b(shape.numel());
  for (Index i = 0; i < b.size(); ++i) b[i] = dist(rng);
  return Tensor(shape, std::move(b), requires_grad);
}

Tensor Tensor::normal(Shape shape, double mean, double stddev, Rng& rng, bool requires_grad) {
  std::normal_distribution<double> dist(mean, stddev);
  Buffer b(shape.numel());
  for (Index i = 0; i < b.size(); ++i) b[i] = dist(rng);
  return Tensor(shape, std::move(b), requires_grad);
}

namespace {
const detail::Node& checked(const std::shared_ptr<detail::Node>& node) {
  if (!node) throw Error("tensor: use of undefined tensor");
  return *node;
}
}  // namespace

const Shape& Tensor::shape() const { return checked(node_).shape; }
const Buffer& Tensor::values() const { return checked(node_).value; }

Buffer& Tensor::mutable_values() {
  checked(node_);
  if (node_->op != "leaf") throw Error("tensor: values of op '" + node_->op + "' are immutable");
  return node_->value;
}

double Tensor::at(Index n, Index c, Index h, Index w) const {
  const auto& s = shape();
  if (n < 0 || n >= s.n || c < 0 || c >= s.c || h < 0 || h >= s.h || w < 0 || w >= s.w) {
    throw Error("tensor: index out of range for shape " + s.str());
  }
  return values()[offset(s, n, c, h, w)];
}

double Tensor::item() const {
  if (numel() != 1) throw Error("tensor: item() on shape " + shape().str());
  return values()[0];
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }

void Tensor::set_requires_grad(bool on) {
  checked(node_);
  if (!node_->is_leaf()) throw Error("tensor: requires_grad can only be set on leaves");
  node_->requires_grad = on;
}

bool Tensor::has_grad() const { return checked(node_).grad.size() == node_->value.size(); }

const Buffer& Tensor::grad() const {
  if (!has_grad()) throw Error("tensor: no gradient recorded for '" + node_->op + "'");
  return node_->grad;
}

void Tensor::zero_grad() {
  checked(node_);
  node_->grad.resize(0);
}

const std::string& Tensor::op() const { return checked(node_).op; }

Tensor Tensor::detach() const { return Tensor(shape(), values(), false); }
Tensor Tensor::clone() const { return Tensor(shape(), values(), requires_grad()); }

std::vector<detail::Node*> topological_order(const Tensor& root) {
  std::vector<detail::Node*> order;
  if (!root.defined()) return order;
  std::unordered_set<detail::Node*> visited;
  // Iterative post-order DFS; graphs can be deep enough to make recursion risky.
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

void Tensor::backward() const { backward(Buffer::Ones(numel())); }

void Tensor::backward(const Buffer& seed) const {
  checked(node_);
  if (seed.size() != numel()) throw Error("backward: seed size does not match " + shape().str());
  if (!node_->requires_grad) throw Error("backward: tensor does not require grad");
  const auto order = topological_order(*this);
  node_->grad_buffer() += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->is_leaf() || !node->backward) continue;
    if (node->grad.size() != node->value.size()) continue;
    node->backward(*node);
    node->grad.resize(0);
  }
}

Tensor make_result(Shape shape, Buffer values, std::string op, std::vector<Tensor> parents,
                   std::function<void(detail::Node&)> backward) {
  Tensor out(shape, std::move(values), false);
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  auto& node = *out.node();
  node.op = std::move(op);
  if (any) {
    node.requires_grad = true;
    node.parents.reserve(parents.size());
    for (auto& p : parents) node.parents.push_back(p.node());
    node.backward = std::move(backward);
  }
  return out;
}

}  // namespace fabme
