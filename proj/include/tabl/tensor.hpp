#pragma once

// Dense row-major tensors of doubles with a reverse-mode tape.
//
// A Tensor is a shared handle to an immutable value node. Ops build new nodes
// that remember their parents and a backward closure; `backward(loss)` walks
// the reachable subgraph in reverse topological order. Only gradients mutate
// after construction, plus the explicit `assign` used by optimizers on leaf
// parameters between steps.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tabl {

class RngStream;

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad, accumulates into parents' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  std::vector<double>& grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(const Shape& shape, RngStream& rng, double sd = 1.0,
                      bool requires_grad = false);
  static Tensor uniform(const Shape& shape, RngStream& rng, double lo, double hi,
                        bool requires_grad = false);

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  std::size_t numel() const { return data().size(); }

  std::span<const double> data() const;
  double item() const;
  double operator[](std::size_t flat_index) const { return data()[flat_index]; }
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool has_grad() const;
  // Gradient, or zeros of the same size when none has been accumulated.
  std::vector<double> grad() const;
  void zero_grad();

  // Overwrites the values of a leaf tensor (optimizer updates, tests).
  void assign(std::span<const double> values);
  std::span<double> mutable_grad();

  // Same values, no history.
  Tensor detach() const;

  bool defined() const { return node_ != nullptr; }
  const std::shared_ptr<detail::Node>& node() const { return node_; }

  // Result of an op: throws NumericError on non-finite values.
  static Tensor make_result(Shape shape, std::vector<double> data,
                            std::vector<Tensor> parents, std::function<void(detail::Node&)> bwd,
                            const char* op_name);

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// Populates grads of every requires_grad tensor reachable from `loss`.
// Leaf gradients accumulate across calls until zero_grad().
void backward(const Tensor& loss);

}  // namespace tabl
