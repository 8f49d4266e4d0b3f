#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace vdet::diff {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape) noexcept;
std::string shape_to_string(const Shape& shape);

/// Dense row-major array with an optional gradient accumulator of the same shape.
template <typename T>
class BasicTensor {
 public:
  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T{0});
  BasicTensor(Shape shape, std::vector<T> data);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  bool has_grad() const noexcept { return !grad_.empty(); }
  /// Allocates a zero gradient if none exists.
  std::span<T> grad();
  std::span<const T> grad() const noexcept { return grad_; }
  void zero_grad() noexcept;
  void drop_grad() noexcept { grad_.clear(); }

  /// True when every value is finite.
  bool finite() const noexcept;

  template <typename U>
  BasicTensor<U> cast() const {
    return BasicTensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

 private:
  Shape shape_;
  std::vector<T> data_;
  std::vector<T> grad_;
};

using Tensor = BasicTensor<float>;

template <typename T>
struct Node {
  BasicTensor<T> own;
  BasicTensor<T>* bound = nullptr;  // parameter storage for leaves created by Var::leaf
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  BasicTensor<T>& tensor() noexcept { return bound ? *bound : own; }
};

/// Handle to a node of a dynamically recorded computation graph. Each op
/// allocates a node holding its value and a closure that pushes the node's
/// gradient into its parents.
template <typename T>
class Var {
 public:
  Var() = default;

  /// Constant input; never receives a gradient.
  static Var constant(BasicTensor<T> value);
  /// Leaf bound to externally owned storage; gradients accumulate into `storage`.
  static Var leaf(BasicTensor<T>& storage, bool requires_grad);
  /// Result of a custom op. `backward` reads node.tensor().grad() and
  /// accumulates into parents that require a gradient.
  static Var op(BasicTensor<T> value, std::vector<Var> parents,
                std::function<void(Node<T>&)> backward);

  bool defined() const noexcept { return node_ != nullptr; }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  const BasicTensor<T>& value() const;
  BasicTensor<T>& tensor();
  const Shape& shape() const { return value().shape(); }
  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

  /// Reverse pass from a scalar. Throws StateError on an undefined handle and
  /// ConfigError on a non-scalar root.
  void backward();

 private:
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}
  std::shared_ptr<Node<T>> node_;
};

/// 2-D convolution over HWC input with HWIO weights [k, k, Cin, Cout] and bias [Cout].
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias, int stride, int pad);

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope);

template <typename T>
Var<T> sigmoid(const Var<T>& x);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

/// Sum of all elements, as a scalar of shape {1}.
template <typename T>
Var<T> sum(const Var<T>& x);

/// Mean of squared differences against a constant target; scalar of shape {1}.
template <typename T>
Var<T> mse(const Var<T>& x, const BasicTensor<T>& target);

}  // namespace vdet::diff
