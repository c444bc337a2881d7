#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace boxseg {

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Dims = std::vector<std::size_t>;

std::size_t dims_numel(const Dims& dims);
std::string dims_string(const Dims& dims);

/// Graph node behind a Tensor handle. `backward` reads `grad` of this node
/// and accumulates (+=) into the grads of `parents`.
template <typename T>
struct TensorNode {
  Dims dims;
  std::vector<T> values;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), T(0));
    return grad;
  }
};

/// Shared handle to a node of the reverse-mode graph. Copies alias the same
/// storage; ops never mutate their inputs.
template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;

  static Tensor zeros(Dims dims, bool requires_grad = false) {
    const std::size_t n = dims_numel(dims);
    return from(std::move(dims), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor from(Dims dims, std::vector<T> values, bool requires_grad = false) {
    if (dims_numel(dims) != values.size())
      throw TensorError("tensor: " + std::to_string(values.size()) + " values for dims " + dims_string(dims));
    auto node = std::make_shared<Node>();
    node->dims = std::move(dims);
    node->values = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  // Result of an op. Parents and the backward closure are dropped when no
  // input requires a gradient.
  static Tensor make_result(Dims dims, std::vector<T> values, std::vector<Tensor> inputs,
                            std::function<void(Node&)> backward) {
    Tensor out = from(std::move(dims), std::move(values));
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (needs) {
      out.node_->requires_grad = true;
      for (auto& in : inputs) out.node_->parents.push_back(in.node_);
      out.node_->backward = std::move(backward);
    }
    return out;
  }

  bool defined() const { return node_ != nullptr; }
  const Dims& dims() const { return node().dims; }
  std::size_t dim(std::size_t i) const { return node().dims.at(i); }
  std::size_t numel() const { return node().values.size(); }
  std::size_t rank() const { return node().dims.size(); }

  std::span<const T> values() const { return node().values; }
  // Direct write access for parameter updates and initialisation.
  std::span<T> mutable_values() { return node().values; }
  std::span<const T> grad() const { return node().grad; }
  std::span<T> mutable_grad() { return node().ensure_grad(); }
  bool has_grad() const { return !node().grad.empty(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  T item() const {
    if (numel() != 1) throw TensorError("item: tensor has " + std::to_string(numel()) + " elements");
    return node().values[0];
  }

  void zero_grad() { node().grad.clear(); }

  // New leaf sharing no graph history (values copied).
  Tensor detach() const { return from(dims(), node().values, false); }

  /// Reverse pass from a scalar: seeds d(self)/d(self) = 1 and accumulates
  /// into every reachable tensor that requires a gradient.
  void backward();

  Node& node() const {
    if (!node_) throw TensorError("tensor: use of undefined tensor");
    return *node_;
  }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace boxseg
