// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with define-by-run reverse-mode autodiff.
//
// Every op returns a fresh node. When grad mode is on and any operand requires
// a gradient, the node records its operands and a backward closure; calling
// backward() on a scalar then visits the recorded graph once in reverse
// topological order. Leaves accumulate gradients until zero_grad().

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sicsf/errors.hpp"

namespace sicsf {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Thread-local switch; inference code runs with grad mode off so no graph is
// recorded.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;  // backward already ran through this node
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Writable view for initialisation and optimiser updates on leaves.
  std::span<T> mutable_data() { return node_->data; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag);
  bool is_leaf() const { return node_->is_leaf; }
  const char* op_name() const { return node_->op; }

  T item() const;
  T at(std::size_t row, std::size_t col) const;

  // Throws NumericError naming `what` if data or grad holds NaN/Inf.
  void validate(std::string_view what) const;

  // Same values, no graph history, no gradient.
  Tensor detach() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Topologically ordered view of the graph rooted at a scalar loss.
template <typename T>
class Graph {
 public:
  explicit Graph(const Tensor<T>& root);

  // Operands precede consumers.
  const std::vector<TensorNode<T>*>& order() const { return order_; }

  // Fills gradients of every requires_grad leaf. Throws ShapeError if the root
  // is not a scalar and std::logic_error if this graph was already consumed.
  void backward();

 private:
  Tensor<T> root_;
  std::vector<TensorNode<T>*> order_;
  std::vector<std::shared_ptr<TensorNode<T>>> owned_;
};

template <typename T>
void backward(const Tensor<T>& loss);

// ---- primitive ops (2-D unless stated) ------------------------------------

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// a[M×K] · b[N×K]ᵀ -> [M×N]
template <typename T> Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
// x[...×N] + bias[N] along the trailing axis.
template <typename T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> swish(const Tensor<T>& x);
// x[M×2N] -> first half ⊙ sigmoid(second half)
template <typename T> Tensor<T> glu(const Tensor<T>& x);

// Numerically stable softmax along `axis`; -inf entries map to exactly 0.
// A slice with every entry -inf is an error.
template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

// Same-padded per-channel convolution; input frames at or beyond valid_len
// are treated as zeros. K must be odd.
template <typename T>
Tensor<T> depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t valid_len);

// Zeroes rows >= valid_len.
template <typename T> Tensor<T> mask_rows(const Tensor<T>& x, std::size_t valid_len);

// Sets scores[i][j] to -inf when key j >= key_valid, or, if causal, when
// j > i + query_offset. Throws ShapeError if a row ends up fully masked.
template <typename T>
Tensor<T> attention_mask(const Tensor<T>& scores, std::size_t key_valid, bool causal,
                         std::size_t query_offset = 0);

// Gathers a [Tq×Tk] bias from table row `head`: table[head][clip + clamp(j - i')]
// with i' = i + query_offset.
template <typename T>
Tensor<T> relative_position_bias(const Tensor<T>& table, std::size_t head, std::size_t tq,
                                 std::size_t tk, std::size_t clip, std::size_t query_offset = 0);

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t count);
template <typename T> Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t start, std::size_t count);
template <typename T> Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);

// table[V×D] gathered by ids -> [L×D].
template <typename T> Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

// Σ over rows i with targets[i] != ignore_index of -log softmax(logits[i])[targets[i]].
template <typename T>
Tensor<T> cross_entropy_sum(const Tensor<T>& logits, std::span<const int> targets,
                            int ignore_index);

// The same sum divided by the number of rows that are not ignored.
template <typename T>
Tensor<T> cross_entropy_mean(const Tensor<T>& logits, std::span<const int> targets,
                             int ignore_index);

// Inverted dropout. Identity when p == 0.
template <typename T> Tensor<T> dropout(const Tensor<T>& x, T p, std::mt19937_64& rng);

// Groups `factor` consecutive frames into one row: [T×F] -> [ceil(T/f) × f·F].
// Frames >= valid_len and the tail pad are zeros.
template <typename T>
Tensor<T> frame_stack(const Tensor<T>& x, std::size_t factor, std::size_t valid_len);

}  // namespace sicsf
