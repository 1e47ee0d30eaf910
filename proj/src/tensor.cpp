// SPDX-License-Identifier: Apache-2.0

#include "sicsf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace sicsf {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool enabled) { g_grad_enabled = enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---- Tensor ----------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  std::vector<T> data(shape_numel(shape), value);
  return from(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

template <typename T>
void Tensor<T>::set_requires_grad(bool flag) {
  if (!node_->is_leaf) throw std::logic_error("requires_grad can only be set on leaves");
  node_->requires_grad = flag;
  if (!flag) node_->grad.clear();
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
T Tensor<T>::at(std::size_t row, std::size_t col) const {
  if (rank() != 2 || row >= dim(0) || col >= dim(1)) {
    throw ShapeError("at(" + std::to_string(row) + "," + std::to_string(col) +
                     ") out of range for " + shape_str(shape()));
  }
  return node_->data[row * dim(1) + col];
}

template <typename T>
void Tensor<T>::validate(std::string_view what) const {
  auto bad = [](T v) { return !std::isfinite(v); };
  const auto& d = node_->data;
  if (auto it = std::find_if(d.begin(), d.end(), bad); it != d.end()) {
    throw NumericError(std::string(what) + ": non-finite value at index " +
                       std::to_string(it - d.begin()));
  }
  const auto& g = node_->grad;
  if (auto it = std::find_if(g.begin(), g.end(), bad); it != g.end()) {
    throw NumericError(std::string(what) + ": non-finite gradient at index " +
                       std::to_string(it - g.begin()));
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from(node_->shape, node_->data, false);
}

// ---- graph -----------------------------------------------------------------

template <typename T>
Graph<T>::Graph(const Tensor<T>& root) : root_(root) {
  if (!root.defined()) throw std::logic_error("graph root is undefined");
  std::unordered_set<const TensorNode<T>*> visited;
  // Iterative post-order DFS over operands that carry gradients.
  std::vector<std::pair<std::shared_ptr<TensorNode<T>>, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->parents.size()) {
      auto parent = top.first->parents[top.second++];
      if (parent->requires_grad && visited.insert(parent.get()).second) {
        stack.emplace_back(std::move(parent), 0);
      }
      continue;
    }
    order_.push_back(top.first.get());
    owned_.push_back(std::move(top.first));
    stack.pop_back();
  }
}

template <typename T>
void Graph<T>::backward() {
  auto& root = *root_.node();
  if (root.data.size() != 1) {
    throw ShapeError("backward requires a scalar loss, got " + shape_str(root.shape));
  }
  if (!root.requires_grad) throw std::logic_error("loss does not depend on any trainable tensor");
  for (const auto* node : order_) {
    if (node->consumed) throw std::logic_error("backward called twice on the same graph");
  }
  root.ensure_grad()[0] += T(1);
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    TensorNode<T>& node = **it;
    if (node.is_leaf) continue;
    if (!node.grad.empty() && node.backward_fn) node.backward_fn(node);
    node.consumed = true;
    node.backward_fn = nullptr;
    node.parents.clear();
    node.grad.clear();
  }
}

template <typename T>
void backward(const Tensor<T>& loss) {
  Graph<T>(loss).backward();
}

// ---- helpers ---------------------------------------------------------------

namespace {

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (!GradMode::enabled()) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->is_leaf = false;
  node->op = op;
  return Tensor<T>(std::move(node));
}

template <typename T, typename F>
void record(Tensor<T>& out, std::vector<NodePtr<T>> parents, F fn) {
  auto& node = *out.node();
  node.requires_grad = true;
  node.parents = std::move(parents);
  node.backward_fn = std::move(fn);
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

template <typename T>
void require_rank2(const Tensor<T>& t, const char* op) {
  require(t.defined() && t.rank() == 2,
          std::string(op) + ": expected a 2-D tensor, got " +
              (t.defined() ? shape_str(t.shape()) : std::string("undefined")));
}

// C[M×N] += A[M×K] · B[K×N]
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[K×N] += A[M×K]ᵀ · B[M×N]
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
std::vector<T> transposed(std::size_t rows, std::size_t cols, const T* src) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  }
  return out;
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

template <typename T>
T sigmoid_scalar(T v) {
  return T(1) / (T(1) + std::exp(-v));
}

template <typename T>
Tensor<T> unary(const Tensor<T>& x, const char* op, T (*f)(T), T (*df)(T, T)) {
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
  auto result = make_result(x.shape(), std::move(out), op);
  if (any_requires_grad({&x})) {
    record(result, {x.node()}, [df](TensorNode<T>& self) {
      auto& px = *self.parents[0];
      auto& gx = px.ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * df(px.data[i], self.data[i]);
    });
  }
  return result;
}

}  // namespace

// ---- linear algebra --------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
  std::vector<T> out(m * n, T(0));
  gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data());
  auto result = make_result<T>({m, n}, std::move(out), "matmul");
  if (any_requires_grad({&a, &b})) {
    record(result, {a.node(), b.node()}, [m, k, n](TensorNode<T>& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      if (pa.requires_grad) {
        // dA = dC · Bᵀ
        auto bt = transposed(k, n, pb.data.data());
        gemm_nn(m, n, k, self.grad.data(), bt.data(), pa.ensure_grad().data());
      }
      if (pb.requires_grad) {
        // dB = Aᵀ · dC
        gemm_tn(m, k, n, pa.data.data(), self.grad.data(), pb.ensure_grad().data());
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  require(b.dim(1) == k, "matmul_nt: inner dimensions differ: " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()) + "^T");
  std::vector<T> out(m * n);
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = dot(ad + i * k, bd + j * k, k);
  }
  auto result = make_result<T>({m, n}, std::move(out), "matmul_nt");
  if (any_requires_grad({&a, &b})) {
    record(result, {a.node(), b.node()}, [m, k, n](TensorNode<T>& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      // dA = dC · B ; dB = dCᵀ · A
      if (pa.requires_grad) gemm_nn(m, n, k, self.grad.data(), pb.data.data(), pa.ensure_grad().data());
      if (pb.requires_grad) gemm_tn(m, n, k, self.grad.data(), pa.data.data(), pb.ensure_grad().data());
    });
  }
  return result;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank2(a, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  auto result = make_result<T>({c, r}, transposed(r, c, a.data().data()), "transpose");
  if (any_requires_grad({&a})) {
    record(result, {a.node()}, [r, c](TensorNode<T>& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
      }
    });
  }
  return result;
}

// ---- elementwise -----------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(),
          "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  auto result = make_result(a.shape(), std::move(out), "add");
  if (any_requires_grad({&a, &b})) {
    record(result, {a.node(), b.node()}, [](TensorNode<T>& self) {
      for (auto& p : self.parents) {
        if (!p->requires_grad) continue;
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(),
          "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  auto result = make_result(a.shape(), std::move(out), "sub");
  if (any_requires_grad({&a, &b})) {
    record(result, {a.node(), b.node()}, [](TensorNode<T>& self) {
      if (self.parents[0]->requires_grad) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
      if (self.parents[1]->requires_grad) {
        auto& g = self.parents[1]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(),
          "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  auto result = make_result(a.shape(), std::move(out), "mul");
  if (any_requires_grad({&a, &b})) {
    record(result, {a.node(), b.node()}, [](TensorNode<T>& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      if (pa.requires_grad) {
        auto& g = pa.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
      }
      if (pb.requires_grad) {
        auto& g = pb.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * factor;
  auto result = make_result(a.shape(), std::move(out), "scale");
  if (any_requires_grad({&a})) {
    record(result, {a.node()}, [factor](TensorNode<T>& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
    });
  }
  return result;
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require(bias.rank() == 1 && x.rank() >= 1 && x.shape().back() == bias.dim(0),
          "add_bias: bias " + shape_str(bias.shape()) + " does not match trailing axis of " +
              shape_str(x.shape()));
  const std::size_t n = bias.dim(0);
  std::vector<T> out(x.data().begin(), x.data().end());
  auto bd = bias.data();
  for (std::size_t i = 0; i < out.size(); i += n) {
    for (std::size_t j = 0; j < n; ++j) out[i + j] += bd[j];
  }
  auto result = make_result(x.shape(), std::move(out), "add_bias");
  if (any_requires_grad({&x, &bias})) {
    record(result, {x.node(), bias.node()}, [n](TensorNode<T>& self) {
      auto& px = *self.parents[0];
      auto& pb = *self.parents[1];
      if (px.requires_grad) {
        auto& g = px.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
      if (pb.requires_grad) {
        auto& g = pb.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); i += n) {
          for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i + j];
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary<T>(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T in, T) { return in > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary<T>(
      x, "sigmoid", [](T v) { return sigmoid_scalar(v); },
      [](T, T out) { return out * (T(1) - out); });
}

template <typename T>
Tensor<T> swish(const Tensor<T>& x) {
  return unary<T>(
      x, "swish", [](T v) { return v * sigmoid_scalar(v); },
      [](T in, T) {
        const T s = sigmoid_scalar(in);
        return s * (T(1) + in * (T(1) - s));
      });
}

template <typename T>
Tensor<T> glu(const Tensor<T>& x) {
  require_rank2(x, "glu");
  require(x.dim(1) % 2 == 0, "glu: odd channel count in " + shape_str(x.shape()));
  const std::size_t rows = x.dim(0), half = x.dim(1) / 2;
  std::vector<T> out(rows * half);
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < half; ++c) {
      out[r * half + c] = xd[r * 2 * half + c] * sigmoid_scalar(xd[r * 2 * half + half + c]);
    }
  }
  auto result = make_result<T>({rows, half}, std::move(out), "glu");
  if (any_requires_grad({&x})) {
    record(result, {x.node()}, [rows, half](TensorNode<T>& self) {
      auto& px = *self.parents[0];
      auto& g = px.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < half; ++c) {
          const std::size_t ia = r * 2 * half + c, ib = ia + half;
          const T s = sigmoid_scalar(px.data[ib]);
          const T gy = self.grad[r * half + c];
          g[ia] += gy * s;
          g[ib] += gy * px.data[ia] * s * (T(1) - s);
        }
      }
    });
  }
  return result;
}

// ---- normalisation ---------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  require(axis < x.rank(), "softmax: axis " + std::to_string(axis) + " invalid for " +
                               shape_str(x.shape()));
  const auto& shape = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t n = shape[axis];
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, xd[base + i * inner]);
      if (mx == -std::numeric_limits<T>::infinity()) {
        throw ShapeError("softmax: every entry of a slice is masked");
      }
      T total = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T e = std::exp(xd[base + i * inner] - mx);
        out[base + i * inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= total;
    }
  }
  auto result = make_result(x.shape(), std::move(out), "softmax");
  if (any_requires_grad({&x})) {
    record(result, {x.node()}, [outer, inner, n](TensorNode<T>& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          T s = 0;
          for (std::size_t i = 0; i < n; ++i) {
            s += self.grad[base + i * inner] * self.data[base + i * inner];
          }
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t idx = base + i * inner;
            g[idx] += self.data[idx] * (self.grad[idx] - s);
          }
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  require(x.rank() >= 1, "layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  require(gamma.rank() == 1 && beta.rank() == 1 && gamma.dim(0) == d && beta.dim(0) == d,
          "layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " +
              shape_str(beta.shape()) + " do not match feature dim of " + shape_str(x.shape()));
  require(eps > T(0), "layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= T(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * rstd[r];
      xhat[r * d + j] = h;
      out[r * d + j] = h * gd[j] + bd[j];
    }
  }
  auto result = make_result(x.shape(), std::move(out), "layer_norm");
  if (any_requires_grad({&x, &gamma, &beta})) {
    record(result, {x.node(), gamma.node(), beta.node()},
           [rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](TensorNode<T>& self) {
             auto& px = *self.parents[0];
             auto& pg = *self.parents[1];
             auto& pb = *self.parents[2];
             if (pg.requires_grad) {
               auto& g = pg.ensure_grad();
               for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % d] += self.grad[i] * xhat[i];
             }
             if (pb.requires_grad) {
               auto& g = pb.ensure_grad();
               for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % d] += self.grad[i];
             }
             if (px.requires_grad) {
               auto& g = px.ensure_grad();
               for (std::size_t r = 0; r < rows; ++r) {
                 T mean_dh = 0, mean_dh_h = 0;
                 for (std::size_t j = 0; j < d; ++j) {
                   const T dh = self.grad[r * d + j] * pg.data[j];
                   mean_dh += dh;
                   mean_dh_h += dh * xhat[r * d + j];
                 }
                 mean_dh /= T(d);
                 mean_dh_h /= T(d);
                 for (std::size_t j = 0; j < d; ++j) {
                   const T dh = self.grad[r * d + j] * pg.data[j];
                   g[r * d + j] += rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                 }
               }
             }
           });
  }
  return result;
}

// ---- sequence ops ----------------------------------------------------------

template <typename T>
Tensor<T> depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t valid_len) {
  require_rank2(x, "depthwise_conv1d");
  require_rank2(kernel, "depthwise_conv1d kernel");
  const std::size_t t_len = x.dim(0), d = x.dim(1), k = kernel.dim(0);
  require(kernel.dim(1) == d, "depthwise_conv1d: kernel " + shape_str(kernel.shape()) +
                                  " has wrong channel count for input " + shape_str(x.shape()));
  require(k % 2 == 1, "depthwise_conv1d: kernel size must be odd, got " + std::to_string(k));
  const std::size_t valid = std::min(valid_len, t_len);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  std::vector<T> out(t_len * d, T(0));
  auto xd = x.data();
  auto kd = kernel.data();
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t p = 0; p < k; ++p) {
      const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + p) - pad;
      if (s < 0 || s >= static_cast<std::ptrdiff_t>(valid)) continue;
      const T* xr = xd.data() + s * d;
      const T* kr = kd.data() + p * d;
      T* yr = out.data() + t * d;
      for (std::size_t c = 0; c < d; ++c) yr[c] += kr[c] * xr[c];
    }
  }
  auto result = make_result<T>({t_len, d}, std::move(out), "depthwise_conv1d");
  if (any_requires_grad({&x, &kernel})) {
    record(result, {x.node(), kernel.node()}, [t_len, d, k, valid, pad](TensorNode<T>& self) {
      auto& px = *self.parents[0];
      auto& pk = *self.parents[1];
      T* gx = px.requires_grad ? px.ensure_grad().data() : nullptr;
      T* gk = pk.requires_grad ? pk.ensure_grad().data() : nullptr;
      for (std::size_t t = 0; t < t_len; ++t) {
        const T* gy = self.grad.data() + t * d;
        for (std::size_t p = 0; p < k; ++p) {
          const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + p) - pad;
          if (s < 0 || s >= static_cast<std::ptrdiff_t>(valid)) continue;
          if (gx) {
            const T* kr = pk.data.data() + p * d;
            T* gxr = gx + s * d;
            for (std::size_t c = 0; c < d; ++c) gxr[c] += kr[c] * gy[c];
          }
          if (gk) {
            const T* xr = px.data.data() + s * d;
            T* gkr = gk + p * d;
            for (std::size_t c = 0; c < d; ++c) gkr[c] += xr[c] * gy[c];
          }
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> mask_rows(const Tensor<T>& x, std::size_t valid_len) {
  require_rank2(x, "mask_rows");
  const std::size_t cols = x.dim(1);
  const std::size_t keep = std::min(valid_len, x.dim(0)) * cols;
  std::vector<T> out(x.numel(), T(0));
  std::copy_n(x.data().begin(), keep, out.begin());
  auto result = make_result(x.shape(), std::move(out), "mask_rows");
  if (any_requires_grad({&x})) {
    record(result, {x.node()}, [keep](TensorNode<T>& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < keep; ++i) g[i] += self.grad[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> attention_mask(const Tensor<T>& scores, std::size_t key_valid, bool causal,
                         std::size_t query_offset) {
  require_rank2(scores, "attention_mask");
  const std::size_t tq = scores.dim(0), tk = scores.dim(1);
  const std::size_t valid = std::min(key_valid, tk);
  if (valid == 0) throw ShapeError("attention: all keys are masked for some query");
  std::vector<T> out(scores.data().begin(), scores.data().end());
  std::vector<std::size_t> limit(tq);
  for (std::size_t i = 0; i < tq; ++i) {
    limit[i] = causal ? std::min(valid, i + query_offset + 1) : valid;
    for (std::size_t j = limit[i]; j < tk; ++j) out[i * tk + j] = -std::numeric_limits<T>::infinity();
  }
  auto result = make_result(scores.shape(), std::move(out), "attention_mask");
  if (any_requires_grad({&scores})) {
    record(result, {scores.node()}, [tk, limit = std::move(limit)](TensorNode<T>& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < limit.size(); ++i) {
        for (std::size_t j = 0; j < limit[i]; ++j) g[i * tk + j] += self.grad[i * tk + j];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> relative_position_bias(const Tensor<T>& table, std::size_t head, std::size_t tq,
                                 std::size_t tk, std::size_t clip, std::size_t query_offset) {
  require_rank2(table, "relative_position_bias");
  require(head < table.dim(0) && table.dim(1) == 2 * clip + 1,
          "relative_position_bias: table " + shape_str(table.shape()) +
              " does not fit head " + std::to_string(head) + " with clip " + std::to_string(clip));
  const std::size_t width = table.dim(1);
  std::vector<std::size_t> index(tq * tk);
  const auto c = static_cast<std::ptrdiff_t>(clip);
  for (std::size_t i = 0; i < tq; ++i) {
    for (std::size_t j = 0; j < tk; ++j) {
      const std::ptrdiff_t rel = static_cast<std::ptrdiff_t>(j) -
                                 static_cast<std::ptrdiff_t>(i + query_offset);
      index[i * tk + j] = head * width + static_cast<std::size_t>(std::clamp(rel, -c, c) + c);
    }
  }
  std::vector<T> out(tq * tk);
  auto td = table.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = td[index[i]];
  auto result = make_result<T>({tq, tk}, std::move(out), "relative_position_bias");
  if (any_requires_grad({&table})) {
    record(result, {table.node()}, [index = std::move(index)](TensorNode<T>& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < index.size(); ++i) g[index[i]] += self.grad[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t count) {
  require_rank2(x, "slice_cols");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  require(start + count <= cols, "slice_cols: [" + std::to_string(start) + ", +" +
                                     std::to_string(count) + ") out of " + shape_str(x.shape()));
  std::vector<T> out(rows * count);
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(xd.begin() + r * cols + start, count, out.begin() + r * count);
  }
  auto result = make_result<T>({rows, count}, std::move(out), "slice_cols");
  if (any_requires_grad({&x})) {
    record(result, {x.node()}, [rows, cols, start, count](TensorNode<T>& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < count; ++c) g[r * cols + start + c] += self.grad[r * count + c];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t rows = parts.front().dim(0);
  std::size_t cols = 0;
  bool track = false;
  std::vector<NodePtr<T>> parents;
  for (const auto& p : parts) {
    require_rank2(p, "concat_cols");
    require(p.dim(0) == rows, "concat_cols: row count mismatch");
    cols += p.dim(1);
    track = track || any_requires_grad({&p});
    parents.push_back(p.node());
  }
  std::vector<T> out(rows * cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    auto pd = p.data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(pd.begin() + r * w, w, out.begin() + r * cols + offset);
    }
    offset += w;
  }
  auto result = make_result<T>({rows, cols}, std::move(out), "concat_cols");
  if (track) {
    record(result, std::move(parents), [rows, cols](TensorNode<T>& self) {
      std::size_t offset = 0;
      for (auto& p : self.parents) {
        const std::size_t w = p->shape[1];
        if (p->requires_grad) {
          auto& g = p->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < w; ++c) g[r * w + c] += self.grad[r * cols + offset + c];
          }
        }
        offset += w;
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t start, std::size_t count) {
  require_rank2(x, "slice_rows");
  const std::size_t cols = x.dim(1);
  require(start + count <= x.dim(0), "slice_rows: [" + std::to_string(start) + ", +" +
                                         std::to_string(count) + ") out of " +
                                         shape_str(x.shape()));
  std::vector<T> out(x.data().begin() + start * cols, x.data().begin() + (start + count) * cols);
  auto result = make_result<T>({count, cols}, std::move(out), "slice_rows");
  if (any_requires_grad({&x})) {
    record(result, {x.node()}, [start, cols](TensorNode<T>& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[start * cols + i] += self.grad[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t cols = parts.front().dim(1);
  std::size_t rows = 0;
  bool track = false;
  std::vector<NodePtr<T>> parents;
  std::vector<T> out;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    require(p.dim(1) == cols, "concat_rows: column count mismatch");
    rows += p.dim(0);
    track = track || any_requires_grad({&p});
    parents.push_back(p.node());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  auto result = make_result<T>({rows, cols}, std::move(out), "concat_rows");
  if (track) {
    record(result, std::move(parents), [](TensorNode<T>& self) {
      std::size_t offset = 0;
      for (auto& p : self.parents) {
        const std::size_t n = p->data.size();
        if (p->requires_grad) {
          auto& g = p->ensure_grad();
          for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
        }
        offset += n;
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
  require_rank2(table, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < vocab,
            "embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                std::to_string(vocab));
    std::copy_n(td.begin() + ids[i] * d, d, out.begin() + i * d);
  }
  auto result = make_result<T>({ids.size(), d}, std::move(out), "embedding");
  if (any_requires_grad({&table})) {
    record(result, {table.node()},
           [d, rows = std::vector<int>(ids.begin(), ids.end())](TensorNode<T>& self) {
             auto& g = self.parents[0]->ensure_grad();
             for (std::size_t i = 0; i < rows.size(); ++i) {
               for (std::size_t c = 0; c < d; ++c) g[rows[i] * d + c] += self.grad[i * d + c];
             }
           });
  }
  return result;
}

// ---- reductions and losses -------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  auto result = make_result<T>({1}, {total}, "sum");
  if (any_requires_grad({&x})) {
    record(result, {x.node()}, [](TensorNode<T>& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (auto& v : g) v += self.grad[0];
    });
  }
  return result;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  require(x.numel() > 0, "mean of empty tensor");
  return scale(sum(x), T(1) / T(x.numel()));
}

namespace {

// Shared body of the summed and averaged losses. The reduction is accumulated
// in long double and divided once, so identical rows average to themselves.
template <typename T>
Tensor<T> cross_entropy_reduce(const Tensor<T>& logits, std::span<const int> targets,
                               int ignore_index, bool average, const char* op) {
  require_rank2(logits, op);
  const std::size_t rows = logits.dim(0), v = logits.dim(1);
  require(targets.size() == rows, std::string(op) + ": " + std::to_string(targets.size()) +
                                      " targets for " + std::to_string(rows) + " logit rows");
  auto ld = logits.data();
  std::vector<T> lse(rows, T(0));
  long double total = 0.0L;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == ignore_index) continue;
    require(targets[r] >= 0 && static_cast<std::size_t>(targets[r]) < v,
            std::string(op) + ": target id " + std::to_string(targets[r]) + " out of range");
    const T* row = ld.data() + r * v;
    const T mx = *std::max_element(row, row + v);
    T s = 0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(row[j] - mx);
    lse[r] = mx + std::log(s);
    total += static_cast<long double>(lse[r] - row[targets[r]]);
    ++counted;
  }
  if (average) {
    require(counted > 0, std::string(op) + ": every target is ignored");
    total /= static_cast<long double>(counted);
  }
  const T weight = average ? T(1) / T(counted) : T(1);
  auto result = make_result<T>({1}, {static_cast<T>(total)}, op);
  if (any_requires_grad({&logits})) {
    record(result, {logits.node()},
           [rows, v, ignore_index, weight, lse = std::move(lse),
            tg = std::vector<int>(targets.begin(), targets.end())](TensorNode<T>& self) {
             auto& px = *self.parents[0];
             auto& g = px.ensure_grad();
             const T gy = self.grad[0] * weight;
             for (std::size_t r = 0; r < rows; ++r) {
               if (tg[r] == ignore_index) continue;
               for (std::size_t j = 0; j < v; ++j) {
                 g[r * v + j] += gy * std::exp(px.data[r * v + j] - lse[r]);
               }
               g[r * v + tg[r]] -= gy;
             }
           });
  }
  return result;
}

}  // namespace

template <typename T>
Tensor<T> cross_entropy_sum(const Tensor<T>& logits, std::span<const int> targets,
                            int ignore_index) {
  return cross_entropy_reduce(logits, targets, ignore_index, false, "cross_entropy_sum");
}

template <typename T>
Tensor<T> cross_entropy_mean(const Tensor<T>& logits, std::span<const int> targets,
                             int ignore_index) {
  return cross_entropy_reduce(logits, targets, ignore_index, true, "cross_entropy_mean");
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T p, std::mt19937_64& rng) {
  require(p >= T(0) && p < T(1), "dropout: probability must be in [0, 1)");
  if (p == T(0)) return x;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const T keep_scale = T(1) / (T(1) - p);
  std::vector<T> mask(x.numel());
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = unif(rng) < static_cast<double>(p) ? T(0) : keep_scale;
    out[i] = xd[i] * mask[i];
  }
  auto result = make_result(x.shape(), std::move(out), "dropout");
  if (any_requires_grad({&x})) {
    record(result, {x.node()}, [mask = std::move(mask)](TensorNode<T>& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> frame_stack(const Tensor<T>& x, std::size_t factor, std::size_t valid_len) {
  require_rank2(x, "frame_stack");
  require(factor >= 1, "frame_stack: factor must be positive");
  const std::size_t t_len = x.dim(0), f = x.dim(1);
  require(t_len >= 1, "frame_stack: empty input");
  const std::size_t out_rows = (t_len + factor - 1) / factor;
  const std::size_t valid = std::min(valid_len, t_len);
  std::vector<T> out(out_rows * factor * f, T(0));
  std::copy_n(x.data().begin(), valid * f, out.begin());
  auto result = make_result<T>({out_rows, factor * f}, std::move(out), "frame_stack");
  if (any_requires_grad({&x})) {
    record(result, {x.node()}, [n = valid * f](TensorNode<T>& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
    });
  }
  return result;
}

// ---- explicit instantiations -----------------------------------------------

#define SICSF_INSTANTIATE(T)                                                                  \
  template class Tensor<T>;                                                                   \
  template class Graph<T>;                                                                    \
  template void backward<T>(const Tensor<T>&);                                                \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> matmul_nt<T>(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                          \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                           \
  template Tensor<T> add_bias<T>(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> relu<T>(const Tensor<T>&);                                               \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                            \
  template Tensor<T> swish<T>(const Tensor<T>&);                                              \
  template Tensor<T> glu<T>(const Tensor<T>&);                                                \
  template Tensor<T> softmax<T>(const Tensor<T>&, std::size_t);                               \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);  \
  template Tensor<T> depthwise_conv1d<T>(const Tensor<T>&, const Tensor<T>&, std::size_t);    \
  template Tensor<T> mask_rows<T>(const Tensor<T>&, std::size_t);                             \
  template Tensor<T> attention_mask<T>(const Tensor<T>&, std::size_t, bool, std::size_t);     \
  template Tensor<T> relative_position_bias<T>(const Tensor<T>&, std::size_t, std::size_t,    \
                                               std::size_t, std::size_t, std::size_t);        \
  template Tensor<T> slice_cols<T>(const Tensor<T>&, std::size_t, std::size_t);               \
  template Tensor<T> concat_cols<T>(const std::vector<Tensor<T>>&);                           \
  template Tensor<T> slice_rows<T>(const Tensor<T>&, std::size_t, std::size_t);               \
  template Tensor<T> concat_rows<T>(const std::vector<Tensor<T>>&);                           \
  template Tensor<T> embedding<T>(const Tensor<T>&, std::span<const int>);                    \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                \
  template Tensor<T> mean<T>(const Tensor<T>&);                                               \
  template Tensor<T> cross_entropy_sum<T>(const Tensor<T>&, std::span<const int>, int);       \
  template Tensor<T> cross_entropy_mean<T>(const Tensor<T>&, std::span<const int>, int);      \
  template Tensor<T> dropout<T>(const Tensor<T>&, T, std::mt19937_64&);                       \
  template Tensor<T> frame_stack<T>(const Tensor<T>&, std::size_t, std::size_t);

SICSF_INSTANTIATE(float)
SICSF_INSTANTIATE(double)

#undef SICSF_INSTANTIATE

}  // namespace sicsf
