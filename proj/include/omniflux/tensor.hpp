#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace omniflux {

using Shape = std::vector<std::size_t>;

// Storage is 64-byte aligned so vectorized kernels see the same alignment
// on every run, which keeps floating-point results bit-reproducible.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  // resize() default-initializes, leaving arithmetic types unset.
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    if constexpr (sizeof...(Args) == 0) {
      ::new (static_cast<void*>(p)) U;
    } else {
      ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
  }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// Tensor is a cheap handle: copies share storage. Parameters are leaves
/// that live across graphs; intermediates are created by Graph ops and are
/// only meaningful while their Graph is alive.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  // Treats the tensor as [rows, last_dim].
  std::size_t last_dim() const;
  std::size_t rows() const;

  std::span<double> data();
  std::span<const double> data() const;
  double item() const;
  double at(std::size_t i) const { return data()[i]; }
  double at(std::size_t r, std::size_t c) const { return data()[r * last_dim() + c]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;
  bool has_grad() const;
  // Gradient access follows handle semantics: a const handle still refers
  // to mutable shared storage. Zero-length span when no gradient exists yet.
  std::span<double> grad() const;
  void zero_grad() const;
  // Allocates the gradient buffer (zeroed) if absent.
  std::span<double> ensure_grad() const;

  // Deep copy of values into a fresh leaf.
  Tensor clone(bool requires_grad = false) const;
  std::vector<double> to_vector() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    Buffer value;
    Buffer grad;
    bool requires_grad = false;
    bool leaf = true;
  };
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  Impl& impl() const;

  std::shared_ptr<Impl> impl_;
  friend class Graph;
};

/// (offset, length) of one sequence inside a row-packed batch.
struct Segment {
  std::size_t offset = 0;
  std::size_t length = 0;
};

/// Define-by-run tape. Every op appends a node whose inputs were created
/// earlier, so reverse iteration is a valid topological order.
///
/// Ops on inputs that do not require gradients produce constants and
/// record nothing.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  // Linear algebra.
  Tensor matmul(const Tensor& a, const Tensor& b);
  // a · bᵀ without materializing the transpose.
  Tensor matmul_nt(const Tensor& a, const Tensor& b);
  Tensor transpose(const Tensor& x);

  // Elementwise.
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor multiply(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& x, double factor);
  Tensor add_scalar(const Tensor& x, double value);
  // x * s where s holds exactly one element.
  Tensor mul_scalar(const Tensor& x, const Tensor& s);
  // x[r, c] + bias[c].
  Tensor add_bias(const Tensor& x, const Tensor& bias);
  Tensor gelu(const Tensor& x);
  Tensor sigmoid(const Tensor& x);
  Tensor tanh(const Tensor& x);
  Tensor log(const Tensor& x);
  Tensor exp(const Tensor& x);

  // Reductions (to a one-element tensor).
  Tensor sum(const Tensor& x);
  Tensor mean(const Tensor& x);

  // Shape manipulation. Axis 0 and the last axis of rank-2 tensors are supported.
  Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
  Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
  Tensor reshape(const Tensor& x, Shape shape);
  // out[i] = table[indices[i]]; backward scatter-adds.
  Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices);
  // Flat element gather: out.data()[i] = x.data()[indices[i]].
  Tensor gather_elements(const Tensor& x, std::span<const std::size_t> indices, Shape out_shape);

  // Row-wise (last axis) normalizations.
  Tensor softmax(const Tensor& x, std::size_t axis);
  Tensor log_softmax(const Tensor& x, std::size_t axis);
  Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
  Tensor l2_normalize(const Tensor& x, std::size_t axis);

  // Mean binary cross-entropy between sigmoid(logits) and labels in {0,1}.
  Tensor bce_with_logits(const Tensor& logits, std::span<const double> labels);

  // Multi-head scaled dot-product attention over packed sequences: rows
  // in one segment attend only within that segment. q, k, v are [rows, d].
  // When probs_out is set, receives per segment per head the [len, len]
  // attention matrix, row-major, concatenated in segment-major order.
  Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                   std::span<const Segment> segments, std::size_t num_heads,
                   std::vector<double>* probs_out = nullptr);

  /// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable
  /// from loss. Intermediate gradients are reset first, so calling twice
  /// doubles leaf gradients.
  void backward(const Tensor& loss);

  std::size_t node_count() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  static bool any_requires_grad(std::initializer_list<const Tensor*> inputs);
  static Tensor make_result(Shape shape, bool requires_grad);
  void record(Tensor output, std::vector<Tensor> inputs, std::function<void()> backward);
  // Elementwise map; deriv(x, y) is dy/dx.
  template <class Fwd, class Deriv>
  Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv);

  std::vector<Node> nodes_;
};

}  // namespace omniflux
