#include "omniflux/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "omniflux/errors.hpp"

namespace omniflux {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

// Decomposes a tensor around `axis` into outer * n * inner.
struct AxisView {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape));
  }
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank2(const Tensor& x, const char* op) {
  if (x.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(x.shape()));
  }
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape));
  }
  auto impl = std::make_shared<Impl>();
  impl->value.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->value.assign(values.begin(), values.end());
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return full({1}, value, requires_grad); }

Tensor::Impl& Tensor::impl() const {
  if (!impl_) throw ContractError("use of undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("axis out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return impl().value.size(); }
std::size_t Tensor::last_dim() const { return shape().back(); }
std::size_t Tensor::rows() const { return numel() / last_dim(); }

std::span<double> Tensor::data() { return impl().value; }
std::span<const double> Tensor::data() const { return impl().value; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl().value[0];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }
void Tensor::set_requires_grad(bool on) { impl().requires_grad = on; }
bool Tensor::is_leaf() const { return impl().leaf; }
bool Tensor::has_grad() const { return !impl().grad.empty(); }
std::span<double> Tensor::grad() const { return impl().grad; }

void Tensor::zero_grad() const {
  auto& g = impl().grad;
  std::fill(g.begin(), g.end(), 0.0);
}

std::span<double> Tensor::ensure_grad() const {
  auto& im = impl();
  if (im.grad.empty()) im.grad.assign(im.value.size(), 0.0);
  return im.grad;
}

Tensor Tensor::clone(bool requires_grad) const {
  auto copy = std::make_shared<Impl>();
  copy->shape = shape();
  copy->value = impl().value;
  copy->requires_grad = requires_grad;
  return Tensor(std::move(copy));
}

std::vector<double> Tensor::to_vector() const { return {impl().value.begin(), impl().value.end()}; }

// ---------------------------------------------------------------------------
// Graph plumbing

bool Graph::any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

Tensor Graph::make_result(Shape shape, bool requires_grad) {
  // Every op writes all output elements, so the buffer starts uninitialized.
  auto impl = std::make_shared<Tensor::Impl>();
  impl->value.resize(shape_numel(shape));
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  impl->leaf = !requires_grad;
  return Tensor(std::move(impl));
}

void Graph::record(Tensor output, std::vector<Tensor> inputs, std::function<void()> backward) {
  nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(backward)});
}

void Graph::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  for (auto& node : nodes_) {
    if (node.output.has_grad()) node.output.zero_grad();
  }
  Tensor root = loss;
  root.ensure_grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output.has_grad()) it->backward();
  }
  if (!root.is_leaf()) root.zero_grad();
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const bool rg = any_requires_grad({&a, &b});
  Tensor out = make_result({m, n}, rg);
  MatMap(out.data().data(), m, n).noalias() =
      ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), k, n);
  if (rg) {
    record(out, {a, b}, [a, b, out, m, k, n]() mutable {
      ConstMatMap g(out.grad().data(), m, n);
      if (a.requires_grad()) {
        MatMap(a.ensure_grad().data(), m, k).noalias() += g * ConstMatMap(b.data().data(), k, n).transpose();
      }
      if (b.requires_grad()) {
        MatMap(b.ensure_grad().data(), k, n).noalias() += ConstMatMap(a.data().data(), m, k).transpose() * g;
      }
    });
  }
  return out;
}

Tensor Graph::matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner dimensions disagree " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  }
  const bool rg = any_requires_grad({&a, &b});
  Tensor out = make_result({m, n}, rg);
  MatMap(out.data().data(), m, n).noalias() =
      ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), n, k).transpose();
  if (rg) {
    record(out, {a, b}, [a, b, out, m, k, n]() mutable {
      ConstMatMap g(out.grad().data(), m, n);
      if (a.requires_grad()) {
        MatMap(a.ensure_grad().data(), m, k).noalias() += g * ConstMatMap(b.data().data(), n, k);
      }
      if (b.requires_grad()) {
        MatMap(b.ensure_grad().data(), n, k).noalias() += g.transpose() * ConstMatMap(a.data().data(), m, k);
      }
    });
  }
  return out;
}

Tensor Graph::transpose(const Tensor& x) {
  require_rank2(x, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  const bool rg = x.requires_grad();
  Tensor out = make_result({c, r}, rg);
  MatMap(out.data().data(), c, r) = ConstMatMap(x.data().data(), r, c).transpose();
  if (rg) {
    record(out, {x}, [x, out, r, c]() mutable {
      MatMap(x.ensure_grad().data(), r, c) += ConstMatMap(out.grad().data(), c, r).transpose();
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const bool rg = any_requires_grad({&a, &b});
  Tensor out = make_result(a.shape(), rg);
  auto o = out.data();
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
  if (rg) {
    record(out, {a, b}, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor Graph::sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const bool rg = any_requires_grad({&a, &b});
  Tensor out = make_result(a.shape(), rg);
  auto o = out.data();
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] - bv[i];
  if (rg) {
    record(out, {a, b}, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor Graph::multiply(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "multiply");
  const bool rg = any_requires_grad({&a, &b});
  Tensor out = make_result(a.shape(), rg);
  auto o = out.data();
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
  if (rg) {
    record(out, {a, b}, [a, b, out]() mutable {
      auto g = out.grad();
      auto av = a.data(), bv = b.data();
      if (a.requires_grad()) {
        auto ga = a.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      }
      if (b.requires_grad()) {
        auto gb = b.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      }
    });
  }
  return out;
}

Tensor Graph::scale(const Tensor& x, double factor) {
  const bool rg = x.requires_grad();
  Tensor out = make_result(x.shape(), rg);
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] * factor;
  if (rg) {
    record(out, {x}, [x, out, factor]() mutable {
      auto g = out.grad();
      auto gx = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
    });
  }
  return out;
}

Tensor Graph::add_scalar(const Tensor& x, double value) {
  const bool rg = x.requires_grad();
  Tensor out = make_result(x.shape(), rg);
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] + value;
  if (rg) {
    record(out, {x}, [x, out]() mutable {
      auto g = out.grad();
      auto gx = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor Graph::mul_scalar(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("mul_scalar: scale must have one element, got " + shape_str(s.shape()));
  const bool rg = any_requires_grad({&x, &s});
  Tensor out = make_result(x.shape(), rg);
  const double k = s.data()[0];
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] * k;
  if (rg) {
    record(out, {x, s}, [x, s, out]() mutable {
      auto g = out.grad();
      auto xv = x.data();
      const double k = s.data()[0];
      if (x.requires_grad()) {
        auto gx = x.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * k;
      }
      if (s.requires_grad()) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
        s.ensure_grad()[0] += acc;
      }
    });
  }
  return out;
}

Tensor Graph::add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t c = x.last_dim();
  if (bias.numel() != c) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
  }
  const std::size_t r = x.rows();
  const bool rg = any_requires_grad({&x, &bias});
  Tensor out = make_result(x.shape(), rg);
  auto o = out.data();
  auto xv = x.data();
  auto bv = bias.data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) o[i * c + j] = xv[i * c + j] + bv[j];
  }
  if (rg) {
    record(out, {x, bias}, [x, bias, out, r, c]() mutable {
      auto g = out.grad();
      if (x.requires_grad()) {
        auto gx = x.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
        }
      }
    });
  }
  return out;
}

template <class Fwd, class Deriv>
Tensor Graph::unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  const bool rg = x.requires_grad();
  Tensor out = make_result(x.shape(), rg);
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(xv[i]);
  if (rg) {
    record(out, {x}, [x, out, deriv]() mutable {
      auto g = out.grad();
      auto xv = x.data();
      auto yv = out.data();
      auto gx = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xv[i], yv[i]);
    });
  }
  return out;
}

Tensor Graph::gelu(const Tensor& x) {
  return unary(x, 
      [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      });
}

Tensor Graph::sigmoid(const Tensor& x) {
  return unary(x, 
      [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor Graph::tanh(const Tensor& x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor Graph::log(const Tensor& x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor Graph::exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor Graph::sum(const Tensor& x) {
  const bool rg = x.requires_grad();
  Tensor out = make_result({1}, rg);
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  out.data()[0] = acc;
  if (rg) {
    record(out, {x}, [x, out]() mutable {
      const double g = out.grad()[0];
      for (double& gx : x.ensure_grad()) gx += g;
    });
  }
  return out;
}

Tensor Graph::mean(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.numel());
  return scale(sum(x), inv);
}

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor Graph::concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < first.size(); ++i) {
      if (i != axis && p.dim(i) != first[i]) {
        throw DimensionError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(p.shape()));
      }
    }
    out_shape[axis] += p.dim(axis);
    rg = rg || p.requires_grad();
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t out_row = out_shape[axis] * inner;

  Tensor out = make_result(out_shape, rg);
  auto o = out.data();
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t chunk = p.dim(axis) * inner;
    auto pv = p.data();
    for (std::size_t r = 0; r < outer; ++r) {
      std::copy_n(pv.begin() + r * chunk, chunk, o.begin() + r * out_row + off);
    }
    off += chunk;
  }
  if (rg) {
    record(out, parts, [parts, out, axis, outer, inner, out_row]() mutable {
      auto g = out.grad();
      std::size_t off = 0;
      for (auto& p : parts) {
        const std::size_t chunk = p.dim(axis) * inner;
        if (p.requires_grad()) {
          auto gp = p.ensure_grad();
          for (std::size_t r = 0; r < outer; ++r) {
            for (std::size_t j = 0; j < chunk; ++j) gp[r * chunk + j] += g[r * out_row + off + j];
          }
        }
        off += chunk;
      }
    });
  }
  return out;
}

Tensor Graph::slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  if (begin >= end || end > x.dim(0)) {
    throw DimensionError("slice_rows: invalid range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") for " + shape_str(x.shape()));
  }
  Shape s = x.shape();
  const std::size_t row = x.numel() / s[0];
  s[0] = end - begin;
  const bool rg = x.requires_grad();
  Tensor out = make_result(s, rg);
  std::copy_n(x.data().begin() + begin * row, (end - begin) * row, out.data().begin());
  if (rg) {
    record(out, {x}, [x, out, begin, row]() mutable {
      auto g = out.grad();
      auto gx = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[begin * row + i] += g[i];
    });
  }
  return out;
}

Tensor Graph::reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  const bool rg = x.requires_grad();
  Tensor out = make_result(std::move(shape), rg);
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  if (rg) {
    record(out, {x}, [x, out]() mutable {
      auto g = out.grad();
      auto gx = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor Graph::gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
  if (indices.empty()) throw DimensionError("gather_rows: empty index list");
  const std::size_t n_rows = table.dim(0);
  const std::size_t row = table.numel() / n_rows;
  for (auto i : indices) {
    if (i >= n_rows) {
      throw DimensionError("gather_rows: index " + std::to_string(i) + " out of range for " +
                           shape_str(table.shape()));
    }
  }
  Shape s = table.shape();
  s[0] = indices.size();
  const bool rg = table.requires_grad();
  Tensor out = make_result(s, rg);
  auto o = out.data();
  auto tv = table.data();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(tv.begin() + indices[r] * row, row, o.begin() + r * row);
  }
  if (rg) {
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    record(out, {table}, [table, out, idx = std::move(idx), row]() mutable {
      auto g = out.grad();
      auto gt = table.ensure_grad();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t j = 0; j < row; ++j) gt[idx[r] * row + j] += g[r * row + j];
      }
    });
  }
  return out;
}

Tensor Graph::gather_elements(const Tensor& x, std::span<const std::size_t> indices, Shape out_shape) {
  if (shape_numel(out_shape) != indices.size()) {
    throw DimensionError("gather_elements: " + std::to_string(indices.size()) + " indices for shape " +
                         shape_str(out_shape));
  }
  for (auto i : indices) {
    if (i >= x.numel()) throw DimensionError("gather_elements: index out of range");
  }
  const bool rg = x.requires_grad();
  Tensor out = make_result(std::move(out_shape), rg);
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < indices.size(); ++i) o[i] = xv[indices[i]];
  if (rg) {
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    record(out, {x}, [x, out, idx = std::move(idx)]() mutable {
      auto g = out.grad();
      auto gx = x.ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalizations

Tensor Graph::softmax(const Tensor& x, std::size_t axis) {
  const AxisView v = axis_view(x.shape(), axis);
  const bool rg = x.requires_grad();
  Tensor out = make_result(x.shape(), rg);
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t a = 0; a < v.outer; ++a) {
    for (std::size_t c = 0; c < v.inner; ++c) {
      const std::size_t base = a * v.n * v.inner + c;
      double mx = xv[base];
      for (std::size_t i = 1; i < v.n; ++i) mx = std::max(mx, xv[base + i * v.inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < v.n; ++i) {
        const double e = std::exp(xv[base + i * v.inner] - mx);
        o[base + i * v.inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < v.n; ++i) o[base + i * v.inner] /= z;
    }
  }
  if (rg) {
    record(out, {x}, [x, out, v]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto gx = x.ensure_grad();
      for (std::size_t a = 0; a < v.outer; ++a) {
        for (std::size_t c = 0; c < v.inner; ++c) {
          const std::size_t base = a * v.n * v.inner + c;
          double dot = 0.0;
          for (std::size_t i = 0; i < v.n; ++i) dot += g[base + i * v.inner] * y[base + i * v.inner];
          for (std::size_t i = 0; i < v.n; ++i) {
            const std::size_t e = base + i * v.inner;
            gx[e] += y[e] * (g[e] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor Graph::log_softmax(const Tensor& x, std::size_t axis) {
  const AxisView v = axis_view(x.shape(), axis);
  const bool rg = x.requires_grad();
  Tensor out = make_result(x.shape(), rg);
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t a = 0; a < v.outer; ++a) {
    for (std::size_t c = 0; c < v.inner; ++c) {
      const std::size_t base = a * v.n * v.inner + c;
      double mx = xv[base];
      for (std::size_t i = 1; i < v.n; ++i) mx = std::max(mx, xv[base + i * v.inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < v.n; ++i) z += std::exp(xv[base + i * v.inner] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t i = 0; i < v.n; ++i) o[base + i * v.inner] = xv[base + i * v.inner] - lse;
    }
  }
  if (rg) {
    record(out, {x}, [x, out, v]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto gx = x.ensure_grad();
      for (std::size_t a = 0; a < v.outer; ++a) {
        for (std::size_t c = 0; c < v.inner; ++c) {
          const std::size_t base = a * v.n * v.inner + c;
          double gsum = 0.0;
          for (std::size_t i = 0; i < v.n; ++i) gsum += g[base + i * v.inner];
          for (std::size_t i = 0; i < v.n; ++i) {
            const std::size_t e = base + i * v.inner;
            gx[e] += g[e] - std::exp(y[e]) * gsum;
          }
        }
      }
    });
  }
  return out;
}

Tensor Graph::layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = x.last_dim();
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: affine parameters do not match width " + std::to_string(d));
  }
  const std::size_t r = x.rows();
  const bool rg = any_requires_grad({&x, &gamma, &beta});
  Tensor out = make_result(x.shape(), rg);
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(r);
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  auto o = out.data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * rstd[i];
      xhat[i * d + j] = h;
      o[i * d + j] = h * gv[j] + bv[j];
    }
  }
  if (rg) {
    record(out, {x, gamma, beta},
           [x, gamma, beta, out, xhat = std::move(xhat), rstd = std::move(rstd), r, d]() mutable {
             auto g = out.grad();
             auto gv = gamma.data();
             if (gamma.requires_grad() || beta.requires_grad()) {
               std::span<double> gg = gamma.requires_grad() ? gamma.ensure_grad() : std::span<double>{};
               std::span<double> gb = beta.requires_grad() ? beta.ensure_grad() : std::span<double>{};
               for (std::size_t i = 0; i < r; ++i) {
                 for (std::size_t j = 0; j < d; ++j) {
                   if (!gg.empty()) gg[j] += g[i * d + j] * xhat[i * d + j];
                   if (!gb.empty()) gb[j] += g[i * d + j];
                 }
               }
             }
             if (x.requires_grad()) {
               auto gx = x.ensure_grad();
               const double inv_d = 1.0 / static_cast<double>(d);
               for (std::size_t i = 0; i < r; ++i) {
                 double s1 = 0.0, s2 = 0.0;
                 for (std::size_t j = 0; j < d; ++j) {
                   const double dh = g[i * d + j] * gv[j];
                   s1 += dh;
                   s2 += dh * xhat[i * d + j];
                 }
                 for (std::size_t j = 0; j < d; ++j) {
                   const double dh = g[i * d + j] * gv[j];
                   gx[i * d + j] += rstd[i] * (dh - inv_d * s1 - xhat[i * d + j] * inv_d * s2);
                 }
               }
             }
           });
  }
  return out;
}

Tensor Graph::l2_normalize(const Tensor& x, std::size_t axis) {
  const AxisView v = axis_view(x.shape(), axis);
  const bool rg = x.requires_grad();
  Tensor out = make_result(x.shape(), rg);
  std::vector<double> norms(v.outer * v.inner);
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t a = 0; a < v.outer; ++a) {
    for (std::size_t c = 0; c < v.inner; ++c) {
      const std::size_t base = a * v.n * v.inner + c;
      double ss = 0.0;
      for (std::size_t i = 0; i < v.n; ++i) ss += xv[base + i * v.inner] * xv[base + i * v.inner];
      const double nrm = std::max(std::sqrt(ss), 1e-12);
      norms[a * v.inner + c] = nrm;
      for (std::size_t i = 0; i < v.n; ++i) o[base + i * v.inner] = xv[base + i * v.inner] / nrm;
    }
  }
  if (rg) {
    record(out, {x}, [x, out, v, norms = std::move(norms)]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto gx = x.ensure_grad();
      for (std::size_t a = 0; a < v.outer; ++a) {
        for (std::size_t c = 0; c < v.inner; ++c) {
          const std::size_t base = a * v.n * v.inner + c;
          double dot = 0.0;
          for (std::size_t i = 0; i < v.n; ++i) dot += g[base + i * v.inner] * y[base + i * v.inner];
          const double inv = 1.0 / norms[a * v.inner + c];
          for (std::size_t i = 0; i < v.n; ++i) {
            const std::size_t e = base + i * v.inner;
            gx[e] += (g[e] - y[e] * dot) * inv;
          }
        }
      }
    });
  }
  return out;
}

Tensor Graph::bce_with_logits(const Tensor& logits, std::span<const double> labels) {
  if (logits.numel() != labels.size()) {
    throw DimensionError("bce_with_logits: " + std::to_string(labels.size()) + " labels for " +
                         shape_str(logits.shape()));
  }
  const bool rg = logits.requires_grad();
  Tensor out = make_result({1}, rg);
  auto z = logits.data();
  const double n = static_cast<double>(z.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    // -[y log σ(z) + (1-y) log(1-σ(z))] = max(z,0) - y z + log(1 + e^{-|z|})
    acc += std::max(z[i], 0.0) - labels[i] * z[i] + std::log1p(std::exp(-std::abs(z[i])));
  }
  out.data()[0] = acc / n;
  if (rg) {
    std::vector<double> y(labels.begin(), labels.end());
    record(out, {logits}, [logits, out, y = std::move(y), n]() mutable {
      const double g = out.grad()[0] / n;
      auto z = logits.data();
      auto gz = logits.ensure_grad();
      for (std::size_t i = 0; i < z.size(); ++i) {
        const double s = z[i] >= 0 ? 1.0 / (1.0 + std::exp(-z[i])) : std::exp(z[i]) / (1.0 + std::exp(z[i]));
        gz[i] += g * (s - y[i]);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention

Tensor Graph::attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::span<const Segment> segments, std::size_t num_heads,
                        std::vector<double>* probs_out) {
  require_rank2(q, "attention");
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const std::size_t n = q.dim(0), d = q.dim(1);
  if (num_heads == 0 || d % num_heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(num_heads) + " heads");
  }
  std::size_t covered = 0;
  for (const auto& s : segments) {
    if (s.offset != covered || s.length == 0) throw DimensionError("attention: segments must tile the rows");
    covered += s.length;
  }
  if (covered != n) throw DimensionError("attention: segments cover " + std::to_string(covered) + " of " +
                                         std::to_string(n) + " rows");

  const std::size_t dh = d / num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool rg = any_requires_grad({&q, &k, &v});
  Tensor out = make_result({n, d}, rg);

  std::size_t prob_size = 0;
  for (const auto& s : segments) prob_size += num_heads * s.length * s.length;
  Buffer probs(prob_size);

  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
  std::size_t pofs = 0;
  for (const auto& s : segments) {
    const auto L = static_cast<Eigen::Index>(s.length);
    for (std::size_t h = 0; h < num_heads; ++h) {
      const std::size_t base = s.offset * d + h * dh;
      ConstStridedMap Q(q.data().data() + base, L, static_cast<Eigen::Index>(dh), stride);
      ConstStridedMap K(k.data().data() + base, L, static_cast<Eigen::Index>(dh), stride);
      ConstStridedMap V(v.data().data() + base, L, static_cast<Eigen::Index>(dh), stride);
      MatMap P(probs.data() + pofs, L, L);
      P.noalias() = (Q * K.transpose()) * scale;
      for (Eigen::Index i = 0; i < L; ++i) {
        const double mx = P.row(i).maxCoeff();
        P.row(i) = (P.row(i).array() - mx).exp();
        P.row(i) /= P.row(i).sum();
      }
      StridedMap O(out.data().data() + base, L, static_cast<Eigen::Index>(dh), stride);
      O.noalias() = P * V;
      pofs += s.length * s.length;
    }
  }
  if (probs_out) probs_out->assign(probs.begin(), probs.end());

  if (rg) {
    std::vector<Segment> segs(segments.begin(), segments.end());
    record(out, {q, k, v},
           [q, k, v, out, segs = std::move(segs), probs = std::move(probs), num_heads, d, dh, scale]() mutable {
             const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
             const auto DH = static_cast<Eigen::Index>(dh);
             std::span<double> gq = q.requires_grad() ? q.ensure_grad() : std::span<double>{};
             std::span<double> gk = k.requires_grad() ? k.ensure_grad() : std::span<double>{};
             std::span<double> gv = v.requires_grad() ? v.ensure_grad() : std::span<double>{};
             RowMat dP, dS;
             std::size_t pofs = 0;
             for (const auto& s : segs) {
               const auto L = static_cast<Eigen::Index>(s.length);
               for (std::size_t h = 0; h < num_heads; ++h) {
                 const std::size_t base = s.offset * d + h * dh;
                 ConstStridedMap Q(q.data().data() + base, L, DH, stride);
                 ConstStridedMap K(k.data().data() + base, L, DH, stride);
                 ConstStridedMap V(v.data().data() + base, L, DH, stride);
                 ConstStridedMap dO(out.grad().data() + base, L, DH, stride);
                 ConstMatMap P(probs.data() + pofs, L, L);
                 if (!gv.empty()) {
                   StridedMap(gv.data() + base, L, DH, stride).noalias() += P.transpose() * dO;
                 }
                 dP.noalias() = dO * V.transpose();
                 dS = P.array() * (dP.colwise() - (dP.array() * P.array()).rowwise().sum().matrix()).array();
                 if (!gq.empty()) {
                   StridedMap(gq.data() + base, L, DH, stride).noalias() += (dS * K) * scale;
                 }
                 if (!gk.empty()) {
                   StridedMap(gk.data() + base, L, DH, stride).noalias() += (dS.transpose() * Q) * scale;
                 }
                 pofs += s.length * s.length;
               }
             }
           });
  }
  return out;
}

}  // namespace omniflux
