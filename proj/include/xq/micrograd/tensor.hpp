#pragma once

// Define-by-run reverse-mode autodiff over 2-D row-major tensors.
//
// Activations are matrices whose rows are cells/tokens (possibly stacked over
// a batch) and whose columns are features. Ops that need spatial or grouping
// structure take it as explicit arguments.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iterator>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "xq/errors.hpp"

namespace xq::mg {

struct Shape {
  int rows = 0;
  int cols = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
  friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(Shape s) { return "[" + std::to_string(s.rows) + "," + std::to_string(s.cols) + "]"; }

enum class Op {
  Leaf, MatMul, MatMulNT, GroupMatMulNT, GroupMatMul, Add, Sub, Mul, Scale, AddScalar, AddTiled, MulTiled,
  Relu, Gelu, Tanh, Exp, Log, Square, Sum, MeanGroups, SoftmaxRows, LayerNormRows, Conv2D, MaxPool2D,
  SliceCols, ConcatCols, GroupRows, ConcatGroups, RepeatRows, Reshape, Transpose, MaskedLogSoftmax, Pick, PairSum,
};

inline constexpr const char* kOpNames[] = {
    "leaf", "matmul", "matmul_nt", "group_matmul_nt", "group_matmul", "add", "sub", "mul", "scale", "add_scalar",
    "add_tiled", "mul_tiled", "relu", "gelu", "tanh", "exp", "log", "square", "sum", "mean_groups", "softmax_rows",
    "layernorm_rows", "conv2d", "maxpool2d", "slice_cols", "concat_cols", "group_rows", "concat_groups", "repeat_rows",
    "reshape", "transpose", "masked_log_softmax", "pick", "pair_sum",
};

inline std::string op_name(Op op) { return kOpNames[static_cast<int>(op)]; }

inline std::optional<Op> op_from_name(std::string_view name) {
  for (int i = 0; i < static_cast<int>(std::size(kOpNames)); ++i)
    if (name == kOpNames[i]) return static_cast<Op>(i);
  return std::nullopt;
}

template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something flows into it
  std::vector<std::shared_ptr<Tensor>> parents;
  std::function<void(Tensor&)> backward_fn;
  bool requires_grad = false;
  Op op = Op::Leaf;

  T& operator()(int r, int c) { return value[static_cast<std::size_t>(r) * shape.cols + c]; }
  T operator()(int r, int c) const { return value[static_cast<std::size_t>(r) * shape.cols + c]; }
  T item() const { return value.at(0); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <class T>
using Var = std::shared_ptr<Tensor<T>>;

namespace detail {
inline thread_local int no_grad_depth = 0;
// Op whose backward rule gets its sign flipped; Leaf means none. Test fixture
// for checking that the gradient checker actually catches broken rules.
inline std::atomic<Op> fault_op{Op::Leaf};
}  // namespace detail

struct NoGrad {
  NoGrad() { ++detail::no_grad_depth; }
  ~NoGrad() { --detail::no_grad_depth; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

struct FaultInjection {
  explicit FaultInjection(Op op) { detail::fault_op = op; }
  ~FaultInjection() { detail::fault_op = Op::Leaf; }
};

template <class T>
Var<T> tensor(Shape s, std::vector<T> v, bool requires_grad = false) {
  if (v.size() != s.size()) throw ShapeMismatch("data length " + std::to_string(v.size()) + " != " + to_string(s));
  auto t = std::make_shared<Tensor<T>>();
  t->shape = s;
  t->value = std::move(v);
  t->requires_grad = requires_grad;
  return t;
}

template <class T>
Var<T> zeros(Shape s, bool requires_grad = false) {
  return tensor<T>(s, std::vector<T>(s.size(), T(0)), requires_grad);
}

template <class T>
Var<T> scalar(T v) {
  return tensor<T>({1, 1}, {v});
}

namespace detail {

template <class T>
Var<T> make(Shape s, Op op, std::vector<Var<T>> parents, std::vector<T> value = {}) {
  auto t = std::make_shared<Tensor<T>>();
  t->shape = s;
  t->op = op;
  t->value = value.empty() ? std::vector<T>(s.size(), T(0)) : std::move(value);
  if (grad_enabled())
    for (auto& p : parents)
      if (p->requires_grad) t->requires_grad = true;
  if (t->requires_grad) t->parents = std::move(parents);
  return t;
}

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using CMap = Eigen::Map<const MatR<T>>;
template <class T>
using MMap = Eigen::Map<MatR<T>>;

template <class T>
CMap<T> cmap(const std::vector<T>& v, int r, int c, std::size_t off = 0) {
  return CMap<T>(v.data() + off, r, c);
}
template <class T>
MMap<T> mmap(std::vector<T>& v, int r, int c, std::size_t off = 0) {
  return MMap<T>(v.data() + off, r, c);
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeMismatch(what);
}

}  // namespace detail

// Reverse-topological sweep from a scalar. Gradients accumulate into every
// tensor that requires them, so shared subexpressions sum their contributions.
template <class T>
void backward(const Var<T>& loss) {
  detail::require(loss->shape.size() == 1, "backward needs a scalar, got " + to_string(loss->shape));
  std::vector<Tensor<T>*> order;
  std::unordered_set<Tensor<T>*> seen;
  std::vector<std::pair<Tensor<T>*, std::size_t>> stack{{loss.get(), 0}};
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Tensor<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss->ensure_grad();
  loss->grad[0] += T(1);
  const Op fault = detail::fault_op.load();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Tensor<T>& n = **it;
    if (!n.backward_fn || n.grad.empty()) continue;
    for (auto& p : n.parents)
      if (p->requires_grad) p->ensure_grad();
    if (n.op == fault) {
      for (auto& g : n.grad) g = -g;
      n.backward_fn(n);
      for (auto& g : n.grad) g = -g;
    } else {
      n.backward_fn(n);
    }
  }
}

// ---------------------------------------------------------------- linear algebra

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  using namespace detail;
  require(a->shape.cols == b->shape.rows, "matmul " + to_string(a->shape) + " x " + to_string(b->shape));
  const int m = a->shape.rows, k = a->shape.cols, n = b->shape.cols;
  auto out = make<T>({m, n}, Op::MatMul, {a, b});
  mmap(out->value, m, n).noalias() = cmap(a->value, m, k) * cmap(b->value, k, n);
  if (out->requires_grad)
    out->backward_fn = [m, k, n](Tensor<T>& o) {
      auto& A = *o.parents[0];
      auto& B = *o.parents[1];
      const auto g = cmap(o.grad, m, n);
      if (A.requires_grad) mmap(A.grad, m, k).noalias() += g * cmap(B.value, k, n).transpose();
      if (B.requires_grad) mmap(B.grad, k, n).noalias() += cmap(A.value, m, k).transpose() * g;
    };
  return out;
}

// a * b^T
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  using namespace detail;
  require(a->shape.cols == b->shape.cols, "matmul_nt " + to_string(a->shape) + " x " + to_string(b->shape));
  const int m = a->shape.rows, k = a->shape.cols, n = b->shape.rows;
  auto out = make<T>({m, n}, Op::MatMulNT, {a, b});
  mmap(out->value, m, n).noalias() = cmap(a->value, m, k) * cmap(b->value, n, k).transpose();
  if (out->requires_grad)
    out->backward_fn = [m, k, n](Tensor<T>& o) {
      auto& A = *o.parents[0];
      auto& B = *o.parents[1];
      const auto g = cmap(o.grad, m, n);
      if (A.requires_grad) mmap(A.grad, m, k).noalias() += g * cmap(B.value, n, k);
      if (B.requires_grad) mmap(B.grad, n, k).noalias() += g.transpose() * cmap(A.value, m, k);
    };
  return out;
}

// Per group g: A_g [n, d] times B_g^T [d, m] -> [n, m]; results stacked by group.
template <class T>
Var<T> group_matmul_nt(const Var<T>& a, const Var<T>& b, int groups) {
  using namespace detail;
  require(groups > 0 && a->shape.rows % groups == 0 && b->shape.rows % groups == 0 && a->shape.cols == b->shape.cols,
          "group_matmul_nt " + to_string(a->shape) + " x " + to_string(b->shape));
  const int n = a->shape.rows / groups, m = b->shape.rows / groups, d = a->shape.cols;
  auto out = make<T>({groups * n, m}, Op::GroupMatMulNT, {a, b});
  for (int g = 0; g < groups; ++g)
    mmap(out->value, n, m, std::size_t(g) * n * m).noalias() =
        cmap(a->value, n, d, std::size_t(g) * n * d) * cmap(b->value, m, d, std::size_t(g) * m * d).transpose();
  if (out->requires_grad)
    out->backward_fn = [groups, n, m, d](Tensor<T>& o) {
      auto& A = *o.parents[0];
      auto& B = *o.parents[1];
      for (int g = 0; g < groups; ++g) {
        const auto G = cmap(o.grad, n, m, std::size_t(g) * n * m);
        if (A.requires_grad)
          mmap(A.grad, n, d, std::size_t(g) * n * d).noalias() += G * cmap(B.value, m, d, std::size_t(g) * m * d);
        if (B.requires_grad)
          mmap(B.grad, m, d, std::size_t(g) * m * d).noalias() +=
              G.transpose() * cmap(A.value, n, d, std::size_t(g) * n * d);
      }
    };
  return out;
}

// Per group g: P_g [n, m] times V_g [m, d] -> [n, d].
template <class T>
Var<T> group_matmul(const Var<T>& p, const Var<T>& v, int groups) {
  using namespace detail;
  require(groups > 0 && p->shape.rows % groups == 0 && v->shape.rows % groups == 0 &&
              p->shape.cols == v->shape.rows / groups,
          "group_matmul " + to_string(p->shape) + " x " + to_string(v->shape));
  const int n = p->shape.rows / groups, m = p->shape.cols, d = v->shape.cols;
  auto out = make<T>({groups * n, d}, Op::GroupMatMul, {p, v});
  for (int g = 0; g < groups; ++g)
    mmap(out->value, n, d, std::size_t(g) * n * d).noalias() =
        cmap(p->value, n, m, std::size_t(g) * n * m) * cmap(v->value, m, d, std::size_t(g) * m * d);
  if (out->requires_grad)
    out->backward_fn = [groups, n, m, d](Tensor<T>& o) {
      auto& P = *o.parents[0];
      auto& V = *o.parents[1];
      for (int g = 0; g < groups; ++g) {
        const auto G = cmap(o.grad, n, d, std::size_t(g) * n * d);
        if (P.requires_grad)
          mmap(P.grad, n, m, std::size_t(g) * n * m).noalias() +=
              G * cmap(V.value, m, d, std::size_t(g) * m * d).transpose();
        if (V.requires_grad)
          mmap(V.grad, m, d, std::size_t(g) * m * d).noalias() +=
              cmap(P.value, n, m, std::size_t(g) * n * m).transpose() * G;
      }
    };
  return out;
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  using namespace detail;
  const int r = a->shape.rows, c = a->shape.cols;
  auto out = make<T>({c, r}, Op::Transpose, {a});
  mmap(out->value, c, r) = cmap(a->value, r, c).transpose();
  if (out->requires_grad)
    out->backward_fn = [r, c](Tensor<T>& o) { mmap(o.parents[0]->grad, r, c) += cmap(o.grad, c, r).transpose(); };
  return out;
}

// ---------------------------------------------------------------- elementwise

namespace detail {

// out = f(a) elementwise, da += g * df(a, out)
template <class T, class F, class D>
Var<T> unary(const Var<T>& a, Op op, F f, D df) {
  auto out = make<T>(a->shape, op, {a});
  for (std::size_t i = 0; i < a->value.size(); ++i) out->value[i] = f(a->value[i]);
  if (out->requires_grad)
    out->backward_fn = [df](Tensor<T>& o) {
      auto& A = *o.parents[0];
      for (std::size_t i = 0; i < o.grad.size(); ++i) A.grad[i] += o.grad[i] * df(A.value[i], o.value[i]);
    };
  return out;
}

}  // namespace detail

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require(a->shape == b->shape, "add " + to_string(a->shape) + " + " + to_string(b->shape));
  auto out = detail::make<T>(a->shape, Op::Add, {a, b});
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = a->value[i] + b->value[i];
  if (out->requires_grad)
    out->backward_fn = [](Tensor<T>& o) {
      for (auto& p : o.parents)
        if (p->requires_grad)
          for (std::size_t i = 0; i < o.grad.size(); ++i) p->grad[i] += o.grad[i];
    };
  return out;
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require(a->shape == b->shape, "sub " + to_string(a->shape) + " - " + to_string(b->shape));
  auto out = detail::make<T>(a->shape, Op::Sub, {a, b});
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = a->value[i] - b->value[i];
  if (out->requires_grad)
    out->backward_fn = [](Tensor<T>& o) {
      auto& A = *o.parents[0];
      auto& B = *o.parents[1];
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        if (A.requires_grad) A.grad[i] += o.grad[i];
        if (B.requires_grad) B.grad[i] -= o.grad[i];
      }
    };
  return out;
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require(a->shape == b->shape, "mul " + to_string(a->shape) + " * " + to_string(b->shape));
  auto out = detail::make<T>(a->shape, Op::Mul, {a, b});
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = a->value[i] * b->value[i];
  if (out->requires_grad)
    out->backward_fn = [](Tensor<T>& o) {
      auto& A = *o.parents[0];
      auto& B = *o.parents[1];
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        if (A.requires_grad) A.grad[i] += o.grad[i] * B.value[i];
        if (B.requires_grad) B.grad[i] += o.grad[i] * A.value[i];
      }
    };
  return out;
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  return detail::unary(a, Op::Scale, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return detail::unary(a, Op::AddScalar, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return detail::unary(a, Op::Relu, [](T x) { return x > 0 ? x : T(0); }, [](T x, T) { return x > 0 ? T(1) : T(0); });
}

// Exact (erf) GELU.
template <class T>
Var<T> gelu(const Var<T>& a) {
  const T inv_sqrt2 = T(0.70710678118654752440);
  const T inv_sqrt2pi = T(0.39894228040143267794);
  return detail::unary(
      a, Op::Gelu, [=](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [=](T x, T) { return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(T(-0.5) * x * x); });
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  return detail::unary(a, Op::Tanh, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var<T> exp(const Var<T>& a) {
  return detail::unary(a, Op::Exp, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Var<T> log(const Var<T>& a) {
  return detail::unary(a, Op::Log, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
Var<T> square(const Var<T>& a) {
  return detail::unary(a, Op::Square, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// x [q*r, c] + p [r, c] repeated down the rows (bias add when r == 1).
template <class T>
Var<T> add_tiled(const Var<T>& x, const Var<T>& p) {
  detail::require(p->shape.cols == x->shape.cols && p->shape.rows > 0 && x->shape.rows % p->shape.rows == 0,
                  "add_tiled " + to_string(x->shape) + " + " + to_string(p->shape));
  auto out = detail::make<T>(x->shape, Op::AddTiled, {x, p});
  const std::size_t period = p->value.size();
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = x->value[i] + p->value[i % period];
  if (out->requires_grad)
    out->backward_fn = [period](Tensor<T>& o) {
      auto& X = *o.parents[0];
      auto& P = *o.parents[1];
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        if (X.requires_grad) X.grad[i] += o.grad[i];
        if (P.requires_grad) P.grad[i % period] += o.grad[i];
      }
    };
  return out;
}

// x [n, c] * p [1, c] per column.
template <class T>
Var<T> mul_tiled(const Var<T>& x, const Var<T>& p) {
  detail::require(p->shape.rows == 1 && p->shape.cols == x->shape.cols,
                  "mul_tiled " + to_string(x->shape) + " * " + to_string(p->shape));
  auto out = detail::make<T>(x->shape, Op::MulTiled, {x, p});
  const std::size_t c = p->value.size();
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = x->value[i] * p->value[i % c];
  if (out->requires_grad)
    out->backward_fn = [c](Tensor<T>& o) {
      auto& X = *o.parents[0];
      auto& P = *o.parents[1];
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        if (X.requires_grad) X.grad[i] += o.grad[i] * P.value[i % c];
        if (P.requires_grad) P.grad[i % c] += o.grad[i] * X.value[i];
      }
    };
  return out;
}

// ---------------------------------------------------------------- reductions

template <class T>
Var<T> sum(const Var<T>& a) {
  auto out = detail::make<T>({1, 1}, Op::Sum, {a});
  T s = 0;
  for (T v : a->value) s += v;
  out->value[0] = s;
  if (out->requires_grad)
    out->backward_fn = [](Tensor<T>& o) {
      for (auto& g : o.parents[0]->grad) g += o.grad[0];
    };
  return out;
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a->value.size()));
}

// x [G*n, c] -> [G, c], mean over each group's n rows.
template <class T>
Var<T> mean_groups(const Var<T>& x, int groups) {
  detail::require(groups > 0 && x->shape.rows % groups == 0, "mean_groups " + to_string(x->shape));
  const int n = x->shape.rows / groups, c = x->shape.cols;
  auto out = detail::make<T>({groups, c}, Op::MeanGroups, {x});
  for (int g = 0; g < groups; ++g)
    for (int r = 0; r < n; ++r)
      for (int j = 0; j < c; ++j) out->value[g * c + j] += x->value[(std::size_t(g) * n + r) * c + j] / T(n);
  if (out->requires_grad)
    out->backward_fn = [groups, n, c](Tensor<T>& o) {
      auto& X = *o.parents[0];
      for (int g = 0; g < groups; ++g)
        for (int r = 0; r < n; ++r)
          for (int j = 0; j < c; ++j) X.grad[(std::size_t(g) * n + r) * c + j] += o.grad[g * c + j] / T(n);
    };
  return out;
}

// ---------------------------------------------------------------- normalization

template <class T>
Var<T> softmax_rows(const Var<T>& a) {
  const int r = a->shape.rows, c = a->shape.cols;
  auto out = detail::make<T>(a->shape, Op::SoftmaxRows, {a});
  for (int i = 0; i < r; ++i) {
    const T* x = a->value.data() + std::size_t(i) * c;
    T* y = out->value.data() + std::size_t(i) * c;
    const T mx = *std::max_element(x, x + c);
    T z = 0;
    for (int j = 0; j < c; ++j) z += y[j] = std::exp(x[j] - mx);
    for (int j = 0; j < c; ++j) y[j] /= z;
  }
  if (out->requires_grad)
    out->backward_fn = [r, c](Tensor<T>& o) {
      auto& A = *o.parents[0];
      for (int i = 0; i < r; ++i) {
        const std::size_t off = std::size_t(i) * c;
        T dot = 0;
        for (int j = 0; j < c; ++j) dot += o.grad[off + j] * o.value[off + j];
        for (int j = 0; j < c; ++j) A.grad[off + j] += o.value[off + j] * (o.grad[off + j] - dot);
      }
    };
  return out;
}

// Per-row standardization, no affine part.
template <class T>
Var<T> layernorm_rows(const Var<T>& a, T eps = T(1e-5)) {
  const int r = a->shape.rows, c = a->shape.cols;
  auto out = detail::make<T>(a->shape, Op::LayerNormRows, {a});
  std::vector<T> inv_std(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    const T* x = a->value.data() + std::size_t(i) * c;
    T mu = 0, var = 0;
    for (int j = 0; j < c; ++j) mu += x[j];
    mu /= T(c);
    for (int j = 0; j < c; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= T(c);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (int j = 0; j < c; ++j) out->value[std::size_t(i) * c + j] = (x[j] - mu) * inv_std[i];
  }
  if (out->requires_grad)
    out->backward_fn = [r, c, inv_std = std::move(inv_std)](Tensor<T>& o) {
      auto& A = *o.parents[0];
      for (int i = 0; i < r; ++i) {
        const std::size_t off = std::size_t(i) * c;
        T gm = 0, gy = 0;
        for (int j = 0; j < c; ++j) {
          gm += o.grad[off + j];
          gy += o.grad[off + j] * o.value[off + j];
        }
        gm /= T(c);
        gy /= T(c);
        for (int j = 0; j < c; ++j) A.grad[off + j] += inv_std[i] * (o.grad[off + j] - gm - o.value[off + j] * gy);
      }
    };
  return out;
}

// ---------------------------------------------------------------- spatial

struct ConvGeom {
  int batch = 1, h = 0, w = 0, k = 1, stride = 1, pad = 0;
  int out_h() const { return (h + 2 * pad - k) / stride + 1; }
  int out_w() const { return (w + 2 * pad - k) / stride + 1; }
};

// x [B*H*W, Cin] (HWC per sample), weight [k*k*Cin, Cout] -> [B*H'*W', Cout].
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, ConvGeom g) {
  using namespace detail;
  const int cin = x->shape.cols;
  require(x->shape.rows == g.batch * g.h * g.w, "conv2d input " + to_string(x->shape) + " vs spatial geometry");
  require(weight->shape.rows == g.k * g.k * cin, "conv2d weight " + to_string(weight->shape));
  const int oh = g.out_h(), ow = g.out_w(), cout = weight->shape.cols;
  require(oh > 0 && ow > 0, "conv2d output would be empty");
  const int rows = g.batch * oh * ow, kk = g.k * g.k * cin;
  // Column matrix: for every output cell, the flattened receptive field.
  std::vector<int> src(std::size_t(rows) * g.k * g.k, -1);
  for (int b = 0; b < g.batch; ++b)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        const int row = (b * oh + oy) * ow + ox;
        for (int ky = 0; ky < g.k; ++ky)
          for (int kx = 0; kx < g.k; ++kx) {
            const int iy = oy * g.stride + ky - g.pad, ix = ox * g.stride + kx - g.pad;
            if (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w)
              src[std::size_t(row) * g.k * g.k + ky * g.k + kx] = (b * g.h + iy) * g.w + ix;
          }
      }
  std::vector<T> cols(std::size_t(rows) * kk, T(0));
  for (std::size_t t = 0; t < src.size(); ++t)
    if (src[t] >= 0) std::copy_n(x->value.data() + std::size_t(src[t]) * cin, cin, cols.data() + t * cin);
  auto out = make<T>({rows, cout}, Op::Conv2D, {x, weight});
  mmap(out->value, rows, cout).noalias() = cmap(cols, rows, kk) * cmap(weight->value, kk, cout);
  if (out->requires_grad)
    out->backward_fn = [rows, kk, cout, cin, src = std::move(src), cols = std::move(cols)](Tensor<T>& o) {
      auto& X = *o.parents[0];
      auto& W = *o.parents[1];
      const auto G = cmap(o.grad, rows, cout);
      if (W.requires_grad) mmap(W.grad, kk, cout).noalias() += cmap(cols, rows, kk).transpose() * G;
      if (X.requires_grad) {
        MatR<T> dcols = G * cmap(W.value, kk, cout).transpose();
        for (std::size_t t = 0; t < src.size(); ++t)
          if (src[t] >= 0)
            for (int c = 0; c < cin; ++c) X.grad[std::size_t(src[t]) * cin + c] += dcols.data()[t * cin + c];
      }
    };
  return out;
}

// 2x2, stride 2, floor on odd sizes.
template <class T>
Var<T> maxpool2d(const Var<T>& x, int batch, int h, int w) {
  detail::require(x->shape.rows == batch * h * w, "maxpool2d input " + to_string(x->shape));
  const int oh = h / 2, ow = w / 2, c = x->shape.cols;
  detail::require(oh > 0 && ow > 0, "maxpool2d input too small");
  auto out = detail::make<T>({batch * oh * ow, c}, Op::MaxPool2D, {x});
  std::vector<int> arg(out->value.size());
  for (int b = 0; b < batch; ++b)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox)
        for (int ch = 0; ch < c; ++ch) {
          int best = -1;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const int idx = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
              if (best < 0 || x->value[idx] > x->value[best]) best = idx;
            }
          const std::size_t o = std::size_t((b * oh + oy) * ow + ox) * c + ch;
          arg[o] = best;
          out->value[o] = x->value[best];
        }
  if (out->requires_grad)
    out->backward_fn = [arg = std::move(arg)](Tensor<T>& o) {
      for (std::size_t i = 0; i < arg.size(); ++i) o.parents[0]->grad[arg[i]] += o.grad[i];
    };
  return out;
}

// ---------------------------------------------------------------- structural

template <class T>
Var<T> reshape(const Var<T>& a, Shape s) {
  detail::require(s.size() == a->shape.size(), "reshape " + to_string(a->shape) + " -> " + to_string(s));
  auto out = detail::make<T>(s, Op::Reshape, {a}, a->value);
  if (out->requires_grad)
    out->backward_fn = [](Tensor<T>& o) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) o.parents[0]->grad[i] += o.grad[i];
    };
  return out;
}

template <class T>
Var<T> slice_cols(const Var<T>& a, int begin, int count) {
  const int r = a->shape.rows, c = a->shape.cols;
  detail::require(begin >= 0 && count > 0 && begin + count <= c, "slice_cols out of range on " + to_string(a->shape));
  auto out = detail::make<T>({r, count}, Op::SliceCols, {a});
  for (int i = 0; i < r; ++i)
    std::copy_n(a->value.data() + std::size_t(i) * c + begin, count, out->value.data() + std::size_t(i) * count);
  if (out->requires_grad)
    out->backward_fn = [r, c, begin, count](Tensor<T>& o) {
      auto& A = *o.parents[0];
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < count; ++j) A.grad[std::size_t(i) * c + begin + j] += o.grad[std::size_t(i) * count + j];
    };
  return out;
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat_cols of nothing");
  const int r = parts[0]->shape.rows;
  int c = 0;
  for (auto& p : parts) {
    detail::require(p->shape.rows == r, "concat_cols row mismatch");
    c += p->shape.cols;
  }
  auto out = detail::make<T>({r, c}, Op::ConcatCols, parts);
  int off = 0;
  for (auto& p : parts) {
    const int pc = p->shape.cols;
    for (int i = 0; i < r; ++i)
      std::copy_n(p->value.data() + std::size_t(i) * pc, pc, out->value.data() + std::size_t(i) * c + off);
    off += pc;
  }
  if (out->requires_grad)
    out->backward_fn = [r, c](Tensor<T>& o) {
      int off = 0;
      for (auto& p : o.parents) {
        const int pc = p->shape.cols;
        if (p->requires_grad)
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < pc; ++j) p->grad[std::size_t(i) * pc + j] += o.grad[std::size_t(i) * c + off + j];
        off += pc;
      }
    };
  return out;
}

// x [G*n, c] -> rows [begin, begin+count) of every group, [G*count, c].
template <class T>
Var<T> group_rows(const Var<T>& x, int groups, int begin, int count) {
  detail::require(groups > 0 && x->shape.rows % groups == 0, "group_rows " + to_string(x->shape));
  const int n = x->shape.rows / groups, c = x->shape.cols;
  detail::require(begin >= 0 && count > 0 && begin + count <= n, "group_rows range");
  auto out = detail::make<T>({groups * count, c}, Op::GroupRows, {x});
  for (int g = 0; g < groups; ++g)
    std::copy_n(x->value.data() + (std::size_t(g) * n + begin) * c, std::size_t(count) * c,
                out->value.data() + std::size_t(g) * count * c);
  if (out->requires_grad)
    out->backward_fn = [groups, n, c, begin, count](Tensor<T>& o) {
      auto& X = *o.parents[0];
      for (int g = 0; g < groups; ++g)
        for (std::size_t i = 0; i < std::size_t(count) * c; ++i)
          X.grad[(std::size_t(g) * n + begin) * c + i] += o.grad[std::size_t(g) * count * c + i];
    };
  return out;
}

// Per group: a_g rows then b_g rows.
template <class T>
Var<T> concat_groups(const Var<T>& a, const Var<T>& b, int groups) {
  detail::require(groups > 0 && a->shape.cols == b->shape.cols && a->shape.rows % groups == 0 &&
                      b->shape.rows % groups == 0,
                  "concat_groups " + to_string(a->shape) + " ++ " + to_string(b->shape));
  const int na = a->shape.rows / groups, nb = b->shape.rows / groups, c = a->shape.cols;
  auto out = detail::make<T>({a->shape.rows + b->shape.rows, c}, Op::ConcatGroups, {a, b});
  for (int g = 0; g < groups; ++g) {
    T* dst = out->value.data() + std::size_t(g) * (na + nb) * c;
    std::copy_n(a->value.data() + std::size_t(g) * na * c, std::size_t(na) * c, dst);
    std::copy_n(b->value.data() + std::size_t(g) * nb * c, std::size_t(nb) * c, dst + std::size_t(na) * c);
  }
  if (out->requires_grad)
    out->backward_fn = [groups, na, nb, c](Tensor<T>& o) {
      auto& A = *o.parents[0];
      auto& B = *o.parents[1];
      for (int g = 0; g < groups; ++g) {
        const T* src = o.grad.data() + std::size_t(g) * (na + nb) * c;
        if (A.requires_grad)
          for (std::size_t i = 0; i < std::size_t(na) * c; ++i) A.grad[std::size_t(g) * na * c + i] += src[i];
        if (B.requires_grad)
          for (std::size_t i = 0; i < std::size_t(nb) * c; ++i)
            B.grad[std::size_t(g) * nb * c + i] += src[std::size_t(na) * c + i];
      }
    };
  return out;
}

template <class T>
Var<T> repeat_rows(const Var<T>& a, int times) {
  detail::require(times > 0, "repeat_rows needs times > 0");
  const std::size_t n = a->value.size();
  auto out = detail::make<T>({a->shape.rows * times, a->shape.cols}, Op::RepeatRows, {a});
  for (int t = 0; t < times; ++t) std::copy_n(a->value.data(), n, out->value.data() + t * n);
  if (out->requires_grad)
    out->backward_fn = [n](Tensor<T>& o) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) o.parents[0]->grad[i % n] += o.grad[i];
    };
  return out;
}

// ---------------------------------------------------------------- policy helpers

// Row-wise log-softmax restricted to entries where mask[row][j] is true.
// Masked entries come out as 0 and receive no gradient.
template <class T, class Masks>
Var<T> masked_log_softmax(const Var<T>& x, const Masks& masks) {
  const int r = x->shape.rows, c = x->shape.cols;
  detail::require(static_cast<int>(masks.size()) == r, "masked_log_softmax: one mask per row");
  std::vector<std::uint8_t> legal(std::size_t(r) * c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) legal[std::size_t(i) * c + j] = masks[i][j] ? 1 : 0;
  auto out = detail::make<T>(x->shape, Op::MaskedLogSoftmax, {x});
  for (int i = 0; i < r; ++i) {
    const std::size_t off = std::size_t(i) * c;
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < c; ++j)
      if (legal[off + j]) mx = std::max(mx, x->value[off + j]);
    if (!std::isfinite(mx)) throw DomainError("masked_log_softmax: row " + std::to_string(i) + " has no legal entry");
    T z = 0;
    for (int j = 0; j < c; ++j)
      if (legal[off + j]) z += std::exp(x->value[off + j] - mx);
    const T lse = mx + std::log(z);
    for (int j = 0; j < c; ++j)
      if (legal[off + j]) out->value[off + j] = x->value[off + j] - lse;
  }
  if (out->requires_grad)
    out->backward_fn = [r, c, legal = std::move(legal)](Tensor<T>& o) {
      auto& X = *o.parents[0];
      for (int i = 0; i < r; ++i) {
        const std::size_t off = std::size_t(i) * c;
        T gsum = 0;
        for (int j = 0; j < c; ++j)
          if (legal[off + j]) gsum += o.grad[off + j];
        for (int j = 0; j < c; ++j)
          if (legal[off + j]) X.grad[off + j] += o.grad[off + j] - std::exp(o.value[off + j]) * gsum;
      }
    };
  return out;
}

// x [B, N], one column per row -> [B, 1].
template <class T>
Var<T> pick(const Var<T>& x, const std::vector<int>& idx) {
  const int r = x->shape.rows, c = x->shape.cols;
  detail::require(static_cast<int>(idx.size()) == r, "pick: one index per row");
  for (int i : idx) detail::require(i >= 0 && i < c, "pick index out of range");
  auto out = detail::make<T>({r, 1}, Op::Pick, {x});
  for (int i = 0; i < r; ++i) out->value[i] = x->value[std::size_t(i) * c + idx[i]];
  if (out->requires_grad)
    out->backward_fn = [c, idx](Tensor<T>& o) {
      for (std::size_t i = 0; i < idx.size(); ++i) o.parents[0]->grad[i * c + idx[i]] += o.grad[i];
    };
  return out;
}

// out[b, f*m + t] = s[b, slot[b][f]] + d[b, t]; rows with slot -1 are 0.
// Joins a factorized (piece slot, destination) head into flat action logits.
template <class T>
Var<T> pair_sum(const Var<T>& s, const Var<T>& d, const std::vector<std::vector<int>>& slot) {
  const int b = s->shape.rows, ns = s->shape.cols, m = d->shape.cols;
  detail::require(d->shape.rows == b && static_cast<int>(slot.size()) == b, "pair_sum batch mismatch");
  const int f = static_cast<int>(slot[0].size());
  auto out = detail::make<T>({b, f * m}, Op::PairSum, {s, d});
  for (int i = 0; i < b; ++i)
    for (int a = 0; a < f; ++a) {
      const int k = slot[i][a];
      if (k < 0) continue;
      detail::require(k < ns, "pair_sum slot out of range");
      for (int t = 0; t < m; ++t)
        out->value[std::size_t(i) * f * m + a * m + t] = s->value[std::size_t(i) * ns + k] + d->value[std::size_t(i) * m + t];
    }
  if (out->requires_grad)
    out->backward_fn = [b, ns, m, f, slot](Tensor<T>& o) {
      auto& S = *o.parents[0];
      auto& D = *o.parents[1];
      for (int i = 0; i < b; ++i)
        for (int a = 0; a < f; ++a) {
          const int k = slot[i][a];
          if (k < 0) continue;
          for (int t = 0; t < m; ++t) {
            const T g = o.grad[std::size_t(i) * f * m + a * m + t];
            if (S.requires_grad) S.grad[std::size_t(i) * ns + k] += g;
            if (D.requires_grad) D.grad[std::size_t(i) * m + t] += g;
          }
        }
    };
  return out;
}

}  // namespace xq::mg
