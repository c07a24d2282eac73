#pragma once

// Layer specs, shape inference and parameterized layers built from them.

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "xq/micrograd/tensor.hpp"

namespace xq::mg {

struct LayerSpec;

struct Dense {
  int in = 0, out = 0;
};
struct Conv2D {
  int kernel = 3, in_ch = 0, out_ch = 0, stride = 1;
};
struct LayerNorm {
  int dim = 0;
};
struct MultiHeadAttention {
  int d_model = 0, heads = 1;
};
struct ReLU {};
struct GELU {};
struct Softmax {
  int axis = -1;  // -1/1: over features, 0: over rows of each sample
};
struct Residual {
  std::vector<LayerSpec> block;
};
struct MaxPool2D {};

struct LayerSpec {
  std::variant<Dense, Conv2D, LayerNorm, MultiHeadAttention, ReLU, GELU, Softmax, Residual, MaxPool2D> v;
  template <class S>
  LayerSpec(S s) : v(std::move(s)) {}  // NOLINT: implicit on purpose
};

std::string describe(const LayerSpec& s);

inline std::string describe(const LayerSpec& spec) {
  struct V {
    std::string operator()(const Dense& d) const {
      return "Dense(" + std::to_string(d.in) + "," + std::to_string(d.out) + ")";
    }
    std::string operator()(const Conv2D& c) const {
      return "Conv2D(k=" + std::to_string(c.kernel) + "," + std::to_string(c.in_ch) + "->" + std::to_string(c.out_ch) +
             ",s=" + std::to_string(c.stride) + ")";
    }
    std::string operator()(const LayerNorm& l) const { return "LayerNorm(" + std::to_string(l.dim) + ")"; }
    std::string operator()(const MultiHeadAttention& m) const {
      return "MultiHeadAttention(d=" + std::to_string(m.d_model) + ",h=" + std::to_string(m.heads) + ")";
    }
    std::string operator()(const ReLU&) const { return "ReLU"; }
    std::string operator()(const GELU&) const { return "GELU"; }
    std::string operator()(const Softmax& s) const { return "Softmax(axis=" + std::to_string(s.axis) + ")"; }
    std::string operator()(const Residual& r) const {
      std::string out = "Residual(";
      for (std::size_t i = 0; i < r.block.size(); ++i) out += (i ? "," : "") + describe(r.block[i]);
      return out + ")";
    }
    std::string operator()(const MaxPool2D&) const { return "MaxPool2D(2)"; }
  };
  return std::visit(V{}, spec.v);
}

// Per-sample feature map: h*w rows (cells or tokens) of c features.
struct FeatShape {
  int h = 1, w = 1, c = 0;
  int rows() const { return h * w; }
  friend bool operator==(const FeatShape&, const FeatShape&) = default;
};

inline FeatShape infer_shape(const LayerSpec& spec, FeatShape in) {
  auto need = [&](bool ok, const std::string& why) {
    if (!ok) throw ShapeMismatch(describe(spec) + ": " + why);
  };
  struct V {
    FeatShape in;
    decltype(need)& req;
    FeatShape operator()(const Dense& d) const {
      req(d.in > 0 && d.out > 0, "sizes must be positive");
      req(in.c == d.in, "expects " + std::to_string(d.in) + " features, got " + std::to_string(in.c));
      return {in.h, in.w, d.out};
    }
    FeatShape operator()(const Conv2D& c) const {
      req(c.kernel == 1 || c.kernel == 3 || c.kernel == 7, "kernel must be 1, 3 or 7");
      req(c.stride == 1 || c.stride == 2, "stride must be 1 or 2");
      req(c.in_ch == in.c, "expects " + std::to_string(c.in_ch) + " channels, got " + std::to_string(in.c));
      req(c.out_ch > 0, "out_ch must be positive");
      ConvGeom g{1, in.h, in.w, c.kernel, c.stride, c.kernel / 2};
      req(g.out_h() > 0 && g.out_w() > 0, "input too small");
      return {g.out_h(), g.out_w(), c.out_ch};
    }
    FeatShape operator()(const LayerNorm& l) const {
      req(l.dim == in.c, "expects " + std::to_string(l.dim) + " features, got " + std::to_string(in.c));
      return in;
    }
    FeatShape operator()(const MultiHeadAttention& m) const {
      req(m.heads > 0 && m.d_model % m.heads == 0, "d_model must divide by heads");
      req(m.d_model == in.c, "expects d_model " + std::to_string(m.d_model) + ", got " + std::to_string(in.c));
      return in;
    }
    FeatShape operator()(const ReLU&) const { return in; }
    FeatShape operator()(const GELU&) const { return in; }
    FeatShape operator()(const Softmax& s) const {
      req(s.axis == -1 || s.axis == 0 || s.axis == 1, "axis must be -1, 0 or 1");
      return in;
    }
    FeatShape operator()(const Residual& r) const {
      FeatShape s = in;
      for (const auto& b : r.block) s = infer_shape(b, s);
      req(s == in, "block changes the shape");
      return in;
    }
    FeatShape operator()(const MaxPool2D&) const {
      req(in.h >= 2 && in.w >= 2, "input smaller than 2x2");
      return {in.h / 2, in.w / 2, in.c};
    }
  };
  return std::visit(V{in, need}, spec.v);
}

// Batch of feature maps: x is [batch * h * w, c].
template <class T>
struct Act {
  Var<T> x;
  int batch = 1;
  int h = 1, w = 1;
};

// Portable init draws (no dependence on the standard library's distributions).
struct InitRng {
  std::mt19937_64 gen;
  explicit InitRng(std::uint64_t seed) : gen(seed) {}
  double uniform() { return static_cast<double>(gen() >> 11) * 0x1.0p-53; }
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * uniform());
  }
};

template <class T>
Var<T> xavier(Shape s, int fan_in, int fan_out, InitRng& rng) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::vector<T> v(s.size());
  for (auto& x : v) x = static_cast<T>((2.0 * rng.uniform() - 1.0) * limit);
  return tensor<T>(s, std::move(v), true);
}

template <class T>
Var<T> normal_init(Shape s, double stddev, InitRng& rng) {
  std::vector<T> v(s.size());
  for (auto& x : v) x = static_cast<T>(rng.normal() * stddev);
  return tensor<T>(s, std::move(v), true);
}

template <class T>
Var<T> filled(Shape s, T value) {
  return tensor<T>(s, std::vector<T>(s.size(), value), true);
}

template <class T>
struct NamedParam {
  std::string name;
  Var<T> var;
};

template <class T>
class Layer {
 public:
  Layer(const LayerSpec& spec, InitRng& rng) : spec_(spec) {
    std::visit([&](const auto& s) { init(s, rng); }, spec_.v);
  }

  const LayerSpec& spec() const { return spec_; }

  Act<T> operator()(const Act<T>& a) const {
    return std::visit([&](const auto& s) { return run(s, a); }, spec_.v);
  }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) const {
    for (const auto& [n, v] : params_) out.push_back({prefix + n, v});
    for (std::size_t i = 0; i < children_.size(); ++i)
      children_[i].collect(prefix + std::to_string(i) + ".", out);
  }

 private:
  Var<T> add_param(const std::string& name, Var<T> v) {
    params_.push_back({name, v});
    return v;
  }

  void init(const Dense& d, InitRng& rng) {
    add_param("w", xavier<T>({d.in, d.out}, d.in, d.out, rng));
    add_param("b", filled<T>({1, d.out}, T(0)));
  }
  void init(const Conv2D& c, InitRng& rng) {
    const int kk = c.kernel * c.kernel;
    add_param("w", xavier<T>({kk * c.in_ch, c.out_ch}, kk * c.in_ch, kk * c.out_ch, rng));
    add_param("b", filled<T>({1, c.out_ch}, T(0)));
  }
  void init(const LayerNorm& l, InitRng&) {
    add_param("gamma", filled<T>({1, l.dim}, T(1)));
    add_param("beta", filled<T>({1, l.dim}, T(0)));
  }
  void init(const MultiHeadAttention& m, InitRng& rng) {
    for (const char* n : {"q", "k", "v", "o"}) {
      add_param(std::string(n) + ".w", xavier<T>({m.d_model, m.d_model}, m.d_model, m.d_model, rng));
      add_param(std::string(n) + ".b", filled<T>({1, m.d_model}, T(0)));
    }
  }
  void init(const Residual& r, InitRng& rng) {
    for (const auto& b : r.block) children_.emplace_back(b, rng);
  }
  template <class S>
  void init(const S&, InitRng&) {}

  Var<T> p(std::size_t i) const { return params_[i].var; }

  Act<T> run(const Dense&, const Act<T>& a) const { return {add_tiled(matmul(a.x, p(0)), p(1)), a.batch, a.h, a.w}; }
  Act<T> run(const Conv2D& c, const Act<T>& a) const {
    ConvGeom g{a.batch, a.h, a.w, c.kernel, c.stride, c.kernel / 2};
    return {add_tiled(conv2d(a.x, p(0), g), p(1)), a.batch, g.out_h(), g.out_w()};
  }
  Act<T> run(const LayerNorm&, const Act<T>& a) const {
    return {add_tiled(mul_tiled(layernorm_rows(a.x), p(0)), p(1)), a.batch, a.h, a.w};
  }
  Act<T> run(const MultiHeadAttention& m, const Act<T>& a) const {
    const int dh = m.d_model / m.heads;
    auto q = add_tiled(matmul(a.x, p(0)), p(1));
    auto k = add_tiled(matmul(a.x, p(2)), p(3));
    auto v = add_tiled(matmul(a.x, p(4)), p(5));
    std::vector<Var<T>> heads;
    const T inv = T(1) / std::sqrt(static_cast<T>(dh));
    for (int h = 0; h < m.heads; ++h) {
      auto scores = scale(group_matmul_nt(slice_cols(q, h * dh, dh), slice_cols(k, h * dh, dh), a.batch), inv);
      heads.push_back(group_matmul(softmax_rows(scores), slice_cols(v, h * dh, dh), a.batch));
    }
    auto cat = m.heads == 1 ? heads[0] : concat_cols(heads);
    return {add_tiled(matmul(cat, p(6)), p(7)), a.batch, a.h, a.w};
  }
  Act<T> run(const ReLU&, const Act<T>& a) const { return {relu(a.x), a.batch, a.h, a.w}; }
  Act<T> run(const GELU&, const Act<T>& a) const { return {gelu(a.x), a.batch, a.h, a.w}; }
  Act<T> run(const Softmax& s, const Act<T>& a) const {
    if (s.axis != 0) return {softmax_rows(a.x), a.batch, a.h, a.w};
    // Over the rows of each sample.
    const int n = a.h * a.w;
    Var<T> acc;
    for (int b = 0; b < a.batch; ++b) {
      auto blk = transpose(softmax_rows(transpose(group_rows(a.x, 1, b * n, n))));
      acc = acc ? concat_groups(acc, blk, 1) : blk;
    }
    return {acc, a.batch, a.h, a.w};
  }
  Act<T> run(const Residual&, const Act<T>& a) const {
    Act<T> y = a;
    for (const auto& c : children_) y = c(y);
    detail::require(y.x->shape == a.x->shape, "residual block changed the shape");
    return {add(a.x, y.x), a.batch, a.h, a.w};
  }
  Act<T> run(const MaxPool2D&, const Act<T>& a) const {
    return {maxpool2d(a.x, a.batch, a.h, a.w), a.batch, a.h / 2, a.w / 2};
  }

  LayerSpec spec_;
  std::vector<NamedParam<T>> params_;
  std::vector<Layer> children_;
};

// A chain of layers applied in order.
template <class T>
class Sequential {
 public:
  Sequential() = default;
  Sequential(const std::vector<LayerSpec>& specs, InitRng& rng) {
    for (const auto& s : specs) layers_.emplace_back(s, rng);
  }
  Act<T> operator()(Act<T> a) const {
    for (const auto& l : layers_) a = l(a);
    return a;
  }
  FeatShape infer(FeatShape s) const {
    for (const auto& l : layers_) s = infer_shape(l.spec(), s);
    return s;
  }
  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(prefix + std::to_string(i) + ".", out);
  }
  bool empty() const { return layers_.empty(); }

 private:
  std::vector<Layer<T>> layers_;
};

}  // namespace xq::mg
