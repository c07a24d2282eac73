#pragma once

// Analytic vs central-difference gradients for a single layer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "xq/micrograd/layers.hpp"

namespace xq::mg {

// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true gradient
// is ~0 from turning rounding noise into huge ratios.
inline double rel_error(double analytic, double numeric, double floor = 1e-4) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Max relative error of d(loss)/d(entry) over every entry of `inputs`, where
// `loss` rebuilds the graph from the current input values.
inline double check_gradients(const std::vector<Var<double>>& inputs, const std::function<Var<double>()>& loss,
                              double h = 1e-5) {
  for (auto& in : inputs) in->zero_grad();
  backward(loss());
  std::vector<std::vector<double>> analytic;
  for (auto& in : inputs) {
    in->ensure_grad();
    analytic.push_back(in->grad);
  }
  double worst = 0;
  NoGrad off;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& v = inputs[k]->value;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double saved = v[i];
      v[i] = saved + h;
      const double up = loss()->item();
      v[i] = saved - h;
      const double down = loss()->item();
      v[i] = saved;
      worst = std::max(worst, rel_error(analytic[k][i], (up - down) / (2 * h)));
    }
  }
  return worst;
}

// Small input geometry used to exercise a spec.
inline FeatShape probe_shape(const LayerSpec& spec) {
  struct V {
    FeatShape operator()(const Dense& d) const { return {2, 3, d.in}; }
    FeatShape operator()(const Conv2D& c) const { return {5, 5, c.in_ch}; }
    FeatShape operator()(const LayerNorm& l) const { return {2, 3, l.dim}; }
    FeatShape operator()(const MultiHeadAttention& m) const { return {6, 1, m.d_model}; }
    FeatShape operator()(const ReLU&) const { return {2, 3, 4}; }
    FeatShape operator()(const GELU&) const { return {2, 3, 4}; }
    FeatShape operator()(const Softmax&) const { return {2, 3, 4}; }
    FeatShape operator()(const Residual& r) const {
      for (const auto& b : r.block)
        if (!std::holds_alternative<ReLU>(b.v) && !std::holds_alternative<GELU>(b.v) &&
            !std::holds_alternative<Softmax>(b.v))
          return probe_shape(b);
      return {2, 3, 4};
    }
    FeatShape operator()(const MaxPool2D&) const { return {4, 6, 2}; }
  };
  return std::visit(V{}, spec.v);
}

// Instantiates `spec` in double precision with seeded parameters and a batch of
// two probe inputs, then compares analytic and numeric gradients of a random
// linear functional of the output, over every parameter and input entry.
inline double grad_check(const LayerSpec& spec, std::uint64_t seed) {
  InitRng rng(seed);
  Layer<double> layer(spec, rng);
  const FeatShape in = probe_shape(spec);
  const FeatShape out = infer_shape(spec, in);
  const int batch = 2;
  std::vector<double> xs(static_cast<std::size_t>(batch) * in.rows() * in.c);
  if (std::holds_alternative<MaxPool2D>(spec.v)) {
    // Well separated values so no window has a near tie.
    for (std::size_t i = 0; i < xs.size(); ++i) xs[i] = 0.05 * static_cast<double>(i) - 1.0;
    std::shuffle(xs.begin(), xs.end(), rng.gen);
  } else {
    // Magnitudes bounded away from 0 so ReLU kinks are out of reach.
    for (auto& x : xs) x = (0.1 + 0.9 * rng.uniform()) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  }
  auto x = tensor<double>({batch * in.rows(), in.c}, std::move(xs), true);
  auto r = tensor<double>({batch * out.rows(), out.c}, std::vector<double>(std::size_t(batch) * out.rows() * out.c));
  for (auto& v : r->value) v = 2.0 * rng.uniform() - 1.0;

  std::vector<NamedParam<double>> named;
  layer.collect("", named);
  std::vector<Var<double>> inputs{x};
  for (auto& p : named) inputs.push_back(p.var);
  auto loss = [&] {
    auto y = layer(Act<double>{x, batch, in.h, in.w});
    return sum(mul(y.x, r));
  };
  return check_gradients(inputs, loss);
}

struct GradCheckCase {
  LayerSpec spec;
  double tolerance;
};

// One instance of every layer kind (plus the conv geometries the networks use).
inline std::vector<GradCheckCase> default_gradcheck_suite() {
  return {
      {Dense{4, 3}, 1e-6},
      {Conv2D{1, 2, 3, 1}, 1e-5},
      {Conv2D{3, 2, 2, 1}, 1e-5},
      {Conv2D{7, 2, 2, 2}, 1e-5},
      {Conv2D{3, 2, 2, 2}, 1e-5},
      {LayerNorm{6}, 1e-5},
      {MultiHeadAttention{8, 2}, 1e-5},
      {ReLU{}, 1e-6},
      {GELU{}, 1e-6},
      {Softmax{-1}, 1e-5},
      {Softmax{0}, 1e-5},
      {Residual{{Dense{4, 4}, GELU{}, Dense{4, 4}}}, 1e-5},
      {MaxPool2D{}, 1e-6},
  };
}

}  // namespace xq::mg
