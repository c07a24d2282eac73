#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "xq/micrograd/tensor.hpp"

namespace xq::mg {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  AdamConfig cfg;
  std::int64_t step = 0;
  std::vector<std::vector<T>> m, v;  // shaped like the parameters, in order
};

// One bias-corrected Adam update over `params`, reading each parameter's
// accumulated gradient (missing gradient counts as zero).
template <class T>
void adam_step(const std::vector<Var<T>>& params, AdamState<T>& st) {
  if (st.m.size() != params.size()) {
    st.m.assign(params.size(), {});
    st.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      st.m[i].assign(params[i]->value.size(), T(0));
      st.v[i].assign(params[i]->value.size(), T(0));
    }
  }
  ++st.step;
  const double b1 = st.cfg.beta1, b2 = st.cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    detail::require(st.m[i].size() == p.value.size(), "adam state does not match parameter " + std::to_string(i));
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const T g = p.grad.empty() ? T(0) : p.grad[j];
      st.m[i][j] = static_cast<T>(b1 * st.m[i][j] + (1.0 - b1) * g);
      st.v[i][j] = static_cast<T>(b2 * st.v[i][j] + (1.0 - b2) * g * g);
      const double mhat = st.m[i][j] / c1, vhat = st.v[i][j] / c2;
      p.value[j] -= static_cast<T>(st.cfg.lr * mhat / (std::sqrt(vhat) + st.cfg.eps));
    }
  }
}

template <class T>
void zero_grads(const std::vector<Var<T>>& params) {
  for (auto& p : params) p->zero_grad();
}

}  // namespace xq::mg
