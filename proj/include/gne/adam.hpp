#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "gne/errors.hpp"
#include "gne/matrix.hpp"
#include "gne/params.hpp"

namespace gne {

/// Rows of the embedding table frozen at user-chosen coordinates.
struct PinMask {
  std::set<std::size_t> rows;

  bool contains(std::size_t r) const { return rows.contains(r); }
  bool empty() const { return rows.empty(); }
  friend bool operator==(const PinMask&, const PinMask&) = default;
};

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t t = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;

  static AdamState for_params(const ParamStore& params, double lr = 1e-3) {
    AdamState s;
    s.lr = lr;
    for (const auto& p : params) {
      s.m.emplace_back(p.value.rows(), p.value.cols());
      s.v.emplace_back(p.value.rows(), p.value.cols());
    }
    return s;
  }

  void validate(const ParamStore& params) const {
    if (m.size() != params.size() || v.size() != params.size()) {
      throw StateError("adam state tracks " + std::to_string(m.size()) + " tensors, store has " +
                       std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Matrix& val = params.at(i).value;
      if (!m[i].same_shape(val) || !v[i].same_shape(val) || !params.at(i).grad.same_shape(val)) {
        throw StateError("adam state shape drift at '" + params.at(i).name + "'");
      }
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
      throw StateError("adam betas must lie in [0, 1)");
    }
  }

  /// Clears both moments of one row of one tensor (used when a row is pinned).
  void reset_row(std::size_t param, std::size_t row) {
    for (auto* mat : {&m.at(param), &v.at(param)}) {
      auto r = mat->row(row);
      std::fill(r.begin(), r.end(), 0.0);
    }
  }
};

/// One bias-corrected Adam update. Rows listed in `mask` of the tensor named
/// `masked_param` keep their value and both moments untouched.
inline void adam_step(ParamStore& params, AdamState& state, const PinMask& mask = {},
                      const std::string& masked_param = "embed") {
  state.validate(params);
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  const auto masked = mask.empty() ? std::nullopt : params.find(masked_param);

  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = params.at(i);
    auto theta = p.value.values();
    auto g = p.grad.values();
    auto m = state.m[i].values();
    auto v = state.v[i].values();
    const std::size_t cols = p.value.cols();
    const bool use_mask = masked && *masked == i;
    for (std::size_t k = 0; k < theta.size(); ++k) {
      if (use_mask && mask.contains(k / cols)) continue;
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
      const double m_hat = m[k] / c1;
      const double v_hat = v[k] / c2;
      theta[k] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

} // namespace gne
