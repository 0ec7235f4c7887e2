#pragma once

// Forward/backward kernels for the closed layer vocabulary. Each kernel is a
// free function over Matrix values; graph.hpp sequences them.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "gne/errors.hpp"
#include "gne/matrix.hpp"
#include "gne/rng.hpp"

namespace gne {

// ---------------------------------------------------------------- embedding

inline void check_ids(std::span<const std::size_t> ids, std::size_t n) {
  for (std::size_t id : ids) {
    if (id >= n) {
      throw IndexError("embedding id " + std::to_string(id) + " out of range [0, " +
                       std::to_string(n) + ")");
    }
  }
}

inline Matrix embed_gather(const Matrix& table, std::span<const std::size_t> ids) {
  check_ids(ids, table.rows());
  Matrix out(ids.size(), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto src = table.row(ids[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

/// Scatter-add upstream rows into the gathered rows of table_grad; rows not in
/// ids are left untouched.
inline void embed_gather_backward(Matrix& table_grad, std::span<const std::size_t> ids,
                                  const Matrix& upstream) {
  check_ids(ids, table_grad.rows());
  if (upstream.rows() != ids.size() || upstream.cols() != table_grad.cols()) {
    throw ShapeError("embed_gather_backward: upstream " + upstream.shape() + " for " +
                     std::to_string(ids.size()) + " ids into table " + table_grad.shape());
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto dst = table_grad.row(ids[i]);
    auto src = upstream.row(i);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
  }
}

// ------------------------------------------------------------------- affine

inline Matrix affine_forward(const Matrix& x, const Matrix& weight, const Matrix& bias) {
  if (x.cols() != weight.rows() || bias.rows() != 1 || bias.cols() != weight.cols()) {
    throw ShapeError("affine: x " + x.shape() + ", W " + weight.shape() + ", b " + bias.shape());
  }
  Matrix out = matmul(x, weight);
  auto b = bias.row(0);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto o = out.row(r);
    for (std::size_t c = 0; c < o.size(); ++c) o[c] += b[c];
  }
  return out;
}

/// Accumulates dW += xᵀg and db += Σ_rows g. Returns g·Wᵀ when want_input_grad.
inline Matrix affine_backward(const Matrix& x, const Matrix& weight, const Matrix& upstream,
                              Matrix& weight_grad, Matrix& bias_grad, bool want_input_grad = true) {
  if (upstream.rows() != x.rows() || upstream.cols() != weight.cols()) {
    throw ShapeError("affine_backward: upstream " + upstream.shape() + " for x " + x.shape() +
                     ", W " + weight.shape());
  }
  add_inplace(weight_grad, matmul_tn(x, upstream));
  auto db = bias_grad.row(0);
  for (std::size_t r = 0; r < upstream.rows(); ++r) {
    auto g = upstream.row(r);
    for (std::size_t c = 0; c < g.size(); ++c) db[c] += g[c];
  }
  if (!want_input_grad) return {};
  return matmul_nt(upstream, weight);
}

// -------------------------------------------------------------- activations

enum class Activation { Tanh, Relu, Sigmoid };

inline double sigmoid(double v) noexcept {
  // Branching keeps exp() from overflowing for large |v|.
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Matrix activation_forward(Activation kind, const Matrix& x) {
  switch (kind) {
  case Activation::Tanh: return map(x, [](double v) { return std::tanh(v); });
  case Activation::Relu: return map(x, [](double v) { return v > 0.0 ? v : 0.0; });
  case Activation::Sigmoid: return map(x, [](double v) { return sigmoid(v); });
  }
  return x;
}

/// Derivative through the activation. tanh and sigmoid use their output y,
/// relu uses its input x; relu'(0) is 0.
inline Matrix activation_backward(Activation kind, const Matrix& x, const Matrix& y,
                                  const Matrix& upstream) {
  detail::require_same_shape(y, upstream, "activation_backward");
  Matrix out(upstream.rows(), upstream.cols());
  auto g = upstream.values();
  auto o = out.values();
  switch (kind) {
  case Activation::Tanh: {
    auto yv = y.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = g[i] * (1.0 - yv[i] * yv[i]);
    break;
  }
  case Activation::Relu: {
    auto xv = x.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] > 0.0 ? g[i] : 0.0;
    break;
  }
  case Activation::Sigmoid: {
    auto yv = y.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = g[i] * yv[i] * (1.0 - yv[i]);
    break;
  }
  }
  return out;
}

// -------------------------------------------------------------------- noise

/// Additive Gaussian noise. In eval mode, or with sigma == 0, the input is
/// returned unchanged and no draws are consumed. The draw is written to
/// *draw_out when provided so the pass can be replayed.
inline Matrix noise_forward(const Matrix& x, double sigma, RngStream& rng, bool training,
                            Matrix* draw_out = nullptr) {
  if (!(sigma >= 0.0)) throw DomainError("noise sigma must be >= 0, got " + std::to_string(sigma));
  if (!training || sigma == 0.0) {
    if (draw_out) *draw_out = Matrix{};
    return x;
  }
  Matrix draw = gaussian(rng, x.rows(), x.cols(), sigma);
  Matrix out = add(x, draw);
  if (draw_out) *draw_out = std::move(draw);
  return out;
}

// ------------------------------------------------------------ residual block

struct ResidualParams {
  Matrix w1, b1, w2, b2;
};

/// h + Affine₂(relu(Affine₁(h))). Composite convenience over the kernels above;
/// the graph executes the same steps as separate nodes.
inline Matrix residual_block_forward(const Matrix& h, const ResidualParams& p) {
  if (p.w1.rows() != h.cols() || p.w2.cols() != h.cols()) {
    throw ShapeError("residual block maps " + std::to_string(p.w1.rows()) + "->" +
                     std::to_string(p.w2.cols()) + " but input is " + h.shape());
  }
  Matrix inner = activation_forward(Activation::Relu, affine_forward(h, p.w1, p.b1));
  return add(h, affine_forward(inner, p.w2, p.b2));
}

// --------------------------------------------------------------------- loss

struct LossResult {
  double loss = 0.0;
  Matrix grad;
};

/// Mean over batch and features of the squared error.
inline LossResult mse_loss(const Matrix& pred, const Matrix& target) {
  detail::require_same_shape(pred, target, "mse_loss");
  const double n = static_cast<double>(pred.size());
  LossResult r;
  r.grad = Matrix(pred.rows(), pred.cols());
  if (pred.size() == 0) return r;
  auto p = pred.values();
  auto t = target.values();
  auto g = r.grad.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i] - t[i];
    acc += d * d;
    g[i] = 2.0 * d / n;
  }
  r.loss = acc / n;
  return r;
}

} // namespace gne
