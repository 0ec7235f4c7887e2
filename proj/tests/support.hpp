#pragma once

// Test-only oracles. Nothing here calls into the backward pass or the
// nearest-neighbour search it is used to check.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "gne/graph.hpp"
#include "gne/matrix.hpp"
#include "gne/params.hpp"
#include "gne/rng.hpp"

namespace gne::testing {

struct GradCheck {
  double max_rel = 0.0;
  std::size_t coords = 0;
  std::string worst;
};

/// Central differences of `loss` with step h over every scalar of every
/// parameter, compared against the gradients already stored in `params`.
/// Relative error is |g_bp − g_fd| / (|g_fd| + 1e-8).
inline GradCheck finite_difference_check(ParamStore& params, const std::function<double()>& loss,
                                         double h = 1e-4) {
  GradCheck out;
  for (auto& p : params) {
    auto theta = p.value.values();
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double saved = theta[k];
      theta[k] = saved + h;
      const double up = loss();
      theta[k] = saved - h;
      const double down = loss();
      theta[k] = saved;
      const double fd = (up - down) / (2 * h);
      const double bp = p.grad.values()[k];
      const double rel = std::abs(bp - fd) / (std::abs(fd) + 1e-8);
      if (rel > out.max_rel) {
        out.max_rel = rel;
        out.worst = p.name + "[" + std::to_string(k) + "] bp=" + std::to_string(bp) +
                    " fd=" + std::to_string(fd);
      }
      ++out.coords;
    }
  }
  return out;
}

/// Smallest |pre-activation| feeding any Relu node on the tape.
inline double min_relu_margin(const ModelGraph& g, const Tape& t) {
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t k = std::max<std::size_t>(t.begin, 1); k < g.size(); ++k) {
    if (g[k].kind != LayerKind::Relu) continue;
    for (double v : t.outputs[k - 1].values()) m = std::min(m, std::abs(v));
  }
  return m;
}

inline void randomize(ParamStore& params, RngStream& rng, double half_width) {
  for (auto& p : params)
    for (double& v : p.value.values()) v = half_width * (2 * rng.next_unit() - 1);
}

inline Matrix random_unit_matrix(RngStream& rng, std::size_t r, std::size_t c) {
  Matrix m(r, c);
  for (double& v : m.values()) v = rng.next_unit();
  return m;
}

/// Mean silhouette coefficient by exhaustive pairwise distances.
inline double silhouette(const Matrix& points, const std::vector<std::int64_t>& labels) {
  const std::size_t n = points.rows();
  std::int64_t k = 0;
  for (auto l : labels) k = std::max(k, l + 1);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> sum(k, 0.0);
    std::vector<std::size_t> cnt(k, 0);
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double d2 = 0;
      for (std::size_t c = 0; c < points.cols(); ++c) {
        const double d = points(i, c) - points(j, c);
        d2 += d * d;
      }
      sum[labels[j]] += std::sqrt(d2);
      cnt[labels[j]] += 1;
    }
    const auto own = labels[i];
    if (cnt[own] == 0) continue; // singleton cluster contributes 0
    const double a = sum[own] / cnt[own];
    double b = std::numeric_limits<double>::infinity();
    for (std::int64_t c = 0; c < k; ++c)
      if (c != own && cnt[c] > 0) b = std::min(b, sum[c] / cnt[c]);
    total += (b - a) / std::max(a, b);
  }
  return total / n;
}

/// Exhaustive nearest neighbour with lowest-id tie break.
inline std::size_t brute_force_nearest(const Matrix& e, double x, double y) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < e.rows(); ++i) {
    const double dx = e(i, 0) - x, dy = e(i, 1) - y;
    const double d = dx * dx + dy * dy;
    if (d < best_d || (d == best_d && i < best)) {
      best = i;
      best_d = d;
    }
  }
  return best;
}

} // namespace gne::testing
