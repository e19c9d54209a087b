// SPDX-License-Identifier: Apache-2.0
//
// Independent oracles shared by the unit and acceptance tests.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "textprune/annotation.hpp"
#include "textprune/autodiff.hpp"
#include "textprune/nn.hpp"

namespace textprune::testing {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& gen, double scale = 1.0, bool grad = true) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = dist(gen);
  return Tensor<double>(std::move(shape), std::move(data), grad);
}

inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                        std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < k; ++t) s += a[i * k + t] * b[t * n + j];
      c[i * n + j] = s;
    }
  return c;
}

// Marks every patch that contains at least one pixel of the clipped box.
inline std::vector<std::uint8_t> brute_force_labels(std::size_t w, std::size_t h, std::size_t patch,
                                                    const BoundingBox& box) {
  const std::size_t cols = w / patch, rows = h / patch;
  std::vector<std::uint8_t> labels(rows * cols, 0);
  for (std::int64_t y = 0; y < static_cast<std::int64_t>(h); ++y)
    for (std::int64_t x = 0; x < static_cast<std::int64_t>(w); ++x) {
      if (x >= box.x0 && x < box.x0 + box.w && y >= box.y0 && y < box.y0 + box.h) {
        labels[(static_cast<std::size_t>(y) / patch) * cols + static_cast<std::size_t>(x) / patch] = 1;
      }
    }
  return labels;
}

// Full sort by (score desc, index asc), keep the first K.
inline std::vector<std::size_t> full_sort_topk(const std::vector<double>& scores, std::size_t k) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

struct GradCheck {
  double max_rel_error = 0.0;
  double max_abs_grad = 0.0;
  std::size_t checked = 0;
  double worst_analytic = 0.0;  // the pair behind max_rel_error
  double worst_numeric = 0.0;
};

// Central finite differences against the tape gradient. Up to
// `per_tensor` entries of each leaf are probed, spread evenly.
inline GradCheck check_gradients(const std::vector<Tensor<double>>& leaves,
                                 const std::function<Tensor<double>()>& loss_fn, double h = 1e-5,
                                 std::size_t per_tensor = 0) {
  for (auto leaf : leaves) leaf.zero_grad();
  {
    Tape<double> tape;
    tape.backward(loss_fn());
  }
  // Structurally zero gradients (a key bias under softmax, say) leave only
  // finite-difference noise, so the relative error is floored at a small
  // fraction of the largest gradient in play.
  std::vector<std::vector<double>> analytic;
  double scale = 0.0;
  for (const auto& leaf : leaves) {
    analytic.push_back(leaf.has_grad() ? std::vector<double>(leaf.grad().begin(), leaf.grad().end())
                                       : std::vector<double>(leaf.numel(), 0.0));
    for (double g : analytic.back()) scale = std::max(scale, std::abs(g));
  }
  const double floor = std::max(1e-7, 1e-4 * scale);
  GradCheck out;
  out.max_abs_grad = scale;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto leaf = leaves[l];
    auto data = leaf.mutable_data();
    const std::size_t n = data.size();
    const std::size_t probes = per_tensor == 0 ? n : std::min(n, per_tensor);
    for (std::size_t p = 0; p < probes; ++p) {
      const std::size_t i = probes == n ? p : (p * n) / probes + (n / probes) / 2;
      const double saved = data[i];
      data[i] = saved + h;
      const double up = loss_fn().item();
      data[i] = saved - h;
      const double down = loss_fn().item();
      data[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[l][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst_analytic = a;
        out.worst_numeric = numeric;
      }
      ++out.checked;
    }
  }
  return out;
}

inline std::vector<Tensor<double>> leaves_of(const ParameterList<double>& params) {
  std::vector<Tensor<double>> out;
  for (const auto& [name, t] : params) out.push_back(t);
  return out;
}

}  // namespace textprune::testing
