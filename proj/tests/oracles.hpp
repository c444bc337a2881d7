#pragma once

// Independent reference implementations used only by the tests. Each one is
// the slowest obvious formulation of its operation so it shares no code
// paths with the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <random>
#include <set>
#include <utility>
#include <vector>

#include "boxseg/ops.hpp"
#include "boxseg/volume.hpp"

namespace oracle {

using boxseg::Mask2D;
using boxseg::Tensor;

inline Mask2D random_mask(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double p) {
  std::bernoulli_distribution on(p);
  Mask2D m(rows, cols, 0);
  for (auto& v : m.data) v = on(rng) ? 1 : 0;
  return m;
}

// Pixel sets as ordered (row, col) pairs on the unbounded integer plane.
using PixelSet = std::set<std::pair<long, long>>;

inline PixelSet to_set(const Mask2D& m) {
  PixelSet s;
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = 0; c < m.cols; ++c)
      if (m.at(r, c)) s.insert({static_cast<long>(r), static_cast<long>(c)});
  return s;
}

inline Mask2D crop(const PixelSet& s, std::size_t rows, std::size_t cols) {
  Mask2D m(rows, cols, 0);
  for (auto [r, c] : s)
    if (r >= 0 && c >= 0 && r < static_cast<long>(rows) && c < static_cast<long>(cols))
      m.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = 1;
  return m;
}

// Minkowski sum with the (2r+1)^2 square.
inline PixelSet minkowski_dilate(const PixelSet& a, int r) {
  PixelSet out;
  for (auto [y, x] : a)
    for (long dy = -r; dy <= r; ++dy)
      for (long dx = -r; dx <= r; ++dx) out.insert({y + dy, x + dx});
  return out;
}

// Minkowski difference: points p with p + B inside a.
inline PixelSet minkowski_erode(const PixelSet& a, int r) {
  PixelSet out;
  for (auto [y, x] : a) {
    bool all = true;
    for (long dy = -r; dy <= r && all; ++dy)
      for (long dx = -r; dx <= r && all; ++dx) all = a.count({y + dy, x + dx}) > 0;
    if (all) out.insert({y, x});
  }
  return out;
}

// Dilation/erosion restricted to the image: pixels outside count as 0.
inline Mask2D bounded_dilate(const Mask2D& m, int r) { return crop(minkowski_dilate(to_set(m), r), m.rows, m.cols); }
inline Mask2D bounded_erode(const Mask2D& m, int r) { return crop(minkowski_erode(to_set(m), r), m.rows, m.cols); }

// Closing on the unbounded plane, cropped back to the image.
inline Mask2D closing(const Mask2D& m, int r) {
  return crop(minkowski_erode(minkowski_dilate(to_set(m), r), r), m.rows, m.cols);
}

// BFS components of pixels equal to `value`; returns per-pixel component
// id (-1 elsewhere) and component sizes.
inline std::pair<std::vector<int>, std::vector<std::size_t>> bfs_components(const Mask2D& m, uint8_t value, int connectivity) {
  std::vector<int> id(m.size(), -1);
  std::vector<std::size_t> sizes;
  const long rows = static_cast<long>(m.rows), cols = static_cast<long>(m.cols);
  for (long start = 0; start < rows * cols; ++start) {
    if (m.data[static_cast<std::size_t>(start)] != value || id[static_cast<std::size_t>(start)] >= 0) continue;
    const int label = static_cast<int>(sizes.size());
    sizes.push_back(0);
    std::deque<long> queue{start};
    id[static_cast<std::size_t>(start)] = label;
    while (!queue.empty()) {
      const long p = queue.front();
      queue.pop_front();
      ++sizes.back();
      const long y = p / cols, x = p % cols;
      for (long dy = -1; dy <= 1; ++dy)
        for (long dx = -1; dx <= 1; ++dx) {
          if (dy == 0 && dx == 0) continue;
          if (connectivity == 4 && dy != 0 && dx != 0) continue;
          const long ny = y + dy, nx = x + dx;
          if (ny < 0 || nx < 0 || ny >= rows || nx >= cols) continue;
          const auto q = static_cast<std::size_t>(ny * cols + nx);
          if (m.data[q] == value && id[q] < 0) {
            id[q] = label;
            queue.push_back(ny * cols + nx);
          }
        }
    }
  }
  return {id, sizes};
}

inline Mask2D fill_holes(const Mask2D& m, std::size_t threshold) {
  auto [id, sizes] = bfs_components(m, 0, 4);
  Mask2D out = m;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (id[i] >= 0 && sizes[static_cast<std::size_t>(id[i])] < threshold) out.data[i] = 1;
  return out;
}

inline Mask2D remove_small(const Mask2D& m, double frac) {
  auto [id, sizes] = bfs_components(m, 1, 8);
  if (sizes.empty()) return m;
  const double largest = static_cast<double>(*std::max_element(sizes.begin(), sizes.end()));
  Mask2D out = m;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (id[i] >= 0 && static_cast<double>(sizes[static_cast<std::size_t>(id[i])]) < frac * largest) out.data[i] = 0;
  return out;
}

inline float fuse_truth_table(uint8_t a, uint8_t b) {
  if (a && b) return 1.0f;
  if (!a && !b) return 0.0f;
  return 0.5f;
}

// Minimum WCSS over every assignment of the values to k labels.
inline double exhaustive_wcss(const std::vector<double>& values, int k) {
  const std::size_t n = values.size();
  std::vector<int> label(n, 0);
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    std::vector<double> sum(static_cast<std::size_t>(k), 0.0), cnt(static_cast<std::size_t>(k), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      sum[static_cast<std::size_t>(label[i])] += values[i];
      cnt[static_cast<std::size_t>(label[i])] += 1.0;
    }
    double w = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto l = static_cast<std::size_t>(label[i]);
      const double mu = sum[l] / cnt[l];
      w += (values[i] - mu) * (values[i] - mu);
    }
    best = std::min(best, w);
    std::size_t pos = 0;
    while (pos < n && label[pos] == k - 1) label[pos++] = 0;
    if (pos == n) break;
    ++label[pos];
  }
  return best;
}

// Direct seven-loop 3D cross-correlation.
inline std::vector<double> naive_conv3d(const std::vector<double>& x, const boxseg::Dims& xd, const std::vector<double>& w,
                                        const std::vector<double>& bias, const boxseg::ops::ConvSpec& spec,
                                        boxseg::Dims& out_dims) {
  const long N = static_cast<long>(xd[0]), C = static_cast<long>(xd[1]);
  const long D = static_cast<long>(xd[2]), H = static_cast<long>(xd[3]), W = static_cast<long>(xd[4]);
  const long O = static_cast<long>(spec.out_channels);
  long k[3], s[3], p[3], in[3] = {D, H, W}, o[3];
  for (int a = 0; a < 3; ++a) {
    k[a] = static_cast<long>(spec.kernel[a]);
    s[a] = static_cast<long>(spec.stride[a]);
    p[a] = static_cast<long>(spec.padding[a]);
    o[a] = (in[a] + 2 * p[a] - k[a]) / s[a] + 1;
  }
  out_dims = {xd[0], spec.out_channels, static_cast<std::size_t>(o[0]), static_cast<std::size_t>(o[1]),
              static_cast<std::size_t>(o[2])};
  std::vector<double> out(static_cast<std::size_t>(N * O * o[0] * o[1] * o[2]), 0.0);
  for (long n = 0; n < N; ++n)
    for (long oc = 0; oc < O; ++oc)
      for (long z = 0; z < o[0]; ++z)
        for (long y = 0; y < o[1]; ++y)
          for (long xx = 0; xx < o[2]; ++xx) {
            double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(oc)];
            for (long ic = 0; ic < C; ++ic)
              for (long a = 0; a < k[0]; ++a)
                for (long b = 0; b < k[1]; ++b)
                  for (long c = 0; c < k[2]; ++c) {
                    const long iz = z * s[0] - p[0] + a, iy = y * s[1] - p[1] + b, ix = xx * s[2] - p[2] + c;
                    if (iz < 0 || iy < 0 || ix < 0 || iz >= D || iy >= H || ix >= W) continue;
                    acc += x[static_cast<std::size_t>((((n * C + ic) * D + iz) * H + iy) * W + ix)] *
                           w[static_cast<std::size_t>((((oc * C + ic) * k[0] + a) * k[1] + b) * k[2] + c)];
                  }
            out[static_cast<std::size_t>((((n * O + oc) * o[0] + z) * o[1] + y) * o[2] + xx)] = acc;
          }
  return out;
}

inline Tensor<double> random_tensor(std::mt19937_64& rng, boxseg::Dims dims, double lo = -1.0, double hi = 1.0,
                                    bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(boxseg::dims_numel(dims));
  for (auto& e : v) e = u(rng);
  return Tensor<double>::from(std::move(dims), std::move(v), requires_grad);
}

// Scalar probe sum(w * f(...)) with fixed random weights, so every output
// element contributes a distinct gradient.
struct Probe {
  std::vector<double> weights;
  double operator()(const Tensor<double>& out) {
    if (weights.size() != out.numel()) {
      std::mt19937_64 rng(out.numel());
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      weights.resize(out.numel());
      for (auto& w : weights) w = u(rng);
    }
    double s = 0.0;
    const auto v = out.values();
    for (std::size_t i = 0; i < v.size(); ++i) s += weights[i] * v[i];
    return s;
  }
  Tensor<double> loss(const Tensor<double>& out) {
    (*this)(out);
    auto w = Tensor<double>::from(out.dims(), weights);
    return boxseg::ops::sum(boxseg::ops::mul(out, w));
  }
};

struct GradCheck {
  double max_error = 0.0;  // max |analytic - numeric| / max(1, |numeric|)
  std::size_t checked = 0;
};

// Central differences of `f` w.r.t. entries of `param` (all of them, or the
// listed indices), compared with the analytic gradient already stored in
// param.grad().
inline void central_differences(Tensor<double>& param, const std::function<double()>& f, double h, GradCheck& result,
                                const std::vector<std::size_t>* indices = nullptr) {
  const std::vector<double> analytic(param.grad().begin(), param.grad().end());
  auto values = param.mutable_values();
  auto check = [&](std::size_t i) {
    const double orig = values[i];
    values[i] = orig + h;
    const double up = f();
    values[i] = orig - h;
    const double down = f();
    values[i] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic.empty() ? 0.0 : analytic[i];
    result.max_error = std::max(result.max_error, std::abs(a - numeric) / std::max(1.0, std::abs(numeric)));
    ++result.checked;
  };
  if (indices) {
    for (auto i : *indices) check(i);
  } else {
    for (std::size_t i = 0; i < values.size(); ++i) check(i);
  }
}

}  // namespace oracle
