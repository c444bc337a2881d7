#include "boxseg/pseudo_mask.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include "boxseg/parallel.hpp"

namespace boxseg {

std::vector<std::size_t> KMeansResult::cluster_sizes() const {
  std::vector<std::size_t> sizes(static_cast<std::size_t>(k), 0);
  for (int a : assignments.data) ++sizes[static_cast<std::size_t>(a)];
  return sizes;
}

double wcss(const Slice2D& slice, const Image2D<int>& assignments, std::span<const double> centroids) {
  double total = 0.0;
  for (std::size_t i = 0; i < slice.size(); ++i) {
    const double d = slice.data[i] - centroids[static_cast<std::size_t>(assignments.data[i])];
    total += d * d;
  }
  return total;
}

namespace {

std::size_t nearest(double v, const std::vector<double>& centroids) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    const double d = (v - centroids[c]) * (v - centroids[c]);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

std::vector<double> kmeanspp_init(std::span<const double> values, int k, std::mt19937_64& rng) {
  std::vector<double> centroids;
  std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
  centroids.push_back(values[pick(rng)]);
  std::vector<double> dist(values.size());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  while (static_cast<int>(centroids.size()) < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (double c : centroids) best = std::min(best, (values[i] - c) * (values[i] - c));
      dist[i] = best;
      total += best;
    }
    const double target = unit(rng) * total;
    double acc = 0.0;
    std::size_t chosen = values.size();
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (dist[i] <= 0.0) continue;
      acc += dist[i];
      chosen = i;
      if (acc >= target) break;
    }
    centroids.push_back(values[chosen]);
  }
  return centroids;
}

struct LloydOutcome {
  std::vector<int> assignment;
  std::vector<double> centroids;
};

LloydOutcome lloyd(std::span<const double> values, std::vector<double> centroids, int max_iters) {
  const std::size_t k = centroids.size();
  std::vector<int> assign(values.size(), -1);
  std::vector<double> sum(k);
  std::vector<std::size_t> count(k);

  auto update = [&] {
    std::fill(sum.begin(), sum.end(), 0.0);
    std::fill(count.begin(), count.end(), 0);
    for (std::size_t i = 0; i < values.size(); ++i) {
      sum[static_cast<std::size_t>(assign[i])] += values[i];
      ++count[static_cast<std::size_t>(assign[i])];
    }
    for (std::size_t c = 0; c < k; ++c)
      if (count[c]) centroids[c] = sum[c] / static_cast<double>(count[c]);
  };

  for (int iter = 0; iter < max_iters; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const int a = static_cast<int>(nearest(values[i], centroids));
      changed = changed || a != assign[i];
      assign[i] = a;
    }
    if (!changed) break;
    update();

    // An empty cluster takes over the pixel farthest from its own centroid.
    bool reseeded = false;
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c]) continue;
      reseeded = true;
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < values.size(); ++i) {
        const auto a = static_cast<std::size_t>(assign[i]);
        const double d = (values[i] - centroids[a]) * (values[i] - centroids[a]);
        if (count[a] > 1 && d > far_d) {
          far_d = d;
          far = i;
        }
      }
      --count[static_cast<std::size_t>(assign[far])];
      assign[far] = static_cast<int>(c);
      count[c] = 1;
      centroids[c] = values[far];
    }
    if (reseeded || iter + 1 == max_iters) update();
  }
  return {std::move(assign), std::move(centroids)};
}

}  // namespace

KMeansResult kmeans_slice(const Slice2D& slice, int k, int restarts, int max_iters, uint64_t seed) {
  if (k < 2) throw VolumeError("kmeans: k must be >= 2");
  if (slice.size() == 0) throw VolumeError("kmeans: empty slice");
  if (restarts < 1 || max_iters < 1) throw VolumeError("kmeans: restarts and max_iters must be >= 1");

  std::vector<double> values(slice.data.begin(), slice.data.end());
  {
    std::set<double> distinct;
    for (double v : values) {
      distinct.insert(v);
      if (static_cast<int>(distinct.size()) >= k) break;
    }
    if (static_cast<int>(distinct.size()) < k) throw VolumeError("kmeans: fewer distinct values than k");
  }

  std::mt19937_64 rng(seed);
  KMeansResult best;
  best.wcss = std::numeric_limits<double>::infinity();
  for (int run = 0; run < restarts; ++run) {
    auto outcome = lloyd(values, kmeanspp_init(values, k, rng), max_iters);
    KMeansResult r;
    r.k = k;
    r.assignments = Image2D<int>(slice.rows, slice.cols, std::move(outcome.assignment));
    r.centroids = std::move(outcome.centroids);
    r.wcss = wcss(slice, r.assignments, r.centroids);
    if (r.wcss < best.wcss) best = std::move(r);
  }
  return best;
}

Mask2D box_union_mask(std::size_t rows, std::size_t cols, std::span<const SliceBox> boxes) {
  Mask2D m(rows, cols, 0);
  for (const auto& b : boxes)
    for (std::size_t r = b.row_min; r <= b.row_max && r < rows; ++r)
      for (std::size_t c = b.col_min; c <= b.col_max && c < cols; ++c) m.at(r, c) = 1;
  return m;
}

Slice2D mask_outside_boxes(const Slice2D& slice, std::span<const SliceBox> boxes) {
  const Mask2D inside = box_union_mask(slice.rows, slice.cols, boxes);
  Slice2D out = slice;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!inside.data[i]) out.data[i] = 0.0f;
  return out;
}

Mask2D select_foreground(const KMeansResult& result, std::span<const SliceBox> boxes) {
  if (result.k < 2) throw VolumeError("select_foreground: k must be >= 2");
  const auto sizes = result.cluster_sizes();
  std::vector<int> order(static_cast<std::size_t>(result.k));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    const auto ua = static_cast<std::size_t>(a), ub = static_cast<std::size_t>(b);
    if (sizes[ua] != sizes[ub]) return sizes[ua] > sizes[ub];
    return result.centroids[ua] > result.centroids[ub];
  });
  const int fg = order[1];

  const auto& a = result.assignments;
  const Mask2D inside = box_union_mask(a.rows, a.cols, boxes);
  Mask2D out(a.rows, a.cols, 0);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = (a.data[i] == fg && inside.data[i]) ? 1 : 0;
  return out;
}

namespace {

// Running max (dilate) or min (erode) over a window of +-radius along one
// axis; out-of-range samples are background.
Mask2D filter_axis(const Mask2D& m, int radius, bool along_rows, bool dilation) {
  Mask2D out(m.rows, m.cols, 0);
  const auto rows = static_cast<long>(m.rows), cols = static_cast<long>(m.cols);
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) {
      uint8_t v = dilation ? 0 : 1;
      for (long d = -radius; d <= radius; ++d) {
        const long rr = along_rows ? r : r + d;
        const long cc = along_rows ? c + d : c;
        const uint8_t s = (rr < 0 || cc < 0 || rr >= rows || cc >= cols) ? 0 : m.data[static_cast<std::size_t>(rr * cols + cc)];
        v = dilation ? std::max(v, s) : std::min(v, s);
      }
      out.data[static_cast<std::size_t>(r * cols + c)] = v;
    }
  return out;
}

}  // namespace

Mask2D dilate(const Mask2D& mask, int radius) {
  if (radius < 0) throw VolumeError("morphology: radius must be >= 0");
  if (radius == 0) return mask;
  return filter_axis(filter_axis(mask, radius, true, true), radius, false, true);
}

Mask2D erode(const Mask2D& mask, int radius) {
  if (radius < 0) throw VolumeError("morphology: radius must be >= 0");
  if (radius == 0) return mask;
  return filter_axis(filter_axis(mask, radius, true, false), radius, false, false);
}

Mask2D morphological_closing(const Mask2D& mask, int radius) {
  if (radius < 0) throw VolumeError("morphology: radius must be >= 0");
  if (radius == 0) return mask;
  const auto pad = static_cast<std::size_t>(radius);
  Mask2D padded(mask.rows + 2 * pad, mask.cols + 2 * pad, 0);
  for (std::size_t r = 0; r < mask.rows; ++r)
    for (std::size_t c = 0; c < mask.cols; ++c) padded.at(r + pad, c + pad) = mask.at(r, c);
  const Mask2D closed = erode(dilate(padded, radius), radius);
  Mask2D out(mask.rows, mask.cols, 0);
  for (std::size_t r = 0; r < mask.rows; ++r)
    for (std::size_t c = 0; c < mask.cols; ++c) out.at(r, c) = closed.at(r + pad, c + pad);
  return out;
}

Mask2D fill_holes(const Mask2D& mask, std::size_t hole_area_max) {
  Mask2D background(mask.rows, mask.cols, 0);
  for (std::size_t i = 0; i < mask.size(); ++i) background.data[i] = mask.data[i] ? 0 : 1;
  const auto cc = connected_components(background, 4);
  Mask2D out = mask;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const int id = cc.labels.data[i];
    if (id && cc.sizes[static_cast<std::size_t>(id)] < hole_area_max) out.data[i] = 1;
  }
  return out;
}

Mask2D remove_small_components(const Mask2D& mask, double min_frac) {
  if (!(min_frac >= 0.0 && min_frac < 1.0)) throw VolumeError("min_frac: must lie in [0,1)");
  const auto cc = connected_components(mask, 8);
  if (cc.count() == 0) return mask;
  const std::size_t largest = *std::max_element(cc.sizes.begin() + 1, cc.sizes.end());
  const double cutoff = min_frac * static_cast<double>(largest);
  Mask2D out = mask;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const int id = cc.labels.data[i];
    if (id && static_cast<double>(cc.sizes[static_cast<std::size_t>(id)]) < cutoff) out.data[i] = 0;
  }
  return out;
}

Image2D<float> fuse_masks(const Mask2D& a, const Mask2D& b) {
  if (a.rows != b.rows || a.cols != b.cols) throw VolumeError("fuse_masks: shape mismatch");
  Image2D<float> out(a.rows, a.cols, 0.0f);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const bool fa = a.data[i] != 0, fb = b.data[i] != 0;
    out.data[i] = fa == fb ? (fa ? 1.0f : 0.0f) : 0.5f;
  }
  return out;
}

void PseudoMaskParams::validate() const {
  if (ks.size() != 2) throw VolumeError("ks: exactly two cluster counts required");
  for (int k : ks)
    if (k < 2) throw VolumeError("ks: each cluster count must be >= 2");
  if (!(fg_component_min_frac >= 0.0 && fg_component_min_frac < 1.0)) throw VolumeError("fg_component_min_frac: must lie in [0,1)");
  if (closing_radius < 0) throw VolumeError("closing_radius: must be >= 0");
  if (kmeans_restarts < 1) throw VolumeError("kmeans_restarts: must be >= 1");
  if (kmeans_max_iters < 1) throw VolumeError("kmeans_max_iters: must be >= 1");
}

nlohmann::json PseudoMaskReport::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : stages)
    arr.push_back({{"slice", s.slice}, {"box", s.box}, {"k", s.k}, {"cluster_sizes", s.cluster_sizes}, {"warnings", s.warnings}});
  return arr;
}

uint64_t stage_seed(uint64_t base, std::size_t slice, std::size_t box, int k) {
  return (base ^ static_cast<uint64_t>(slice)) + 0x9E3779B97F4A7C15ull * (static_cast<uint64_t>(box) * 64 + static_cast<uint64_t>(k));
}

Mask2D box_foreground(const Slice2D& slice, const SliceBox& box, int k, const PseudoMaskParams& params, uint64_t seed,
                      StageRecord* record) {
  const std::span<const SliceBox> one(&box, 1);
  const Slice2D masked = mask_outside_boxes(slice, one);
  KMeansResult km;
  try {
    km = kmeans_slice(masked, k, params.kmeans_restarts, params.kmeans_max_iters, seed);
  } catch (const VolumeError& e) {
    if (record) record->warnings.emplace_back(e.what());
    return Mask2D(slice.rows, slice.cols, 0);
  }
  if (record) record->cluster_sizes = km.cluster_sizes();

  Mask2D m = select_foreground(km, one);
  m = morphological_closing(m, params.closing_radius);
  m = fill_holes(m, params.hole_area_max);
  m = remove_small_components(m, params.fg_component_min_frac);

  // Small background slivers between the box and the image border can be
  // absorbed by hole filling; keep the result inside the box.
  const Mask2D inside = box_union_mask(slice.rows, slice.cols, one);
  for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = m.data[i] && inside.data[i];
  return m;
}

Image2D<float> pseudo_mask_slice(const Slice2D& slice, std::span<const SliceBox> boxes, std::size_t slice_index,
                                 const PseudoMaskParams& params, PseudoMaskReport* report) {
  params.validate();
  Image2D<float> out(slice.rows, slice.cols, 0.0f);
  for (std::size_t b = 0; b < boxes.size(); ++b) {
    std::vector<Mask2D> per_k;
    for (int k : params.ks) {
      StageRecord rec{slice_index, b, k, {}, {}};
      per_k.push_back(box_foreground(slice, boxes[b], k, params, stage_seed(params.seed, slice_index, b, k), &rec));
      if (report) report->stages.push_back(std::move(rec));
    }
    const auto fused = fuse_masks(per_k[0], per_k[1]);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = std::max(out.data[i], fused.data[i]);
  }
  return out;
}

SoftLabelVolume generate_pseudo_mask(const Volume& normalized, const SliceBoxSet& boxes, const PseudoMaskParams& params,
                                     PseudoMaskReport* report) {
  params.validate();
  if (normalized.dtype() != DType::Float32Normalized) throw VolumeError("pseudo mask: expected a float32-normalized volume");
  const auto& sh = normalized.shape();
  if (!(boxes.shape() == sh)) throw VolumeError("boxes: shape " + to_string(boxes.shape()) + " does not match volume " + to_string(sh));

  SoftLabelVolume out(sh);
  std::vector<PseudoMaskReport> per_slice(sh.slices);
  parallel_for(sh.slices, [&](std::size_t s) {
    const auto slice_boxes = boxes.on_slice(s);
    if (slice_boxes.empty()) return;
    const auto mask = pseudo_mask_slice(extract_slice(normalized, s), slice_boxes, s, params, &per_slice[s]);
    std::copy(mask.data.begin(), mask.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(s * sh.slice_size()));
  });
  if (report)
    for (auto& r : per_slice)
      for (auto& st : r.stages) report->stages.push_back(std::move(st));
  return out;
}

}  // namespace boxseg
