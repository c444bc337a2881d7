#include "boxseg/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace boxseg {

void OrganProfile::validate() const {
  if (!(hu_window.low < hu_window.high)) throw VolumeError("hu_window: low must be < high");
  if (kmeans_ks.size() != 2 || kmeans_ks[0] == kmeans_ks[1]) throw VolumeError("ks: need exactly two distinct cluster counts");
  for (int k : kmeans_ks)
    if (k < 2) throw VolumeError("ks: each cluster count must be >= 2");
  target_shape.validate();
}

OrganProfile organ_profile(const std::string& name) {
  if (name == "liver") return {"liver", {-60, 140}, {3, 4}, {40, 512, 512}};
  if (name == "spleen") return {"spleen", {-115, 185}, {2, 3}, {31, 512, 512}};
  if (name == "kidneys") return {"kidneys", {-95, 155}, {2, 3}, {40, 512, 512}};
  throw VolumeError("organ: unknown profile '" + name + "' (expected liver, spleen or kidneys)");
}

OrganProfile apply_overrides(OrganProfile p, const nlohmann::json& o) {
  if (o.contains("hu_window")) p.hu_window = {o["hu_window"].at(0).get<double>(), o["hu_window"].at(1).get<double>()};
  if (o.contains("ks")) p.kmeans_ks = o["ks"].get<std::vector<int>>();
  if (o.contains("target_shape")) {
    const auto& t = o["target_shape"];
    p.target_shape = {t.at(0).get<std::size_t>(), t.at(1).get<std::size_t>(), t.at(2).get<std::size_t>()};
  }
  p.validate();
  return p;
}

Volume window_normalize(const Volume& hu, HuWindow window) {
  if (!(window.low < window.high)) throw VolumeError("window: degenerate window (low >= high)");
  const auto in = hu.hu_data();
  const double width = window.high - window.low;
  std::vector<float> out(in.size());
  std::transform(in.begin(), in.end(), out.begin(), [&](int16_t v) {
    if (v <= window.low) return 0.0f;
    if (v >= window.high) return 1.0f;
    return static_cast<float>((v - window.low) / width);
  });
  return Volume::normalized(hu.shape(), std::move(out), hu.spacing());
}

SliceRange organ_slice_range(const Volume& labels) {
  const auto d = labels.label_data();
  const auto& sh = labels.shape();
  std::size_t first = sh.slices, last = 0;
  for (std::size_t s = 0; s < sh.slices; ++s) {
    const auto begin = d.begin() + static_cast<std::ptrdiff_t>(s * sh.slice_size());
    if (std::any_of(begin, begin + static_cast<std::ptrdiff_t>(sh.slice_size()), [](uint8_t v) { return v != 0; })) {
      first = std::min(first, s);
      last = s;
    }
  }
  if (first == sh.slices) throw VolumeError("reference: no foreground present");
  return {first, last};
}

SliceRange organ_slice_range(const SliceBoxSet& boxes) {
  if (boxes.empty()) throw VolumeError("reference: no foreground present");
  return {boxes.boxes().begin()->first, boxes.boxes().rbegin()->first};
}

Volume crop_slices(const Volume& vol, SliceRange range) {
  const auto& sh = vol.shape();
  if (range.first > range.last || range.last >= sh.slices) throw VolumeError("slice range: outside volume");
  const VolumeShape out{range.count(), sh.rows, sh.cols};
  const std::size_t begin = range.first * sh.slice_size();
  const std::size_t end = (range.last + 1) * sh.slice_size();
  auto cut = [&](auto span) { return std::vector(span.begin() + begin, span.begin() + end); };
  switch (vol.dtype()) {
    case DType::Int16HU: return Volume::hu(out, cut(vol.hu_data()), vol.spacing());
    case DType::Float32Normalized: return Volume::normalized(out, cut(vol.float_data()), vol.spacing());
    case DType::Float32Soft: return Volume::soft(out, cut(vol.float_data()), vol.spacing());
    case DType::Uint8Label: return Volume::labels(out, cut(vol.label_data()), vol.spacing());
  }
  throw VolumeError("dtype: unreachable");
}

std::pair<Volume, SliceRange> extract_organ_slab(const Volume& vol, const Volume& labels) {
  if (!(labels.shape() == vol.shape())) throw VolumeError("reference: shape does not match volume");
  const auto range = organ_slice_range(labels);
  return {crop_slices(vol, range), range};
}

std::pair<Volume, SliceRange> extract_organ_slab(const Volume& vol, const SliceBoxSet& boxes) {
  if (!(boxes.shape() == vol.shape())) throw VolumeError("reference: shape does not match volume");
  const auto range = organ_slice_range(boxes);
  return {crop_slices(vol, range), range};
}

Volume embed_slab(const Volume& slab, SliceRange range, const VolumeShape& full) {
  const auto& sh = slab.shape();
  if (sh.rows != full.rows || sh.cols != full.cols || range.count() != sh.slices || range.last >= full.slices)
    throw VolumeError("slab: does not fit target shape");
  const std::size_t offset = range.first * full.slice_size();
  auto place = [&](auto span) {
    std::vector<std::remove_cv_t<typename decltype(span)::element_type>> out(full.voxels());
    std::copy(span.begin(), span.end(), out.begin() + static_cast<std::ptrdiff_t>(offset));
    return out;
  };
  switch (slab.dtype()) {
    case DType::Int16HU: return Volume::hu(full, place(slab.hu_data()), slab.spacing());
    case DType::Float32Normalized: return Volume::normalized(full, place(slab.float_data()), slab.spacing());
    case DType::Float32Soft: return Volume::soft(full, place(slab.float_data()), slab.spacing());
    case DType::Uint8Label: return Volume::labels(full, place(slab.label_data()), slab.spacing());
  }
  throw VolumeError("dtype: unreachable");
}

namespace {

struct Tap {
  std::size_t lo, hi;
  double w_hi;  // weight of `hi`; `lo` gets 1 - w_hi
};

std::vector<Tap> linear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

std::vector<std::size_t> nearest_taps(std::size_t in, std::size_t out) {
  std::vector<std::size_t> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i)
    taps[i] = std::min(static_cast<std::size_t>(std::floor((static_cast<double>(i) + 0.5) * scale)), in - 1);
  return taps;
}

template <typename T>
std::vector<T> resample(std::span<const T> in, const VolumeShape& from, const VolumeShape& to, ResizeMode mode) {
  std::vector<T> out(to.voxels());
  if (mode == ResizeMode::Nearest) {
    const auto ts = nearest_taps(from.slices, to.slices), tr = nearest_taps(from.rows, to.rows),
               tc = nearest_taps(from.cols, to.cols);
    for (std::size_t s = 0; s < to.slices; ++s)
      for (std::size_t r = 0; r < to.rows; ++r)
        for (std::size_t c = 0; c < to.cols; ++c) out[to.index(s, r, c)] = in[from.index(ts[s], tr[r], tc[c])];
    return out;
  }
  const auto ts = linear_taps(from.slices, to.slices), tr = linear_taps(from.rows, to.rows),
             tc = linear_taps(from.cols, to.cols);
  for (std::size_t s = 0; s < to.slices; ++s)
    for (std::size_t r = 0; r < to.rows; ++r)
      for (std::size_t c = 0; c < to.cols; ++c) {
        const Tap& a = ts[s];
        const Tap& b = tr[r];
        const Tap& k = tc[c];
        auto at = [&](std::size_t z, std::size_t y, std::size_t x) { return static_cast<double>(in[from.index(z, y, x)]); };
        auto row = [&](std::size_t z, std::size_t y) { return at(z, y, k.lo) * (1 - k.w_hi) + at(z, y, k.hi) * k.w_hi; };
        auto plane = [&](std::size_t z) { return row(z, b.lo) * (1 - b.w_hi) + row(z, b.hi) * b.w_hi; };
        const double v = plane(a.lo) * (1 - a.w_hi) + plane(a.hi) * a.w_hi;
        if constexpr (std::is_same_v<T, float>)
          out[to.index(s, r, c)] = std::clamp(static_cast<float>(v), 0.0f, 1.0f);
        else
          out[to.index(s, r, c)] = static_cast<T>(std::lround(v));
      }
  return out;
}

}  // namespace

Volume resize_volume(const Volume& vol, const VolumeShape& target, ResizeMode mode) {
  target.validate();
  if (mode == ResizeMode::Trilinear && vol.dtype() == DType::Uint8Label)
    throw VolumeError("resize: trilinear interpolation is not allowed for uint8-label volumes");
  if (target == vol.shape()) return vol;

  const auto& from = vol.shape();
  Spacing spacing = vol.spacing();
  spacing[0] *= static_cast<double>(from.slices) / static_cast<double>(target.slices);
  spacing[1] *= static_cast<double>(from.rows) / static_cast<double>(target.rows);
  spacing[2] *= static_cast<double>(from.cols) / static_cast<double>(target.cols);

  switch (vol.dtype()) {
    case DType::Int16HU: return Volume::hu(target, resample(vol.hu_data(), from, target, mode), spacing);
    case DType::Float32Normalized:
      return Volume::normalized(target, resample(vol.float_data(), from, target, mode), spacing);
    case DType::Float32Soft: return Volume::soft(target, resample(vol.float_data(), from, target, mode), spacing);
    case DType::Uint8Label: return Volume::labels(target, resample(vol.label_data(), from, target, mode), spacing);
  }
  throw VolumeError("dtype: unreachable");
}

namespace {

struct Extent {
  std::size_t row_min = std::numeric_limits<std::size_t>::max(), row_max = 0;
  std::size_t col_min = std::numeric_limits<std::size_t>::max(), col_max = 0;
  bool empty() const { return row_min == std::numeric_limits<std::size_t>::max(); }
  void add(std::size_t r, std::size_t c) {
    row_min = std::min(row_min, r);
    row_max = std::max(row_max, r);
    col_min = std::min(col_min, c);
    col_max = std::max(col_max, c);
  }
};

SliceBox grow(const Extent& e, std::size_t slice, std::size_t margin, std::size_t rows, std::size_t col_lo,
              std::size_t col_hi) {
  SliceBox b;
  b.slice_index = slice;
  b.row_min = e.row_min > margin ? e.row_min - margin : 0;
  b.row_max = std::min(e.row_max + margin, rows - 1);
  b.col_min = std::max(e.col_min > margin ? e.col_min - margin : 0, col_lo);
  b.col_max = std::min(e.col_max + margin, col_hi);
  return b;
}

// Column separating left from right foreground: the median foreground column,
// moved to the nearest foreground-free column inside the foreground span when
// the median itself cuts through foreground.
std::size_t split_column(const Mask2D& m) {
  std::vector<std::size_t> col_count(m.cols, 0);
  std::vector<std::size_t> cols;
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = 0; c < m.cols; ++c)
      if (m.at(r, c)) {
        ++col_count[c];
        cols.push_back(c);
      }
  std::nth_element(cols.begin(), cols.begin() + static_cast<std::ptrdiff_t>(cols.size() / 2), cols.end());
  const std::size_t median = cols[cols.size() / 2];
  if (col_count[median] == 0) return median;

  const auto [lo_it, hi_it] = std::minmax_element(cols.begin(), cols.end());
  const std::size_t lo = *lo_it, hi = *hi_it;
  for (std::size_t d = 1; d <= hi - lo; ++d) {
    if (median >= lo + d && col_count[median - d] == 0) return median - d;
    if (median + d <= hi && col_count[median + d] == 0) return median + d;
  }
  return median;
}

}  // namespace

SliceBoxSet make_bounding_boxes(const Volume& gt, std::size_t margin_px, bool split_lr) {
  const auto& sh = gt.shape();
  SliceBoxSet set(sh);
  for (std::size_t s = 0; s < sh.slices; ++s) {
    const Mask2D m = extract_label_slice(gt, s);
    if (std::none_of(m.data.begin(), m.data.end(), [](uint8_t v) { return v != 0; })) continue;

    if (!split_lr) {
      Extent e;
      for (std::size_t r = 0; r < m.rows; ++r)
        for (std::size_t c = 0; c < m.cols; ++c)
          if (m.at(r, c)) e.add(r, c);
      set.add(grow(e, s, margin_px, sh.rows, 0, sh.cols - 1));
      continue;
    }

    // Left side takes columns < split; right takes >= split, or > split when
    // the split column is foreground-free.
    const std::size_t split = split_column(m);
    bool split_is_empty = true;
    for (std::size_t r = 0; r < m.rows; ++r) split_is_empty = split_is_empty && !m.at(r, split);
    const std::size_t right_start = split_is_empty ? split + 1 : split;

    Extent left, right;
    for (std::size_t r = 0; r < m.rows; ++r)
      for (std::size_t c = 0; c < m.cols; ++c)
        if (m.at(r, c)) (c < split ? left : right).add(r, c);

    if (!left.empty()) set.add(grow(left, s, margin_px, sh.rows, 0, split - 1));
    if (!right.empty()) set.add(grow(right, s, margin_px, sh.rows, right_start, sh.cols - 1));
  }
  return set;
}

}  // namespace boxseg
