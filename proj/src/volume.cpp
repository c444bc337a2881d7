#include "boxseg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace boxseg {

void VolumeShape::validate() const {
  if (slices < 1 || rows < 1 || cols < 1) throw VolumeError("shape: every dimension must be >= 1, got " + to_string(*this));
  const auto max = std::numeric_limits<std::size_t>::max();
  if (rows > max / cols || slices > max / (rows * cols) || voxels() > max / 8)
    throw VolumeError("shape: voxel count overflows addressable memory");
}

std::string to_string(const VolumeShape& shape) {
  return "[" + std::to_string(shape.slices) + "," + std::to_string(shape.rows) + "," + std::to_string(shape.cols) + "]";
}

std::string dtype_name(DType dtype) {
  switch (dtype) {
    case DType::Int16HU: return "int16-HU";
    case DType::Float32Normalized: return "float32-normalized";
    case DType::Uint8Label: return "uint8-label";
    case DType::Float32Soft: return "float32-soft";
  }
  return "unknown";
}

DType parse_dtype(const std::string& name) {
  for (DType d : {DType::Int16HU, DType::Float32Normalized, DType::Uint8Label, DType::Float32Soft})
    if (dtype_name(d) == name) return d;
  throw VolumeError("dtype: unknown dtype '" + name + "'");
}

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::Int16HU: return 2;
    case DType::Uint8Label: return 1;
    default: return 4;
  }
}

namespace {

void check_spacing(const Spacing& spacing) {
  for (double s : spacing)
    if (!(s > 0.0) || !std::isfinite(s)) throw VolumeError("spacing_mm: every entry must be positive");
}

void check_unit_range(std::span<const float> data, const char* what) {
  for (float v : data)
    if (!(v >= 0.0f && v <= 1.0f)) throw VolumeError(std::string(what) + ": value outside [0,1]");
}

template <typename T>
void check_length(const VolumeShape& shape, const std::vector<T>& data) {
  if (data.size() != shape.voxels())
    throw VolumeError("data: length mismatch (" + std::to_string(data.size()) + " values for shape " + to_string(shape) + ")");
}

}  // namespace

Volume::Volume(VolumeShape shape, DType dtype, Spacing spacing) : shape_(shape), dtype_(dtype), spacing_(spacing) {
  shape_.validate();
  check_spacing(spacing_);
}

Volume Volume::hu(VolumeShape shape, std::vector<int16_t> data, Spacing spacing) {
  Volume v(shape, DType::Int16HU, spacing);
  check_length(shape, data);
  v.data_ = std::move(data);
  return v;
}

Volume Volume::normalized(VolumeShape shape, std::vector<float> data, Spacing spacing) {
  Volume v(shape, DType::Float32Normalized, spacing);
  check_length(shape, data);
  check_unit_range(data, "float32-normalized");
  v.data_ = std::move(data);
  return v;
}

Volume Volume::soft(VolumeShape shape, std::vector<float> data, Spacing spacing) {
  Volume v(shape, DType::Float32Soft, spacing);
  check_length(shape, data);
  check_unit_range(data, "float32-soft");
  v.data_ = std::move(data);
  return v;
}

Volume Volume::labels(VolumeShape shape, std::vector<uint8_t> data, Spacing spacing) {
  Volume v(shape, DType::Uint8Label, spacing);
  check_length(shape, data);
  for (auto& x : data) {
    if (x == 255) x = 1;
    if (x > 1) throw VolumeError("uint8-label: values must be 0, 1 or 255");
  }
  v.data_ = std::move(data);
  return v;
}

std::span<const int16_t> Volume::hu_data() const {
  if (dtype_ != DType::Int16HU) throw VolumeError("volume: expected int16-HU, got " + dtype_name(dtype_));
  return std::get<std::vector<int16_t>>(data_);
}

std::span<const float> Volume::float_data() const {
  if (!is_float()) throw VolumeError("volume: expected a float32 dtype, got " + dtype_name(dtype_));
  return std::get<std::vector<float>>(data_);
}

std::span<const uint8_t> Volume::label_data() const {
  if (dtype_ != DType::Uint8Label) throw VolumeError("volume: expected uint8-label, got " + dtype_name(dtype_));
  return std::get<std::vector<uint8_t>>(data_);
}

double Volume::value(std::size_t index) const {
  return std::visit([index](const auto& v) { return static_cast<double>(v.at(index)); }, data_);
}

SoftLabelVolume::SoftLabelVolume(VolumeShape shape, std::vector<float> values) : shape(shape), data(std::move(values)) {
  shape.validate();
  check_length(shape, data);
  check_unit_range(data, "soft label");
}

SoftLabelVolume SoftLabelVolume::from_volume(const Volume& vol) {
  auto d = vol.float_data();
  return SoftLabelVolume(vol.shape(), std::vector<float>(d.begin(), d.end()));
}

Volume SoftLabelVolume::to_volume(Spacing spacing) const { return Volume::soft(shape, data, spacing); }

Volume binarize(const SoftLabelVolume& vol, double threshold, Spacing spacing) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw VolumeError("threshold: must lie in (0,1)");
  std::vector<uint8_t> out(vol.data.size());
  std::transform(vol.data.begin(), vol.data.end(), out.begin(),
                 [threshold](float v) { return static_cast<uint8_t>(v > threshold ? 1 : 0); });
  return Volume::labels(vol.shape, std::move(out), spacing);
}

bool SliceBox::overlaps(const SliceBox& o) const {
  return slice_index == o.slice_index && row_min <= o.row_max && o.row_min <= row_max && col_min <= o.col_max &&
         o.col_min <= col_max;
}

void SliceBoxSet::add(const SliceBox& box) {
  if (box.slice_index >= shape_.slices) throw VolumeError("boxes: slice_index out of range");
  if (box.row_min > box.row_max || box.row_max >= shape_.rows || box.col_min > box.col_max || box.col_max >= shape_.cols)
    throw VolumeError("boxes: box on slice " + std::to_string(box.slice_index) + " outside image bounds");
  auto& list = boxes_[box.slice_index];
  if (list.size() >= 2) throw VolumeError("boxes: at most two boxes per slice");
  for (const auto& other : list)
    if (other.overlaps(box)) throw VolumeError("boxes: boxes on slice " + std::to_string(box.slice_index) + " overlap");
  list.push_back(box);
}

std::span<const SliceBox> SliceBoxSet::on_slice(std::size_t slice) const {
  auto it = boxes_.find(slice);
  if (it == boxes_.end()) return {};
  return it->second;
}

std::size_t SliceBoxSet::box_count() const {
  std::size_t n = 0;
  for (const auto& [_, list] : boxes_) n += list.size();
  return n;
}

Slice2D extract_slice(const Volume& vol, std::size_t slice) {
  const auto& sh = vol.shape();
  if (slice >= sh.slices) throw VolumeError("slice index out of range");
  auto d = vol.float_data().subspan(slice * sh.slice_size(), sh.slice_size());
  return Slice2D(sh.rows, sh.cols, std::vector<float>(d.begin(), d.end()));
}

Mask2D extract_label_slice(const Volume& vol, std::size_t slice) {
  const auto& sh = vol.shape();
  if (slice >= sh.slices) throw VolumeError("slice index out of range");
  auto d = vol.label_data().subspan(slice * sh.slice_size(), sh.slice_size());
  return Mask2D(sh.rows, sh.cols, std::vector<uint8_t>(d.begin(), d.end()));
}

}  // namespace boxseg
