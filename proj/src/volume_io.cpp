#include "boxseg/volume_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace boxseg {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw VolumeError("file: cannot open " + path.string());
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_bytes(std::span<const uint8_t> bytes, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw VolumeError("file: cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw VolumeError("file: write failed for " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw VolumeError("file: cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw VolumeError("json: " + path.string() + ": " + e.what());
  }
}

void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw VolumeError("file: cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw VolumeError("file: write failed for " + path.string());
}

namespace {

template <typename T>
void encode_le(std::span<const T> values, std::vector<uint8_t>& out) {
  using U = std::conditional_t<sizeof(T) == 1, uint8_t, std::conditional_t<sizeof(T) == 2, uint16_t, uint32_t>>;
  const std::size_t base = out.size();
  out.resize(base + values.size() * sizeof(T));
  for (std::size_t i = 0; i < values.size(); ++i) {
    const U bits = std::bit_cast<U>(values[i]);
    for (std::size_t b = 0; b < sizeof(T); ++b) out[base + i * sizeof(T) + b] = static_cast<uint8_t>(bits >> (8 * b));
  }
}

template <typename T>
std::vector<T> decode_le(std::span<const uint8_t> bytes) {
  using U = std::conditional_t<sizeof(T) == 1, uint8_t, std::conditional_t<sizeof(T) == 2, uint16_t, uint32_t>>;
  std::vector<T> values(bytes.size() / sizeof(T));
  for (std::size_t i = 0; i < values.size(); ++i) {
    U bits = 0;
    for (std::size_t b = 0; b < sizeof(T); ++b) bits |= static_cast<U>(static_cast<U>(bytes[i * sizeof(T) + b]) << (8 * b));
    values[i] = std::bit_cast<T>(bits);
  }
  return values;
}

VolumeShape shape_from_json(const json& j) {
  if (!j.is_array() || j.size() != 3) throw VolumeError("shape: expected [S,H,W]");
  for (const auto& d : j)
    if (!d.is_number_integer() || d.get<long long>() < 1) throw VolumeError("shape: dimensions must be integers >= 1");
  VolumeShape s{j[0].get<std::size_t>(), j[1].get<std::size_t>(), j[2].get<std::size_t>()};
  s.validate();
  return s;
}

json shape_to_json(const VolumeShape& s) { return json::array({s.slices, s.rows, s.cols}); }

}  // namespace

void encode_f32_le(std::span<const float> values, std::vector<uint8_t>& out) { encode_le<float>(values, out); }
std::vector<float> decode_f32_le(std::span<const uint8_t> bytes) { return decode_le<float>(bytes); }

Volume load_volume(const fs::path& header_path) {
  const json h = read_json(header_path);
  for (const char* key : {"shape", "dtype", "spacing_mm", "data_file"})
    if (!h.contains(key)) throw VolumeError(std::string(key) + ": missing from header " + header_path.string());

  const VolumeShape shape = shape_from_json(h["shape"]);
  const DType dtype = parse_dtype(h["dtype"].get<std::string>());
  const auto& sp = h["spacing_mm"];
  if (!sp.is_array() || sp.size() != 3) throw VolumeError("spacing_mm: expected [z,y,x]");
  Spacing spacing{sp[0].get<double>(), sp[1].get<double>(), sp[2].get<double>()};
  for (double s : spacing)
    if (!(s > 0.0)) throw VolumeError("spacing_mm: non-positive spacing");

  const fs::path data_path = header_path.parent_path() / h["data_file"].get<std::string>();
  const auto bytes = read_bytes(data_path);
  if (bytes.size() != shape.voxels() * dtype_size(dtype))
    throw VolumeError("data_file: length mismatch (" + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(shape.voxels() * dtype_size(dtype)) + ")");

  switch (dtype) {
    case DType::Int16HU: return Volume::hu(shape, decode_le<int16_t>(bytes), spacing);
    case DType::Float32Normalized: return Volume::normalized(shape, decode_le<float>(bytes), spacing);
    case DType::Float32Soft: return Volume::soft(shape, decode_le<float>(bytes), spacing);
    case DType::Uint8Label: return Volume::labels(shape, decode_le<uint8_t>(bytes), spacing);
  }
  throw VolumeError("dtype: unreachable");
}

void save_volume(const Volume& vol, const fs::path& header_path) {
  fs::path raw_path = header_path;
  raw_path.replace_extension(".raw");

  std::vector<uint8_t> bytes;
  bytes.reserve(vol.shape().voxels() * dtype_size(vol.dtype()));
  switch (vol.dtype()) {
    case DType::Int16HU: encode_le<int16_t>(vol.hu_data(), bytes); break;
    case DType::Float32Normalized:
    case DType::Float32Soft: encode_le<float>(vol.float_data(), bytes); break;
    case DType::Uint8Label: encode_le<uint8_t>(vol.label_data(), bytes); break;
  }
  write_bytes(bytes, raw_path);

  json h;
  h["shape"] = shape_to_json(vol.shape());
  h["dtype"] = dtype_name(vol.dtype());
  h["spacing_mm"] = json::array({vol.spacing()[0], vol.spacing()[1], vol.spacing()[2]});
  h["data_file"] = raw_path.filename().string();
  write_json(h, header_path);
}

SliceBoxSet boxes_from_json(const json& j) {
  if (!j.contains("shape") || !j.contains("boxes")) throw VolumeError("boxes: expected fields 'shape' and 'boxes'");
  SliceBoxSet set(shape_from_json(j["shape"]));
  for (const auto& [key, list] : j["boxes"].items()) {
    std::size_t slice = 0;
    try {
      slice = std::stoul(key);
    } catch (const std::exception&) {
      throw VolumeError("boxes: slice key '" + key + "' is not an index");
    }
    for (const auto& b : list) {
      SliceBox box;
      box.slice_index = slice;
      try {
        box.row_min = b.at("row_min").get<std::size_t>();
        box.col_min = b.at("col_min").get<std::size_t>();
        box.row_max = b.at("row_max").get<std::size_t>();
        box.col_max = b.at("col_max").get<std::size_t>();
      } catch (const json::exception& e) {
        throw VolumeError(std::string("boxes: ") + e.what());
      }
      set.add(box);
    }
  }
  return set;
}

json boxes_to_json(const SliceBoxSet& set) {
  json boxes = json::object();
  for (const auto& [slice, list] : set.boxes()) {
    json arr = json::array();
    for (const auto& b : list)
      arr.push_back({{"row_min", b.row_min}, {"col_min", b.col_min}, {"row_max", b.row_max}, {"col_max", b.col_max}});
    boxes[std::to_string(slice)] = arr;
  }
  return {{"shape", shape_to_json(set.shape())}, {"boxes", boxes}};
}

SliceBoxSet load_boxes(const fs::path& path) { return boxes_from_json(read_json(path)); }

void save_boxes(const SliceBoxSet& boxes, const fs::path& path) { write_json(boxes_to_json(boxes), path); }

}  // namespace boxseg
