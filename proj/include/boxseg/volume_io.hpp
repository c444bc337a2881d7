#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "boxseg/volume.hpp"

namespace boxseg {

// Volume container: `<name>.json` header next to a `<name>.raw` blob of
// little-endian scalars in (slice, row, col) order with no padding.
Volume load_volume(const std::filesystem::path& header_path);
void save_volume(const Volume& vol, const std::filesystem::path& header_path);

SliceBoxSet boxes_from_json(const nlohmann::json& j);
nlohmann::json boxes_to_json(const SliceBoxSet& boxes);
SliceBoxSet load_boxes(const std::filesystem::path& path);
void save_boxes(const SliceBoxSet& boxes, const std::filesystem::path& path);

nlohmann::json read_json(const std::filesystem::path& path);
// Pretty-prints with a trailing newline.
void write_json(const nlohmann::json& j, const std::filesystem::path& path);

std::vector<uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(std::span<const uint8_t> bytes, const std::filesystem::path& path);

void encode_f32_le(std::span<const float> values, std::vector<uint8_t>& out);
std::vector<float> decode_f32_le(std::span<const uint8_t> bytes);

}  // namespace boxseg
