#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "boxseg/tensor.hpp"

namespace boxseg {

struct StoredTensor {
  std::string name;
  Dims dims;
  std::vector<float> data;
  bool trainable = true;
};

/// Writes `params.json` ({"tensors":[{"name", "dims", "data_file"}, ...]})
/// plus one little-endian float32 blob per tensor into `dir`.
void save_tensors(const std::vector<StoredTensor>& tensors, const std::filesystem::path& dir,
                  const std::string& manifest_name = "params.json");
std::vector<StoredTensor> load_tensors(const std::filesystem::path& dir, const std::string& manifest_name = "params.json");

}  // namespace boxseg
