#include "boxseg/checkpoint.hpp"

#include <set>

#include "boxseg/volume_io.hpp"

namespace boxseg {

namespace fs = std::filesystem;

namespace {

std::string blob_name(const std::string& manifest, const std::string& tensor) {
  std::string stem = fs::path(manifest).stem().string();
  return stem + "." + tensor + ".raw";
}

}  // namespace

void save_tensors(const std::vector<StoredTensor>& tensors, const fs::path& dir, const std::string& manifest_name) {
  fs::create_directories(dir);
  nlohmann::json entries = nlohmann::json::array();
  std::set<std::string> names;
  for (const auto& t : tensors) {
    if (!names.insert(t.name).second) throw TensorError("checkpoint: duplicate tensor name '" + t.name + "'");
    if (dims_numel(t.dims) != t.data.size()) throw TensorError("checkpoint: tensor '" + t.name + "' data does not match dims");
    std::vector<uint8_t> bytes;
    encode_f32_le(t.data, bytes);
    const std::string file = blob_name(manifest_name, t.name);
    write_bytes(bytes, dir / file);
    entries.push_back({{"name", t.name}, {"dims", t.dims}, {"data_file", file}, {"trainable", t.trainable}});
  }
  write_json({{"tensors", entries}}, dir / manifest_name);
}

std::vector<StoredTensor> load_tensors(const fs::path& dir, const std::string& manifest_name) {
  const auto manifest = read_json(dir / manifest_name);
  if (!manifest.contains("tensors")) throw TensorError("checkpoint: manifest lacks 'tensors'");
  std::vector<StoredTensor> out;
  for (const auto& e : manifest["tensors"]) {
    StoredTensor t;
    t.name = e.at("name").get<std::string>();
    t.dims = e.at("dims").get<Dims>();
    t.trainable = e.value("trainable", true);
    const auto bytes = read_bytes(dir / e.at("data_file").get<std::string>());
    if (bytes.size() != dims_numel(t.dims) * 4)
      throw TensorError("checkpoint: blob for '" + t.name + "' has " + std::to_string(bytes.size()) + " bytes, expected " +
                        std::to_string(dims_numel(t.dims) * 4));
    t.data = decode_f32_le(bytes);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace boxseg
