#include "cbllm/bundle.hpp"

#include <filesystem>

#include "cbllm/errors.hpp"
#include "cbllm/util.hpp"

namespace cbllm {

using nlohmann::json;
namespace fs = std::filesystem;

std::string blob_path_for(const std::string& manifest_path) {
  fs::path p(manifest_path);
  if (p.extension() == ".json") return p.replace_extension(".bin").string();
  return manifest_path + ".bin";
}

void save_bundle(const std::string& manifest_path, const Bundle& bundle) {
  json m = bundle.manifest;
  std::string blob;
  json index = json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : bundle.arrays) {
    if (t.size() == 0) throw UsageError("save_bundle: array '" + name + "' is empty");
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.size()}});
    blob += floats_to_le_bytes(t.span());
    offset += t.size();
  }
  std::string blob_path = blob_path_for(manifest_path);
  m["format"] = kBundleFormat;
  m["version"] = kBundleVersion;
  m["arrays"] = index;
  m["blob"] = {{"file", fs::path(blob_path).filename().string()},
               {"bytes", blob.size()},
               {"fnv1a64", hex64(fnv1a(blob))}};
  if (auto dir = fs::path(manifest_path).parent_path(); !dir.empty()) fs::create_directories(dir);
  write_file(blob_path, blob);
  write_file(manifest_path, m.dump(2) + "\n");
}

Bundle load_bundle(const std::string& manifest_path) {
  json m;
  try {
    m = json::parse(read_file(manifest_path));
  } catch (const json::parse_error& e) {
    throw ValidationError("'" + manifest_path + "': malformed manifest (" + e.what() + ")");
  }
  if (!m.is_object() || m.value("format", "") != kBundleFormat) {
    throw ValidationError("'" + manifest_path + "': not a " + std::string(kBundleFormat) + " manifest");
  }
  if (m.value("version", -1) != kBundleVersion) {
    throw ValidationError("'" + manifest_path + "': format version " + m.value("version", json(nullptr)).dump() +
                          " is not supported (expected " + std::to_string(kBundleVersion) + ")");
  }
  Bundle b;
  try {
    std::string file = m.at("blob").at("file").get<std::string>();
    fs::path blob_path = fs::path(manifest_path).parent_path() / file;
    std::string blob = read_file(blob_path.string());
    auto bytes = m.at("blob").at("bytes").get<std::size_t>();
    if (blob.size() != bytes) {
      throw ValidationError("'" + blob_path.string() + "': array file is " + std::to_string(blob.size()) +
                            " bytes, manifest says " + std::to_string(bytes) + " (truncated or corrupt)");
    }
    if (hex64(fnv1a(blob)) != m.at("blob").at("fnv1a64").get<std::string>()) {
      throw ValidationError("'" + blob_path.string() + "': checksum mismatch");
    }
    std::vector<float> all = floats_from_le_bytes(blob);
    for (const auto& a : m.at("arrays")) {
      auto name = a.at("name").get<std::string>();
      auto shape = a.at("shape").get<Shape>();
      auto offset = a.at("offset").get<std::size_t>();
      auto count = a.at("count").get<std::size_t>();
      if (shape_numel(shape) != count || offset + count > all.size()) {
        throw ValidationError("'" + manifest_path + "': array '" + name + "' index is inconsistent with the blob");
      }
      b.arrays.emplace(name, Tensor(shape, std::vector<float>(all.begin() + static_cast<std::ptrdiff_t>(offset),
                                                              all.begin() + static_cast<std::ptrdiff_t>(offset + count))));
    }
  } catch (const json::exception& e) {
    throw ValidationError("'" + manifest_path + "': " + e.what());
  }
  m.erase("format");
  m.erase("version");
  m.erase("arrays");
  m.erase("blob");
  b.manifest = std::move(m);
  return b;
}

}  // namespace cbllm
