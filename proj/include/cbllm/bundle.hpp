#pragma once

#include <map>
#include <string>

#include "cbllm/tensor.hpp"
#include "json.hpp"

namespace cbllm {

// A set of named float32 arrays persisted as a JSON manifest plus one raw
// little-endian blob. Layout:
//
//   <stem>.json  manifest: caller fields + "format", "version", "arrays"
//                [{name, shape, offset, count}] (offset/count in floats,
//                arrays in name order) + "blob" {file, bytes, fnv1a64}
//   <stem>.bin   the arrays back to back, 4 bytes per value, no padding
//
// Loading validates format/version, blob size and checksum, and that every
// indexed array lies inside the blob.
inline constexpr const char* kBundleFormat = "cbllm-arrays";
inline constexpr int kBundleVersion = 1;

using NamedArrays = std::map<std::string, Tensor>;

struct Bundle {
  nlohmann::json manifest;  // caller fields (kind, config, ...)
  NamedArrays arrays;
};

// Path of the blob that accompanies a manifest path: "x.json" -> "x.bin",
// anything else -> path + ".bin".
std::string blob_path_for(const std::string& manifest_path);

void save_bundle(const std::string& manifest_path, const Bundle& bundle);
Bundle load_bundle(const std::string& manifest_path);

}  // namespace cbllm
