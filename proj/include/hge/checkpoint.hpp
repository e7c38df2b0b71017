#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hge/autodiff.hpp"

// Checkpoints are a JSON manifest listing parameter names and shapes plus a
// little-endian binary blob of doubles in manifest order. Round-trips are
// byte-exact: doubles are written and read as raw IEEE-754 bits.

namespace hge {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs assume a little-endian host");
static_assert(sizeof(double) == 8);

inline void save_checkpoint(const std::string& manifest_path,
                            const std::string& blob_path,
                            const std::vector<ad::Parameter*>& params,
                            const nlohmann::json& extra = {}) {
  nlohmann::json manifest;
  manifest["format"] = "hge-checkpoint-v1";
  manifest["blob"] = blob_path.substr(blob_path.find_last_of('/') + 1);
  nlohmann::json plist = nlohmann::json::array();
  for (const ad::Parameter* p : params) {
    nlohmann::json entry;
    entry["name"] = p->name;
    entry["shape"] = p->value.shape;
    plist.push_back(entry);
  }
  manifest["params"] = plist;
  if (!extra.is_null())
    for (auto it = extra.begin(); it != extra.end(); ++it)
      manifest[it.key()] = it.value();

  std::ofstream mf(manifest_path);
  if (!mf) throw std::runtime_error("checkpoint: cannot write " + manifest_path);
  mf << manifest.dump(2) << "\n";

  std::ofstream bf(blob_path, std::ios::binary);
  if (!bf) throw std::runtime_error("checkpoint: cannot write " + blob_path);
  for (const ad::Parameter* p : params) {
    bf.write(reinterpret_cast<const char*>(p->value.data.data()),
             static_cast<std::streamsize>(p->value.size() * sizeof(double)));
  }
  if (!bf) throw std::runtime_error("checkpoint: write failed " + blob_path);
}

// Fills params (matched by manifest order) and returns the parsed manifest.
inline nlohmann::json load_checkpoint(const std::string& manifest_path,
                                      const std::string& blob_path,
                                      const std::vector<ad::Parameter*>& params) {
  std::ifstream mf(manifest_path);
  if (!mf) throw std::runtime_error("checkpoint: cannot read " + manifest_path);
  nlohmann::json manifest = nlohmann::json::parse(mf);
  const auto& plist = manifest.at("params");
  if (plist.size() != params.size())
    throw std::runtime_error("checkpoint: expected " +
                             std::to_string(params.size()) + " params, found " +
                             std::to_string(plist.size()));

  std::ifstream bf(blob_path, std::ios::binary);
  if (!bf) throw std::runtime_error("checkpoint: cannot read " + blob_path);
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Parameter* p = params[i];
    const auto& entry = plist[i];
    if (entry.at("name").get<std::string>() != p->name)
      throw std::runtime_error("checkpoint: parameter order mismatch at " +
                               p->name);
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    if (shape != p->value.shape)
      throw std::runtime_error("checkpoint: shape mismatch for " + p->name);
    bf.read(reinterpret_cast<char*>(p->value.data.data()),
            static_cast<std::streamsize>(p->value.size() * sizeof(double)));
    if (!bf)
      throw std::runtime_error("checkpoint: blob truncated at " + p->name);
  }
  return manifest;
}

}  // namespace hge
