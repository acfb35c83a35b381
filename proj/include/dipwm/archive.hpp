#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dipwm/params.hpp"

namespace dipwm::archive {

using Json = nlohmann::ordered_json;

inline constexpr std::uint32_t kFormatVersion = 1;

/// Contents of an archive file: a free-form JSON manifest plus named groups
/// of float arrays.
struct Archive {
  Json manifest = Json::object();
  std::vector<std::pair<std::string, ParamSet<float>>> groups;

  void add(std::string name, ParamSet<float> params) { groups.emplace_back(std::move(name), std::move(params)); }
  bool contains(const std::string& name) const;
  /// Throws IoError naming the group when it is absent.
  const ParamSet<float>& group(const std::string& name) const;
};

/// Layout: magic "DIPWMARC", u32 format version, u64 header length, JSON
/// header (the manifest plus an array table), then every array as raw
/// little-endian float32 in table order. Written to a sibling temp file and
/// renamed into place.
void save(const std::filesystem::path& file, const Archive& archive);
Archive load(const std::filesystem::path& file);

}  // namespace dipwm::archive
