#include "dipwm/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace dipwm::archive {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'D', 'I', 'P', 'W', 'M', 'A', 'R', 'C'};

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_pod(std::istream& in, const fs::path& file) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError(file.string() + ": truncated archive header");
  return v;
}

}  // namespace

bool Archive::contains(const std::string& name) const {
  for (const auto& [n, _] : groups) {
    if (n == name) return true;
  }
  return false;
}

const ParamSet<float>& Archive::group(const std::string& name) const {
  for (const auto& [n, p] : groups) {
    if (n == name) return p;
  }
  throw IoError("archive has no group '" + name + "'");
}

void save(const fs::path& file, const Archive& archive) {
  Json header;
  header["manifest"] = archive.manifest;
  Json table = Json::array();
  for (const auto& [group, params] : archive.groups) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Shape s = params[i].shape;
      table.push_back({{"group", group}, {"name", params.name(i)}, {"shape", {s.n, s.c, s.h, s.w}}});
    }
  }
  header["arrays"] = std::move(table);
  const std::string text = header.dump();

  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  fs::path tmp = file;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    write_pod<std::uint32_t>(out, kFormatVersion);
    write_pod<std::uint64_t>(out, text.size());
    out.write(text.data(), std::streamsize(text.size()));
    for (const auto& [group, params] : archive.groups) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& d = params[i].data;
        out.write(reinterpret_cast<const char*>(d.data()), std::streamsize(d.size() * sizeof(float)));
      }
    }
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  fs::rename(tmp, file);
}

Archive load(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open archive " + file.string());
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw IoError(file.string() + ": not a checkpoint archive");
  }
  const auto version = read_pod<std::uint32_t>(in, file);
  if (version != kFormatVersion) {
    throw IoError(file.string() + ": unsupported archive version " + std::to_string(version));
  }
  const auto len = read_pod<std::uint64_t>(in, file);
  std::string text(len, '\0');
  if (!in.read(text.data(), std::streamsize(len))) throw IoError(file.string() + ": truncated archive header");

  Json header;
  try {
    header = Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(file.string() + ": corrupt archive header: " + e.what());
  }

  Archive out;
  out.manifest = header.at("manifest");
  for (const auto& entry : header.at("arrays")) {
    const auto group = entry.at("group").get<std::string>();
    const auto& dims = entry.at("shape");
    const Shape s{dims.at(0).get<int>(), dims.at(1).get<int>(), dims.at(2).get<int>(), dims.at(3).get<int>()};
    Tensor<float> t(s);
    if (!in.read(reinterpret_cast<char*>(t.data.data()), std::streamsize(t.size() * sizeof(float)))) {
      throw IoError(file.string() + ": truncated array data");
    }
    if (out.groups.empty() || out.groups.back().first != group) out.groups.emplace_back(group, ParamSet<float>{});
    out.groups.back().second.add(entry.at("name").get<std::string>(), std::move(t));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw IoError(file.string() + ": trailing bytes in archive");
  return out;
}

}  // namespace dipwm::archive
