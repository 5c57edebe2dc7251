#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "metaseg/errors.hpp"
#include "metaseg/segnet.hpp"
#include "metaseg/tensor.hpp"

namespace metaseg {

static_assert(std::endian::native == std::endian::little, "checkpoint payload is little-endian");

namespace detail {

template <typename Real>
constexpr const char* precision_tag() {
  if constexpr (sizeof(Real) == 4)
    return "f32";
  else
    return "f64";
}

}  // namespace detail

// One file: a UTF-8 JSON header line (format version, model config, head
// registry, tensor name -> shape/byte-offset index) terminated by '\n',
// followed by the raw little-endian float payload. Tensors are laid out in
// sorted-name order; save -> load -> save is byte-identical.
template <typename Real>
void save_checkpoint(const ParamSet<Real>& params, const std::filesystem::path& path) {
  nlohmann::json header;
  header["format"] = "metaseg-ckpt-v1";
  header["precision"] = detail::precision_tag<Real>();
  header["model"] = {{"depth", params.config.depth},
                     {"base_channels", params.config.base_channels},
                     {"in_channels", params.config.in_channels}};
  nlohmann::json heads = nlohmann::json::object();
  for (const auto& [task, k] : params.heads) heads[task] = k;
  header["heads"] = std::move(heads);

  nlohmann::json index = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params.tensors) {
    index[name] = {{"shape", t.shape}, {"offset", offset}};
    offset += static_cast<std::uint64_t>(t.numel()) * sizeof(Real);
  }
  header["tensors"] = std::move(index);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
  out << header.dump() << "\n";
  for (const auto& [name, t] : params.tensors)
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(Real)));
  if (!out) throw IoError("short write on checkpoint '" + path.string() + "'");
}

template <typename Real>
ParamSet<Real> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::string header_line;
  if (!std::getline(in, header_line)) throw IoError("checkpoint '" + path.string() + "' has no header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad checkpoint header in '" + path.string() + "': " + e.what());
  }
  if (header.value("format", "") != "metaseg-ckpt-v1")
    throw IoError("unsupported checkpoint format in '" + path.string() + "'");
  if (header.value("precision", "") != detail::precision_tag<Real>())
    throw ConfigError("checkpoint '" + path.string() + "' holds " + header.value("precision", "?") +
                      " weights but this run uses " + detail::precision_tag<Real>());

  ParamSet<Real> params;
  params.config.depth = header.at("model").at("depth").get<std::int64_t>();
  params.config.base_channels = header.at("model").at("base_channels").get<std::int64_t>();
  params.config.in_channels = header.at("model").at("in_channels").get<std::int64_t>();
  for (const auto& [task, k] : header.at("heads").items())
    params.heads[task] = k.template get<std::int32_t>();

  const std::streampos payload_start = in.tellg();
  for (const auto& [name, entry] : header.at("tensors").items()) {
    const Shape shape = entry.at("shape").template get<Shape>();
    const std::uint64_t offset = entry.at("offset").template get<std::uint64_t>();
    Tensor<Real> t(shape);
    in.seekg(payload_start + static_cast<std::streamoff>(offset));
    in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(Real)));
    if (!in) throw IoError("truncated payload for tensor '" + name + "' in '" + path.string() + "'");
    check_finite(t, "checkpoint tensor");
    params.tensors.emplace(name, std::move(t));
  }
  return params;
}

}  // namespace metaseg
