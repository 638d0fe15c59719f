// Copyright 2026 The lmk Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmk/container.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

namespace lmk {

using nlohmann::json;

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

void put_f32(std::vector<std::uint8_t>& out, double v) {
  put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

void check_name(const std::string& name, const char* what) {
  if (name.empty() || name.find('/') != std::string::npos)
    throw std::invalid_argument(std::string(what) + " '" + name +
                                "' must be non-empty and contain no '/'");
}

struct TensorEntry {
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t length = 0;
};

}  // namespace

const char* to_string(ContainerErrc code) noexcept {
  switch (code) {
    case ContainerErrc::io_error: return "io error";
    case ContainerErrc::bad_magic: return "bad magic";
    case ContainerErrc::truncated: return "truncated payload";
    case ContainerErrc::bad_header: return "bad header";
    case ContainerErrc::payload_size_mismatch: return "payload size mismatch";
    case ContainerErrc::duplicate_key: return "duplicate key";
    case ContainerErrc::inconsistent_tasks: return "inconsistent tasks";
  }
  return "unknown container error";
}

ContainerError::ContainerError(ContainerErrc code, const std::string& detail)
    : std::runtime_error(detail.empty() ? std::string(to_string(code))
                                        : std::string(to_string(code)) + ": " + detail),
      code_(code) {}

std::vector<std::uint8_t> encode_collection(const AdapterCollection& coll) {
  coll.validate();
  for (const auto& t : coll.task_ids) {
    check_name(t, "task id");
    if (t == kBaseTaskKey) throw std::invalid_argument("task id '__base__' is reserved");
  }

  json header;
  header["version"] = kContainerVersion;
  header["layers"] = coll.layer_ids();
  header["tasks"] = coll.task_ids;
  header["adapters"] = json::array();
  header["tensors"] = json::array();

  std::vector<std::uint8_t> payload;
  auto add_tensor = [&](const std::string& key, const Matrix& m) {
    const std::size_t offset = payload.size();
    for (double v : m.data()) put_f32(payload, v);
    header["tensors"].push_back({{"key", key},
                                 {"dtype", "f32"},
                                 {"shape", {m.rows(), m.cols()}},
                                 {"offset", offset},
                                 {"length", payload.size() - offset}});
  };

  for (const auto& layer : coll.layers) {
    check_name(layer.layer_id, "layer id");
    add_tensor(std::string(kBaseTaskKey) + "/" + layer.layer_id + "/W", layer.base);
    for (const auto& ad : layer.adapters) {
      header["adapters"].push_back({{"task", ad.task_id},
                                    {"layer", ad.layer_id},
                                    {"rank", ad.rank()},
                                    {"lora_alpha", ad.lora_alpha},
                                    {"dropout", ad.dropout}});
      add_tensor(ad.task_id + "/" + ad.layer_id + "/B", ad.b);
      add_tensor(ad.task_id + "/" + ad.layer_id + "/A", ad.a);
    }
  }

  const std::string text = header.dump();
  std::vector<std::uint8_t> out;
  out.reserve(8 + text.size() + payload.size());
  out.insert(out.end(), kContainerMagic, kContainerMagic + 4);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

AdapterCollection decode_collection(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw ContainerError(ContainerErrc::truncated, "missing magic");
  if (std::memcmp(bytes.data(), kContainerMagic, 4) != 0)
    throw ContainerError(ContainerErrc::bad_magic, "");
  if (bytes.size() < 8) throw ContainerError(ContainerErrc::truncated, "missing header length");
  const std::size_t header_len = get_u32(bytes.data() + 4);
  if (bytes.size() < 8 + header_len)
    throw ContainerError(ContainerErrc::truncated, "header extends past end of file");

  json header;
  try {
    header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    throw ContainerError(ContainerErrc::bad_header, e.what());
  }
  const auto payload = bytes.subspan(8 + header_len);

  std::map<std::string, TensorEntry> tensors;
  std::vector<std::string> layer_ids;
  AdapterCollection coll;
  std::map<std::pair<std::string, std::string>, std::pair<double, double>> meta;
  try {
    if (header.at("version").get<int>() != kContainerVersion)
      throw ContainerError(ContainerErrc::bad_header, "unsupported version");
    layer_ids = header.at("layers").get<std::vector<std::string>>();
    coll.task_ids = header.at("tasks").get<std::vector<std::string>>();
    std::size_t total = 0;
    for (const auto& t : header.at("tensors")) {
      const auto key = t.at("key").get<std::string>();
      if (t.at("dtype").get<std::string>() != "f32")
        throw ContainerError(ContainerErrc::bad_header, key + ": dtype must be f32");
      TensorEntry e{t.at("shape").get<std::vector<std::size_t>>(), t.at("offset").get<std::size_t>(),
                    t.at("length").get<std::size_t>()};
      if (e.shape.size() != 2) throw ContainerError(ContainerErrc::bad_header, key + ": shape must be 2-D");
      if (e.shape[0] * e.shape[1] * 4 != e.length)
        throw ContainerError(ContainerErrc::payload_size_mismatch,
                             key + ": shape " + std::to_string(e.shape[0]) + "x" +
                                 std::to_string(e.shape[1]) + " needs " +
                                 std::to_string(e.shape[0] * e.shape[1] * 4) + " bytes, header gives " +
                                 std::to_string(e.length));
      if (e.offset + e.length > payload.size())
        throw ContainerError(ContainerErrc::truncated, key + " extends past end of payload");
      total += e.length;
      if (!tensors.emplace(key, std::move(e)).second)
        throw ContainerError(ContainerErrc::duplicate_key, key);
    }
    if (total != payload.size())
      throw ContainerError(ContainerErrc::payload_size_mismatch,
                           "tensors cover " + std::to_string(total) + " of " +
                               std::to_string(payload.size()) + " payload bytes");
    for (const auto& a : header.at("adapters")) {
      auto key = std::make_pair(a.at("task").get<std::string>(), a.at("layer").get<std::string>());
      if (!meta.emplace(key, std::make_pair(a.at("lora_alpha").get<double>(), a.at("dropout").get<double>()))
               .second)
        throw ContainerError(ContainerErrc::duplicate_key, key.first + "/" + key.second);
    }
  } catch (const json::exception& e) {
    throw ContainerError(ContainerErrc::bad_header, e.what());
  }

  std::set<std::string> seen_tasks(coll.task_ids.begin(), coll.task_ids.end());
  if (seen_tasks.size() != coll.task_ids.size())
    throw ContainerError(ContainerErrc::duplicate_key, "task list repeats an id");

  auto take = [&](const std::string& key) -> Matrix {
    auto it = tensors.find(key);
    if (it == tensors.end()) throw ContainerError(ContainerErrc::inconsistent_tasks, "missing tensor " + key);
    const auto& e = it->second;
    Matrix m(e.shape[0], e.shape[1]);
    const std::uint8_t* p = payload.data() + e.offset;
    for (std::size_t i = 0; i < m.size(); ++i)
      m.data()[i] = static_cast<double>(std::bit_cast<float>(get_u32(p + 4 * i)));
    tensors.erase(it);
    return m;
  };

  for (const auto& lid : layer_ids) {
    LayerAdapters layer{lid, take(std::string(kBaseTaskKey) + "/" + lid + "/W"), {}};
    for (const auto& tid : coll.task_ids) {
      auto mit = meta.find({tid, lid});
      if (mit == meta.end())
        throw ContainerError(ContainerErrc::inconsistent_tasks, "task " + tid + " has no adapter on layer " + lid);
      LoraAdapter ad{tid, lid, take(tid + "/" + lid + "/B"), take(tid + "/" + lid + "/A"),
                     mit->second.first, mit->second.second};
      meta.erase(mit);
      layer.adapters.push_back(std::move(ad));
    }
    coll.layers.push_back(std::move(layer));
  }
  if (!tensors.empty())
    throw ContainerError(ContainerErrc::inconsistent_tasks, "unreferenced tensor " + tensors.begin()->first);
  if (!meta.empty())
    throw ContainerError(ContainerErrc::inconsistent_tasks,
                         "adapter metadata for unknown task/layer " + meta.begin()->first.first + "/" +
                             meta.begin()->first.second);
  try {
    coll.validate();
  } catch (const std::invalid_argument& e) {
    throw ContainerError(ContainerErrc::inconsistent_tasks, e.what());
  }
  return coll;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContainerError(ContainerErrc::io_error, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ContainerError(ContainerErrc::io_error, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ContainerError(ContainerErrc::io_error, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw ContainerError(ContainerErrc::io_error, "rename to " + path.string() + ": " + ec.message());
}

void save_collection(const AdapterCollection& coll, const std::filesystem::path& path) {
  write_file_atomic(path, encode_collection(coll));
}

AdapterCollection load_collection(const std::filesystem::path& path) {
  return decode_collection(read_file(path));
}

namespace {
double round9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return std::strtod(buf, nullptr);
}

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (double v : m.row(r)) row.push_back(round9(v));
    rows.push_back(std::move(row));
  }
  return rows;
}
}  // namespace

json export_debug_json(const AdapterCollection& coll) {
  json out;
  out["tasks"] = coll.task_ids;
  out["layers"] = json::array();
  for (const auto& l : coll.layers) {
    json jl{{"layer", l.layer_id}, {"base", matrix_json(l.base)}, {"adapters", json::array()}};
    for (const auto& ad : l.adapters)
      jl["adapters"].push_back({{"task", ad.task_id},
                                {"rank", ad.rank()},
                                {"lora_alpha", ad.lora_alpha},
                                {"dropout", ad.dropout},
                                {"B", matrix_json(ad.b)},
                                {"A", matrix_json(ad.a)}});
    out["layers"].push_back(std::move(jl));
  }
  return out;
}

std::string fnv1a_hex(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace lmk
