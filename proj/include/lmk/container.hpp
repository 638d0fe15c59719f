// Copyright 2026 The lmk Authors
// SPDX-License-Identifier: Apache-2.0

// LMK1 adapter container.
//
//   bytes 0..3   magic "LMK1"
//   bytes 4..7   u32 little-endian header length H
//   next H bytes UTF-8 JSON header
//   remainder    concatenated row-major little-endian float32 payloads
//
// The header lists the layer order, the task order, per-adapter metadata and
// one entry per tensor {key, dtype "f32", shape, offset, length}; offsets are
// relative to the first payload byte. Keys are "task/layer/B", "task/layer/A"
// and "__base__/layer/W" for the frozen base weights.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmk/adapters.hpp"

namespace lmk {

inline constexpr char kContainerMagic[4] = {'L', 'M', 'K', '1'};
inline constexpr int kContainerVersion = 1;
inline constexpr const char* kBaseTaskKey = "__base__";

enum class ContainerErrc {
  io_error = 1,
  bad_magic,
  truncated,
  bad_header,
  payload_size_mismatch,
  duplicate_key,
  inconsistent_tasks,
};

const char* to_string(ContainerErrc code) noexcept;

class ContainerError : public std::runtime_error {
 public:
  ContainerError(ContainerErrc code, const std::string& detail);
  ContainerErrc code() const noexcept { return code_; }

 private:
  ContainerErrc code_;
};

std::vector<std::uint8_t> encode_collection(const AdapterCollection& coll);
AdapterCollection decode_collection(std::span<const std::uint8_t> bytes);

/// Writes through a temporary file in the same directory, then renames.
void save_collection(const AdapterCollection& coll, const std::filesystem::path& path);
AdapterCollection load_collection(const std::filesystem::path& path);

/// Human-readable dump, values rounded to 9 significant digits. Lossy.
nlohmann::json export_debug_json(const AdapterCollection& coll);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

/// FNV-1a 64-bit digest as 16 hex characters.
std::string fnv1a_hex(std::span<const std::uint8_t> bytes);

}  // namespace lmk
