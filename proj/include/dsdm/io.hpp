#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

namespace dsdm::io {

// Little-endian primitives. All binary formats in the toolkit are explicitly
// little-endian regardless of host byte order.
void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_f32(std::ostream& out, float v);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
float read_f32(std::istream& in);

std::ofstream open_out(const std::filesystem::path& path, bool binary = false);
std::ifstream open_in(const std::filesystem::path& path, bool binary = false);

/// Parses one JSON object per non-blank line.
std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path,
                 const std::vector<nlohmann::json>& records);

nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& doc);

}  // namespace dsdm::io
