// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dlab {

// 64-bit float <-> 16-char lowercase hex of its bit pattern. Round trips are
// bit-exact, which is what the checkpoint format relies on.
std::string f64_to_hex(double v);
double f64_from_hex(std::string_view hex);

// Shortest-round-trip decimal formatting ("%.17g"); identical input bits give
// identical text, which keeps result CSVs byte-stable across reruns.
std::string fmt_double(double v);

// Little-endian binary append/read helpers.
void put_u16(std::string& out, std::uint16_t v);
void put_u32(std::string& out, std::uint32_t v);
void put_u64(std::string& out, std::uint64_t v);
void put_f64(std::string& out, double v);

class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string context)
      : bytes_(bytes), context_(std::move(context)) {}
  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string raw(std::size_t n);
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n);
  std::string_view bytes_;
  std::string context_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path);

// Write-temp-then-rename so partially written outputs are never observed.
void atomic_write_file(const std::filesystem::path& path, std::string_view content);

std::uint64_t fnv64_bytes(std::span<const unsigned char> bytes, std::uint64_t h = 14695981039346656037ULL);
std::uint64_t fnv64_file(const std::filesystem::path& path);
std::string hash_hex(std::uint64_t h);

// Minimal CSV writer: caller supplies header + rows, cells are joined with
// commas. Cells must not contain commas or newlines (ours never do).
std::string csv_join(const std::vector<std::string>& cells);

}  // namespace dlab
