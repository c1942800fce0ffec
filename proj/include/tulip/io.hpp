#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "tulip/geometry.hpp"

namespace tulip::io {

// .rimg layout (little endian): "RIMG", u16 version = 1, u32 H, u32 W,
// f32 theta_min, f32 theta_max, f32 max_range, then H*W f32 row-major ranges.
inline constexpr std::uint16_t kRimgVersion = 1;

void write_rimg(std::ostream& out, const RangeImage& img);
RangeImage read_rimg(std::istream& in);
void write_rimg(const std::filesystem::path& path, const RangeImage& img);
RangeImage read_rimg(const std::filesystem::path& path);

// ASCII PLY with float x, y, z vertex properties. Coordinates are written in
// shortest round-trip float form, so write -> read -> write is byte-stable.
void write_ply(std::ostream& out, const PointCloud& pc);
PointCloud read_ply(std::istream& in);
void write_ply(const std::filesystem::path& path, const PointCloud& pc);
PointCloud read_ply(const std::filesystem::path& path);

// 8-bit grayscale, value = round(255 * r / max_range).
void write_png(const std::filesystem::path& path, const RangeImage& img);
std::vector<std::uint8_t> quantize_gray(const RangeImage& img);

// Headerless little-endian f32 payload; geometry comes from the caller.
RangeImage read_raw_f32(const std::filesystem::path& path, const SensorIntrinsics& intr);
void write_raw_f32(const std::filesystem::path& path, const RangeImage& img);

std::vector<char> read_file_bytes(const std::filesystem::path& path);

// Little-endian primitives shared by the binary formats.
void put_u8(std::ostream& out, std::uint8_t v);
void put_u16(std::ostream& out, std::uint16_t v);
void put_u32(std::ostream& out, std::uint32_t v);
void put_f32(std::ostream& out, float v);
std::uint8_t get_u8(std::istream& in);
std::uint16_t get_u16(std::istream& in);
std::uint32_t get_u32(std::istream& in);
float get_f32(std::istream& in);

}  // namespace tulip::io
