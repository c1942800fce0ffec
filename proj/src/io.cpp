#include "tulip/io.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <memory>
#include <ostream>
#include <sstream>

#include "tulip/error.hpp"

namespace tulip::io {

namespace {

void check_stream(const std::ios& s, const char* what) {
  require(!s.fail(), Errc::kIoFailure, what);
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.is_open(), Errc::kIoFailure, "cannot open for writing: " + path.string());
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.is_open(), Errc::kIoFailure, "cannot open for reading: " + path.string());
  return in;
}

std::string format_float(float v) {
  std::array<char, 32> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  require(ec == std::errc(), Errc::kFormatError, "float formatting failed");
  return std::string(buf.data(), end);
}

float parse_float(const std::string& token) {
  float v = 0.0f;
  auto [end, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
  require(ec == std::errc() && end == token.data() + token.size(), Errc::kFormatError,
          "bad float token in PLY: " + token);
  return v;
}

}  // namespace

void put_u8(std::ostream& out, std::uint8_t v) { out.put(static_cast<char>(v)); }

void put_u16(std::ostream& out, std::uint16_t v) {
  const std::array<char, 2> b{static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  out.write(b.data(), b.size());
}

void put_u32(std::ostream& out, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b.data(), b.size());
}

void put_f32(std::ostream& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

std::uint8_t get_u8(std::istream& in) {
  char c = 0;
  in.get(c);
  require(!in.fail(), Errc::kFormatError, "unexpected end of stream");
  return static_cast<std::uint8_t>(c);
}

std::uint16_t get_u16(std::istream& in) {
  const std::uint16_t lo = get_u8(in);
  const std::uint16_t hi = get_u8(in);
  return static_cast<std::uint16_t>(lo | (hi << 8));
}

std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  require(!in.fail(), Errc::kFormatError, "unexpected end of stream");
  return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) |
         (std::uint32_t{b[3]} << 24);
}

float get_f32(std::istream& in) { return std::bit_cast<float>(get_u32(in)); }

void write_rimg(std::ostream& out, const RangeImage& img) {
  const SensorIntrinsics& intr = img.intrinsics();
  out.write("RIMG", 4);
  put_u16(out, kRimgVersion);
  put_u32(out, static_cast<std::uint32_t>(intr.height));
  put_u32(out, static_cast<std::uint32_t>(intr.width));
  put_f32(out, intr.theta_min);
  put_f32(out, intr.theta_max);
  put_f32(out, intr.max_range);
  for (float r : img.pixels()) put_f32(out, r);
  check_stream(out, "failed writing .rimg");
}

RangeImage read_rimg(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), 4);
  require(!in.fail() && std::string(magic.data(), 4) == "RIMG", Errc::kFormatError,
          "missing RIMG magic");
  const std::uint16_t version = get_u16(in);
  require(version == kRimgVersion, Errc::kFormatError,
          "unsupported .rimg version " + std::to_string(version));
  SensorIntrinsics intr;
  const std::uint32_t h = get_u32(in);
  const std::uint32_t w = get_u32(in);
  require(h >= 1 && w >= 1 && h <= (1u << 20) && w <= (1u << 20), Errc::kFormatError,
          "implausible .rimg dimensions");
  intr.height = static_cast<int>(h);
  intr.width = static_cast<int>(w);
  intr.theta_min = get_f32(in);
  intr.theta_max = get_f32(in);
  intr.max_range = get_f32(in);
  std::vector<float> pixels(static_cast<std::size_t>(h) * w);
  for (float& r : pixels) r = get_f32(in);
  return RangeImage(intr, std::move(pixels));
}

void write_rimg(const std::filesystem::path& path, const RangeImage& img) {
  auto out = open_out(path);
  write_rimg(out, img);
}

RangeImage read_rimg(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_rimg(in);
}

void write_ply(std::ostream& out, const PointCloud& pc) {
  out << "ply\nformat ascii 1.0\nelement vertex " << pc.size()
      << "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
  for (const Point3& p : pc.points) {
    out << format_float(static_cast<float>(p.x)) << ' ' << format_float(static_cast<float>(p.y))
        << ' ' << format_float(static_cast<float>(p.z)) << '\n';
  }
  check_stream(out, "failed writing PLY");
}

PointCloud read_ply(std::istream& in) {
  std::string line;
  std::getline(in, line);
  require(line == "ply", Errc::kFormatError, "missing ply magic");
  std::size_t count = 0;
  std::vector<std::string> props;
  bool in_vertex = false;
  bool ascii = false;
  while (std::getline(in, line)) {
    if (line == "end_header") break;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "format") {
      std::string fmt;
      ls >> fmt;
      ascii = fmt == "ascii";
    } else if (key == "element") {
      std::string name;
      ls >> name;
      in_vertex = name == "vertex";
      if (in_vertex) ls >> count;
    } else if (key == "property" && in_vertex) {
      std::string type, name;
      ls >> type >> name;
      props.push_back(name);
    }
  }
  require(ascii, Errc::kFormatError, "only ASCII PLY is supported");
  int ix = -1, iy = -1, iz = -1;
  for (int i = 0; i < static_cast<int>(props.size()); ++i) {
    if (props[i] == "x") ix = i;
    if (props[i] == "y") iy = i;
    if (props[i] == "z") iz = i;
  }
  require(ix >= 0 && iy >= 0 && iz >= 0, Errc::kFormatError, "PLY lacks x/y/z properties");
  PointCloud pc;
  pc.points.reserve(count);
  std::vector<std::string> tokens(props.size());
  for (std::size_t i = 0; i < count; ++i) {
    for (auto& t : tokens) {
      in >> t;
      require(!in.fail(), Errc::kFormatError, "truncated PLY vertex list");
    }
    pc.points.push_back({parse_float(tokens[ix]), parse_float(tokens[iy]), parse_float(tokens[iz])});
  }
  return pc;
}

void write_ply(const std::filesystem::path& path, const PointCloud& pc) {
  auto out = open_out(path);
  write_ply(out, pc);
}

PointCloud read_ply(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_ply(in);
}

std::vector<std::uint8_t> quantize_gray(const RangeImage& img) {
  std::vector<std::uint8_t> gray(img.size());
  const double scale = 255.0 / img.intrinsics().max_range;
  for (std::size_t i = 0; i < gray.size(); ++i) {
    const double q = std::floor(double(img.pixels()[i]) * scale + 0.5);
    gray[i] = static_cast<std::uint8_t>(std::clamp(q, 0.0, 255.0));
  }
  return gray;
}

void write_png(const std::filesystem::path& path, const RangeImage& img) {
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  require(fp != nullptr, Errc::kIoFailure, "cannot open for writing: " + path.string());
  const std::vector<std::uint8_t> gray = quantize_gray(img);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(png != nullptr, Errc::kIoFailure, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(Errc::kIoFailure, "libpng error while writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width()),
               static_cast<png_uint_32>(img.height()), 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int row = 0; row < img.height(); ++row) {
    png_write_row(png, gray.data() + static_cast<std::size_t>(row) * img.width());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

RangeImage read_raw_f32(const std::filesystem::path& path, const SensorIntrinsics& intr) {
  intr.validate();
  auto in = open_in(path);
  std::vector<float> pixels(static_cast<std::size_t>(intr.height) * intr.width);
  for (float& r : pixels) r = get_f32(in);
  in.peek();
  require(in.eof(), Errc::kFormatError, "raw file larger than H*W floats");
  return RangeImage(intr, std::move(pixels));
}

void write_raw_f32(const std::filesystem::path& path, const RangeImage& img) {
  auto out = open_out(path);
  for (float r : img.pixels()) put_f32(out, r);
  check_stream(out, "failed writing raw f32");
}

std::vector<char> read_file_bytes(const std::filesystem::path& path) {
  auto in = open_in(path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace tulip::io
