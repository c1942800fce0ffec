#include "tulip/checkpoint.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>

#include "tulip/error.hpp"
#include "tulip/io.hpp"

namespace tulip {

void write_checkpoint(std::ostream& out, const CheckpointData& data) {
  auto sorted = data.tensors;
  std::sort(sorted.begin(), sorted.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  out.write("TCKPT", 5);
  io::put_u16(out, kCheckpointVersion);
  io::put_u32(out, static_cast<std::uint32_t>(sorted.size()));
  for (const auto& [name, tensor] : sorted) {
    require(name.size() <= 0xffff, Errc::kInvalidArgument, "parameter name too long");
    require(tensor.rank() <= 0xff, Errc::kInvalidArgument, "tensor rank too large");
    io::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::put_u8(out, static_cast<std::uint8_t>(tensor.rank()));
    for (std::int64_t d : tensor.shape()) io::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : tensor.data()) io::put_f32(out, v);
  }
  if (!data.config_text.empty()) {
    io::put_u32(out, static_cast<std::uint32_t>(data.config_text.size()));
    out.write(data.config_text.data(), static_cast<std::streamsize>(data.config_text.size()));
  }
  require(!out.fail(), Errc::kIoFailure, "failed writing checkpoint");
}

template <typename T>
void write_checkpoint(std::ostream& out, const ParameterSet<T>& params,
                      const std::string& config_text) {
  CheckpointData data;
  data.config_text = config_text;
  for (const auto& p : params) data.tensors.emplace_back(p.name, p.value.template cast<float>());
  write_checkpoint(out, data);
}

template <typename T>
void write_checkpoint(const std::filesystem::path& path, const ParameterSet<T>& params,
                      const std::string& config_text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.is_open(), Errc::kIoFailure, "cannot open for writing: " + path.string());
  write_checkpoint(out, params, config_text);
}

CheckpointData read_checkpoint(std::istream& in) {
  char magic[5] = {};
  in.read(magic, 5);
  require(!in.fail() && std::string(magic, 5) == "TCKPT", Errc::kFormatError,
          "missing TCKPT magic");
  const std::uint16_t version = io::get_u16(in);
  require(version == kCheckpointVersion, Errc::kFormatError,
          "unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = io::get_u32(in);
  CheckpointData data;
  data.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = io::get_u16(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    require(!in.fail(), Errc::kFormatError, "truncated parameter name");
    const std::uint8_t rank = io::get_u8(in);
    Shape shape(rank);
    for (auto& d : shape) d = io::get_u32(in);
    std::vector<float> values(static_cast<std::size_t>(numel(shape)));
    for (float& v : values) v = io::get_f32(in);
    data.tensors.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(values)));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    const std::uint32_t len = io::get_u32(in);
    data.config_text.resize(len);
    in.read(data.config_text.data(), len);
    require(!in.fail(), Errc::kFormatError, "truncated config record");
  }
  return data;
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.is_open(), Errc::kIoFailure, "cannot open for reading: " + path.string());
  return read_checkpoint(in);
}

template <typename T>
void load_parameters(const CheckpointData& data, ParameterSet<T>& params) {
  require(data.tensors.size() == params.size(), Errc::kShapeMismatch,
          "checkpoint holds " + std::to_string(data.tensors.size()) + " tensors, model expects " +
              std::to_string(params.size()));
  for (const auto& [name, tensor] : data.tensors) {
    require(params.contains(name), Errc::kShapeMismatch, "unexpected checkpoint tensor " + name);
    Parameter<T>& p = params[name];
    require(p.value.shape() == tensor.shape(), Errc::kShapeMismatch,
            "shape mismatch for " + name + ": checkpoint " + to_string(tensor.shape()) +
                " vs model " + to_string(p.value.shape()));
    p.value = tensor.template cast<T>();
  }
}

template void write_checkpoint<float>(std::ostream&, const ParameterSet<float>&, const std::string&);
template void write_checkpoint<double>(std::ostream&, const ParameterSet<double>&, const std::string&);
template void write_checkpoint<float>(const std::filesystem::path&, const ParameterSet<float>&,
                                      const std::string&);
template void write_checkpoint<double>(const std::filesystem::path&, const ParameterSet<double>&,
                                       const std::string&);
template void load_parameters<float>(const CheckpointData&, ParameterSet<float>&);
template void load_parameters<double>(const CheckpointData&, ParameterSet<double>&);

}  // namespace tulip
