#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "tulip/autograd.hpp"

namespace tulip {

// .tckpt layout (little endian): "TCKPT", u16 version = 1, u32 count, then per
// parameter in lexicographic name order: u16 name length, UTF-8 name, u8 rank,
// rank x u32 dims, f32 data. An optional trailing record holds u32 length and
// a key=value text block describing the model configuration.
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointData {
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  std::string config_text;
};

template <typename T>
void write_checkpoint(std::ostream& out, const ParameterSet<T>& params,
                      const std::string& config_text);
template <typename T>
void write_checkpoint(const std::filesystem::path& path, const ParameterSet<T>& params,
                      const std::string& config_text);

void write_checkpoint(std::ostream& out, const CheckpointData& data);
CheckpointData read_checkpoint(std::istream& in);
CheckpointData read_checkpoint(const std::filesystem::path& path);

// Copies stored tensors into params; names and shapes must match exactly.
template <typename T>
void load_parameters(const CheckpointData& data, ParameterSet<T>& params);

}  // namespace tulip
