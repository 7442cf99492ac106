#pragma once

// On-disk formats.
//
// LSRT (single tensor):
//   "LSRT" | version u32 | dtype u8 | rank u8 | dims u32 x rank | payload
// LSRC (named-tensor checkpoint):
//   "LSRC" | version u32 | count u32 | per tensor:
//     name_len u16 | name (UTF-8) | dtype u8 | rank u8 | dims u32 x rank | payload
// All integers and payloads little-endian. dtype 0 = float32, 1 = int32.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "lsr/autodiff.hpp"
#include "lsr/tensor.hpp"

namespace lsr::io {

inline constexpr std::uint32_t kFormatVersion = 1;

enum class DType : std::uint8_t { Float32 = 0, Int32 = 1 };

using AnyTensor = std::variant<Tensor<float>, Tensor<std::int32_t>>;

void write_tensor(const std::filesystem::path& path, const Tensor<float>& t);
void write_tensor(const std::filesystem::path& path, const Tensor<std::int32_t>& t);
AnyTensor read_any_tensor(const std::filesystem::path& path);
Tensor<float> read_float_tensor(const std::filesystem::path& path);
Tensor<std::int32_t> read_int_tensor(const std::filesystem::path& path);

/// Ordered (by name) collection of named tensors.
using NamedTensors = std::map<std::string, AnyTensor>;

void write_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors read_checkpoint(const std::filesystem::path& path);

/// Parameters as float32 tensors under their own names, with `prefix`.
template <class T>
void put_parameters(NamedTensors& out, const ad::ParameterSet<T>& params, const std::string& prefix = "");

/// Extract every tensor whose name starts with `prefix` into a parameter set
/// (prefix stripped), in the order `names` lists them.
template <class T>
ad::ParameterSet<T> take_parameters(const NamedTensors& in, const std::vector<std::string>& names,
                                    const std::string& prefix = "");

/// Stable 64-bit hash of a file's bytes.
std::uint64_t file_hash(const std::filesystem::path& path);

}  // namespace lsr::io
