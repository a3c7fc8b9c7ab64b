#pragma once

// "ATWB" tensor container, little-endian throughout:
//
//   magic   4 bytes  "ATWB"
//   version u16      1
//   count   u32      number of entries
//   entry*  name_len u32, name (UTF-8), dtype u8 (0=f32, 1=f64, 2=u8),
//           rank u32, extents u64[rank], row-major payload
//
// An empty container is exactly the 10-byte header.

#include <atwb/tensor.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace atwb {

inline constexpr std::uint16_t kContainerVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

using TensorData = std::variant<Tensor<float>, Tensor<double>, Tensor<std::uint8_t>>;

struct ContainerEntry {
  std::string name;
  TensorData tensor;
};

std::vector<std::uint8_t> encode_container(std::span<const ContainerEntry> entries);

// Throws CorruptHeaderError, TruncatedError or DuplicateNameError.
std::vector<ContainerEntry> decode_container(std::span<const std::uint8_t> bytes);

void save_container(std::span<const ContainerEntry> entries, const std::filesystem::path& path);
std::vector<ContainerEntry> load_container(const std::filesystem::path& path);

// Entry lookup with a typed result; throws FormatError when missing or of another dtype.
template <typename T>
const Tensor<T>& find_tensor(std::span<const ContainerEntry> entries, const std::string& name);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace atwb
