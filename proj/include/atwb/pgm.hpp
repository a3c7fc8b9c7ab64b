#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace atwb {

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, height * width

  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

// Binary PGM (P5) with maxval 255 and the header "P5\n<w> <h>\n255\n".
std::vector<std::uint8_t> encode_pgm(const GrayImage& image);

// Accepts any whitespace/comment layout the P5 format allows; maxval must be 255.
GrayImage decode_pgm(std::span<const std::uint8_t> bytes);

void write_pgm(const GrayImage& image, const std::filesystem::path& path);
GrayImage read_pgm(const std::filesystem::path& path);

}  // namespace atwb
