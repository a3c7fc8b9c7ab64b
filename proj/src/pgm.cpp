#include <atwb/pgm.hpp>

#include <atwb/container.hpp>
#include <atwb/error.hpp>

#include <cctype>
#include <string>

namespace atwb {

std::vector<std::uint8_t> encode_pgm(const GrayImage& image) {
  if (image.width == 0 || image.height == 0) throw ValueError("encode_pgm: image has zero extent");
  if (image.pixels.size() != image.width * image.height) {
    throw ShapeError("encode_pgm", "pixel count", image.width * image.height, image.pixels.size());
  }
  const std::string header =
      "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.pixels.begin(), image.pixels.end());
  return out;
}

namespace {

class HeaderParser {
 public:
  explicit HeaderParser(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else {
        return;
      }
    }
  }

  std::size_t number(const char* field) {
    skip_space_and_comments();
    if (pos_ >= bytes_.size() || !std::isdigit(bytes_[pos_])) {
      throw FormatError(std::string("decode_pgm: malformed header, expected ") + field);
    }
    std::size_t value = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + static_cast<std::size_t>(bytes_[pos_] - '0');
      if (value > (std::size_t{1} << 32)) throw FormatError(std::string("decode_pgm: ") + field + " too large");
      ++pos_;
    }
    return value;
  }

  std::size_t& pos() { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

GrayImage decode_pgm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    throw FormatError("decode_pgm: malformed header, expected magic 'P5'");
  }
  HeaderParser parser(bytes.subspan(2));
  GrayImage image;
  image.width = parser.number("width");
  image.height = parser.number("height");
  const std::size_t maxval = parser.number("maxval");
  if (image.width == 0 || image.height == 0) throw FormatError("decode_pgm: zero image extent");
  if (maxval != 255) {
    throw FormatError("decode_pgm: maxval " + std::to_string(maxval) + " unsupported (must be 255)");
  }
  // Exactly one whitespace byte separates the header from the raster.
  std::size_t pos = 2 + parser.pos();
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    throw FormatError("decode_pgm: malformed header, missing separator before raster");
  }
  ++pos;
  const std::size_t count = image.width * image.height;
  if (bytes.size() - pos != count) {
    throw FormatError("decode_pgm: raster has " + std::to_string(bytes.size() - pos) +
                      " bytes, expected " + std::to_string(count));
  }
  image.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return image;
}

void write_pgm(const GrayImage& image, const std::filesystem::path& path) {
  write_file_bytes(path, encode_pgm(image));
}

GrayImage read_pgm(const std::filesystem::path& path) { return decode_pgm(read_file_bytes(path)); }

}  // namespace atwb
