#include <atwb/container.hpp>

#include <atwb/error.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>

namespace atwb {
namespace {

constexpr std::uint8_t kMagic[4] = {'A', 'T', 'W', 'B'};
constexpr std::uint32_t kMaxRank = 16;

class Writer {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  template <typename U>
  void little(U value) {
    using Bits = std::conditional_t<sizeof(U) == 1, std::uint8_t,
                 std::conditional_t<sizeof(U) == 2, std::uint16_t,
                 std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>>>;
    auto bits = std::bit_cast<Bits>(value);
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      out_.push_back(static_cast<std::uint8_t>(bits & 0xFF));
      if constexpr (sizeof(U) > 1) bits = static_cast<Bits>(bits >> 8);
    }
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }
  bool has(std::size_t n) const { return remaining() >= n; }

  template <typename U>
  U little() {
    using Bits = std::conditional_t<sizeof(U) == 1, std::uint8_t,
                 std::conditional_t<sizeof(U) == 2, std::uint16_t,
                 std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>>>;
    Bits bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      bits = static_cast<Bits>(bits | (static_cast<Bits>(bytes_[pos_ + i]) << (8 * i)));
    }
    pos_ += sizeof(U);
    return std::bit_cast<U>(bits);
  }

  std::span<const std::uint8_t> take(std::size_t n) {
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else if constexpr (std::is_same_v<T, double>) return DType::f64;
  else return DType::u8;
}

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
  }
  return 0;
}

template <typename T>
Tensor<T> decode_payload(Reader& r, const std::string& name, Shape shape) {
  const std::size_t count = element_count(shape);
  if (count > r.remaining() / sizeof(T)) {
    throw TruncatedError(name, "payload needs " + std::to_string(count * sizeof(T)) +
                                   " bytes, " + std::to_string(r.remaining()) + " remain");
  }
  std::vector<T> values(count);
  for (auto& v : values) v = r.little<T>();
  return Tensor<T>(std::move(shape), std::move(values));
}

}  // namespace

std::vector<std::uint8_t> encode_container(std::span<const ContainerEntry> entries) {
  std::set<std::string> names;
  for (const auto& e : entries) {
    if (!names.insert(e.name).second) throw DuplicateNameError(e.name);
    if (std::visit([](const auto& t) { return t.empty(); }, e.tensor)) {
      throw ValueError("encode_container: entry '" + e.name + "' holds no elements");
    }
  }
  Writer w;
  w.bytes(kMagic, 4);
  w.little<std::uint16_t>(kContainerVersion);
  w.little<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    w.little<std::uint32_t>(static_cast<std::uint32_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    std::visit(
        [&](const auto& tensor) {
          using T = typename std::decay_t<decltype(tensor)>::value_type;
          w.little<std::uint8_t>(static_cast<std::uint8_t>(dtype_of<T>()));
          w.little<std::uint32_t>(static_cast<std::uint32_t>(tensor.rank()));
          for (std::size_t extent : tensor.shape()) w.little<std::uint64_t>(extent);
          for (T v : tensor.values()) w.little<T>(v);
        },
        e.tensor);
  }
  return w.take();
}

std::vector<ContainerEntry> decode_container(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (!r.has(10)) throw CorruptHeaderError("container header shorter than 10 bytes");
  const auto magic = r.take(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw CorruptHeaderError("bad magic, expected 'ATWB'");
  const auto version = r.little<std::uint16_t>();
  if (version != kContainerVersion) {
    throw CorruptHeaderError("unsupported container version " + std::to_string(version));
  }
  const auto count = r.little<std::uint32_t>();

  std::vector<ContainerEntry> entries;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string label = "#" + std::to_string(i);
    if (!r.has(4)) throw TruncatedError(label, "missing name length");
    const auto name_len = r.little<std::uint32_t>();
    if (!r.has(name_len)) throw TruncatedError(label, "name runs past end of data");
    const auto raw = r.take(name_len);
    std::string name(raw.begin(), raw.end());
    if (!names.insert(name).second) throw DuplicateNameError(name);
    if (!r.has(5)) throw TruncatedError(name, "missing dtype/rank");
    const auto tag = r.little<std::uint8_t>();
    if (tag > static_cast<std::uint8_t>(DType::u8)) {
      throw CorruptHeaderError("entry '" + name + "' has unknown dtype tag " + std::to_string(tag));
    }
    const auto rank = r.little<std::uint32_t>();
    if (rank > kMaxRank) {
      throw CorruptHeaderError("entry '" + name + "' declares rank " + std::to_string(rank));
    }
    if (!r.has(static_cast<std::size_t>(rank) * 8)) throw TruncatedError(name, "extents run past end of data");
    Shape shape(rank);
    std::size_t total = 1;
    for (auto& extent : shape) {
      const auto e = r.little<std::uint64_t>();
      if (e == 0) throw CorruptHeaderError("entry '" + name + "' has a zero extent");
      if (e > bytes.size() || total > bytes.size() / e) {
        throw TruncatedError(name, "declared extents exceed the file size");
      }
      extent = static_cast<std::size_t>(e);
      total *= extent;
    }
    if (total * dtype_size(static_cast<DType>(tag)) > r.remaining()) {
      throw TruncatedError(name, "payload needs " +
                                     std::to_string(total * dtype_size(static_cast<DType>(tag))) +
                                     " bytes, " + std::to_string(r.remaining()) + " remain");
    }
    ContainerEntry entry{name, Tensor<float>()};
    switch (static_cast<DType>(tag)) {
      case DType::f32: entry.tensor = decode_payload<float>(r, name, std::move(shape)); break;
      case DType::f64: entry.tensor = decode_payload<double>(r, name, std::move(shape)); break;
      case DType::u8: entry.tensor = decode_payload<std::uint8_t>(r, name, std::move(shape)); break;
    }
    entries.push_back(std::move(entry));
  }
  if (r.remaining() != 0) {
    throw CorruptHeaderError(std::to_string(r.remaining()) + " trailing bytes after the last entry");
  }
  return entries;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

void save_container(std::span<const ContainerEntry> entries, const std::filesystem::path& path) {
  write_file_bytes(path, encode_container(entries));
}

std::vector<ContainerEntry> load_container(const std::filesystem::path& path) {
  return decode_container(read_file_bytes(path));
}

template <typename T>
const Tensor<T>& find_tensor(std::span<const ContainerEntry> entries, const std::string& name) {
  for (const auto& e : entries) {
    if (e.name != name) continue;
    if (const auto* t = std::get_if<Tensor<T>>(&e.tensor)) return *t;
    throw FormatError("entry '" + name + "' has an unexpected dtype");
  }
  throw FormatError("container has no entry named '" + name + "'");
}

template const Tensor<float>& find_tensor<float>(std::span<const ContainerEntry>, const std::string&);
template const Tensor<double>& find_tensor<double>(std::span<const ContainerEntry>, const std::string&);
template const Tensor<std::uint8_t>& find_tensor<std::uint8_t>(std::span<const ContainerEntry>,
                                                               const std::string&);

}  // namespace atwb
