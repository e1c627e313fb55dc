#pragma once

// Little-endian binary containers.
//
// Field file (magic "PYLD0001"):
//   u32 T, V, H, W
//   V × { u16 name_len, name bytes (UTF-8), f64 mean, f64 std, f64 loss_weight, f64 level | NaN }
//   H × f64 latitude, W × f64 longitude
//   T·V·H·W × f32 values, (t, v, h, w) row-major
//
// Parameter checkpoint (magic "PYPT0001"):
//   u32 count
//   count × { u16 name_len, name, u8 rank, rank × u32 dims, prod(dims) × f32 }

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "nimbus/error.hpp"
#include "nimbus/grid.hpp"
#include "nimbus/tensor.hpp"

namespace nimbus::io {

static_assert(std::endian::native == std::endian::little, "binary containers assume a little-endian host");

inline constexpr std::string_view kFieldMagic = "PYLD0001";
inline constexpr std::string_view kParamMagic = "PYPT0001";

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void put_bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  template <class T>
  void put_array(const T* data, std::size_t n) {
    const auto* p = reinterpret_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n * sizeof(T));
  }
  void put_name(const std::string& name) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw DomainError("name too long: " + name);
    put(static_cast<std::uint16_t>(name.size()));
    put_bytes(name);
  }
  const std::vector<char>& bytes() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> bytes) : buf_(std::move(bytes)) {}

  std::uint64_t offset() const { return pos_; }
  std::uint64_t remaining() const { return buf_.size() - pos_; }

  template <class T>
  T get(const char* section) {
    need(sizeof(T), section);
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string(std::size_t n, const char* section) {
    need(n, section);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  template <class T>
  void get_array(T* out, std::size_t n, const char* section) {
    need(n * sizeof(T), section);
    std::memcpy(out, buf_.data() + pos_, n * sizeof(T));
    pos_ += n * sizeof(T);
  }
  void need(std::uint64_t n, const char* section) const {
    if (remaining() < n) throw FormatError(std::string("truncated ") + section, pos_);
  }

 private:
  std::vector<char> buf_;
  std::uint64_t pos_ = 0;
};

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<char>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

inline void check_magic(ByteReader& r, std::string_view magic) {
  if (r.remaining() < magic.size()) throw FormatError("bad magic", 0);
  if (r.get_string(magic.size(), "magic") != magic) throw FormatError("bad magic", 0);
}

inline std::vector<char> encode_fields(const grid::FieldBatch& x) {
  x.validate();
  ByteWriter w;
  w.put_bytes(kFieldMagic);
  for (std::size_t d : x.data.shape()) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw DomainError("dimension exceeds u32");
    w.put(static_cast<std::uint32_t>(d));
  }
  for (const auto& s : x.specs) {
    w.put_name(s.name);
    w.put(s.mean);
    w.put(s.std);
    w.put(s.loss_weight);
    w.put(s.level ? *s.level : std::numeric_limits<double>::quiet_NaN());
  }
  w.put_array(x.lat.data(), x.lat.size());
  w.put_array(x.lon.data(), x.lon.size());
  w.put_array(x.data.data(), x.data.size());
  return w.bytes();
}

inline grid::FieldBatch decode_fields(std::vector<char> bytes) {
  ByteReader r(std::move(bytes));
  check_magic(r, kFieldMagic);
  std::uint64_t dims[4];
  for (auto& d : dims) d = r.get<std::uint32_t>("header");

  std::uint64_t count = 1;
  for (auto d : dims) {
    if (d != 0 && count > std::numeric_limits<std::uint64_t>::max() / 4 / d) throw FormatError("dimension overflow", 8);
    count *= d;
  }
  const std::uint64_t min_header = dims[1] * (2 + 32) + (dims[2] + dims[3]) * 8;
  if (count * 4 > std::numeric_limits<std::uint64_t>::max() - min_header) throw FormatError("dimension overflow", 8);

  grid::FieldBatch x;
  x.specs.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(dims[1], 1u << 16)));
  for (std::uint64_t v = 0; v < dims[1]; ++v) {
    grid::VariableSpec s;
    const auto len = r.get<std::uint16_t>("header");
    s.name = r.get_string(len, "header");
    s.mean = r.get<double>("header");
    s.std = r.get<double>("header");
    s.loss_weight = r.get<double>("header");
    const double level = r.get<double>("header");
    if (!std::isnan(level)) s.level = level;
    x.specs.push_back(std::move(s));
  }
  r.need(dims[2] * 8 + dims[3] * 8, "header");
  x.lat.resize(dims[2]);
  x.lon.resize(dims[3]);
  r.get_array(x.lat.data(), x.lat.size(), "header");
  r.get_array(x.lon.data(), x.lon.size(), "header");

  r.need(count * 4, "payload");
  x.data = Tensor<float>({dims[0], dims[1], dims[2], dims[3]});
  r.get_array(x.data.data(), x.data.size(), "payload");
  if (r.remaining() != 0) throw FormatError("trailing bytes after payload", r.offset());
  return x;
}

inline void write_fields(const grid::FieldBatch& x, const std::filesystem::path& path) {
  write_file(path, encode_fields(x));
}

inline grid::FieldBatch read_fields(const std::filesystem::path& path) { return decode_fields(read_file(path)); }

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

inline std::vector<char> encode_params(const std::vector<NamedTensor>& tensors) {
  ByteWriter w;
  w.put_bytes(kParamMagic);
  w.put(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    w.put_name(t.name);
    w.put(static_cast<std::uint8_t>(t.value.rank()));
    for (std::size_t d : t.value.shape()) w.put(static_cast<std::uint32_t>(d));
    w.put_array(t.value.data(), t.value.size());
  }
  return w.bytes();
}

inline std::vector<NamedTensor> decode_params(std::vector<char> bytes) {
  ByteReader r(std::move(bytes));
  check_magic(r, kParamMagic);
  const auto count = r.get<std::uint32_t>("header");
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto len = r.get<std::uint16_t>("header");
    t.name = r.get_string(len, "header");
    const auto rank = r.get<std::uint8_t>("header");
    if (rank > Tensor<float>::kMaxRank) throw FormatError("tensor rank above 5", r.offset() - 1);
    Shape shape(rank);
    std::uint64_t n = 1;
    for (auto& d : shape) {
      d = r.get<std::uint32_t>("header");
      if (d != 0 && n > (std::uint64_t{1} << 40) / d) throw FormatError("dimension overflow", r.offset() - 4);
      n *= d;
    }
    r.need(n * 4, "payload");
    t.value = Tensor<float>(shape);
    r.get_array(t.value.data(), t.value.size(), "payload");
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace nimbus::io
