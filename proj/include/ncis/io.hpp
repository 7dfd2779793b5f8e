#ifndef NCIS_IO_HPP
#define NCIS_IO_HPP

#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "ncis/dataset.hpp"
#include "ncis/optim.hpp"
#include "ncis/tensor.hpp"

namespace ncis {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

using Bytes = std::vector<std::uint8_t>;

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFile("missing file: " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const Bytes& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Binary PGM (P5) / PPM (P6), maxval 255

inline Bytes encode_image(const Image& img) {
  if (img.rank() != 3 || (img.dim(0) != 1 && img.dim(0) != 3))
    throw InvalidArgument("image must be 1 x H x W or 3 x H x W");
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const std::string header =
      std::string(c == 1 ? "P5" : "P6") + "\n" + std::to_string(w) + " " + std::to_string(h) +
      "\n255\n";
  Bytes out(header.begin(), header.end());
  out.reserve(header.size() + c * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = std::clamp(static_cast<double>(img.at(ch, y, x)), 0.0, 1.0);
        out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
      }
  return out;
}

inline Image decode_image(const Bytes& bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&]() -> std::size_t {
    skip_space();
    std::size_t v = 0, digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (++digits > 9) throw FormatError("image header: number too large");
    }
    if (digits == 0) throw FormatError("image header: expected a number");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
    throw FormatError("image header: expected P5 or P6 magic");
  const std::size_t c = bytes[1] == '5' ? 1 : 3;
  pos = 2;
  const std::size_t w = read_uint(), h = read_uint(), maxval = read_uint();
  if (w == 0 || h == 0) throw FormatError("image header: zero dimension");
  if (maxval != 255) throw FormatError("image header: only maxval 255 is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos]))
    throw FormatError("image header: missing separator before payload");
  ++pos;
  if (bytes.size() - pos < c * h * w)
    throw FormatError("image payload truncated: need " + std::to_string(c * h * w) +
                      " bytes, have " + std::to_string(bytes.size() - pos));
  Image img({c, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch)
        img.at(ch, y, x) = static_cast<float>(bytes[pos++]) / 255.0f;
  return img;
}

inline void save_image(const std::filesystem::path& path, const Image& img) {
  write_file(path, encode_image(img));
}

/// ".pgm" for one channel, ".ppm" otherwise.
inline std::string image_extension(const Image& img) { return img.dim(0) == 1 ? ".pgm" : ".ppm"; }

inline Image load_image(const std::filesystem::path& path) { return decode_image(read_file(path)); }

// ---------------------------------------------------------------------------
// NCT1 tensors: "NCT1", u8 dtype (1=f32, 2=f64), u8 ndim, ndim x u32 extents,
// raw little-endian row-major payload.

namespace detail {

template <typename U>
void put(Bytes& out, U v) {
  std::uint8_t buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.insert(out.end(), buf, buf + sizeof(U));
}

class Reader {
 public:
  Reader(const Bytes& bytes, std::size_t pos = 0) : bytes_(bytes), pos_(pos) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  const std::uint8_t* take(std::size_t n) {
    need(n);
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("unexpected end of data");
  }
  const Bytes& bytes_;
  std::size_t pos_;
};

template <typename T>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? 1 : 2;
}

}  // namespace detail

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

template <typename T>
void append_tensor_record(Bytes& out, const Tensor<T>& t) {
  if (t.rank() > 255) throw InvalidArgument("tensor rank exceeds 255");
  out.insert(out.end(), {'N', 'C', 'T', '1'});
  out.push_back(detail::dtype_code<T>());
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) {
    if (d > 0xFFFFFFFFull) throw InvalidArgument("tensor extent exceeds u32");
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  }
  const auto* raw = reinterpret_cast<const std::uint8_t*>(t.data());
  out.insert(out.end(), raw, raw + t.size() * sizeof(T));
}

inline AnyTensor read_tensor_record(detail::Reader& in) {
  const std::uint8_t* magic = in.take(4);
  if (std::memcmp(magic, "NCT1", 4) != 0) throw FormatError("bad tensor magic (expected NCT1)");
  const auto dtype = in.get<std::uint8_t>();
  if (dtype != 1 && dtype != 2)
    throw FormatError("bad tensor dtype byte " + std::to_string(dtype));
  const auto ndim = in.get<std::uint8_t>();
  Shape shape(ndim);
  for (auto& d : shape) d = in.get<std::uint32_t>();
  auto payload = [&]<typename T>(std::type_identity<T>) -> AnyTensor {
    const std::size_t n = shape_volume(shape);
    std::vector<T> data(n);
    std::memcpy(data.data(), in.take(n * sizeof(T)), n * sizeof(T));
    return Tensor<T>(shape, std::move(data));
  };
  return dtype == 1 ? payload(std::type_identity<float>{}) : payload(std::type_identity<double>{});
}

template <typename T>
Bytes encode_tensor(const Tensor<T>& t) {
  Bytes out;
  append_tensor_record(out, t);
  return out;
}

inline AnyTensor decode_tensor(const Bytes& bytes) {
  detail::Reader in(bytes);
  AnyTensor t = read_tensor_record(in);
  if (!in.done()) throw FormatError("trailing bytes after tensor payload");
  return t;
}

template <typename T>
Tensor<T> as_tensor(const AnyTensor& any) {
  return std::visit([](const auto& t) { return t.template cast<T>(); }, any);
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  write_file(path, encode_tensor(t));
}

template <typename T = float>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  return as_tensor<T>(decode_tensor(read_file(path)));
}

// ---------------------------------------------------------------------------
// NCK1 checkpoints: "NCK1", u32 count, then per tensor u16 name length,
// UTF-8 name, NCT1 record.

template <typename T>
Bytes encode_checkpoint(const ParameterSet<T>& params) {
  Bytes out{'N', 'C', 'K', '1'};
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  std::set<std::string> seen;
  for (const auto& [name, t] : params) {
    if (!seen.insert(name).second) throw InvalidArgument("duplicate checkpoint name '" + name + "'");
    if (name.size() > 0xFFFF) throw InvalidArgument("checkpoint name too long");
    detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    append_tensor_record(out, t);
  }
  return out;
}

template <typename T = float>
ParameterSet<T> decode_checkpoint(const Bytes& bytes) {
  detail::Reader in(bytes);
  if (std::memcmp(in.take(4), "NCK1", 4) != 0)
    throw FormatError("bad checkpoint magic (expected NCK1)");
  const auto count = in.get<std::uint32_t>();
  ParameterSet<T> params;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = in.get<std::uint16_t>();
    const auto* p = in.take(len);
    std::string name(reinterpret_cast<const char*>(p), len);
    if (params.contains(name)) throw FormatError("duplicate checkpoint name '" + name + "'");
    params.add(std::move(name), as_tensor<T>(read_tensor_record(in)));
  }
  if (!in.done()) throw FormatError("trailing bytes after checkpoint");
  return params;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParameterSet<T>& params) {
  write_file(path, encode_checkpoint(params));
}

template <typename T = float>
ParameterSet<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(read_file(path));
}

}  // namespace ncis

#endif  // NCIS_IO_HPP
