#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "medprompt/tensor.hpp"

// Binary tensor files (.mpt), 8-bit PGM images, and small text-file helpers.
//
// .mpt layout (all integers little-endian):
//   magic "MPTF" | version u32 | rank u32 | dims u32[rank] | dtype u8 | payload
// where dtype is 1 for f32 and 2 for f64 and the payload is the row-major
// scalar array. The format is lossless; PGM export quantizes to
// round(clamp01(x) * 255) and is intended for visual inspection only.

namespace medprompt {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian and this code writes host-order bytes");

inline constexpr uint32_t kTensorFormatVersion = 1;

template <typename Scalar>
struct dtype_tag_of;
template <>
struct dtype_tag_of<float> {
  static constexpr uint8_t value = 1;
};
template <>
struct dtype_tag_of<double> {
  static constexpr uint8_t value = 2;
};

inline const char* dtype_name(uint8_t tag) {
  switch (tag) {
    case 1: return "f32";
    case 2: return "f64";
    default: return "unknown";
  }
}

namespace detail {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::istream& is, void* p, size_t n, const char* what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  check(static_cast<size_t>(is.gcount()) == n, "truncated payload: expected ", n,
        " more bytes for ", what);
}

template <typename T>
void write_pod(std::ostream& os, T v) {
  write_bytes(os, &v, sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
  T v;
  read_bytes(is, &v, sizeof(T), what);
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  check(s.size() <= (1u << 20), "string field too long: ", s.size(), " bytes");
  write_pod<uint32_t>(os, static_cast<uint32_t>(s.size()));
  write_bytes(os, s.data(), s.size());
}

inline std::string read_string(std::istream& is, const char* what) {
  const uint32_t n = read_pod<uint32_t>(is, what);
  check(n <= (1u << 20), "string field too long: ", n, " bytes for ", what);
  std::string s(n, '\0');
  if (n > 0) read_bytes(is, s.data(), n, what);
  return s;
}

/// Validates dims read from a file and returns the element count. The guard
/// keeps a corrupt header from requesting an absurd allocation.
inline Index checked_numel(const std::vector<uint32_t>& dims) {
  constexpr Index kMaxElems = Index(1) << 34;
  Index n = 1;
  for (uint32_t d : dims) {
    check(d >= 1, "dimension overflow: zero extent in stored shape");
    check(n <= kMaxElems / static_cast<Index>(d),
          "dimension overflow: stored shape exceeds ", kMaxElems, " elements");
    n *= static_cast<Index>(d);
  }
  return n;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  check(os.good(), "cannot open '", path, "' for writing");
  return os;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(is.good(), "cannot open '", path, "' for reading");
  return is;
}

}  // namespace detail

template <typename Scalar>
void save_tensor(const Tensor<Scalar>& t, const std::string& path) {
  auto os = detail::open_out(path);
  detail::write_bytes(os, "MPTF", 4);
  detail::write_pod<uint32_t>(os, kTensorFormatVersion);
  detail::write_pod<uint32_t>(os, static_cast<uint32_t>(t.rank()));
  for (Index d : t.shape()) {
    check(d <= Index(UINT32_MAX), "dimension overflow: extent ", d, " does not fit u32");
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(d));
  }
  detail::write_pod<uint8_t>(os, dtype_tag_of<Scalar>::value);
  detail::write_bytes(os, t.data(), static_cast<size_t>(t.numel()) * sizeof(Scalar));
  os.flush();
  check(os.good(), "write failed for '", path, "'");
}

template <typename Scalar>
Tensor<Scalar> load_tensor(const std::string& path) {
  auto is = detail::open_in(path);
  char magic[4];
  detail::read_bytes(is, magic, 4, "magic");
  check(std::string_view(magic, 4) == "MPTF", "bad magic in '", path,
        "': not a tensor file");
  const uint32_t version = detail::read_pod<uint32_t>(is, "version");
  check(version == kTensorFormatVersion, "version mismatch in '", path, "': file has ",
        version, ", reader supports ", kTensorFormatVersion);
  const uint32_t rank = detail::read_pod<uint32_t>(is, "rank");
  check(rank >= 1 && rank <= 8, "dimension overflow: rank ", rank, " outside [1, 8]");
  std::vector<uint32_t> dims(rank);
  for (uint32_t& d : dims) d = detail::read_pod<uint32_t>(is, "dims");
  const Index n = detail::checked_numel(dims);
  const uint8_t tag = detail::read_pod<uint8_t>(is, "dtype");
  check(tag == dtype_tag_of<Scalar>::value, "dtype mismatch in '", path, "': file holds ",
        dtype_name(tag), ", requested ", dtype_name(dtype_tag_of<Scalar>::value));
  Shape shape(dims.begin(), dims.end());
  Tensor<Scalar> t = Tensor<Scalar>::empty(shape);
  detail::read_bytes(is, t.data(), static_cast<size_t>(n) * sizeof(Scalar), "tensor payload");
  return t;
}

namespace detail {

/// Accepts {H, W} or {1, 1, H, W} and returns the plane extents.
inline std::pair<Index, Index> image_extents(const Shape& s) {
  if (s.size() == 2) return {s[0], s[1]};
  check(s.size() == 4 && s[0] == 1 && s[1] == 1,
        "pgm: expected a single-channel image, got shape ", shape_str(s));
  return {s[2], s[3]};
}

}  // namespace detail

template <typename Scalar>
void save_pgm(const Tensor<Scalar>& t, const std::string& path) {
  const auto [h, w] = detail::image_extents(t.shape());
  auto os = detail::open_out(path);
  os << "P5\n" << w << " " << h << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(w));
  const Scalar* p = t.data();
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      const double v = std::clamp(static_cast<double>(p[y * w + x]), 0.0, 1.0);
      row[static_cast<size_t>(x)] = static_cast<uint8_t>(std::lround(v * 255.0));
    }
    detail::write_bytes(os, row.data(), row.size());
  }
  os.flush();
  check(os.good(), "write failed for '", path, "'");
}

namespace detail {

/// Reads one PGM header token, skipping whitespace and '#' comment lines.
inline std::string pgm_token(std::istream& is) {
  // Hand-rolled instead of operator>> so '#' comments terminate correctly.
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  check(!tok.empty(), "truncated payload: pgm header ends early");
  return tok;
}

inline Index pgm_number(std::istream& is, const char* what) {
  const std::string tok = pgm_token(is);
  Index v = 0;
  for (char ch : tok) {
    check(ch >= '0' && ch <= '9', "pgm: bad ", what, " token '", tok, "'");
    v = v * 10 + (ch - '0');
    check(v <= (Index(1) << 20), "dimension overflow: pgm ", what, " exceeds 2^20");
  }
  check(v >= 1, "pgm: ", what, " must be >= 1");
  return v;
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> load_pgm(const std::string& path) {
  auto is = detail::open_in(path);
  char magic[2];
  detail::read_bytes(is, magic, 2, "magic");
  check(std::string_view(magic, 2) == "P5", "bad magic in '", path, "': not a binary pgm");
  const Index w = detail::pgm_number(is, "width");
  const Index h = detail::pgm_number(is, "height");
  const Index maxval = detail::pgm_number(is, "maxval");
  check(maxval == 255, "pgm: only maxval 255 is supported, got ", maxval);
  // pgm_number consumed the single whitespace separator; the raster follows.
  std::vector<uint8_t> bytes(static_cast<size_t>(w * h));
  detail::read_bytes(is, bytes.data(), bytes.size(), "pgm raster");
  Tensor<Scalar> t = Tensor<Scalar>::empty({1, 1, h, w});
  Scalar* p = t.data();
  for (size_t i = 0; i < bytes.size(); ++i) p[i] = Scalar(bytes[i]) / Scalar(255);
  return t;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::trunc);
  check(os.good(), "cannot open '", path, "' for writing");
  os << content;
  os.flush();
  check(os.good(), "write failed for '", path, "'");
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream is(path);
  check(is.good(), "cannot open '", path, "' for reading");
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

}  // namespace medprompt
