#include "lamkit/array.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "lamkit/errors.hpp"

namespace lamkit {

/*
 * Array file layout, little-endian:
 *
 *   bytes  0..7   magic "LKAR0001"
 *   bytes  8..11  dtype code (uint32)
 *   bytes 12..15  rank (uint32), at most 6
 *   bytes 16..63  dims, int64[6]; unused slots are zero
 *   bytes 64..    payload, row-major, tightly packed
 */

static constexpr char kMagic[8] = {'L', 'K', 'A', 'R', '0', '0', '0', '1'};
static constexpr uint32_t kMaxRank = 6;

size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::u8: return 1;
    case Dtype::f32: return 4;
    case Dtype::i32: return 4;
    case Dtype::u32: return 4;
    case Dtype::f64: return 8;
    case Dtype::u64: return 8;
  }
  throw CorruptionError("unknown dtype code " + std::to_string(static_cast<uint32_t>(d)));
}

const char* dtype_name(Dtype d) {
  switch (d) {
    case Dtype::u8: return "u8";
    case Dtype::f32: return "f32";
    case Dtype::i32: return "i32";
    case Dtype::u32: return "u32";
    case Dtype::f64: return "f64";
    case Dtype::u64: return "u64";
  }
  return "?";
}

template <typename T, Dtype D>
static std::span<const T> typed_view(const NdArray& a) {
  if (a.dtype != D)
    throw CorruptionError(std::string("array dtype is ") + dtype_name(a.dtype) +
                          ", expected " + dtype_name(D));
  return {reinterpret_cast<const T*>(a.data.data()), a.data.size() / sizeof(T)};
}

template <typename T, Dtype D>
static std::span<T> typed_view_mut(NdArray& a) {
  auto v = typed_view<T, D>(a);
  return {const_cast<T*>(v.data()), v.size()};
}

std::span<const float> NdArray::f32() const { return typed_view<float, Dtype::f32>(*this); }
std::span<float> NdArray::f32() { return typed_view_mut<float, Dtype::f32>(*this); }
std::span<const uint8_t> NdArray::u8() const { return typed_view<uint8_t, Dtype::u8>(*this); }
std::span<uint8_t> NdArray::u8() { return typed_view_mut<uint8_t, Dtype::u8>(*this); }
std::span<const uint64_t> NdArray::u64() const { return typed_view<uint64_t, Dtype::u64>(*this); }
std::span<uint64_t> NdArray::u64() { return typed_view_mut<uint64_t, Dtype::u64>(*this); }
std::span<const int32_t> NdArray::i32() const { return typed_view<int32_t, Dtype::i32>(*this); }
std::span<int32_t> NdArray::i32() { return typed_view_mut<int32_t, Dtype::i32>(*this); }

NdArray make_array(Dtype dtype, std::vector<int64_t> dims) {
  if (dims.size() > kMaxRank) throw ConfigError("array rank exceeds 6");
  NdArray a;
  a.dtype = dtype;
  a.dims = std::move(dims);
  for (int64_t d : a.dims)
    if (d < 0) throw ConfigError("negative array dimension");
  a.data.assign(static_cast<size_t>(a.numel()) * dtype_size(dtype), 0);
  return a;
}

static void put_u32le(uint8_t* p, uint32_t v) {
  p[0] = v & 0xff;
  p[1] = (v >> 8) & 0xff;
  p[2] = (v >> 16) & 0xff;
  p[3] = (v >> 24) & 0xff;
}

static void put_i64le(uint8_t* p, int64_t sv) {
  uint64_t v = static_cast<uint64_t>(sv);
  for (int i = 0; i < 8; ++i) p[i] = (v >> (8 * i)) & 0xff;
}

static uint32_t get_u32le(const uint8_t* p) {
  return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
}

static int64_t get_i64le(const uint8_t* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(p[i]) << (8 * i);
  return static_cast<int64_t>(v);
}

void write_array(const std::filesystem::path& path, const NdArray& a) {
  if (a.dims.size() > kMaxRank) throw ConfigError("array rank exceeds 6");
  uint8_t header[64];
  std::memset(header, 0, sizeof(header));
  std::memcpy(header, kMagic, 8);
  put_u32le(header + 8, static_cast<uint32_t>(a.dtype));
  put_u32le(header + 12, static_cast<uint32_t>(a.dims.size()));
  for (size_t i = 0; i < a.dims.size(); ++i) put_i64le(header + 16 + 8 * i, a.dims[i]);

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for write: " + tmp.string());
    out.write(reinterpret_cast<const char*>(header), sizeof(header));
    out.write(reinterpret_cast<const char*>(a.data.data()),
              static_cast<std::streamsize>(a.data.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed: " + path.string() + ": " + ec.message());
}

NdArray read_array(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  uint8_t header[64];
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  if (in.gcount() != sizeof(header))
    throw CorruptionError("truncated array header: " + path.string());
  if (std::memcmp(header, kMagic, 8) != 0)
    throw CorruptionError("bad array magic: " + path.string());
  uint32_t code = get_u32le(header + 8);
  if (code > 5) throw CorruptionError("unknown dtype code in " + path.string());
  uint32_t rank = get_u32le(header + 12);
  if (rank > kMaxRank) throw CorruptionError("bad rank in " + path.string());

  std::vector<int64_t> dims(rank);
  for (uint32_t i = 0; i < rank; ++i) {
    dims[i] = get_i64le(header + 16 + 8 * i);
    if (dims[i] < 0) throw CorruptionError("negative dim in " + path.string());
  }
  NdArray a = make_array(static_cast<Dtype>(code), dims);
  in.read(reinterpret_cast<char*>(a.data.data()), static_cast<std::streamsize>(a.data.size()));
  if (static_cast<size_t>(in.gcount()) != a.data.size())
    throw CorruptionError("truncated array payload: " + path.string());
  return a;
}

void Manifest::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : entries)
    if (k == key) {
      v = value;
      return;
    }
  entries.emplace_back(key, value);
}

void Manifest::set_int(const std::string& key, int64_t value) { set(key, std::to_string(value)); }

void Manifest::set_real(const std::string& key, double value) {
  std::ostringstream os;
  os.precision(17);
  os << value;
  set(key, os.str());
}

bool Manifest::has(const std::string& key) const {
  for (const auto& [k, v] : entries)
    if (k == key) return true;
  return false;
}

const std::string& Manifest::get(const std::string& key) const {
  for (const auto& [k, v] : entries)
    if (k == key) return v;
  throw LookupError("manifest key not found: " + key);
}

std::string Manifest::get_or(const std::string& key, const std::string& dflt) const {
  return has(key) ? get(key) : dflt;
}

int64_t Manifest::get_int(const std::string& key) const {
  const std::string& s = get(key);
  try {
    size_t pos = 0;
    int64_t v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError("manifest key '" + key + "' is not an integer: " + s);
  }
}

double Manifest::get_real(const std::string& key) const {
  const std::string& s = get(key);
  try {
    size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError("manifest key '" + key + "' is not a number: " + s);
  }
}

void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  std::string text;
  for (const auto& [k, v] : m.entries) text += k + " = " + v + "\n";
  atomic_write_text(path, text);
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  Manifest m;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos || line[start] == '#') continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError("malformed manifest line " + std::to_string(lineno) + " in " +
                       path.string());
    auto trim = [](std::string s) {
      size_t a = s.find_first_not_of(" \t\r");
      size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    std::string key = trim(line.substr(0, eq));
    if (key.empty())
      throw ParseError("empty key at manifest line " + std::to_string(lineno) + " in " +
                       path.string());
    m.set(key, trim(line.substr(eq + 1)));
  }
  return m;
}

void atomic_write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for write: " + tmp.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed: " + path.string() + ": " + ec.message());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace lamkit
