#pragma once

// Versioned little-endian tensor container.
//
// Layout:
//   magic   "DCMP" (4 bytes)
//   u32     format version (currently 1)
//   u32     kind tag (see Container::Kind)
//   u32     record count
//   records, each:
//     u32   name length, then name bytes
//     u8    dtype (0 = f64, 1 = i64, 2 = utf-8 bytes)
//     u32   ndim, then ndim x u64 dims
//     payload: prod(dims) elements, little-endian

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "deepcamp/core.hpp"

namespace deepcamp {

inline constexpr std::array<char, 4> kContainerMagic{'D', 'C', 'M', 'P'};
inline constexpr std::uint32_t kContainerVersion = 1;

struct Tensor {
  enum class DType : std::uint8_t { F64 = 0, I64 = 1, Bytes = 2 };

  DType dtype = DType::F64;
  std::vector<std::uint64_t> shape;
  std::vector<double> f64;
  std::vector<std::int64_t> i64;
  std::string bytes;

  static Tensor of(std::vector<double> v, std::vector<std::uint64_t> shape = {}) {
    Tensor t;
    t.dtype = DType::F64;
    t.shape = shape.empty() ? std::vector<std::uint64_t>{v.size()} : std::move(shape);
    t.f64 = std::move(v);
    return t;
  }
  static Tensor of_ints(std::vector<std::int64_t> v, std::vector<std::uint64_t> shape = {}) {
    Tensor t;
    t.dtype = DType::I64;
    t.shape = shape.empty() ? std::vector<std::uint64_t>{v.size()} : std::move(shape);
    t.i64 = std::move(v);
    return t;
  }
  static Tensor of_text(std::string s) {
    Tensor t;
    t.dtype = DType::Bytes;
    t.shape = {s.size()};
    t.bytes = std::move(s);
    return t;
  }

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

class Container {
 public:
  enum class Kind : std::uint32_t { Dataset = 1, Network = 2, Bundle = 3 };

  Container() = default;
  explicit Container(Kind k) : kind_(k) {}

  Kind kind() const { return kind_; }

  void put(const std::string& name, Tensor t) { records_[name] = std::move(t); }
  void put_f64(const std::string& name, std::vector<double> v, std::vector<std::uint64_t> shape = {}) {
    put(name, Tensor::of(std::move(v), std::move(shape)));
  }
  void put_i64(const std::string& name, std::vector<std::int64_t> v, std::vector<std::uint64_t> shape = {}) {
    put(name, Tensor::of_ints(std::move(v), std::move(shape)));
  }
  void put_text(const std::string& name, std::string s) { put(name, Tensor::of_text(std::move(s))); }
  void put_scalar(const std::string& name, double v) { put_f64(name, {v}); }
  void put_int(const std::string& name, std::int64_t v) { put_i64(name, {v}); }

  bool has(const std::string& name) const { return records_.count(name) != 0; }

  const Tensor& get(const std::string& name) const {
    auto it = records_.find(name);
    if (it == records_.end()) throw FormatError("container: missing record '" + name + "'");
    return it->second;
  }
  const std::vector<double>& f64(const std::string& name) const {
    const auto& t = get(name);
    if (t.dtype != Tensor::DType::F64) throw FormatError("container: record '" + name + "' is not f64");
    return t.f64;
  }
  const std::vector<std::int64_t>& i64(const std::string& name) const {
    const auto& t = get(name);
    if (t.dtype != Tensor::DType::I64) throw FormatError("container: record '" + name + "' is not i64");
    return t.i64;
  }
  const std::string& text(const std::string& name) const {
    const auto& t = get(name);
    if (t.dtype != Tensor::DType::Bytes) throw FormatError("container: record '" + name + "' is not text");
    return t.bytes;
  }
  double scalar(const std::string& name) const {
    const auto& v = f64(name);
    if (v.size() != 1) throw FormatError("container: record '" + name + "' is not a scalar");
    return v[0];
  }
  std::int64_t integer(const std::string& name) const {
    const auto& v = i64(name);
    if (v.size() != 1) throw FormatError("container: record '" + name + "' is not a scalar");
    return v[0];
  }

  const std::map<std::string, Tensor>& records() const { return records_; }

  std::string serialize() const {
    std::string out;
    out.append(kContainerMagic.data(), kContainerMagic.size());
    put_u32(out, kContainerVersion);
    put_u32(out, static_cast<std::uint32_t>(kind_));
    put_u32(out, static_cast<std::uint32_t>(records_.size()));
    for (const auto& [name, t] : records_) {
      put_u32(out, static_cast<std::uint32_t>(name.size()));
      out.append(name);
      out.push_back(static_cast<char>(t.dtype));
      put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
      for (auto d : t.shape) put_u64(out, d);
      const auto n = t.element_count();
      switch (t.dtype) {
        case Tensor::DType::F64:
          if (t.f64.size() != n) throw FormatError("container: shape/data mismatch in '" + name + "'");
          for (double v : t.f64) put_u64(out, std::bit_cast<std::uint64_t>(v));
          break;
        case Tensor::DType::I64:
          if (t.i64.size() != n) throw FormatError("container: shape/data mismatch in '" + name + "'");
          for (auto v : t.i64) put_u64(out, static_cast<std::uint64_t>(v));
          break;
        case Tensor::DType::Bytes:
          if (t.bytes.size() != n) throw FormatError("container: shape/data mismatch in '" + name + "'");
          out.append(t.bytes);
          break;
      }
    }
    return out;
  }

  static Container deserialize(const std::string& buf) {
    Reader r{buf};
    if (buf.size() < 4 || std::memcmp(buf.data(), kContainerMagic.data(), 4) != 0) {
      throw FormatError("container: bad magic");
    }
    r.pos = 4;
    const auto version = r.u32();
    if (version != kContainerVersion) {
      throw FormatError("container: unsupported version " + std::to_string(version) + " (reader supports " +
                        std::to_string(kContainerVersion) + ")");
    }
    Container c(static_cast<Kind>(r.u32()));
    const auto count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto name_len = r.u32();
      std::string name = r.bytes(name_len);
      Tensor t;
      const auto dt = static_cast<std::uint8_t>(r.bytes(1)[0]);
      if (dt > 2) throw FormatError("container: unknown dtype in '" + name + "'");
      t.dtype = static_cast<Tensor::DType>(dt);
      const auto ndim = r.u32();
      for (std::uint32_t d = 0; d < ndim; ++d) t.shape.push_back(r.u64());
      const auto n = t.element_count();
      switch (t.dtype) {
        case Tensor::DType::F64:
          r.need(n * 8);
          t.f64.resize(n);
          for (auto& v : t.f64) v = std::bit_cast<double>(r.u64());
          break;
        case Tensor::DType::I64:
          r.need(n * 8);
          t.i64.resize(n);
          for (auto& v : t.i64) v = static_cast<std::int64_t>(r.u64());
          break;
        case Tensor::DType::Bytes:
          t.bytes = r.bytes(n);
          break;
      }
      c.records_[name] = std::move(t);
    }
    return c;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    const auto buf = serialize();
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("write failed: " + path.string());
  }

  static Container load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return deserialize(ss.str());
  }

  friend bool operator==(const Container&, const Container&) = default;

 private:
  struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::uint64_t n) const {
      if (n > buf.size() - pos) throw IoError("container: truncated input");
    }
    std::string bytes(std::uint64_t n) {
      need(n);
      std::string s = buf.substr(pos, n);
      pos += n;
      return s;
    }
    std::uint32_t u32() {
      need(4);
      std::uint32_t v = 0;
      for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
      pos += 4;
      return v;
    }
    std::uint64_t u64() {
      need(8);
      std::uint64_t v = 0;
      for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
      pos += 8;
      return v;
    }
  };

  static void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  static void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }

  Kind kind_ = Kind::Dataset;
  std::map<std::string, Tensor> records_;
};

}  // namespace deepcamp
