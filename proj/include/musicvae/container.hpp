#pragma once

// Checkpoint container. Little-endian layout:
//
//   bytes 0..7   magic "MVAECKPT"
//   u32          format version (1)
//   u32          metadata entry count, then per entry: str key, str value
//   u32          tensor count, then per tensor:
//                  str name, u64 rows, u64 cols, rows*cols f64 (column-major)
//
// where str is a u32 byte length followed by UTF-8 bytes. Tensors keep
// insertion order; names are unique.

#include <Eigen/Dense>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace musicvae {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

class Container {
 public:
  static constexpr std::uint32_t kVersion = 1;

  std::map<std::string, std::string> meta;

  void put(const std::string& name, Eigen::MatrixXd value) {
    auto it = index_.find(name);
    if (it != index_.end()) {
      tensors_[it->second].second = std::move(value);
      return;
    }
    index_.emplace(name, tensors_.size());
    tensors_.emplace_back(name, std::move(value));
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  const Eigen::MatrixXd& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw FormatError("checkpoint has no tensor '" + name + "'");
    return tensors_[it->second].second;
  }

  const std::vector<std::pair<std::string, Eigen::MatrixXd>>& tensors() const { return tensors_; }

  const std::string& meta_at(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw FormatError("checkpoint has no metadata key '" + key + "'");
    return it->second;
  }

  std::string serialize() const {
    std::string out("MVAECKPT");
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(meta.size()));
    for (const auto& [k, v] : meta) {
      put_str(out, k);
      put_str(out, v);
    }
    put_u32(out, static_cast<std::uint32_t>(tensors_.size()));
    for (const auto& [name, m] : tensors_) {
      put_str(out, name);
      put_u64(out, static_cast<std::uint64_t>(m.rows()));
      put_u64(out, static_cast<std::uint64_t>(m.cols()));
      for (Eigen::Index i = 0; i < m.size(); ++i) put_u64(out, std::bit_cast<std::uint64_t>(m.data()[i]));
    }
    return out;
  }

  static Container deserialize(const std::string& bytes) {
    Reader r{bytes, 0};
    if (bytes.size() < 8 || bytes.compare(0, 8, "MVAECKPT") != 0) throw FormatError("not a checkpoint (bad magic)");
    r.pos = 8;
    const auto version = r.u32();
    if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    Container c;
    const auto n_meta = r.u32();
    for (std::uint32_t i = 0; i < n_meta; ++i) {
      std::string k = r.str();
      c.meta[k] = r.str();
    }
    const auto n_tensors = r.u32();
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
      std::string name = r.str();
      const auto rows = r.u64();
      const auto cols = r.u64();
      if (rows > (1ULL << 32) || cols > (1ULL << 32) || rows * cols * 8 > bytes.size() - r.pos)
        throw FormatError("tensor '" + name + "' exceeds file size at offset " + std::to_string(r.pos));
      Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
      for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = std::bit_cast<double>(r.u64());
      if (c.has(name)) throw FormatError("duplicate tensor '" + name + "'");
      c.put(name, std::move(m));
    }
    if (r.pos != bytes.size()) throw FormatError("trailing bytes at offset " + std::to_string(r.pos));
    return c;
  }

  void save(const std::string& path) const {
    const std::string bytes = serialize();
    const std::string tmp = path + ".tmp";
    {
      std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
      if (!f) throw std::runtime_error("cannot write " + tmp);
      f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      if (!f) throw std::runtime_error("write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("cannot rename " + tmp + " to " + path);
  }

  static Container load(const std::string& path) { return deserialize(read_file(path)); }

  static std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
  }

 private:
  struct Reader {
    const std::string& b;
    std::size_t pos;
    void need(std::size_t n) const {
      if (b.size() - pos < n) throw FormatError("truncated checkpoint at offset " + std::to_string(pos));
    }
    std::uint32_t u32() {
      need(4);
      std::uint32_t v = 0;
      for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[pos++])) << (8 * i);
      return v;
    }
    std::uint64_t u64() {
      need(8);
      std::uint64_t v = 0;
      for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[pos++])) << (8 * i);
      return v;
    }
    std::string str() {
      const auto n = u32();
      need(n);
      std::string s = b.substr(pos, n);
      pos += n;
      return s;
    }
  };

  static void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  static void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  static void put_str(std::string& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out += s;
  }

  std::vector<std::pair<std::string, Eigen::MatrixXd>> tensors_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace musicvae
