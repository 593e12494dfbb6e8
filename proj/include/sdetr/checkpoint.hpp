// Binary checkpoint container.
//
//   "SDTR" | u32 version | u64 entry count
//   per entry: u32 name length | name | u8 dtype | u8 rank | rank × u64 dims | payload
//   u64 byte length of everything above
//
// All integers and floats little-endian. dtype 0 is f32; dtype 1 holds raw
// bytes (rank 1) and is used for text metadata.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdetr/image.hpp"
#include "sdetr/nn.hpp"

namespace sdetr {

inline constexpr char kCheckpointMagic[4] = {'S', 'D', 'T', 'R'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { kF32 = 0, kBytes = 1 };

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointEntry {
  std::string name;
  DType dtype = DType::kF32;
  std::vector<std::uint64_t> dims;
  std::vector<float> values;  // kF32
  std::string bytes;          // kBytes
};

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

class Reader {
 public:
  Reader(const std::string& buf, std::string what) : buf_(buf), what_(std::move(what)) {}

  template <class U>
  U get(const char* field) {
    need(sizeof(U), field);
    U v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::string bytes(std::size_t n, const char* field) {
    need(n, field);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* field) {
    if (buf_.size() - pos_ < n) {
      throw CheckpointError(what_ + ": truncated while reading " + field + " at byte " + std::to_string(pos_));
    }
  }
  const std::string& buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

class Checkpoint {
 public:
  const std::vector<CheckpointEntry>& entries() const { return entries_; }

  bool contains(const std::string& name) const { return find(name) != nullptr; }

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries_) {
      if (e.name == name) return &e;
    }
    return nullptr;
  }

  void add_tensor(const std::string& name, const Shape& shape, std::vector<float> values) {
    check_new(name);
    CheckpointEntry e{name, DType::kF32, {}, std::move(values), {}};
    for (auto d : shape) e.dims.push_back(d);
    if (shape_numel(shape) != e.values.size()) throw CheckpointError("checkpoint: shape/value mismatch for " + name);
    entries_.push_back(std::move(e));
  }

  void add_text(const std::string& name, std::string text) {
    check_new(name);
    CheckpointEntry e{name, DType::kBytes, {text.size()}, {}, std::move(text)};
    entries_.push_back(std::move(e));
  }

  const CheckpointEntry& tensor(const std::string& name) const {
    const auto* e = find(name);
    if (!e) throw CheckpointError("checkpoint: missing tensor " + name);
    if (e->dtype != DType::kF32) throw CheckpointError("checkpoint: " + name + " is not an f32 tensor");
    return *e;
  }

  const std::string& text(const std::string& name) const {
    const auto* e = find(name);
    if (!e) throw CheckpointError("checkpoint: missing entry " + name);
    if (e->dtype != DType::kBytes) throw CheckpointError("checkpoint: " + name + " is not a byte entry");
    return e->bytes;
  }

  std::string encode() const {
    std::string out(kCheckpointMagic, 4);
    detail::put_le<std::uint32_t>(out, kCheckpointVersion);
    detail::put_le<std::uint64_t>(out, entries_.size());
    for (const auto& e : entries_) {
      detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
      out += e.name;
      detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(e.dtype));
      detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(e.dims.size()));
      for (auto d : e.dims) detail::put_le<std::uint64_t>(out, d);
      if (e.dtype == DType::kF32) {
        out.append(reinterpret_cast<const char*>(e.values.data()), e.values.size() * sizeof(float));
      } else {
        out += e.bytes;
      }
    }
    detail::put_le<std::uint64_t>(out, out.size());
    return out;
  }

  static Checkpoint decode(const std::string& buf, const std::string& what = "checkpoint") {
    detail::Reader r(buf, what);
    if (r.bytes(4, "magic") != std::string(kCheckpointMagic, 4)) throw CheckpointError(what + ": bad magic");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kCheckpointVersion) {
      throw CheckpointError(what + ": unsupported version " + std::to_string(version));
    }
    const auto count = r.get<std::uint64_t>("entry count");
    Checkpoint ck;
    for (std::uint64_t k = 0; k < count; ++k) {
      CheckpointEntry e;
      const auto len = r.get<std::uint32_t>("name length");
      e.name = r.bytes(len, "name");
      const auto tag = r.get<std::uint8_t>("dtype");
      if (tag > 1) throw CheckpointError(what + ": unknown dtype " + std::to_string(tag) + " for " + e.name);
      e.dtype = static_cast<DType>(tag);
      const auto rank = r.get<std::uint8_t>("rank");
      std::uint64_t numel = 1;
      for (int d = 0; d < rank; ++d) {
        e.dims.push_back(r.get<std::uint64_t>("dims"));
        numel *= e.dims.back();
      }
      if (e.dtype == DType::kF32) {
        if (numel > buf.size() / sizeof(float)) throw CheckpointError(what + ": tensor " + e.name + " larger than file");
        const std::string raw = r.bytes(numel * sizeof(float), "payload");
        e.values.resize(numel);
        std::memcpy(e.values.data(), raw.data(), raw.size());
      } else {
        if (rank != 1) throw CheckpointError(what + ": byte entry " + e.name + " must be rank 1");
        e.bytes = r.bytes(numel, "payload");
      }
      if (ck.contains(e.name)) throw CheckpointError(what + ": duplicate entry " + e.name);
      ck.entries_.push_back(std::move(e));
    }
    const std::size_t body = r.pos();
    const auto trailer = r.get<std::uint64_t>("length trailer");
    if (trailer != body) throw CheckpointError(what + ": length trailer mismatch");
    if (r.pos() != buf.size()) throw CheckpointError(what + ": trailing bytes after checkpoint");
    return ck;
  }

  /// Writes to a temporary sibling then renames; the target is never left
  /// half-written.
  void save(const std::filesystem::path& path) const {
    const auto tmp = path.string() + ".tmp";
    try {
      write_file(tmp, encode());
      std::filesystem::rename(tmp, path);
    } catch (...) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw;
    }
  }

  static Checkpoint load(const std::filesystem::path& path) { return decode(read_file(path), path.string()); }

  /// Stores every parameter under its dotted name.
  void add_params(const ParamStore<float>& ps, const std::string& prefix = "") {
    for (const auto& n : ps.names()) {
      const auto& t = ps.get(n);
      add_tensor(prefix + n, t.shape(), t.values());
    }
  }

  /// Copies matching entries into `ps`. Every parameter must be present with
  /// the same shape unless listed in `optional_prefixes`.
  void load_params(ParamStore<float>& ps, const std::vector<std::string>& optional_prefixes = {}) const {
    for (const auto& n : ps.names()) {
      const auto* e = find(n);
      if (!e) {
        bool optional = false;
        for (const auto& p : optional_prefixes) optional = optional || n.rfind(p, 0) == 0;
        if (optional) continue;
        throw CheckpointError("checkpoint: missing parameter " + n);
      }
      const auto& shape = ps.get(n).shape();
      bool same = e->dtype == DType::kF32 && e->dims.size() == shape.size();
      for (std::size_t d = 0; same && d < shape.size(); ++d) same = e->dims[d] == shape[d];
      if (!same) throw CheckpointError("checkpoint: shape mismatch for parameter " + n);
      ps.assign(n, e->values);
    }
  }

 private:
  void check_new(const std::string& name) const {
    if (name.empty() || name.size() > 0xFFFFFFFFu) throw CheckpointError("checkpoint: invalid entry name");
    if (contains(name)) throw CheckpointError("checkpoint: duplicate entry " + name);
  }

  std::vector<CheckpointEntry> entries_;
};

}  // namespace sdetr
