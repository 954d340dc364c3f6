#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <cstring>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "grc/model.hpp"

namespace grc {

class MemoryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class NotFound : public MemoryError {
 public:
  using MemoryError::MemoryError;
};

enum class DType : std::uint32_t { f32 = 0, f16 = 1 };

inline std::size_t dtype_bytes(DType t) { return t == DType::f32 ? 4 : 2; }

/// KV bytes for N tokens: keys and values for every layer and KV head.
constexpr std::uint64_t kv_cache_bytes(std::uint64_t layers, std::uint64_t kv_heads, std::uint64_t head_dim,
                                       std::uint64_t tokens, std::uint64_t elem_bytes) {
  return 2 * layers * kv_heads * head_dim * tokens * elem_bytes;
}

/// Latent KV rows of one compressed context. Payload layout: for each layer,
/// m key rows then m value rows, each kv_dim little-endian elements.
struct CompressedMemory {
  std::string doc_id;
  std::uint64_t fingerprint = 0;
  std::uint32_t m = 0, num_layers = 0, num_kv_heads = 0, head_dim = 0;
  DType dtype = DType::f32;
  std::vector<Position> position_ids;
  std::vector<std::uint8_t> payload;

  std::size_t expected_payload_bytes() const {
    return std::size_t(kv_cache_bytes(num_layers, num_kv_heads, head_dim, m, dtype_bytes(dtype)));
  }
  std::size_t kv_dim() const { return std::size_t(num_kv_heads) * head_dim; }

  void validate() const {
    if (payload.size() != expected_payload_bytes())
      throw MemoryError("memory '" + doc_id + "': payload length " + std::to_string(payload.size()) + " != " +
                        std::to_string(expected_payload_bytes()));
    if (position_ids.size() != m) throw MemoryError("memory '" + doc_id + "': position id count != m");
    for (std::size_t i = 1; i < position_ids.size(); ++i)
      if (position_ids[i] <= position_ids[i - 1]) throw MemoryError("memory '" + doc_id + "': position ids not increasing");
  }

  /// Pointer to the float32 row r of layer l (K when value == false).
  const float* row(std::size_t l, bool value, std::size_t r) const {
    const std::size_t per = std::size_t(m) * kv_dim();
    return reinterpret_cast<const float*>(payload.data()) + (2 * l + (value ? 1 : 0)) * per + r * kv_dim();
  }

  bool operator==(const CompressedMemory&) const = default;
};

static_assert(std::endian::native == std::endian::little, "payload is stored in host order on little-endian hosts");

/// Builds a memory from per-layer latent K/V rows.
template <class T>
CompressedMemory make_memory(std::string doc_id, const ModelConfig& c, std::uint64_t fingerprint,
                             const std::vector<KvRows<T>>& kv, std::vector<Position> positions) {
  CompressedMemory mem;
  mem.doc_id = std::move(doc_id);
  mem.fingerprint = fingerprint;
  mem.m = std::uint32_t(positions.size());
  mem.num_layers = std::uint32_t(c.num_layers);
  mem.num_kv_heads = std::uint32_t(c.num_kv_heads);
  mem.head_dim = std::uint32_t(c.head_dim);
  mem.position_ids = std::move(positions);
  mem.payload.resize(mem.expected_payload_bytes());
  float* out = reinterpret_cast<float*>(mem.payload.data());
  for (const auto& l : kv)
    for (const Mat<T>* src : {&l.k, &l.v}) {
      if (std::size_t(src->rows()) != mem.m || std::size_t(src->cols()) != mem.kv_dim())
        throw ShapeError("make_memory: kv rows do not match m x kv_dim");
      for (Eigen::Index i = 0; i < src->size(); ++i) *out++ = float(src->data()[i]);
    }
  return mem;
}

/// The memory as contiguous past KV (the naive path's injection).
template <class T>
PastKv<T> memory_past(const CompressedMemory& mem) {
  PastKv<T> past;
  std::vector<KvRows<T>> rows(mem.num_layers);
  for (std::size_t l = 0; l < mem.num_layers; ++l) {
    rows[l].k.resize(mem.m, mem.kv_dim());
    rows[l].v.resize(mem.m, mem.kv_dim());
    for (std::size_t r = 0; r < mem.m; ++r)
      for (std::size_t c = 0; c < mem.kv_dim(); ++c) {
        rows[l].k(r, c) = T(mem.row(l, false, r)[c]);
        rows[l].v(r, c) = T(mem.row(l, true, r)[c]);
      }
  }
  past.append(rows, mem.position_ids);
  return past;
}

inline void check_compatible(const CompressedMemory& mem, const ModelConfig& c, std::uint64_t fingerprint) {
  if (mem.fingerprint != fingerprint) throw MemoryError("memory '" + mem.doc_id + "': model fingerprint mismatch");
  if (mem.num_layers != c.num_layers || mem.num_kv_heads != c.num_kv_heads || mem.head_dim != c.head_dim)
    throw MemoryError("memory '" + mem.doc_id + "': geometry mismatch");
  if (mem.dtype != DType::f32) throw MemoryError("memory '" + mem.doc_id + "': unsupported dtype");
  mem.validate();
}

// ---------------------------------------------------------------------------
// Record format: "GRCMEM01", u32 doc_id length, doc_id bytes, u64 fingerprint,
// u32 m, u32 L, u32 H_kv, u32 d_h, u32 dtype, m x i64 position ids,
// u64 payload length, payload.

inline constexpr std::string_view kMemoryMagic = "GRCMEM01";

inline std::string serialize_memory(const CompressedMemory& mem) {
  mem.validate();
  std::string out(kMemoryMagic);
  io::put_le(out, std::uint32_t(mem.doc_id.size()));
  out += mem.doc_id;
  io::put_le(out, mem.fingerprint);
  for (std::uint32_t v : {mem.m, mem.num_layers, mem.num_kv_heads, mem.head_dim, std::uint32_t(mem.dtype)})
    io::put_le(out, v);
  for (auto p : mem.position_ids) io::put_le(out, std::int64_t(p));
  io::put_le(out, std::uint64_t(mem.payload.size()));
  out.append(reinterpret_cast<const char*>(mem.payload.data()), mem.payload.size());
  return out;
}

inline CompressedMemory deserialize_memory(std::string_view bytes) {
  try {
    io::Reader r(bytes);
    if (r.get_bytes(8) != kMemoryMagic) throw MemoryError("memory record: bad magic");
    CompressedMemory mem;
    const auto idlen = r.get_le<std::uint32_t>();
    mem.doc_id = std::string(r.get_bytes(idlen));
    mem.fingerprint = r.get_le<std::uint64_t>();
    mem.m = r.get_le<std::uint32_t>();
    mem.num_layers = r.get_le<std::uint32_t>();
    mem.num_kv_heads = r.get_le<std::uint32_t>();
    mem.head_dim = r.get_le<std::uint32_t>();
    const auto dt = r.get_le<std::uint32_t>();
    if (dt > 1) throw MemoryError("memory record: unknown dtype");
    mem.dtype = DType(dt);
    if (mem.m > r.remaining() / 8) throw MemoryError("memory record: truncated");
    for (std::uint32_t i = 0; i < mem.m; ++i) mem.position_ids.push_back(r.get_le<std::int64_t>());
    const auto plen = r.get_le<std::uint64_t>();
    if (plen != r.remaining()) throw MemoryError("memory record: payload length mismatch");
    const auto body = r.get_bytes(plen);
    mem.payload.assign(body.begin(), body.end());
    mem.validate();
    return mem;
  } catch (const MemoryError&) {
    throw;
  } catch (const std::exception& e) {
    throw MemoryError(std::string("memory record: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Persistent store: one file per record, written to a temp file, fsynced and
// renamed into place.

struct MemoryInfo {
  std::string doc_id;
  std::uint32_t m = 0, num_layers = 0;
  std::uint64_t bytes = 0;
};

class MemoryStore {
 public:
  explicit MemoryStore(std::filesystem::path root) : root_(std::move(root)) {
    std::filesystem::create_directories(root_);
    recover();
  }

  const std::filesystem::path& root() const { return root_; }

  static std::string file_name(std::string_view doc_id) {
    Fnv64 h;
    h.bytes(doc_id.data(), doc_id.size());
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx.grcmem", static_cast<unsigned long long>(h.digest()));
    return buf;
  }

  void put(const CompressedMemory& mem) {
    if (mem.doc_id.empty()) throw MemoryError("put: empty doc_id");
    if (mem.fingerprint == 0) throw MemoryError("put: model fingerprint absent");
    mem.validate();
    const std::string bytes = serialize_memory(mem);
    auto lock = key_lock(mem.doc_id);
    std::unique_lock guard(*lock);
    const auto final_path = root_ / file_name(mem.doc_id);
    const auto tmp = root_ / (file_name(mem.doc_id) + ".tmp." + std::to_string(::getpid()) + "." +
                              std::to_string(tmp_counter_.fetch_add(1)));
    write_durably(tmp, bytes);
    std::filesystem::rename(tmp, final_path);
    sync_dir();
    std::unique_lock idx(index_mu_);
    index_[mem.doc_id] = MemoryInfo{mem.doc_id, mem.m, mem.num_layers, bytes.size()};
  }

  CompressedMemory get(const std::string& doc_id) const {
    auto lock = key_lock(doc_id);
    std::shared_lock guard(*lock);
    {
      std::shared_lock idx(index_mu_);
      if (!index_.count(doc_id)) throw NotFound("unknown doc_id '" + doc_id + "'");
    }
    auto mem = deserialize_memory(io::read_file((root_ / file_name(doc_id)).string()));
    if (mem.doc_id != doc_id) throw MemoryError("store: hash collision for '" + doc_id + "'");
    return mem;
  }

  bool contains(const std::string& doc_id) const {
    std::shared_lock idx(index_mu_);
    return index_.count(doc_id) > 0;
  }

  void remove(const std::string& doc_id) {
    auto lock = key_lock(doc_id);
    std::unique_lock guard(*lock);
    {
      std::shared_lock idx(index_mu_);
      if (!index_.count(doc_id)) throw NotFound("unknown doc_id '" + doc_id + "'");
    }
    std::filesystem::remove(root_ / file_name(doc_id));
    sync_dir();
    std::unique_lock idx(index_mu_);
    index_.erase(doc_id);
  }

  std::vector<MemoryInfo> list() const {
    std::shared_lock idx(index_mu_);
    std::vector<MemoryInfo> out;
    for (const auto& [k, v] : index_) out.push_back(v);
    return out;
  }

  /// Rebuilds the index from the directory; leftover temp files are removed
  /// and unreadable records are discarded.
  void recover() {
    std::map<std::string, MemoryInfo> idx;
    for (const auto& e : std::filesystem::directory_iterator(root_)) {
      const auto name = e.path().filename().string();
      if (name.find(".tmp.") != std::string::npos) {
        std::filesystem::remove(e.path());
        continue;
      }
      if (e.path().extension() != ".grcmem") continue;
      try {
        const auto bytes = io::read_file(e.path().string());
        const auto mem = deserialize_memory(bytes);
        if (file_name(mem.doc_id) != name) continue;
        idx[mem.doc_id] = MemoryInfo{mem.doc_id, mem.m, mem.num_layers, bytes.size()};
      } catch (const std::exception&) {
        std::filesystem::remove(e.path());
      }
    }
    std::unique_lock g(index_mu_);
    index_ = std::move(idx);
  }

 private:
  std::shared_ptr<std::shared_mutex> key_lock(const std::string& doc_id) const {
    std::lock_guard g(locks_mu_);
    auto& slot = locks_[doc_id];
    if (!slot) slot = std::make_shared<std::shared_mutex>();
    return slot;
  }

  static void write_durably(const std::filesystem::path& p, const std::string& bytes) {
    const int fd = ::open(p.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fd < 0) throw MemoryError("cannot create " + p.string());
    std::size_t off = 0;
    while (off < bytes.size()) {
      const ssize_t n = ::write(fd, bytes.data() + off, bytes.size() - off);
      if (n <= 0) {
        ::close(fd);
        throw MemoryError("write failed for " + p.string());
      }
      off += std::size_t(n);
    }
    if (::fsync(fd) != 0) {
      ::close(fd);
      throw MemoryError("fsync failed for " + p.string());
    }
    ::close(fd);
  }

  void sync_dir() const {
    const int fd = ::open(root_.c_str(), O_RDONLY | O_DIRECTORY);
    if (fd >= 0) {
      ::fsync(fd);
      ::close(fd);
    }
  }

  std::filesystem::path root_;
  mutable std::shared_mutex index_mu_;
  std::map<std::string, MemoryInfo> index_;
  mutable std::mutex locks_mu_;
  mutable std::map<std::string, std::shared_ptr<std::shared_mutex>> locks_;
  std::atomic<std::uint64_t> tmp_counter_{0};
};

}  // namespace grc
