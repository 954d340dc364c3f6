#pragma once

#include <cstring>
#include <list>
#include <optional>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "grc/kernels.hpp"
#include "grc/memory.hpp"
#include "grc/model.hpp"

namespace grc {

class PoolExhausted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using BlockId = std::uint32_t;

/// Fixed-size KV blocks for every layer. Freed blocks go to the back of an
/// LRU free list and keep their content hash until reallocated, so a later
/// prefix match can revive them.
class BlockPool {
 public:
  BlockPool(const ModelConfig& c, std::size_t block_size, std::size_t capacity)
      : block_size_(block_size), capacity_(capacity), kv_dim_(c.kv_dim()), layers_(c.num_layers) {
    if (block_size == 0 || capacity == 0) throw std::invalid_argument("block pool: block_size and capacity must be positive");
    const std::size_t per_layer = capacity * block_size * kv_dim_;
    k_.assign(layers_, std::vector<float>(per_layer));
    v_.assign(layers_, std::vector<float>(per_layer));
    ref_.assign(capacity, 0);
    hash_.assign(capacity, std::nullopt);
    free_pos_.resize(capacity);
    for (BlockId b = 0; b < capacity; ++b) free_pos_[b] = free_.insert(free_.end(), b);
  }

  /// Blocks of capacity fitting a byte budget.
  static std::size_t blocks_for_bytes(const ModelConfig& c, std::size_t block_size, std::uint64_t bytes) {
    return std::size_t(bytes / kv_cache_bytes(c.num_layers, c.num_kv_heads, c.head_dim, block_size, 4));
  }

  std::size_t block_size() const { return block_size_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t num_free() const { return free_.size(); }
  std::size_t num_in_use() const { return capacity_ - free_.size(); }
  int ref_count(BlockId b) const { return ref_.at(b); }

  std::optional<BlockId> try_allocate() {
    if (free_.empty()) return std::nullopt;
    const BlockId b = free_.front();
    free_.pop_front();
    if (hash_[b]) {
      auto it = by_hash_.find(*hash_[b]);
      if (it != by_hash_.end() && it->second == b) by_hash_.erase(it);
      hash_[b].reset();
    }
    ref_[b] = 1;
    return b;
  }

  /// ceil(n_tokens / B) blocks, all or nothing.
  std::vector<BlockId> allocate(std::size_t n_tokens) {
    const std::size_t need = (n_tokens + block_size_ - 1) / block_size_;
    if (need > free_.size()) throw PoolExhausted("block pool exhausted");
    std::vector<BlockId> out;
    for (std::size_t i = 0; i < need; ++i) out.push_back(*try_allocate());
    return out;
  }

  void retain(BlockId b) {
    if (ref_.at(b) == 0) free_.erase(free_pos_[b]);
    ++ref_[b];
  }

  void release(BlockId b) {
    if (ref_.at(b) <= 0) throw std::logic_error("block pool: release of a free block");
    if (--ref_[b] == 0) free_pos_[b] = free_.insert(free_.end(), b);
  }

  void register_hash(BlockId b, std::uint64_t h) {
    if (by_hash_.count(h)) return;
    hash_[b] = h;
    by_hash_[h] = b;
  }

  std::optional<BlockId> lookup(std::uint64_t h) const {
    auto it = by_hash_.find(h);
    if (it == by_hash_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t slot_index(BlockId b, std::size_t slot) const { return std::size_t(b) * block_size_ + slot; }
  float* key(std::size_t layer, std::size_t slot_index) { return k_[layer].data() + slot_index * kv_dim_; }
  float* value(std::size_t layer, std::size_t slot_index) { return v_[layer].data() + slot_index * kv_dim_; }
  const float* key(std::size_t layer, std::size_t slot_index) const { return k_[layer].data() + slot_index * kv_dim_; }
  const float* value(std::size_t layer, std::size_t slot_index) const { return v_[layer].data() + slot_index * kv_dim_; }
  std::size_t kv_dim() const { return kv_dim_; }
  std::size_t num_layers() const { return layers_; }

  /// Every block is either on the free list with ref 0, or referenced.
  bool check_invariants() const {
    std::size_t referenced = 0;
    for (BlockId b = 0; b < capacity_; ++b) {
      if (ref_[b] < 0) return false;
      if (ref_[b] > 0) ++referenced;
    }
    return referenced + free_.size() == capacity_;
  }

 private:
  std::size_t block_size_, capacity_, kv_dim_, layers_;
  std::vector<std::vector<float>> k_, v_;
  std::vector<int> ref_;
  std::list<BlockId> free_;
  std::vector<std::list<BlockId>::iterator> free_pos_;
  std::vector<std::optional<std::uint64_t>> hash_;
  std::unordered_map<std::uint64_t, BlockId> by_hash_;
};

enum class BlockKind : std::uint8_t { regular, compressed };

/// Ordered blocks of one sequence. Rows are the cached positions in
/// attention order; slots map each row to its pool slot.
struct BlockTable {
  std::vector<BlockId> blocks;
  std::vector<std::uint32_t> filled;
  std::vector<BlockKind> kinds;
  std::vector<Position> positions;
  std::vector<std::uint32_t> slots;

  std::size_t rows() const { return positions.size(); }

  /// Within each run of same-kind blocks only the last may be partial.
  bool valid(std::size_t block_size) const {
    if (blocks.size() != filled.size() || blocks.size() != kinds.size() || slots.size() != positions.size()) return false;
    std::size_t total = 0;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      if (filled[i] == 0 || filled[i] > block_size) return false;
      const bool last_of_run = i + 1 == blocks.size() || kinds[i + 1] != kinds[i];
      if (!last_of_run && filled[i] != block_size) return false;
      total += filled[i];
    }
    if (total != rows()) return false;
    // regular rows follow every compressed row and increase strictly
    const std::size_t first_regular = count_kind(BlockKind::compressed);
    Position floor = -1;
    for (std::size_t i = 0; i < first_regular; ++i) floor = std::max(floor, positions[i]);
    for (std::size_t i = first_regular; i < rows(); ++i) {
      if (positions[i] <= floor) return false;
      floor = positions[i];
    }
    return true;
  }

  BlockKind row_kind(std::size_t row) const {
    std::size_t acc = 0;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      acc += filled[i];
      if (row < acc) return kinds[i];
    }
    throw std::out_of_range("block table: row out of range");
  }

  std::size_t count_kind(BlockKind k) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < blocks.size(); ++i)
      if (kinds[i] == k) n += filled[i];
    return n;
  }
};

/// Blocks that appending n rows of the given kind would allocate.
inline std::size_t blocks_needed(const BlockTable& t, std::size_t n, BlockKind kind, std::size_t B) {
  std::size_t room = 0;
  if (!t.blocks.empty() && t.kinds.back() == kind) room = B - t.filled.back();
  return n > room ? (n - room + B - 1) / B : 0;
}

/// Reserves n rows at the given positions; returns the first new row index.
/// All or nothing on exhaustion.
inline std::size_t reserve_rows(BlockPool& pool, BlockTable& t, std::span<const Position> pos, BlockKind kind) {
  const std::size_t B = pool.block_size(), n = pos.size();
  const std::size_t need = blocks_needed(t, n, kind, B);
  if (need > pool.num_free()) throw PoolExhausted("block pool exhausted");
  const std::size_t first = t.rows();
  for (std::size_t i = 0; i < n; ++i) {
    if (t.blocks.empty() || t.kinds.back() != kind || t.filled.back() == B) {
      t.blocks.push_back(*pool.try_allocate());
      t.filled.push_back(0);
      t.kinds.push_back(kind);
    }
    t.slots.push_back(std::uint32_t(pool.slot_index(t.blocks.back(), t.filled.back())));
    ++t.filled.back();
    t.positions.push_back(pos[i]);
  }
  return first;
}

/// Appends a full block that already holds cached rows (prefix reuse).
inline void attach_block(BlockPool& pool, BlockTable& t, BlockId b, std::span<const Position> pos) {
  pool.retain(b);
  t.blocks.push_back(b);
  t.filled.push_back(std::uint32_t(pos.size()));
  t.kinds.push_back(BlockKind::regular);
  for (std::size_t i = 0; i < pos.size(); ++i) {
    t.slots.push_back(std::uint32_t(pool.slot_index(b, i)));
    t.positions.push_back(pos[i]);
  }
}

inline void free_table(BlockPool& pool, BlockTable& t) {
  for (auto b : t.blocks) pool.release(b);
  t = BlockTable{};
}

/// Writes per-layer K/V rows into the table, allocating as needed.
template <class T>
void append_kv(BlockPool& pool, BlockTable& t, const std::vector<KvRows<T>>& kv, std::span<const Position> pos,
               BlockKind kind = BlockKind::regular) {
  if (kv.size() != pool.num_layers()) throw ShapeError("append_kv: layer count mismatch");
  for (const auto& l : kv)
    if (std::size_t(l.k.rows()) != pos.size() || std::size_t(l.k.cols()) != pool.kv_dim())
      throw ShapeError("append_kv: row shape mismatch");
  const std::size_t first = reserve_rows(pool, t, pos, kind);
  for (std::size_t l = 0; l < kv.size(); ++l)
    for (std::size_t i = 0; i < pos.size(); ++i) {
      float* k = pool.key(l, t.slots[first + i]);
      float* v = pool.value(l, t.slots[first + i]);
      for (std::size_t c = 0; c < pool.kv_dim(); ++c) {
        k[c] = float(kv[l].k(i, c));
        v[c] = float(kv[l].v(i, c));
      }
    }
}

/// Copies a memory's latent rows into compressed blocks ahead of any regular
/// rows of the sequence.
inline void inject_compressed(BlockPool& pool, BlockTable& t, const CompressedMemory& mem, const ModelConfig& c,
                              std::uint64_t fingerprint) {
  check_compatible(mem, c, fingerprint);
  if (t.count_kind(BlockKind::regular)) throw std::logic_error("inject_compressed: regular rows already present");
  const std::size_t first = reserve_rows(pool, t, mem.position_ids, BlockKind::compressed);
  for (std::size_t l = 0; l < mem.num_layers; ++l)
    for (std::size_t r = 0; r < mem.m; ++r) {
      std::memcpy(pool.key(l, t.slots[first + r]), mem.row(l, false, r), mem.kv_dim() * sizeof(float));
      std::memcpy(pool.value(l, t.slots[first + r]), mem.row(l, true, r), mem.kv_dim() * sizeof(float));
    }
}

/// Attention for one query row at table row `row` over rows [0, row],
/// gathering keys through the block table. `allowed(j)` filters keys.
template <class T, class Allowed>
void paged_attention(const BlockPool& pool, std::size_t layer, const BlockTable& t, const ModelConfig& c, const T* q,
                     std::size_t row, Allowed&& allowed, T* out, std::vector<T>* scratch = nullptr) {
  if (row >= t.rows()) throw std::out_of_range("paged_attention: table does not cover the query row");
  const std::size_t hd = c.head_dim, group = c.group_size();
  std::vector<const T*> qs(group);
  std::vector<T*> outs(group);
  for (std::size_t g = 0; g < c.num_kv_heads; ++g) {
    const std::size_t off = g * hd;
    for (std::size_t i = 0; i < group; ++i) {
      qs[i] = q + (g * group + i) * hd;
      outs[i] = out + (g * group + i) * hd;
    }
    attend_heads<T>(
        qs.data(), group, hd, row + 1, [&](std::size_t j) { return pool.key(layer, t.slots[j]) + off; },
        [&](std::size_t j) { return pool.value(layer, t.slots[j]) + off; }, allowed, outs.data(), nullptr, scratch);
  }
}

template <class T>
void paged_attention(const BlockPool& pool, std::size_t layer, const BlockTable& t, const ModelConfig& c, const T* q,
                     std::size_t row, T* out, std::vector<T>* scratch = nullptr) {
  paged_attention(pool, layer, t, c, q, row, [](std::size_t) { return true; }, out, scratch);
}

}  // namespace grc
