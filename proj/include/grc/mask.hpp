#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "grc/config.hpp"

namespace grc {

/// Positions of the three segments of a GRC training sequence:
/// [0, k) context, [k, k+m) latent block, [k+m, k+m+t) reconstruction segment.
/// Inside the reconstruction segment, the recovered context starts at
/// recon_start_offset (the instruction occupies the prefix).
struct SegmentLayout {
  std::size_t k = 0;
  std::size_t m = 0;
  std::size_t t = 0;
  std::size_t recon_start_offset = 0;

  std::size_t n() const { return k + m + t; }
  std::size_t latent_begin() const { return k; }
  std::size_t recon_segment_begin() const { return k + m; }
  std::size_t recon_begin() const { return k + m + recon_start_offset; }

  bool valid() const { return t == 0 ? recon_start_offset == 0 : recon_start_offset < t; }

  bool operator==(const SegmentLayout&) const = default;
};

/// Boolean attention predicate over (query row, key column). Never allows a
/// column after the row.
class AttentionMask {
 public:
  enum class Kind { causal, grc, dense };

  static AttentionMask causal(std::size_t n) {
    AttentionMask m;
    m.kind_ = Kind::causal;
    m.n_ = n;
    return m;
  }

  static AttentionMask grc(const SegmentLayout& layout) {
    if (!layout.valid()) throw ShapeError("segment layout: recon_start_offset out of range");
    AttentionMask m;
    m.kind_ = Kind::grc;
    m.n_ = layout.n();
    m.layout_ = layout;
    return m;
  }

  /// Row-major n*n bits. Rejects any bit above the diagonal.
  static AttentionMask from_dense(std::size_t n, std::vector<std::uint8_t> bits) {
    if (bits.size() != n * n) throw ShapeError("dense mask: expected n*n entries");
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if (bits[i * n + j]) throw ShapeError("dense mask: forward attention is not allowed");
    AttentionMask m;
    m.kind_ = Kind::dense;
    m.n_ = n;
    m.bits_ = std::move(bits);
    return m;
  }

  std::size_t size() const { return n_; }
  Kind kind() const { return kind_; }
  const SegmentLayout& layout() const { return layout_; }

  bool allowed(std::size_t i, std::size_t j) const {
    if (j > i || i >= n_) return false;
    switch (kind_) {
      case Kind::causal:
        return true;
      case Kind::grc:
        // reconstruction rows never see the context segment
        return !(i >= layout_.recon_segment_begin() && j < layout_.k);
      case Kind::dense:
        return bits_[i * n_ + j] != 0;
    }
    return false;
  }

  /// Dense row-major materialization; only meant for n <= 4096.
  std::vector<std::uint8_t> materialize() const {
    if (n_ > 4096) throw ShapeError("mask materialization limited to n <= 4096");
    std::vector<std::uint8_t> out(n_ * n_, 0);
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = 0; j <= i; ++j) out[i * n_ + j] = allowed(i, j) ? 1 : 0;
    return out;
  }

  std::size_t allowed_count() const {
    std::size_t c = 0;
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = 0; j <= i; ++j) c += allowed(i, j);
    return c;
  }

 private:
  Kind kind_ = Kind::causal;
  std::size_t n_ = 0;
  SegmentLayout layout_{};
  std::vector<std::uint8_t> bits_;
};

inline AttentionMask build_causal_mask(std::size_t n) { return AttentionMask::causal(n); }
inline AttentionMask build_grc_mask(const SegmentLayout& layout) { return AttentionMask::grc(layout); }

}  // namespace grc
