#pragma once

#include <algorithm>
#include <atomic>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "grc/config.hpp"
#include "grc/kernels.hpp"
#include "grc/mask.hpp"
#include "grc/rng.hpp"

namespace grc {

using Position = std::int64_t;
using TokenId = std::uint32_t;

template <class T>
struct ModelParameters;
template <class U>
ModelParameters<U> allocate_parameters(const ModelConfig& c);

template <class T>
struct LayerParams {
  Vec<T> attn_norm;
  Mat<T> wq, wk, wv, wo;
  Vec<T> mlp_norm;
  Mat<T> w_up, w_down;
};

/// All trainable state: transformer weights, the latent bank (kept outside the
/// vocabulary) and the embedding adapter.
template <class T>
struct ModelParameters {
  ModelConfig config;
  Mat<T> tok_emb;  // vocab x d
  std::vector<LayerParams<T>> layers;
  Vec<T> final_norm;
  Mat<T> lm_head;    // vocab x d
  Mat<T> adapter_w;  // embed x d
  Vec<T> adapter_b;
  Mat<T> latents;  // m x d

  /// Visits every tensor in the fixed serialization order:
  /// tok_emb, per layer {attn_norm, wq, wk, wv, wo, mlp_norm, w_up, w_down},
  /// final_norm, lm_head, adapter_w, adapter_b, latents.
  template <class F>
  void for_each_tensor(F&& f) {
    f("tok_emb", tok_emb.data(), std::size_t(tok_emb.size()), tok_emb.rows(), tok_emb.cols());
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& L = layers[l];
      const std::string p = "layer" + std::to_string(l) + ".";
      f(p + "attn_norm", L.attn_norm.data(), std::size_t(L.attn_norm.size()), L.attn_norm.size(), 1);
      f(p + "wq", L.wq.data(), std::size_t(L.wq.size()), L.wq.rows(), L.wq.cols());
      f(p + "wk", L.wk.data(), std::size_t(L.wk.size()), L.wk.rows(), L.wk.cols());
      f(p + "wv", L.wv.data(), std::size_t(L.wv.size()), L.wv.rows(), L.wv.cols());
      f(p + "wo", L.wo.data(), std::size_t(L.wo.size()), L.wo.rows(), L.wo.cols());
      f(p + "mlp_norm", L.mlp_norm.data(), std::size_t(L.mlp_norm.size()), L.mlp_norm.size(), 1);
      f(p + "w_up", L.w_up.data(), std::size_t(L.w_up.size()), L.w_up.rows(), L.w_up.cols());
      f(p + "w_down", L.w_down.data(), std::size_t(L.w_down.size()), L.w_down.rows(), L.w_down.cols());
    }
    f("final_norm", final_norm.data(), std::size_t(final_norm.size()), final_norm.size(), 1);
    f("lm_head", lm_head.data(), std::size_t(lm_head.size()), lm_head.rows(), lm_head.cols());
    f("adapter_w", adapter_w.data(), std::size_t(adapter_w.size()), adapter_w.rows(), adapter_w.cols());
    f("adapter_b", adapter_b.data(), std::size_t(adapter_b.size()), adapter_b.size(), 1);
    f("latents", latents.data(), std::size_t(latents.size()), latents.rows(), latents.cols());
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    const_cast<ModelParameters*>(this)->for_each_tensor(
        [&](const std::string& name, T* p, std::size_t n, Eigen::Index r, Eigen::Index c) {
          f(name, static_cast<const T*>(p), n, r, c);
        });
  }

  std::size_t size() const {
    std::size_t n = 0;
    for_each_tensor([&](const std::string&, const T*, std::size_t s, Eigen::Index, Eigen::Index) { n += s; });
    return n;
  }

  /// Same shapes, all zeros (gradient buffers, optimizer state).
  ModelParameters zeros_like() const {
    ModelParameters z = *this;
    z.for_each_tensor([](const std::string&, T* p, std::size_t n, Eigen::Index, Eigen::Index) { std::fill(p, p + n, T(0)); });
    return z;
  }

  template <class U>
  ModelParameters<U> cast() const {
    ModelParameters<U> out = allocate_parameters<U>(config);
    std::vector<const T*> src;
    for_each_tensor([&](const std::string&, const T* p, std::size_t, Eigen::Index, Eigen::Index) { src.push_back(p); });
    std::size_t i = 0;
    out.for_each_tensor([&](const std::string&, U* p, std::size_t n, Eigen::Index, Eigen::Index) {
      for (std::size_t j = 0; j < n; ++j) p[j] = U(src[i][j]);
      ++i;
    });
    return out;
  }
};

template <class U>
ModelParameters<U> allocate_parameters(const ModelConfig& c) {
  validate(c);
  ModelParameters<U> p;
  p.config = c;
  const Eigen::Index d = c.hidden_dim, q = c.q_dim(), kv = c.kv_dim(), f = c.mlp_dim;
  p.tok_emb.setZero(c.vocab_size, d);
  p.layers.resize(c.num_layers);
  for (auto& L : p.layers) {
    L.attn_norm.setOnes(d);
    L.wq.setZero(q, d);
    L.wk.setZero(kv, d);
    L.wv.setZero(kv, d);
    L.wo.setZero(d, q);
    L.mlp_norm.setOnes(d);
    L.w_up.setZero(f, d);
    L.w_down.setZero(d, f);
  }
  p.final_norm.setOnes(d);
  p.lm_head.setZero(c.vocab_size, d);
  p.adapter_w.setZero(c.embed_dim, d);
  p.adapter_b.setZero(c.embed_dim);
  p.latents.setZero(c.num_latents, d);
  return p;
}

/// Deterministic initialization: matrices ~ N(0, 0.02) from a counter-based
/// stream per tensor, norm gains 1, adapter bias 0.
template <class T = double>
ModelParameters<T> init_model(const ModelConfig& config) {
  auto p = allocate_parameters<T>(config);
  std::uint64_t stream = 0;
  p.for_each_tensor([&](const std::string& name, T* data, std::size_t n, Eigen::Index, Eigen::Index) {
    const bool is_gain = name.ends_with("norm");
    const bool is_bias = name == "adapter_b";
    const CounterRng rng(config.seed, stream++);
    if (is_gain || is_bias) return;
    for (std::size_t i = 0; i < n; ++i) data[i] = T(0.02 * rng.normal(i));
  });
  return p;
}

/// Per-layer key/value rows. Keys are stored after rotary encoding.
template <class T>
struct KvRows {
  Mat<T> k, v;  // rows x kv_dim
};

template <class T>
struct PastKv {
  std::vector<KvRows<T>> layers;
  std::vector<Position> positions;

  std::size_t size() const { return positions.size(); }
  bool empty() const { return positions.empty(); }

  /// Appends rows (used by the naive generation loop, which grows the cache
  /// by concatenation).
  void append(const std::vector<KvRows<T>>& add, std::span<const Position> pos) {
    if (layers.empty()) layers.resize(add.size());
    for (std::size_t l = 0; l < add.size(); ++l) {
      auto& dst = layers[l];
      const Eigen::Index old = dst.k.rows(), extra = add[l].k.rows();
      dst.k.conservativeResize(old + extra, add[l].k.cols());
      dst.v.conservativeResize(old + extra, add[l].v.cols());
      dst.k.bottomRows(extra) = add[l].k;
      dst.v.bottomRows(extra) = add[l].v;
    }
    positions.insert(positions.end(), pos.begin(), pos.end());
  }
};

enum class LogitsRows { all, last, none };

template <class T>
struct ForwardInput {
  Mat<T> embedded;  // n x d
  std::vector<Position> position_ids;
  AttentionMask mask = AttentionMask::causal(0);  // n x n, or (past+n) x (past+n)
  const PastKv<T>* past = nullptr;
  LogitsRows logits_rows = LogitsRows::all;
};

template <class T>
struct ForwardOutput {
  Mat<T> last_hidden;  // n x d, after final norm
  Mat<T> logits;       // n x vocab (or 1 x vocab for LogitsRows::last)
  std::vector<KvRows<T>> new_kv;
};

/// Activations retained for backprop.
template <class T>
struct LayerCache {
  Mat<T> x_in, a, q, k, v, o, x_mid, b, up, act;
  Vec<T> inv_rms1, inv_rms2;
  std::vector<Mat<T>> probs;  // per query head, n x n
};
template <class T>
struct ForwardCache {
  std::vector<LayerCache<T>> layers;
  Mat<T> x_final;
  Vec<T> inv_rms_final;
};

/// Process-wide count of forward passes (instrumentation for the one-pass
/// property).
inline std::atomic<std::uint64_t>& forward_counter() {
  static std::atomic<std::uint64_t> c{0};
  return c;
}

template <class T>
Mat<T> embed_tokens(const ModelParameters<T>& p, std::span<const TokenId> ids) {
  Mat<T> x(ids.size(), p.config.hidden_dim);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= p.config.vocab_size) throw ShapeError("token id out of vocabulary");
    x.row(i) = p.tok_emb.row(ids[i]);
  }
  return x;
}

/// MLP sub-block on normalized rows, returns the residual update.
template <class T>
void mlp_rows(const LayerParams<T>& L, const Mat<T>& b, Mat<T>& up, Mat<T>& act, Mat<T>& delta) {
  linear_rows(b, L.w_up, up);
  act.resize(up.rows(), up.cols());
  silu_rows(up.data(), act.data(), std::size_t(up.size()));
  linear_rows(act, L.w_down, delta);
}

/// Reference forward pass with arbitrary mask, spliced inputs, explicit
/// positions and optional injected past KV.
template <class T>
ForwardOutput<T> forward(const ModelParameters<T>& p, const ForwardInput<T>& in, ForwardCache<T>* cache = nullptr) {
  const ModelConfig& c = p.config;
  const std::size_t n = in.embedded.rows();
  const std::size_t past_n = in.past ? in.past->size() : 0;
  if (std::size_t(in.embedded.cols()) != c.hidden_dim) throw ShapeError("forward: embedded width != hidden_dim");
  if (in.position_ids.size() != n) throw ShapeError("forward: position_ids length mismatch");
  const bool full_mask = in.mask.size() == past_n + n && past_n > 0;
  if (!full_mask && in.mask.size() != n) throw ShapeError("forward: mask size mismatch");
  for (std::size_t i = 1; i < n; ++i)
    if (in.position_ids[i] <= in.position_ids[i - 1]) throw ShapeError("forward: position ids must increase");
  for (auto pos : in.position_ids)
    if (pos < 0) throw ShapeError("forward: negative position id");
  if (past_n) {
    if (in.past->layers.size() != c.num_layers) throw ShapeError("forward: past_kv layer count mismatch");
    Position mx = -1;
    for (auto pp : in.past->positions) mx = std::max(mx, pp);
    if (n && in.position_ids.front() <= mx) throw ShapeError("forward: position id collides with past_kv");
    for (const auto& l : in.past->layers)
      if (std::size_t(l.k.rows()) != past_n || std::size_t(l.k.cols()) != c.kv_dim())
        throw ShapeError("forward: past_kv shape mismatch");
  }
  if (cache && past_n) throw ShapeError("forward: training cache not supported with past_kv");
  forward_counter().fetch_add(1, std::memory_order_relaxed);

  const std::size_t hd = c.head_dim, nq = c.num_q_heads, group = c.group_size();
  ForwardOutput<T> out;
  out.new_kv.resize(c.num_layers);
  if (cache) cache->layers.resize(c.num_layers);

  Mat<T> x = in.embedded, a, q, o, b, up, act, delta;
  Vec<T> r1, r2;
  std::vector<T> scratch;
  // every key up to the query row is visible
  const bool causal = !full_mask && in.mask.kind() == AttentionMask::Kind::causal;
  std::vector<const T*> hq(group);
  std::vector<T*> ho(group), hp(group);
  const RopeTable<T> rope(in.position_ids, hd, c.rope_base);
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const auto& L = p.layers[l];
    rmsnorm_rows(x, L.attn_norm, a, &r1);
    linear_rows(a, L.wq, q);
    auto& kv = out.new_kv[l];
    linear_rows(a, L.wk, kv.k);
    linear_rows(a, L.wv, kv.v);
    rope_rows(q, nq, hd, rope);
    rope_rows(kv.k, c.num_kv_heads, hd, rope);

    o.setZero(n, c.q_dim());
    std::vector<Mat<T>> probs;
    if (cache) probs.assign(nq, Mat<T>::Zero(n, n));
    const Mat<T>* pk = past_n ? &in.past->layers[l].k : nullptr;
    const Mat<T>* pv = past_n ? &in.past->layers[l].v : nullptr;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t row = full_mask ? past_n + i : i;
      for (std::size_t g = 0; g < c.num_kv_heads; ++g) {
        const std::size_t off = g * hd;
        auto keys = [&](std::size_t j) -> const T* {
          return j < past_n ? pk->row(j).data() + off : kv.k.row(j - past_n).data() + off;
        };
        auto vals = [&](std::size_t j) -> const T* {
          return j < past_n ? pv->row(j).data() + off : kv.v.row(j - past_n).data() + off;
        };
        auto allowed = [&](std::size_t j) {
          if (j < past_n) return full_mask ? in.mask.allowed(row, j) : true;
          return in.mask.allowed(full_mask ? row : i, full_mask ? j : j - past_n);
        };
        for (std::size_t u = 0; u < group; ++u) {
          const std::size_t h = g * group + u;
          hq[u] = q.row(i).data() + h * hd;
          ho[u] = o.row(i).data() + h * hd;
          hp[u] = cache ? probs[h].row(i).data() : nullptr;
        }
        if (causal)
          attend_heads<T>(hq.data(), group, hd, past_n + i + 1, keys, vals, [](std::size_t) { return true; },
                          ho.data(), cache ? hp.data() : nullptr, &scratch);
        else
          attend_heads<T>(hq.data(), group, hd, past_n + i + 1, keys, vals, allowed, ho.data(),
                          cache ? hp.data() : nullptr, &scratch);
      }
    }
    Mat<T> attn_delta;
    linear_rows(o, L.wo, attn_delta);
    Mat<T> x_mid = x + attn_delta;
    rmsnorm_rows(x_mid, L.mlp_norm, b, &r2);
    mlp_rows(L, b, up, act, delta);
    if (cache) {
      auto& C = cache->layers[l];
      C.x_in = std::move(x);
      C.a = a;
      C.q = q;
      C.k = kv.k;
      C.v = kv.v;
      C.o = o;
      C.x_mid = x_mid;
      C.b = b;
      C.up = up;
      C.act = act;
      C.inv_rms1 = r1;
      C.inv_rms2 = r2;
      C.probs = std::move(probs);
    }
    x = x_mid + delta;
  }
  rmsnorm_rows(x, p.final_norm, out.last_hidden, cache ? &cache->inv_rms_final : nullptr);
  if (cache) cache->x_final = x;
  switch (in.logits_rows) {
    case LogitsRows::all:
      linear_rows(out.last_hidden, p.lm_head, out.logits);
      break;
    case LogitsRows::last:
      if (n) {
        Mat<T> last = out.last_hidden.bottomRows(1);
        linear_rows(last, p.lm_head, out.logits);
      }
      break;
    case LogitsRows::none:
      break;
  }
  return out;
}

/// Builds a forward input from token embeddings with the latent bank spliced
/// between the context segment and the reconstruction segment. Latent rows are
/// copied verbatim; positions run contiguously from start_position.
template <class T>
ForwardInput<T> splice_latents(const Mat<T>& token_embeddings, const Mat<T>& latents, const SegmentLayout& layout,
                               Position start_position = 0) {
  if (std::size_t(latents.rows()) != layout.m) throw ShapeError("splice_latents: layout.m != latent count");
  if (std::size_t(token_embeddings.rows()) != layout.k + layout.t)
    throw ShapeError("splice_latents: token rows != k + t");
  if (layout.m && latents.cols() != token_embeddings.cols()) throw ShapeError("splice_latents: width mismatch");
  ForwardInput<T> in;
  in.embedded.resize(layout.n(), token_embeddings.cols());
  if (layout.k) in.embedded.topRows(layout.k) = token_embeddings.topRows(layout.k);
  if (layout.m) in.embedded.middleRows(layout.k, layout.m) = latents;
  if (layout.t) in.embedded.bottomRows(layout.t) = token_embeddings.bottomRows(layout.t);
  in.position_ids.resize(layout.n());
  for (std::size_t i = 0; i < layout.n(); ++i) in.position_ids[i] = start_position + Position(i);
  in.mask = build_grc_mask(layout);
  return in;
}

// ---------------------------------------------------------------------------
// Serialization: "GRCMODEL", u32 version, config fields (little-endian,
// fixed width, declaration order), then every tensor from for_each_tensor as
// little-endian float64.

inline constexpr std::uint32_t kModelFileVersion = 1;

namespace io {

inline void put_bytes(std::string& out, const void* p, std::size_t n) { out.append(static_cast<const char*>(p), n); }

template <class U>
void put_le(std::string& out, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
  put_bytes(out, buf, sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}
  template <class U>
  U get_le() {
    if (pos_ + sizeof(U) > data_.size()) throw std::runtime_error("truncated input");
    unsigned char buf[sizeof(U)];
    std::memcpy(buf, data_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
    pos_ += sizeof(U);
    U v;
    std::memcpy(&v, buf, sizeof(U));
    return v;
  }
  std::string_view get_bytes(std::size_t n) {
    if (pos_ + n > data_.size()) throw std::runtime_error("truncated input");
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, std::string_view data) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write(data.data(), std::streamsize(data.size()));
  if (!f) throw std::runtime_error("short write to " + path);
}

}  // namespace io

inline void serialize_config(std::string& out, const ModelConfig& c) {
  using io::put_le;
  put_le(out, c.num_layers);
  put_le(out, c.hidden_dim);
  put_le(out, c.num_q_heads);
  put_le(out, c.num_kv_heads);
  put_le(out, c.head_dim);
  put_le(out, c.vocab_size);
  put_le(out, c.rope_base);
  put_le(out, c.elem_bytes);
  put_le(out, c.seed);
  put_le(out, c.mlp_dim);
  put_le(out, c.num_latents);
  put_le(out, c.embed_dim);
}

inline ModelConfig deserialize_config(io::Reader& r) {
  ModelConfig c;
  c.num_layers = r.get_le<std::uint32_t>();
  c.hidden_dim = r.get_le<std::uint32_t>();
  c.num_q_heads = r.get_le<std::uint32_t>();
  c.num_kv_heads = r.get_le<std::uint32_t>();
  c.head_dim = r.get_le<std::uint32_t>();
  c.vocab_size = r.get_le<std::uint32_t>();
  c.rope_base = r.get_le<double>();
  c.elem_bytes = r.get_le<std::uint32_t>();
  c.seed = r.get_le<std::uint64_t>();
  c.mlp_dim = r.get_le<std::uint32_t>();
  c.num_latents = r.get_le<std::uint32_t>();
  c.embed_dim = r.get_le<std::uint32_t>();
  return c;
}

inline std::string serialize_model(const ModelParameters<double>& p) {
  std::string out("GRCMODEL", 8);
  io::put_le(out, kModelFileVersion);
  serialize_config(out, p.config);
  p.for_each_tensor([&](const std::string&, const double* d, std::size_t n, Eigen::Index, Eigen::Index) {
    for (std::size_t i = 0; i < n; ++i) io::put_le(out, d[i]);
  });
  return out;
}

inline ModelParameters<double> deserialize_model(std::string_view bytes) {
  io::Reader r(bytes);
  if (r.get_bytes(8) != "GRCMODEL") throw std::runtime_error("model file: bad magic");
  const auto version = r.get_le<std::uint32_t>();
  if (version != kModelFileVersion) throw std::runtime_error("model file: unsupported version");
  const ModelConfig c = deserialize_config(r);
  auto p = allocate_parameters<double>(c);
  p.for_each_tensor([&](const std::string&, double* d, std::size_t n, Eigen::Index, Eigen::Index) {
    for (std::size_t i = 0; i < n; ++i) d[i] = r.get_le<double>();
  });
  if (r.remaining() != 0) throw std::runtime_error("model file: trailing bytes");
  return p;
}

inline void save_model(const ModelParameters<double>& p, const std::string& path) {
  io::write_file(path, serialize_model(p));
}
inline ModelParameters<double> load_model(const std::string& path) { return deserialize_model(io::read_file(path)); }

/// 64-bit digest over the serialized config plus the first and last tensors in
/// file order (token embedding and latent bank). Values are hashed at single
/// precision so training and serving copies of one model agree.
template <class T>
std::uint64_t model_fingerprint(const ModelParameters<T>& p) {
  std::string cfg;
  serialize_config(cfg, p.config);
  Fnv64 h;
  h.bytes(cfg.data(), cfg.size());
  auto hash_tensor = [&](const auto& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) h.value(float(m.data()[i]));
  };
  hash_tensor(p.tok_emb);
  hash_tensor(p.latents);
  return h.digest();
}

}  // namespace grc
