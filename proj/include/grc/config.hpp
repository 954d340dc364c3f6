#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace grc {

/// Raised when a model configuration violates its structural invariants.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised on tensor/sequence length mismatches at call boundaries.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Architecture of the decoder-only model plus the GRC-specific heads.
///
/// The first nine fields are the ones the KV-size arithmetic needs; the rest
/// describe the MLP width, the latent bank and the embedding adapter.
struct ModelConfig {
  std::uint32_t num_layers = 2;
  std::uint32_t hidden_dim = 64;
  std::uint32_t num_q_heads = 4;
  std::uint32_t num_kv_heads = 2;
  std::uint32_t head_dim = 16;
  std::uint32_t vocab_size = 512;
  double rope_base = 10000.0;
  std::uint32_t elem_bytes = 4;
  std::uint64_t seed = 0x5eed;

  std::uint32_t mlp_dim = 256;
  std::uint32_t num_latents = 8;
  std::uint32_t embed_dim = 64;

  std::size_t kv_dim() const { return std::size_t(num_kv_heads) * head_dim; }
  std::size_t q_dim() const { return std::size_t(num_q_heads) * head_dim; }
  std::size_t group_size() const { return num_q_heads / num_kv_heads; }

  bool operator==(const ModelConfig&) const = default;
};

/// Toy default used throughout tests and the CLI.
inline ModelConfig toy_config() { return ModelConfig{}; }

/// Qwen3-1.7B attention geometry, used only for KV-size arithmetic.
inline ModelConfig qwen3_1_7b_geometry() {
  ModelConfig c;
  c.num_layers = 28;
  c.num_kv_heads = 8;
  c.head_dim = 128;
  c.num_q_heads = 16;
  c.hidden_dim = 2048;
  c.elem_bytes = 2;
  c.num_latents = 128;
  return c;
}

inline void validate(const ModelConfig& c) {
  if (c.num_layers == 0 || c.hidden_dim == 0 || c.num_q_heads == 0 || c.num_kv_heads == 0 ||
      c.head_dim == 0 || c.vocab_size == 0 || c.mlp_dim == 0 || c.embed_dim == 0 ||
      c.elem_bytes == 0)
    throw ConfigError("model config: all dimensions must be positive");
  if (c.num_q_heads % c.num_kv_heads != 0)
    throw ConfigError("model config: num_q_heads must be a multiple of num_kv_heads");
  if (std::size_t(c.hidden_dim) != c.q_dim())
    throw ConfigError("model config: hidden_dim must equal num_q_heads * head_dim");
  if (c.head_dim % 2 != 0) throw ConfigError("model config: head_dim must be even for rotary");
  if (!(c.rope_base > 0.0)) throw ConfigError("model config: rope_base must be positive");
}

/// Number of scalar parameters, including latent bank and adapter.
inline std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = c.hidden_dim, kv = c.kv_dim(), q = c.q_dim();
  const std::size_t per_layer = d                   // attention norm gain
                                + q * d + 2 * kv * d  // q, k, v projections
                                + d * q               // output projection
                                + d                   // mlp norm gain
                                + 2 * std::size_t(c.mlp_dim) * d;
  return std::size_t(c.vocab_size) * d                // token embedding
         + c.num_layers * per_layer + d               // final norm
         + std::size_t(c.vocab_size) * d              // language head
         + std::size_t(c.embed_dim) * d + c.embed_dim // adapter
         + std::size_t(c.num_latents) * d;            // latent bank
}

}  // namespace grc
