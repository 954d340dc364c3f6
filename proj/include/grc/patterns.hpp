#pragma once

#include <chrono>
#include <optional>
#include <string>
#include <vector>

#include "grc/data.hpp"
#include "grc/memory.hpp"
#include "grc/model.hpp"
#include "grc/objectives.hpp"
#include "grc/rng.hpp"

namespace grc {

class ContextOverflow : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Sampling {
  double temperature = 0.0;
  std::size_t max_new_tokens = 64;
  std::uint64_t seed = 0;
  bool stop_at_end = true;  // stop after emitting the end-of-message marker
};

/// Greedy when temperature <= 0 (ties go to the lowest id); otherwise
/// inverse-CDF sampling from softmax(logits / temperature) driven by a
/// counter-based stream so that any execution path draws the same token.
template <class T>
TokenId sample_token(const T* logits, std::size_t vocab, const Sampling& s, std::uint64_t step) {
  if (!(s.temperature > 0)) return TokenId(argmax(logits, vocab));
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < vocab; ++i) mx = std::max(mx, double(logits[i]));
  std::vector<double> w(vocab);
  double total = 0;
  for (std::size_t i = 0; i < vocab; ++i) total += w[i] = std::exp((double(logits[i]) - mx) / s.temperature);
  const double u = CounterRng(s.seed, 0x5a3d).uniform(step) * total;
  double acc = 0;
  for (std::size_t i = 0; i < vocab; ++i) {
    acc += w[i];
    if (u < acc) return TokenId(i);
  }
  return TokenId(vocab - 1);
}

enum class Pattern { regular_gen, query_embed, doc_embed, latent_rag };

inline std::string_view pattern_name(Pattern p) {
  switch (p) {
    case Pattern::regular_gen: return "regular_gen";
    case Pattern::query_embed: return "query_embed";
    case Pattern::doc_embed: return "doc_embed";
    case Pattern::latent_rag: return "latent_rag";
  }
  return "?";
}

inline Pattern parse_pattern(std::string_view s) {
  for (auto p : {Pattern::regular_gen, Pattern::query_embed, Pattern::doc_embed, Pattern::latent_rag})
    if (pattern_name(p) == s) return p;
  throw std::invalid_argument("unknown pattern '" + std::string(s) + "'");
}

struct PatternRequest {
  Pattern pattern = Pattern::regular_gen;
  std::string instruction;             // u; empty picks the pattern default
  std::string prompt;                  // x, or the document text for doc_embed
  std::vector<TokenId> prompt_tokens;  // overrides the chat framing when non-empty
  std::size_t m = 0;                   // latents to append; 0 means all
  Sampling sampling;
  std::vector<std::string> doc_ids;           // latent_rag: fetched from the store
  std::vector<CompressedMemory> memories;     // latent_rag: supplied inline, after doc_ids
  std::string doc_id;                         // name for the memory produced by doc_embed
};

struct PatternResult {
  std::string text;
  std::vector<TokenId> tokens;
  std::optional<Vec<float>> embedding;
  std::optional<CompressedMemory> memory;
  std::size_t prompt_tokens = 0, context_rows = 0;
  double seconds = 0;
};

/// Resolved execution plan shared by the naive loop and the engine.
struct RequestPlan {
  std::vector<CompressedMemory> memories;
  std::vector<TokenId> prompt;
  bool generate = false, latents = false;
  std::size_t m = 0;
  Sampling sampling;
  std::string doc_id;

  Position first_position() const {
    Position next = 0;
    for (const auto& mem : memories)
      for (auto p : mem.position_ids) next = std::max(next, p + 1);
    return next;
  }
  std::size_t memory_rows() const {
    std::size_t n = 0;
    for (const auto& mem : memories) n += mem.m;
    return n;
  }
};

inline constexpr std::size_t kDefaultMaxContext = 8192;

template <class T>
RequestPlan plan_request(const ModelParameters<T>& p, const PatternRequest& req, const MemoryStore* store,
                         std::size_t max_context = kDefaultMaxContext) {
  RequestPlan plan;
  plan.sampling = req.sampling;
  plan.doc_id = req.doc_id;
  plan.m = req.m ? req.m : p.config.num_latents;
  if (plan.m > p.config.num_latents) throw std::invalid_argument("m exceeds the latent bank size");
  switch (req.pattern) {
    case Pattern::regular_gen:
      plan.prompt = tok::chat_prompt(req.instruction, req.prompt);
      plan.generate = true;
      break;
    case Pattern::query_embed:
      plan.prompt = tok::chat_prompt(req.instruction.empty() ? kQueryInstruction : req.instruction, req.prompt);
      plan.generate = plan.latents = true;
      break;
    case Pattern::doc_embed:
      plan.prompt = tok::chat(req.instruction.empty() ? kDocumentInstruction : req.instruction, req.prompt,
                              kDocumentResponse);
      plan.latents = true;
      break;
    case Pattern::latent_rag:
      plan.prompt = tok::chat_prompt(req.instruction, req.prompt);
      plan.generate = true;
      break;
  }
  if (!req.prompt_tokens.empty()) plan.prompt = req.prompt_tokens;
  const auto fp = model_fingerprint(p);
  for (const auto& id : req.doc_ids) {
    if (!store) throw MemoryError("latent_rag: no memory store configured");
    plan.memories.push_back(store->get(id));
  }
  for (const auto& mem : req.memories) plan.memories.push_back(mem);
  for (const auto& mem : plan.memories) check_compatible(mem, p.config, fp);
  const std::size_t need = plan.memory_rows() + plan.prompt.size() +
                           (plan.generate ? plan.sampling.max_new_tokens : 0) + (plan.latents ? plan.m : 0);
  if (need > max_context)
    throw ContextOverflow("request needs " + std::to_string(need) + " positions, limit " + std::to_string(max_context));
  return plan;
}

/// Contiguous past KV grown by concatenation, batch of one.
template <class T>
class NaiveSession {
 public:
  explicit NaiveSession(const ModelParameters<T>& p) : p_(p) {}

  void inject(const CompressedMemory& mem) {
    const auto past = memory_past<T>(mem);
    past_.append(past.layers, past.positions);
    for (auto pos : mem.position_ids) next_ = std::max(next_, pos + 1);
  }

  ForwardOutput<T> feed(const Mat<T>& rows, LogitsRows which) {
    ForwardInput<T> in;
    in.embedded = rows;
    for (Eigen::Index i = 0; i < rows.rows(); ++i) in.position_ids.push_back(next_ + i);
    in.mask = AttentionMask::causal(rows.rows());
    in.past = past_.empty() ? nullptr : &past_;
    in.logits_rows = which;
    auto out = forward(p_, in);
    past_.append(out.new_kv, in.position_ids);
    next_ += rows.rows();
    return out;
  }

  std::size_t cached_rows() const { return past_.size(); }
  Position next_position() const { return next_; }

 private:
  const ModelParameters<T>& p_;
  PastKv<T> past_;
  Position next_ = 0;
};

/// Embeddings of the latent rows plus the latent block as a memory.
template <class T>
void finish_latents(const ModelParameters<T>& p, const RequestPlan& plan, const ForwardOutput<T>& out,
                    std::span<const Position> positions, PatternResult& res) {
  const Eigen::Index m = Eigen::Index(plan.m);
  res.embedding = embed(p, Mat<T>(out.last_hidden.bottomRows(m))).template cast<float>();
  std::vector<KvRows<T>> rows;
  for (const auto& kv : out.new_kv) rows.push_back({kv.k.bottomRows(m), kv.v.bottomRows(m)});
  res.memory = make_memory(plan.doc_id, p.config, model_fingerprint(p), rows,
                           std::vector<Position>(positions.end() - m, positions.end()));
}

template <class T>
Mat<T> latent_rows(const ModelParameters<T>& p, std::span<const TokenId> pending, std::size_t m) {
  Mat<T> rows(pending.size() + m, p.config.hidden_dim);
  if (!pending.empty()) rows.topRows(pending.size()) = embed_tokens<T>(p, pending);
  rows.bottomRows(m) = p.latents.topRows(m);
  return rows;
}

/// Runs a plan through the naive batch-one loop.
template <class T>
PatternResult run_naive(const ModelParameters<T>& p, const RequestPlan& plan) {
  const auto t0 = std::chrono::steady_clock::now();
  PatternResult res;
  NaiveSession<T> s(p);
  for (const auto& mem : plan.memories) s.inject(mem);
  res.prompt_tokens = plan.prompt.size();
  std::vector<TokenId> pending = plan.prompt;
  const std::size_t vocab = p.config.vocab_size;
  if (plan.generate && plan.sampling.max_new_tokens > 0) {
    for (std::size_t step = 0;; ++step) {
      const auto out = s.feed(embed_tokens<T>(p, pending), LogitsRows::last);
      const TokenId t = sample_token(out.logits.row(0).data(), vocab, plan.sampling, step);
      res.tokens.push_back(t);
      pending = {t};
      if ((plan.sampling.stop_at_end && t == tok::kImEnd) || res.tokens.size() >= plan.sampling.max_new_tokens) break;
    }
  }
  if (plan.latents) {
    const Position start = s.next_position();
    const auto rows = latent_rows(p, pending, plan.m);
    const auto out = s.feed(rows, LogitsRows::none);
    std::vector<Position> pos(rows.rows());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = start + Position(i);
    finish_latents(p, plan, out, pos, res);
  }
  res.context_rows = s.cached_rows();
  res.text = tok::decode(res.tokens);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

template <class T>
PatternResult run_naive(const ModelParameters<T>& p, const PatternRequest& req, const MemoryStore* store = nullptr) {
  return run_naive(p, plan_request(p, req, store));
}

/// Compresses raw context tokens into latent KV (memory) and an embedding.
template <class T>
PatternResult compress_tokens(const ModelParameters<T>& p, std::span<const TokenId> context, std::string doc_id,
                              std::size_t m = 0) {
  PatternRequest req;
  req.pattern = Pattern::doc_embed;
  req.prompt_tokens.assign(context.begin(), context.end());
  req.doc_id = std::move(doc_id);
  req.m = m;
  if (context.empty()) throw std::invalid_argument("compress: empty context");
  return run_naive(p, plan_request(p, req, nullptr));
}

/// Regenerates context from a memory through a reconstruction instruction.
template <class T>
std::vector<TokenId> reconstruct(const ModelParameters<T>& p, const CompressedMemory& mem, std::string_view recon_prompt,
                                 std::size_t max_new_tokens) {
  PatternRequest req;
  req.pattern = Pattern::latent_rag;
  req.memories = {mem};
  req.prompt_tokens = tok::recon_instruction(recon_prompt);
  req.sampling.max_new_tokens = max_new_tokens;
  req.sampling.stop_at_end = false;
  return run_naive(p, plan_request(p, req, nullptr)).tokens;
}

}  // namespace grc
