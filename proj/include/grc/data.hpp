#pragma once

#include <array>
#include <fstream>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "grc/mask.hpp"
#include "grc/tokenizer.hpp"

namespace grc {

class DataError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// The eight reconstruction instructions, verbatim.
inline const std::array<std::string, 8>& reconstruction_prompts() {
  static const std::array<std::string, 8> prompts = {
      "What was discussed in the previous conversation?",
      "What did we talk about in the last conversation?",
      "What did we cover in our last discussion?",
      "What were the key points of the previous conversation?",
      "Can you give an overview of what we talked about earlier?",
      "Remind me what our last conversation was about.",
      "What were we discussing earlier?",
      "What did we go over in the previous chat?",
  };
  return prompts;
}

inline constexpr std::string_view kDocumentInstruction = "Represent this text";
inline constexpr std::string_view kDocumentResponse = "None";

/// Query instruction used for reasoning-enhanced query embedding; {query} is
/// substituted by the caller.
inline constexpr std::string_view kQueryInstruction =
    "Given a question, your mission is to follow the instructions below:\n"
    "1. Identify the essential problem.\n"
    "2. Think step by step to reason and describe what information could be relevant and helpful to address the "
    "questions in detail.\n"
    "3. Draft an answer with as many thoughts as you have.\n"
    "The given question:";

struct ChatExample {
  std::string u, x, y;
};

struct RetrievalExample {
  std::string u, x, y, d_p;
  std::vector<std::string> d_n;
};

/// Token ids of one training sequence without the latent slots, plus its
/// layout. Full-sequence position p maps to tokens[p] for p < k and to
/// tokens[p - m] for p >= k + m.
struct SegmentedSequence {
  std::vector<TokenId> tokens;
  SegmentLayout layout;
  std::size_t gen_begin = 0, gen_end = 0;  // generation-loss targets, full positions
  std::string recovered_text;

  std::span<const TokenId> context() const { return {tokens.data(), layout.k}; }
  std::span<const TokenId> recon_instruction() const { return {tokens.data() + layout.k, layout.recon_start_offset}; }
  std::span<const TokenId> recovered() const {
    return {tokens.data() + layout.k + layout.recon_start_offset, layout.t - layout.recon_start_offset};
  }
  TokenId token_at(std::size_t pos) const { return pos < layout.k ? tokens[pos] : tokens[pos - layout.m]; }

  bool operator==(const SegmentedSequence&) const = default;
};

enum class Origin { generative, embedding };

struct UnifiedExample {
  SegmentedSequence query, pos;
  std::vector<SegmentedSequence> negs;
  Origin origin = Origin::generative;

  bool operator==(const UnifiedExample&) const = default;
};

/// Assembles context + latent slots + (instruction, recovered context).
inline SegmentedSequence make_sequence(std::vector<TokenId> context, std::size_t gen_begin, std::size_t m,
                                       std::string_view recon_prompt, std::span<const TokenId> recovered,
                                       std::string recovered_text) {
  SegmentedSequence s;
  const auto instr = tok::recon_instruction(recon_prompt);
  s.layout.k = context.size();
  s.layout.m = m;
  s.layout.t = instr.size() + recovered.size();
  s.layout.recon_start_offset = instr.size();
  s.gen_begin = gen_begin;
  s.gen_end = context.size();
  s.tokens = std::move(context);
  tok::append(s.tokens, instr);
  tok::append(s.tokens, recovered);
  s.recovered_text = std::move(recovered_text);
  return s;
}

template <class Rng>
const std::string& draw_prompt(const std::array<std::string, 8>& prompts, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, prompts.size() - 1);
  return prompts[pick(rng)];
}

/// (u, x, y) | m latents | (r_p, c) with c = the framed (u, x, y).
template <class Rng>
SegmentedSequence augment_generative(const ChatExample& ex, std::size_t m, const std::array<std::string, 8>& prompts,
                                     Rng& rng) {
  if (m == 0) throw DataError("augment_generative: m must be >= 1");
  if (ex.y.empty()) throw DataError("augment_generative: empty response");
  std::size_t rb = 0;
  auto ctx = tok::chat(ex.u, ex.x, ex.y, &rb);
  const auto& rp = draw_prompt(prompts, rng);
  std::vector<TokenId> c = ctx;
  std::string text = tok::decode(ctx);
  return make_sequence(std::move(ctx), rb, m, rp, c, std::move(text));
}

struct EmbeddingTriple {
  SegmentedSequence query, pos;
  std::vector<SegmentedSequence> negs;
};

/// Document-role sequence: (doc instruction, doc, "None") with c = the document.
template <class Rng>
SegmentedSequence augment_document(std::string_view doc, std::size_t m, const std::array<std::string, 8>& prompts,
                                   Rng& rng) {
  std::size_t rb = 0;
  auto ctx = tok::chat(kDocumentInstruction, doc, kDocumentResponse, &rb);
  const auto& rp = draw_prompt(prompts, rng);
  const auto c = tok::encode(doc);
  return make_sequence(std::move(ctx), rb, m, rp, c, std::string(doc));
}

template <class Rng>
EmbeddingTriple augment_embedding(const RetrievalExample& ex, std::size_t m, const std::array<std::string, 8>& prompts,
                                  Rng& rng) {
  if (m == 0) throw DataError("augment_embedding: m must be >= 1");
  if (ex.d_p.empty()) throw DataError("augment_embedding: missing positive document");
  EmbeddingTriple out;
  out.query = augment_generative(ChatExample{ex.u, ex.x, ex.y.empty() ? std::string(kDocumentResponse) : ex.y}, m,
                                 prompts, rng);
  out.pos = augment_document(ex.d_p, m, prompts, rng);
  for (const auto& d : ex.d_n) out.negs.push_back(augment_document(d, m, prompts, rng));
  return out;
}

using AugmentedItem = std::variant<SegmentedSequence, EmbeddingTriple>;

/// Generative items become self-positive examples whose negatives are drawn
/// uniformly from the other batch members (a member contributes its positive
/// sequence). A draw identical to the positive is re-drawn once. Embedding
/// items pass through unchanged.
template <class Rng>
std::vector<UnifiedExample> unify_batch(const std::vector<AugmentedItem>& batch, Rng& rng,
                                        std::size_t num_negatives = 1) {
  auto positive_of = [&](std::size_t i) -> const SegmentedSequence& {
    if (auto* g = std::get_if<SegmentedSequence>(&batch[i])) return *g;
    return std::get<EmbeddingTriple>(batch[i]).pos;
  };
  std::vector<UnifiedExample> out;
  out.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    UnifiedExample ex;
    if (auto* g = std::get_if<SegmentedSequence>(&batch[i])) {
      if (batch.size() < 2) throw DataError("unify_batch: a generative example needs another batch member");
      ex.origin = Origin::generative;
      ex.query = *g;
      ex.pos = *g;
      std::uniform_int_distribution<std::size_t> pick(0, batch.size() - 2);
      auto draw = [&] {
        std::size_t j = pick(rng);
        return j >= i ? j + 1 : j;
      };
      for (std::size_t n = 0; n < num_negatives; ++n) {
        std::size_t j = draw();
        if (positive_of(j).tokens == ex.pos.tokens) j = draw();
        ex.negs.push_back(positive_of(j));
      }
    } else {
      const auto& e = std::get<EmbeddingTriple>(batch[i]);
      ex.origin = Origin::embedding;
      ex.query = e.query;
      ex.pos = e.pos;
      ex.negs = e.negs;
    }
    out.push_back(std::move(ex));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Line-delimited JSON records.

using Record = std::variant<ChatExample, RetrievalExample>;

inline Record parse_record(const nlohmann::json& j) {
  auto str = [&](const char* key) { return j.contains(key) ? j.at(key).get<std::string>() : std::string(); };
  if (j.contains("d_p")) {
    RetrievalExample r{str("u"), str("x"), str("y"), str("d_p"), {}};
    if (j.contains("d_n")) r.d_n = j.at("d_n").get<std::vector<std::string>>();
    return r;
  }
  return ChatExample{str("u"), str("x"), str("y")};
}

inline nlohmann::json to_json(const Record& r) {
  if (auto* c = std::get_if<ChatExample>(&r)) return {{"u", c->u}, {"x", c->x}, {"y", c->y}};
  const auto& e = std::get<RetrievalExample>(r);
  return {{"u", e.u}, {"x", e.x}, {"y", e.y}, {"d_p", e.d_p}, {"d_n", e.d_n}};
}

inline std::vector<Record> read_records(std::istream& in) {
  std::vector<Record> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_record(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<Record> read_records(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open " + path);
  return read_records(f);
}

inline void write_records(std::ostream& out, const std::vector<Record>& recs) {
  for (const auto& r : recs) out << to_json(r).dump() << '\n';
}

template <class Rng>
AugmentedItem augment(const Record& r, std::size_t m, Rng& rng) {
  if (auto* c = std::get_if<ChatExample>(&r)) return augment_generative(*c, m, reconstruction_prompts(), rng);
  return augment_embedding(std::get<RetrievalExample>(r), m, reconstruction_prompts(), rng);
}

inline nlohmann::json to_json(const SegmentLayout& l) {
  return {{"k", l.k}, {"m", l.m}, {"t", l.t}, {"recon_start_offset", l.recon_start_offset}};
}

inline nlohmann::json to_json(const SegmentedSequence& s) {
  return {{"tokens", s.tokens},   {"layout", to_json(s.layout)},        {"gen_begin", s.gen_begin},
          {"gen_end", s.gen_end}, {"recovered_text", s.recovered_text}};
}

inline SegmentedSequence sequence_from_json(const nlohmann::json& j) {
  SegmentedSequence s;
  s.tokens = j.at("tokens").get<std::vector<TokenId>>();
  const auto& l = j.at("layout");
  s.layout = {l.at("k").get<std::size_t>(), l.at("m").get<std::size_t>(), l.at("t").get<std::size_t>(),
              l.at("recon_start_offset").get<std::size_t>()};
  s.gen_begin = j.at("gen_begin").get<std::size_t>();
  s.gen_end = j.at("gen_end").get<std::size_t>();
  s.recovered_text = j.at("recovered_text").get<std::string>();
  if (s.tokens.size() != s.layout.k + s.layout.t || !s.layout.valid())
    throw DataError("sequence json: tokens inconsistent with layout");
  return s;
}

inline nlohmann::json to_json(const UnifiedExample& u) {
  nlohmann::json negs = nlohmann::json::array();
  for (const auto& n : u.negs) negs.push_back(to_json(n));
  return {{"origin", u.origin == Origin::generative ? "generative" : "embedding"},
          {"query", to_json(u.query)},
          {"pos", to_json(u.pos)},
          {"negs", negs}};
}

inline UnifiedExample unified_from_json(const nlohmann::json& j) {
  UnifiedExample u;
  const auto origin = j.at("origin").get<std::string>();
  if (origin != "generative" && origin != "embedding") throw DataError("unified json: bad origin");
  u.origin = origin == "generative" ? Origin::generative : Origin::embedding;
  u.query = sequence_from_json(j.at("query"));
  u.pos = sequence_from_json(j.at("pos"));
  for (const auto& n : j.at("negs")) u.negs.push_back(sequence_from_json(n));
  return u;
}

}  // namespace grc
