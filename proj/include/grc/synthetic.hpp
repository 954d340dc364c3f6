#pragma once

#include <random>
#include <set>
#include <string>
#include <vector>

#include "grc/data.hpp"

namespace grc::synthetic {

inline constexpr std::string_view kCodeAlphabet = "ABCDEFGHJKLMNPQR";

template <class Rng>
std::string random_code(std::size_t len, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, kCodeAlphabet.size() - 1);
  std::string s;
  for (std::size_t i = 0; i < len; ++i) s.push_back(kCodeAlphabet[pick(rng)]);
  return s;
}

/// Chat examples whose context carries a random code: "Repeat the code." /
/// "Q7KMA" / "The code is Q7KMA." Codes are distinct.
inline std::vector<ChatExample> chat_corpus(std::size_t n, std::uint64_t seed, std::size_t code_len = 5) {
  static const std::vector<std::string> instructions = {"Repeat the code.", "Say the code.", "Echo the code.",
                                                        "Copy the code."};
  std::mt19937_64 rng(seed);
  std::set<std::string> seen;
  std::vector<ChatExample> out;
  while (out.size() < n) {
    auto code = random_code(code_len, rng);
    if (!seen.insert(code).second) continue;
    const auto& u = instructions[out.size() % instructions.size()];
    out.push_back({u, code, "The code is " + code + "."});
  }
  return out;
}

struct RetrievalQuery {
  std::string text;
  std::vector<std::size_t> relevant;  // indices into docs
};

struct RetrievalCorpus {
  std::vector<std::string> docs;
  std::vector<RetrievalQuery> queries;    // evaluation queries
  std::vector<RetrievalExample> train;    // one example per document
};

inline constexpr std::string_view kRetrievalInstruction = "Find the item.";

/// Templated facts keyed by a three-letter item name shared between the
/// query and its document, e.g. doc "Item KQD is red and round." and query
/// "KQD". Training examples pair every key query with its document and one
/// random other document; evaluation queries are the first num_queries keys.
inline RetrievalCorpus retrieval_corpus(std::size_t num_docs, std::size_t num_queries, std::uint64_t seed) {
  static const std::vector<std::string> colors = {"red", "blue", "green", "gray", "pink", "gold", "tan", "white"};
  static const std::vector<std::string> shapes = {"round", "flat", "tall", "thin", "square", "long", "small", "wide"};
  if (num_queries > num_docs) throw std::invalid_argument("retrieval_corpus: more queries than documents");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> c8(0, 7);
  std::set<std::string> seen;
  std::vector<std::string> keys;
  RetrievalCorpus rc;
  while (rc.docs.size() < num_docs) {
    auto key = random_code(3, rng);
    if (!seen.insert(key).second) continue;
    keys.push_back(key);
    rc.docs.push_back("Item " + key + " is " + colors[c8(rng)] + " and " + shapes[c8(rng)] + ".");
  }
  std::uniform_int_distribution<std::size_t> other(0, num_docs - 2);
  for (std::size_t i = 0; i < num_docs; ++i) {
    std::size_t j = other(rng);
    if (j >= i) ++j;
    rc.train.push_back({std::string(kRetrievalInstruction), keys[i], "Item " + keys[i] + ".", rc.docs[i], {rc.docs[j]}});
  }
  for (std::size_t q = 0; q < num_queries; ++q) rc.queries.push_back({keys[q], {q}});
  return rc;
}

}  // namespace grc::synthetic
