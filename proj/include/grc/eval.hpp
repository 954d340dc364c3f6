#pragma once

#include <algorithm>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "grc/metrics.hpp"
#include "grc/patterns.hpp"
#include "grc/synthetic.hpp"

namespace grc {

struct RetrievalEvalSet {
  std::string instruction;
  std::vector<std::string> docs;
  std::vector<synthetic::RetrievalQuery> queries;

  void validate() const {
    if (queries.empty()) throw std::invalid_argument("eval set: no queries");
    for (const auto& q : queries) {
      if (q.relevant.empty()) throw std::invalid_argument("eval set: query '" + q.text + "' has no relevant document");
      for (auto d : q.relevant)
        if (d >= docs.size()) throw std::invalid_argument("eval set: relevant index out of range");
    }
  }
};

inline RetrievalEvalSet eval_set(const synthetic::RetrievalCorpus& rc) {
  return {std::string(synthetic::kRetrievalInstruction), rc.docs, rc.queries};
}

struct RetrievalEvalOptions {
  std::size_t reasoning_tokens = 16;
  double temperature = 0.0;
  std::size_t k = 10;
};

struct RetrievalEvalResult {
  std::vector<double> per_query;
  double mean = 0;
};

inline std::vector<double> binary_relevance(const synthetic::RetrievalQuery& q, std::size_t num_docs) {
  std::vector<double> rel(num_docs, 0.0);
  for (auto i : q.relevant) rel[i] = 1.0;
  return rel;
}

/// Embeds every document with doc_embed and every query with query_embed,
/// ranks documents by cosine and scores nDCG@k.
template <class T>
RetrievalEvalResult eval_retrieval(const ModelParameters<T>& p, const RetrievalEvalSet& set,
                                   const RetrievalEvalOptions& opt = {}) {
  set.validate();
  std::vector<Vec<float>> docs;
  for (const auto& d : set.docs) {
    PatternRequest r;
    r.pattern = Pattern::doc_embed;
    r.prompt = d;
    docs.push_back(*run_naive(p, r).embedding);
  }
  RetrievalEvalResult res;
  for (const auto& q : set.queries) {
    PatternRequest r;
    r.pattern = Pattern::query_embed;
    r.instruction = set.instruction;
    r.prompt = q.text;
    r.sampling.max_new_tokens = opt.reasoning_tokens;
    r.sampling.temperature = opt.temperature;
    const auto e = *run_naive(p, r).embedding;
    std::vector<double> scores;
    for (const auto& d : docs) scores.push_back(double(e.dot(d)));
    res.per_query.push_back(ndcg_at_k(rank_by_score(scores), binary_relevance(q, docs.size()), opt.k));
  }
  for (double s : res.per_query) res.mean += s;
  res.mean /= double(res.per_query.size());
  return res;
}

/// Expected nDCG@k of a uniformly random ranking, by Monte Carlo.
inline double chance_ndcg(const RetrievalEvalSet& set, std::size_t trials, std::uint64_t seed, std::size_t k = 10) {
  set.validate();
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(set.docs.size());
  double total = 0;
  for (std::size_t t = 0; t < trials; ++t)
    for (const auto& q : set.queries) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::shuffle(order.begin(), order.end(), rng);
      total += ndcg_at_k(order, binary_relevance(q, set.docs.size()), k);
    }
  return total / double(trials * set.queries.size());
}

struct ReconEvalResult {
  std::vector<ReconMetrics> per_example;
  ReconMetrics mean;
};

/// Compresses each chat context, regenerates it from the memory alone and
/// compares token sequences. Prompts cycle through the reconstruction set.
template <class T>
ReconEvalResult eval_recon(const ModelParameters<T>& p, const std::vector<ChatExample>& examples) {
  if (examples.empty()) throw std::invalid_argument("eval_recon: no examples");
  const auto& prompts = reconstruction_prompts();
  ReconEvalResult res;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto ctx = tok::chat(examples[i].u, examples[i].x, examples[i].y);
    const auto mem = *compress_tokens(p, std::span<const TokenId>(ctx), "ctx" + std::to_string(i)).memory;
    const auto hyp = reconstruct(p, mem, prompts[i % prompts.size()], ctx.size());
    const auto m = recon_metrics(ctx, hyp);
    res.per_example.push_back(m);
    res.mean.exact_match += m.exact_match;
    res.mean.token_accuracy += m.token_accuracy;
    res.mean.precision += m.precision;
    res.mean.recall += m.recall;
    res.mean.f1 += m.f1;
  }
  const double n = double(examples.size());
  res.mean.exact_match /= n;
  res.mean.token_accuracy /= n;
  res.mean.precision /= n;
  res.mean.recall /= n;
  res.mean.f1 /= n;
  return res;
}

}  // namespace grc
