#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <vector>

#include "grc/model.hpp"

namespace grc {

/// nDCG@k with gain = relevance[doc] and discount 1 / log2(rank + 1).
inline double ndcg_at_k(const std::vector<std::size_t>& ranking, const std::vector<double>& relevance,
                        std::size_t k = 10) {
  if (k == 0) throw std::invalid_argument("ndcg: k must be >= 1");
  std::vector<double> ideal;
  for (double r : relevance)
    if (r > 0) ideal.push_back(r);
  if (ideal.empty()) throw std::invalid_argument("ndcg: no relevant documents");
  std::sort(ideal.begin(), ideal.end(), std::greater<>());
  double dcg = 0, idcg = 0;
  for (std::size_t r = 0; r < std::min(k, ranking.size()); ++r) dcg += relevance.at(ranking[r]) / std::log2(double(r) + 2);
  for (std::size_t r = 0; r < std::min(k, ideal.size()); ++r) idcg += ideal[r] / std::log2(double(r) + 2);
  return dcg / idcg;
}

/// Indices sorted by descending score; ties keep the lower index first.
inline std::vector<std::size_t> rank_by_score(const std::vector<double>& scores) {
  std::vector<std::size_t> idx(scores.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

struct ReconMetrics {
  double exact_match = 0;     // whole sequence identical
  double token_accuracy = 0;  // position-wise matches / reference length
  double precision = 0, recall = 0, f1 = 0;  // multiset token overlap
};

inline ReconMetrics recon_metrics(std::span<const TokenId> ref, std::span<const TokenId> hyp) {
  ReconMetrics r;
  r.exact_match = std::equal(ref.begin(), ref.end(), hyp.begin(), hyp.end()) ? 1.0 : 0.0;
  if (ref.empty() && hyp.empty()) {
    r.token_accuracy = r.precision = r.recall = r.f1 = 1.0;
    return r;
  }
  std::size_t same = 0;
  for (std::size_t i = 0; i < std::min(ref.size(), hyp.size()); ++i) same += ref[i] == hyp[i];
  r.token_accuracy = ref.empty() ? 0.0 : double(same) / double(ref.size());
  std::map<TokenId, std::size_t> count;
  for (auto t : ref) ++count[t];
  std::size_t overlap = 0;
  for (auto t : hyp) {
    auto it = count.find(t);
    if (it != count.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  r.precision = hyp.empty() ? 0.0 : double(overlap) / double(hyp.size());
  r.recall = ref.empty() ? 0.0 : double(overlap) / double(ref.size());
  r.f1 = overlap ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

}  // namespace grc
