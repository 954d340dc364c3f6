#pragma once

#include <chrono>
#include <cstdio>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "grc/engine.hpp"

namespace grc {

struct KvSizeReport {
  std::uint64_t bytes_per_token = 0;
  std::uint64_t full_bytes = 0;
  std::optional<std::uint64_t> compressed_bytes;

  static double mib(std::uint64_t b) { return double(b) / double(1 << 20); }
  std::optional<double> ratio() const {
    if (!compressed_bytes || *compressed_bytes == 0) return std::nullopt;
    return double(full_bytes) / double(*compressed_bytes);
  }
};

inline KvSizeReport kvsize(std::uint64_t layers, std::uint64_t kv_heads, std::uint64_t head_dim, std::uint64_t tokens,
                           std::uint64_t elem_bytes, std::optional<std::uint64_t> m = std::nullopt) {
  KvSizeReport r;
  r.bytes_per_token = kv_cache_bytes(layers, kv_heads, head_dim, 1, elem_bytes);
  r.full_bytes = kv_cache_bytes(layers, kv_heads, head_dim, tokens, elem_bytes);
  if (m) r.compressed_bytes = kv_cache_bytes(layers, kv_heads, head_dim, *m, elem_bytes);
  return r;
}

inline std::string format_kvsize(const KvSizeReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  os << "bytes_per_token " << r.bytes_per_token << "\n";
  os << "full_bytes " << r.full_bytes << " (" << KvSizeReport::mib(r.full_bytes) << " MiB)\n";
  if (r.compressed_bytes) {
    os << "compressed_bytes " << *r.compressed_bytes << " (" << KvSizeReport::mib(*r.compressed_bytes) << " MiB)\n";
    if (auto q = r.ratio()) os << "ratio " << *q << "\n";
  }
  return os.str();
}

enum class Impl { naive, hpa };

inline std::string_view impl_name(Impl i) { return i == Impl::naive ? "naive" : "hpa"; }

struct BenchRow {
  Pattern pattern = Pattern::regular_gen;
  Impl impl = Impl::naive;
  std::size_t max_new_tokens = 0;
  double mean_seconds = 0;
  std::size_t queries = 0;
};

struct BenchReport {
  std::vector<BenchRow> rows;

  /// Summed naive time over summed hpa time for one generation length.
  double speedup(std::size_t max_new) const {
    double naive = 0, hpa = 0;
    for (const auto& r : rows)
      if (r.max_new_tokens == max_new) (r.impl == Impl::naive ? naive : hpa) += r.mean_seconds;
    return hpa > 0 ? naive / hpa : 0.0;
  }

  std::string csv() const {
    std::ostringstream os;
    os << "pattern,implementation,max_new_tokens,mean_seconds,queries\n";
    for (const auto& r : rows) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.9g", r.mean_seconds);
      os << pattern_name(r.pattern) << ',' << impl_name(r.impl) << ',' << r.max_new_tokens << ',' << buf << ','
         << r.queries << '\n';
    }
    return os.str();
  }

  const BenchRow* find(Pattern p, Impl i, std::size_t max_new) const {
    for (const auto& r : rows)
      if (r.pattern == p && r.impl == i && r.max_new_tokens == max_new) return &r;
    return nullptr;
  }
};

struct BenchOptions {
  std::vector<Pattern> patterns = {Pattern::regular_gen, Pattern::query_embed, Pattern::doc_embed, Pattern::latent_rag};
  std::vector<std::size_t> max_new_tokens = {128};
  std::vector<Impl> impls = {Impl::naive, Impl::hpa};
  std::size_t warmup = 3;
  std::size_t repeats = 1;  // rounds alternate implementations; the fastest round is reported
  EngineConfig engine;
};

/// Workload of query texts plus documents; latent_rag requests get one
/// memory each, compressed from the documents round-robin.
struct Workload {
  std::vector<std::string> queries;
  std::vector<std::string> documents;
};

inline Workload synthetic_workload(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Workload w;
  for (std::size_t i = 0; i < n; ++i) {
    std::string q = "question " + std::to_string(i) + ":";
    const std::size_t words = 4 + rng() % 8;
    for (std::size_t j = 0; j < words; ++j) q += " w" + std::to_string(rng() % 100);
    w.queries.push_back(q);
    w.documents.push_back("Document " + std::to_string(i) + " says " + std::to_string(rng() % 1000) + ".");
  }
  return w;
}

inline std::vector<PatternRequest> workload_requests(const ModelParameters<float>& p, const Workload& w, Pattern pat,
                                                     std::size_t max_new) {
  std::vector<CompressedMemory> mems;
  if (pat == Pattern::latent_rag)
    for (std::size_t i = 0; i < w.documents.size(); ++i) {
      PatternRequest d;
      d.pattern = Pattern::doc_embed;
      d.prompt = w.documents[i];
      d.doc_id = "doc" + std::to_string(i);
      mems.push_back(*run_naive(p, d).memory);
    }
  std::vector<PatternRequest> out;
  for (std::size_t i = 0; i < w.queries.size(); ++i) {
    PatternRequest r;
    r.pattern = pat;
    r.prompt = pat == Pattern::doc_embed && i < w.documents.size() ? w.documents[i] : w.queries[i];
    r.sampling.max_new_tokens = max_new;
    r.sampling.stop_at_end = false;
    if (pat == Pattern::latent_rag && !mems.empty()) r.memories = {mems[i % mems.size()]};
    out.push_back(std::move(r));
  }
  return out;
}

/// Mean wall seconds per query. Naive runs one request at a time; the
/// engine receives the whole batch at once. The first `warmup` requests are
/// run once beforehand and not timed.
inline double time_requests(const ModelParameters<float>& p, const std::vector<PatternRequest>& reqs, Impl impl,
                            const BenchOptions& opt) {
  if (reqs.empty()) throw std::invalid_argument("bench: empty workload");
  using clock = std::chrono::steady_clock;
  std::vector<RequestPlan> plans;
  for (const auto& r : reqs) plans.push_back(plan_request(p, r, nullptr, opt.engine.max_context));
  const std::size_t w = std::min(opt.warmup, plans.size());
  if (impl == Impl::naive) {
    for (std::size_t i = 0; i < w; ++i) run_naive(p, plans[i]);
    const auto t0 = clock::now();
    for (const auto& pl : plans) run_naive(p, pl);
    return std::chrono::duration<double>(clock::now() - t0).count() / double(plans.size());
  }
  Engine engine(p, opt.engine);
  engine.run(std::vector<RequestPlan>(plans.begin(), plans.begin() + std::ptrdiff_t(w)));
  Engine fresh(p, opt.engine);
  const auto t0 = clock::now();
  fresh.run(plans);
  return std::chrono::duration<double>(clock::now() - t0).count() / double(plans.size());
}

inline BenchReport bench_latency(const ModelParameters<float>& p, const Workload& w, const BenchOptions& opt) {
  if (w.queries.empty()) throw std::invalid_argument("bench: empty workload");
  BenchReport rep;
  for (auto pat : opt.patterns)
    for (auto mx : opt.max_new_tokens) {
      const auto reqs = workload_requests(p, w, pat, mx);
      std::vector<double> best(opt.impls.size(), std::numeric_limits<double>::infinity());
      for (std::size_t round = 0; round < std::max<std::size_t>(opt.repeats, 1); ++round)
        for (std::size_t i = 0; i < opt.impls.size(); ++i)
          best[i] = std::min(best[i], time_requests(p, reqs, opt.impls[i], opt));
      for (std::size_t i = 0; i < opt.impls.size(); ++i) rep.rows.push_back({pat, opt.impls[i], mx, best[i], reqs.size()});
    }
  return rep;
}

}  // namespace grc
