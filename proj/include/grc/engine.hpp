#pragma once

#include <chrono>
#include <deque>
#include <map>
#include <mutex>

#include <nlohmann/json.hpp>

#include "grc/paged.hpp"
#include "grc/patterns.hpp"

namespace grc {

struct EngineConfig {
  std::size_t block_size = 16;
  std::size_t num_blocks = 1024;
  std::size_t max_num_seqs = 16;
  std::size_t max_num_batched_tokens = 2048;
  bool prefix_caching = true;
  std::size_t max_context = kDefaultMaxContext;

  void validate() const {
    if (!block_size || !num_blocks || !max_num_seqs || !max_num_batched_tokens || !max_context)
      throw ConfigError("engine config: all limits must be positive");
  }
};

inline EngineConfig engine_config_from_json(const nlohmann::json& j) {
  EngineConfig c;
  c.block_size = j.value("block_size", c.block_size);
  c.num_blocks = j.value("num_blocks", c.num_blocks);
  c.max_num_seqs = j.value("max_num_seqs", c.max_num_seqs);
  c.max_num_batched_tokens = j.value("max_num_batched_tokens", c.max_num_batched_tokens);
  c.prefix_caching = j.value("prefix_caching", c.prefix_caching);
  c.max_context = j.value("max_context", c.max_context);
  c.validate();
  return c;
}

inline nlohmann::json to_json(const EngineConfig& c) {
  return {{"block_size", c.block_size},
          {"num_blocks", c.num_blocks},
          {"max_num_seqs", c.max_num_seqs},
          {"max_num_batched_tokens", c.max_num_batched_tokens},
          {"prefix_caching", c.prefix_caching},
          {"max_context", c.max_context}};
}

using SeqId = std::uint64_t;
enum class SeqStatus { waiting, running, finished };

struct ScheduledChunk {
  SeqId seq = 0;
  std::size_t rows = 0;
};

struct StepReport {
  std::vector<ScheduledChunk> chunks;
  std::vector<SeqId> admitted, preempted, finished;
  std::size_t reused_rows = 0;  // rows attached from the prefix cache

  std::size_t batched_rows() const {
    std::size_t n = 0;
    for (const auto& c : chunks) n += c.rows;
    return n;
  }
};

/// Continuous-batching engine over a paged KV pool. Every sequence runs the
/// same phases as the naive loop (prompt, sampled tokens, then the pending
/// token plus latents) so both paths produce identical rows.
class Engine {
 public:
  Engine(const ModelParameters<float>& p, EngineConfig cfg)
      : p_(p), cfg_(cfg), pool_((cfg.validate(), p.config), cfg.block_size, cfg.num_blocks),
        fingerprint_(model_fingerprint(p)) {}

  const BlockPool& pool() const { return pool_; }
  const EngineConfig& config() const { return cfg_; }
  const ModelParameters<float>& model() const { return p_; }
  std::uint64_t rows_computed() const { return rows_computed_; }
  std::uint64_t rows_reused() const { return rows_reused_; }

  /// Thread-safe submission.
  SeqId submit(RequestPlan plan) {
    for (const auto& mem : plan.memories) check_compatible(mem, p_.config, fingerprint_);
    if (plan.m > p_.config.num_latents) throw std::invalid_argument("engine: m exceeds the latent bank size");
    for (auto t : plan.prompt)
      if (t >= p_.config.vocab_size) throw ShapeError("token id out of vocabulary");
    const std::size_t B = cfg_.block_size;
    const std::size_t gen = plan.generate ? plan.sampling.max_new_tokens : 0;
    const std::size_t regular = plan.prompt.size() + gen + (plan.latents ? plan.m : 0);
    const std::size_t worst = (plan.memory_rows() + B - 1) / B + (regular + B - 1) / B;
    if (plan.memory_rows() + regular > cfg_.max_context) throw ContextOverflow("engine: request exceeds max_context");
    if (worst > pool_.capacity()) throw PoolExhausted("engine: request can never fit in the block pool");
    auto s = std::make_unique<Sequence>();
    s->plan = std::move(plan);
    s->submitted = std::chrono::steady_clock::now();
    std::lock_guard g(submit_mu_);
    s->id = next_id_++;
    incoming_.push_back(std::move(s));
    return incoming_.back()->id;
  }

  bool has_work() {
    std::lock_guard g(submit_mu_);
    return !incoming_.empty() || !waiting_.empty() || !running_.empty();
  }

  bool finished(SeqId id) const { return results_.count(id) > 0; }

  PatternResult take_result(SeqId id) {
    auto it = results_.find(id);
    if (it == results_.end()) throw std::out_of_range("engine: no result for sequence");
    auto r = std::move(it->second);
    results_.erase(it);
    return r;
  }

  /// Runs plans to completion; results in input order.
  std::vector<PatternResult> run(const std::vector<RequestPlan>& plans) {
    std::vector<SeqId> ids;
    for (const auto& p : plans) ids.push_back(submit(p));
    while (has_work()) step();
    std::vector<PatternResult> out;
    for (auto id : ids) out.push_back(take_result(id));
    return out;
  }

  StepReport step() {
    StepReport rep;
    {
      std::lock_guard g(submit_mu_);
      while (!incoming_.empty()) {
        auto s = std::move(incoming_.front());
        incoming_.pop_front();
        init_sequence(*s);
        Sequence* raw = s.get();
        seqs_[s->id] = std::move(s);
        if (raw->pending.empty())
          finish(*raw, rep);
        else
          waiting_.push_back(raw);
      }
    }
    schedule(rep);
    execute(rep);
    return rep;
  }

 private:
  struct Row {
    bool latent = false;
    std::uint32_t id = 0;
  };

  struct Sequence {
    SeqId id = 0;
    RequestPlan plan;
    SeqStatus status = SeqStatus::waiting;
    BlockTable table;
    std::vector<Row> fed, pending;
    bool generating = false;
    std::vector<TokenId> generated;
    std::vector<std::uint64_t> prompt_hashes;
    std::size_t hashed = 0, regular_fed = 0;
    std::uint64_t admit_order = 0;
    Position first_position = 0;
    Mat<float> latent_hidden;
    std::chrono::steady_clock::time_point submitted;
  };

  struct Chunk {
    Sequence* s;
    std::size_t first_row, n;
  };

  void init_sequence(Sequence& s) {
    const auto& plan = s.plan;
    s.first_position = plan.first_position();
    for (auto t : plan.prompt) s.pending.push_back({false, t});
    s.generating = plan.generate && plan.sampling.max_new_tokens > 0;
    if (!s.generating) {
      if (plan.latents)
        for (std::size_t i = 0; i < plan.m; ++i) s.pending.push_back({true, std::uint32_t(i)});
      else
        s.pending.clear();
    }
    s.latent_hidden = Mat<float>::Zero(plan.m, p_.config.hidden_dim);
    if (cfg_.prefix_caching) {
      Fnv64 h;
      h.value(fingerprint_).value(s.first_position);
      for (const auto& mem : plan.memories) {
        h.bytes(mem.doc_id.data(), mem.doc_id.size()).value(mem.m);
        h.bytes(mem.payload.data(), mem.payload.size());
        for (auto pp : mem.position_ids) h.value(pp);
      }
      std::uint64_t prev = h.digest();
      const std::size_t B = cfg_.block_size;
      for (std::size_t b = 0; b + 1 <= plan.prompt.size() / B; ++b) {
        Fnv64 hb;
        hb.value(prev).bytes(plan.prompt.data() + b * B, B * sizeof(TokenId));
        prev = hb.digest();
        s.prompt_hashes.push_back(prev);
      }
    }
  }

  // Injects memories and attaches cached prefix blocks. False leaves the
  // sequence untouched.
  bool admit(Sequence& s, StepReport& rep) {
    try {
      for (const auto& mem : s.plan.memories) inject_compressed(pool_, s.table, mem, p_.config, fingerprint_);
    } catch (const PoolExhausted&) {
      free_table(pool_, s.table);
      return false;
    }
    const std::size_t B = cfg_.block_size;
    if (cfg_.prefix_caching && s.fed.empty() && !s.pending.empty()) {
      const std::size_t limit = std::min(s.prompt_hashes.size(), (s.pending.size() - 1) / B);
      std::size_t matched = 0;
      for (; matched < limit; ++matched) {
        const auto b = pool_.lookup(s.prompt_hashes[matched]);
        if (!b) break;
        std::vector<Position> pos(B);
        for (std::size_t i = 0; i < B; ++i) pos[i] = s.first_position + Position(s.regular_fed + i);
        attach_block(pool_, s.table, *b, pos);
        s.fed.insert(s.fed.end(), s.pending.begin(), s.pending.begin() + B);
        s.pending.erase(s.pending.begin(), s.pending.begin() + B);
        s.regular_fed += B;
      }
      s.hashed = matched;
      rep.reused_rows += matched * B;
      rows_reused_ += matched * B;
    }
    s.status = SeqStatus::running;
    s.admit_order = admit_counter_++;
    return true;
  }

  void unadmit(Sequence& s) {
    free_table(pool_, s.table);
    s.pending.insert(s.pending.begin(), s.fed.begin(), s.fed.end());
    s.fed.clear();
    s.regular_fed = 0;
    s.hashed = 0;
    s.status = SeqStatus::waiting;
  }

  bool reserve(Sequence& s, std::size_t n) {
    std::vector<Position> pos(n);
    for (std::size_t i = 0; i < n; ++i) pos[i] = s.first_position + Position(s.regular_fed + i);
    try {
      reserve_rows(pool_, s.table, pos, BlockKind::regular);
      return true;
    } catch (const PoolExhausted&) {
      return false;
    }
  }

  void schedule(StepReport& rep) {
    chunks_.clear();
    std::size_t budget = cfg_.max_num_batched_tokens;
    auto scheduled = [&](const Sequence* s) {
      for (const auto& c : chunks_)
        if (c.s == s) return true;
      return false;
    };
    auto preempt = [&](Sequence* v) {
      for (auto it = chunks_.begin(); it != chunks_.end(); ++it)
        if (it->s == v) {
          budget += it->n;
          chunks_.erase(it);
          break;
        }
      unadmit(*v);
      running_.erase(std::find(running_.begin(), running_.end(), v));
      waiting_.push_front(v);
      rep.preempted.push_back(v->id);
    };
    auto victim_for = [&](const Sequence* s) -> Sequence* {
      Sequence* v = nullptr;
      for (auto* r : running_)
        if (r != s && (!v || r->admit_order > v->admit_order)) v = r;
      return v;
    };
    auto grow = [&](Sequence* s) {
      const std::size_t n = std::min(s->pending.size(), budget);
      if (n == 0) return;
      while (!reserve(*s, n)) {
        Sequence* v = victim_for(s);
        if (!v || v->admit_order < s->admit_order) {
          preempt(s);
          return;
        }
        preempt(v);
      }
      chunks_.push_back({s, s->table.rows() - n, n});
      budget -= n;
    };
    for (int pass = 0; pass < 2; ++pass) {
      const auto snapshot = running_;
      for (auto* s : snapshot) {
        if (budget == 0) break;
        if (s->status != SeqStatus::running || scheduled(s)) continue;
        const bool decode = s->generating && !s->fed.empty() && s->pending.size() == 1;
        if ((pass == 0) != decode) continue;
        grow(s);
      }
    }
    while (budget > 0 && running_.size() < cfg_.max_num_seqs && !waiting_.empty()) {
      Sequence* s = waiting_.front();
      if (!admit(*s, rep)) break;
      const std::size_t n = std::min(s->pending.size(), budget);
      if (!reserve(*s, n)) {
        unadmit(*s);
        break;
      }
      waiting_.pop_front();
      running_.push_back(s);
      rep.admitted.push_back(s->id);
      chunks_.push_back({s, s->table.rows() - n, n});
      budget -= n;
    }
    if (chunks_.empty() && !waiting_.empty() && running_.empty())
      throw PoolExhausted("engine: cannot admit the next request with an empty batch");
    for (const auto& c : chunks_) rep.chunks.push_back({c.s->id, c.n});
  }

  void execute(StepReport& rep) {
    if (chunks_.empty()) return;
    const auto& c = p_.config;
    std::size_t R = 0;
    for (const auto& ch : chunks_) R += ch.n;
    rows_computed_ += R;
    Mat<float> x(R, c.hidden_dim);
    std::vector<Position> pos(R);
    {
      std::size_t r = 0;
      for (const auto& ch : chunks_)
        for (std::size_t i = 0; i < ch.n; ++i, ++r) {
          const Row row = ch.s->pending[i];
          x.row(r) = row.latent ? p_.latents.row(row.id) : p_.tok_emb.row(row.id);
          pos[r] = ch.s->table.positions[ch.first_row + i];
        }
    }
    Mat<float> a, q, k, v, o, b, up, act, delta, attn;
    const RopeTable<float> rope(pos, c.head_dim, c.rope_base);
    for (std::size_t l = 0; l < c.num_layers; ++l) {
      const auto& L = p_.layers[l];
      rmsnorm_rows(x, L.attn_norm, a);
      linear_rows(a, L.wq, q);
      linear_rows(a, L.wk, k);
      linear_rows(a, L.wv, v);
      rope_rows(q, c.num_q_heads, c.head_dim, rope);
      rope_rows(k, c.num_kv_heads, c.head_dim, rope);
      std::size_t r = 0;
      for (const auto& ch : chunks_)
        for (std::size_t i = 0; i < ch.n; ++i, ++r) {
          const auto slot = ch.s->table.slots[ch.first_row + i];
          std::memcpy(pool_.key(l, slot), k.row(r).data(), sizeof(float) * c.kv_dim());
          std::memcpy(pool_.value(l, slot), v.row(r).data(), sizeof(float) * c.kv_dim());
        }
      o.setZero(R, c.q_dim());
      r = 0;
      for (const auto& ch : chunks_)
        for (std::size_t i = 0; i < ch.n; ++i, ++r)
          paged_attention<float>(pool_, l, ch.s->table, c, q.row(r).data(), ch.first_row + i, o.row(r).data(), &scratch_);
      linear_rows(o, L.wo, attn);
      Mat<float> x_mid = x + attn;
      rmsnorm_rows(x_mid, L.mlp_norm, b);
      mlp_rows(L, b, up, act, delta);
      x = x_mid + delta;
    }
    Mat<float> hidden;
    rmsnorm_rows(x, p_.final_norm, hidden);

    // rows that need logits: the last pending row of a generating sequence
    std::vector<std::size_t> logit_rows;
    std::vector<const Chunk*> logit_chunks;
    {
      std::size_t r = 0;
      for (const auto& ch : chunks_) {
        for (std::size_t i = 0; i < ch.n; ++i, ++r) {
          const Row row = ch.s->pending[i];
          if (row.latent) ch.s->latent_hidden.row(row.id) = hidden.row(r);
        }
        if (ch.n == ch.s->pending.size() && ch.s->generating) {
          logit_rows.push_back(r - 1);
          logit_chunks.push_back(&ch);
        }
      }
    }
    Mat<float> logits;
    if (!logit_rows.empty()) {
      Mat<float> hl(logit_rows.size(), c.hidden_dim);
      for (std::size_t i = 0; i < logit_rows.size(); ++i) hl.row(i) = hidden.row(logit_rows[i]);
      linear_rows(hl, p_.lm_head, logits);
    }

    std::size_t li = 0;
    std::vector<Sequence*> done;
    for (const auto& ch : chunks_) {
      Sequence& s = *ch.s;
      s.regular_fed += ch.n;
      s.fed.insert(s.fed.end(), s.pending.begin(), s.pending.begin() + ch.n);
      s.pending.erase(s.pending.begin(), s.pending.begin() + ch.n);
      register_hashes(s);
      if (!s.pending.empty()) continue;
      if (s.generating) {
        const TokenId t = sample_token(logits.row(li++).data(), c.vocab_size, s.plan.sampling, s.generated.size());
        s.generated.push_back(t);
        const bool stop = (s.plan.sampling.stop_at_end && t == tok::kImEnd) ||
                          s.generated.size() >= s.plan.sampling.max_new_tokens;
        if (!stop) {
          s.pending.push_back({false, t});
        } else if (s.plan.latents) {
          s.generating = false;
          s.pending.push_back({false, t});
          for (std::size_t j = 0; j < s.plan.m; ++j) s.pending.push_back({true, std::uint32_t(j)});
        } else {
          done.push_back(&s);
        }
      } else {
        done.push_back(&s);
      }
    }
    for (auto* s : done) finish(*s, rep);
  }

  void register_hashes(Sequence& s) {
    const std::size_t B = cfg_.block_size;
    const std::size_t first_regular_block = s.table.blocks.size() - (s.table.count_kind(BlockKind::regular) + B - 1) / B;
    while (s.hashed < s.prompt_hashes.size() && s.regular_fed >= (s.hashed + 1) * B) {
      pool_.register_hash(s.table.blocks[first_regular_block + s.hashed], s.prompt_hashes[s.hashed]);
      ++s.hashed;
    }
  }

  void finish(Sequence& s, StepReport& rep) {
    PatternResult res;
    res.tokens = s.generated;
    res.text = tok::decode(res.tokens);
    res.prompt_tokens = s.plan.prompt.size();
    res.context_rows = s.table.rows();
    if (s.plan.latents) {
      const std::size_t m = s.plan.m, first = s.table.rows() - m;
      res.embedding = embed(p_, s.latent_hidden).template cast<float>();
      std::vector<KvRows<float>> rows(p_.config.num_layers);
      for (std::size_t l = 0; l < rows.size(); ++l) {
        rows[l].k.resize(m, p_.config.kv_dim());
        rows[l].v.resize(m, p_.config.kv_dim());
        for (std::size_t i = 0; i < m; ++i) {
          std::memcpy(rows[l].k.row(i).data(), pool_.key(l, s.table.slots[first + i]), sizeof(float) * p_.config.kv_dim());
          std::memcpy(rows[l].v.row(i).data(), pool_.value(l, s.table.slots[first + i]), sizeof(float) * p_.config.kv_dim());
        }
      }
      std::vector<Position> lp(s.table.positions.end() - m, s.table.positions.end());
      res.memory = make_memory(s.plan.doc_id, p_.config, fingerprint_, rows, std::move(lp));
    }
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - s.submitted).count();
    free_table(pool_, s.table);
    s.status = SeqStatus::finished;
    auto it = std::find(running_.begin(), running_.end(), &s);
    if (it != running_.end()) running_.erase(it);
    const SeqId id = s.id;
    rep.finished.push_back(id);
    results_[id] = std::move(res);
    seqs_.erase(id);
  }

  const ModelParameters<float>& p_;
  EngineConfig cfg_;
  BlockPool pool_;
  std::uint64_t fingerprint_;
  std::mutex submit_mu_;
  std::deque<std::unique_ptr<Sequence>> incoming_;
  std::map<SeqId, std::unique_ptr<Sequence>> seqs_;
  std::deque<Sequence*> waiting_;
  std::vector<Sequence*> running_;
  std::vector<Chunk> chunks_;
  std::map<SeqId, PatternResult> results_;
  std::vector<float> scratch_;
  SeqId next_id_ = 0;
  std::uint64_t admit_counter_ = 0, rows_computed_ = 0, rows_reused_ = 0;
};

/// Runs requests through the engine (the batched path of every pattern).
inline std::vector<PatternResult> run_hpa(Engine& engine, const std::vector<PatternRequest>& reqs,
                                          const MemoryStore* store = nullptr) {
  std::vector<RequestPlan> plans;
  for (const auto& r : reqs) plans.push_back(plan_request(engine.model(), r, store, engine.config().max_context));
  return engine.run(plans);
}

}  // namespace grc
