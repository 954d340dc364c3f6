#include <bit>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <memory>

#include <CLI11.hpp>

#include "grc/bench.hpp"
#include "grc/eval.hpp"
#include "grc/memory_server.hpp"
#include "grc/train.hpp"

using namespace grc;

namespace {

struct Globals {
  std::string model_file;
  std::string memory_server;
  std::string engine_config;
};

std::string memory_dir() {
  const char* env = std::getenv("GRC_MEMORY_DIR");
  return env && *env ? env : "grc_memory";
}

ModelParameters<double> load_or_init(const Globals& g) {
  if (g.model_file.empty()) {
    std::cerr << "no --model-file given, using a freshly initialized toy model\n";
    return init_model(toy_config());
  }
  return load_model(g.model_file);
}

EngineConfig engine_config(const Globals& g) {
  if (g.engine_config.empty()) return {};
  std::ifstream in(g.engine_config);
  if (!in) throw std::runtime_error("cannot open engine config " + g.engine_config);
  return engine_config_from_json(nlohmann::json::parse(in));
}

std::unique_ptr<MemoryBackend> backend(const Globals& g, std::unique_ptr<MemoryStore>& local) {
  if (!g.memory_server.empty()) return std::make_unique<RemoteBackend>(g.memory_server);
  local = std::make_unique<MemoryStore>(memory_dir());
  return std::make_unique<LocalBackend>(*local);
}

std::string read_text(const std::string& arg) {
  if (arg != "-") return arg;
  std::string s((std::istreambuf_iterator<char>(std::cin)), std::istreambuf_iterator<char>());
  while (!s.empty() && s.back() == '\n') s.pop_back();
  return s;
}

void print_embedding(const Vec<float>& e, bool binary) {
  if (binary) {
    static_assert(std::endian::native == std::endian::little, "raw output assumes a little-endian host");
    std::fwrite(e.data(), sizeof(float), std::size_t(e.size()), stdout);
    std::fflush(stdout);
    return;
  }
  for (float x : e) std::printf("%.9g\n", double(x));
}

nlohmann::json config_json(const ModelConfig& c) {
  return {{"num_layers", c.num_layers},     {"hidden_dim", c.hidden_dim},   {"num_q_heads", c.num_q_heads},
          {"num_kv_heads", c.num_kv_heads}, {"head_dim", c.head_dim},       {"vocab_size", c.vocab_size},
          {"rope_base", c.rope_base},       {"elem_bytes", c.elem_bytes},   {"seed", c.seed},
          {"mlp_dim", c.mlp_dim},           {"num_latents", c.num_latents}, {"embed_dim", c.embed_dim}};
}

struct PatternFlags {
  std::string text;
  std::string instruction;
  double temperature = 0.0;
  std::size_t max_new_tokens = 64;
  std::size_t m = 0;
  std::uint64_t seed = 0;
  std::string doc_id;
  std::vector<std::string> docs;
  bool binary = false;
  bool engine = false;
};

void add_pattern_flags(CLI::App* sub, PatternFlags& f, double default_temperature) {
  f.temperature = default_temperature;
  sub->add_option("text", f.text, "Prompt or document text ('-' reads stdin)")->required();
  sub->add_option("--instruction", f.instruction, "Instruction segment (pattern default when empty)");
  sub->add_option("--temperature", f.temperature, "Sampling temperature; 0 is greedy")->capture_default_str();
  sub->add_option("--max-new-tokens", f.max_new_tokens, "Generation budget")->capture_default_str();
  sub->add_option("--m", f.m, "Latent tokens to append (0 = all)");
  sub->add_option("--seed", f.seed, "Sampling seed");
  sub->add_flag("--engine", f.engine, "Run through the batched engine instead of the naive loop");
}

PatternResult execute(const Globals& g, const ModelParameters<float>& p, const PatternRequest& req, bool engine) {
  if (!engine) return run_naive(p, req);
  Engine e(p, engine_config(g));
  return run_hpa(e, {req})[0];
}

int run_pattern(const Globals& g, Pattern pat, const PatternFlags& f, bool compress_only = false) {
  const auto p = load_or_init(g).cast<float>();
  PatternRequest req;
  req.pattern = pat;
  req.prompt = read_text(f.text);
  req.instruction = f.instruction;
  req.m = f.m;
  req.sampling.temperature = f.temperature;
  req.sampling.max_new_tokens = f.max_new_tokens;
  req.sampling.seed = f.seed;
  req.doc_id = f.doc_id;
  std::unique_ptr<MemoryStore> local;
  std::unique_ptr<MemoryBackend> mem;
  if (pat == Pattern::latent_rag || !f.doc_id.empty()) mem = backend(g, local);
  if (pat == Pattern::latent_rag)
    for (const auto& id : f.docs) req.memories.push_back(mem->get(id));
  const auto res = execute(g, p, req, f.engine);
  if (res.memory && !f.doc_id.empty()) {
    mem->put(*res.memory);
    std::cerr << "stored memory '" << f.doc_id << "' (" << res.memory->payload.size() << " bytes)\n";
  }
  switch (pat) {
    case Pattern::regular_gen:
    case Pattern::latent_rag:
      std::cout << res.text << "\n";
      break;
    case Pattern::query_embed:
      if (!f.binary) std::cerr << res.text << "\n";
      print_embedding(*res.embedding, f.binary);
      break;
    case Pattern::doc_embed:
      if (compress_only)
        std::cout << f.doc_id << " m=" << res.memory->m << " bytes=" << res.memory->payload.size() << "\n";
      else
        print_embedding(*res.embedding, f.binary);
      break;
  }
  std::cerr << "prompt_tokens " << res.prompt_tokens << " new_tokens " << res.tokens.size() << " context_rows "
            << res.context_rows << " seconds " << res.seconds << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent compression, embedding and generation with one model"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--model-file", g.model_file, "Model parameter file");
  app.add_option("--memory-server", g.memory_server, "host:port of a memory server (default: local store)");
  app.add_option("--engine-config", g.engine_config, "JSON engine config (block_size, num_blocks, limits)");

  // model
  auto* model = app.add_subcommand("model", "Create or describe a model file");
  model->require_subcommand(1);
  auto* init = model->add_subcommand("init", "Write a freshly initialized toy model");
  std::string init_out;
  ModelConfig init_cfg = toy_config();
  init->add_option("out", init_out, "Output path")->required();
  init->add_option("--seed", init_cfg.seed, "Initialization seed");
  init->add_option("--layers", init_cfg.num_layers)->capture_default_str();
  init->add_option("--hidden", init_cfg.hidden_dim)->capture_default_str();
  init->add_option("--q-heads", init_cfg.num_q_heads)->capture_default_str();
  init->add_option("--kv-heads", init_cfg.num_kv_heads)->capture_default_str();
  init->add_option("--head-dim", init_cfg.head_dim)->capture_default_str();
  init->add_option("--mlp", init_cfg.mlp_dim)->capture_default_str();
  init->add_option("--latents", init_cfg.num_latents)->capture_default_str();
  init->add_option("--embed-dim", init_cfg.embed_dim)->capture_default_str();
  auto* info = model->add_subcommand("info", "Print the configuration of --model-file");

  // data
  auto* data = app.add_subcommand("data", "Training data tools");
  data->require_subcommand(1);
  auto* inspect = data->add_subcommand("inspect", "Augment records and print their segment layouts");
  std::string inspect_file;
  std::size_t inspect_m = toy_config().num_latents, inspect_limit = 10;
  std::uint64_t inspect_seed = 1;
  bool inspect_json = false;
  inspect->add_option("file", inspect_file, "Line-delimited JSON records")->required();
  inspect->add_option("--m", inspect_m, "Latent tokens per sequence")->capture_default_str();
  inspect->add_option("--limit", inspect_limit, "Records to show")->capture_default_str();
  inspect->add_option("--seed", inspect_seed)->capture_default_str();
  inspect->add_flag("--json", inspect_json, "Print unified examples as JSON lines");

  // train
  auto* train = app.add_subcommand("train", "Train on line-delimited records");
  std::string train_data, train_out, train_trace;
  TrainConfig tc;
  tc.optimizer = Optimizer::adam;
  tc.lr = 2e-3;
  std::string opt_name = "adam";
  train->add_option("data", train_data, "Training records")->required();
  train->add_option("--out", train_out, "Where to write the trained model")->required();
  train->add_option("--trace", train_trace, "Loss trace CSV");
  train->add_option("--steps", tc.steps)->capture_default_str();
  train->add_option("--lr", tc.lr)->capture_default_str();
  train->add_option("--micro-batch", tc.micro_batch)->capture_default_str();
  train->add_option("--accumulation", tc.accumulation)->capture_default_str();
  train->add_option("--negatives", tc.num_negatives)->capture_default_str();
  train->add_option("--optimizer", opt_name)->check(CLI::IsMember({"adam", "sgd"}))->capture_default_str();
  train->add_option("--clip", tc.clip_norm, "Gradient norm clip (0 disables)");
  train->add_option("--alpha", tc.objective.weights.alpha)->capture_default_str();
  train->add_option("--beta", tc.objective.weights.beta)->capture_default_str();
  train->add_option("--gamma", tc.objective.weights.gamma)->capture_default_str();
  train->add_flag("--share-negatives", tc.objective.share_negatives, "Contrast against the whole micro-batch");
  train->add_option("--seed", tc.seed)->capture_default_str();

  // patterns
  PatternFlags gen_f, qe_f, de_f, comp_f, rag_f;
  auto* gen = app.add_subcommand("generate", "Plain generation");
  add_pattern_flags(gen, gen_f, 0.0);
  auto* qe = app.add_subcommand("embed-query", "Reason, then embed the query");
  add_pattern_flags(qe, qe_f, 0.6);
  qe->add_flag("--binary", qe_f.binary, "Raw little-endian float32 output");
  auto* de = app.add_subcommand("embed-doc", "Embed a document");
  add_pattern_flags(de, de_f, 0.0);
  de->add_flag("--binary", de_f.binary, "Raw little-endian float32 output");
  de->add_option("--doc-id", de_f.doc_id, "Also store the compressed memory under this id");
  auto* comp = app.add_subcommand("compress", "Compress a document into the memory store");
  add_pattern_flags(comp, comp_f, 0.0);
  comp->add_option("--doc-id", comp_f.doc_id, "Memory id")->required();
  auto* rag = app.add_subcommand("rag", "Generate with stored memories injected");
  add_pattern_flags(rag, rag_f, 0.0);
  rag->add_option("--doc", rag_f.docs, "Memory id to inject (repeatable, in order)");

  // memory server
  auto* serve = app.add_subcommand("serve-memory", "Serve the memory store over TCP (root: $GRC_MEMORY_DIR)");
  std::string serve_host = "127.0.0.1";
  std::uint16_t serve_port = 7070;
  serve->add_option("--host", serve_host)->capture_default_str();
  serve->add_option("--port", serve_port)->capture_default_str();

  // kvsize
  auto* kv = app.add_subcommand("kvsize", "KV cache size for a model geometry");
  std::uint64_t kv_layers = 28, kv_heads = 8, kv_hd = 128, kv_tokens = 1024, kv_bytes = 2;
  std::optional<std::uint64_t> kv_m;
  kv->add_option("--layers", kv_layers)->capture_default_str();
  kv->add_option("--kv-heads", kv_heads)->capture_default_str();
  kv->add_option("--head-dim", kv_hd)->capture_default_str();
  kv->add_option("--tokens", kv_tokens, "Document length N")->capture_default_str();
  kv->add_option("--bytes", kv_bytes, "Bytes per element")->capture_default_str();
  kv->add_option("--m", kv_m, "Latent tokens kept after compression");

  // bench
  auto* bench = app.add_subcommand("bench", "Latency of naive and batched execution for every pattern");
  BenchOptions bo;
  std::size_t bench_queries = 16;
  std::uint64_t bench_seed = 1;
  std::string bench_out;
  bench->add_option("--queries", bench_queries)->capture_default_str();
  bench->add_option("--max-new-tokens", bo.max_new_tokens, "One or more generation lengths")->capture_default_str();
  bench->add_option("--warmup", bo.warmup)->capture_default_str();
  bench->add_option("--repeats", bo.repeats, "Alternating rounds; the fastest is kept")->capture_default_str();
  bench->add_option("--seed", bench_seed)->capture_default_str();
  bench->add_option("--out", bench_out, "CSV path (default stdout)");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluation harnesses");
  ev->require_subcommand(1);
  auto* ev_ret = ev->add_subcommand("retrieval", "nDCG@10 on the synthetic retrieval set");
  std::size_t ev_docs = 256, ev_queries = 64;
  std::uint64_t ev_seed = 7;
  RetrievalEvalOptions ro;
  bool ev_per_query = false;
  ev_ret->add_option("--docs", ev_docs)->capture_default_str();
  ev_ret->add_option("--queries", ev_queries)->capture_default_str();
  ev_ret->add_option("--seed", ev_seed)->capture_default_str();
  ev_ret->add_option("--reasoning-tokens", ro.reasoning_tokens)->capture_default_str();
  ev_ret->add_option("--temperature", ro.temperature)->capture_default_str();
  ev_ret->add_flag("--per-query", ev_per_query, "Print one score per query");
  auto* ev_rec = ev->add_subcommand("recon", "Reconstruction token metrics on chat examples");
  std::string ev_rec_file;
  std::size_t ev_rec_n = 200;
  std::uint64_t ev_rec_seed = 1;
  ev_rec->add_option("--data", ev_rec_file, "Records file (chat records are used); default synthetic corpus");
  ev_rec->add_option("--examples", ev_rec_n, "Synthetic corpus size")->capture_default_str();
  ev_rec->add_option("--seed", ev_rec_seed)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*init) {
      validate(init_cfg);
      const auto p = init_model(init_cfg);
      save_model(p, init_out);
      std::cout << "wrote " << init_out << " (" << parameter_count(init_cfg) << " parameters)\n";
    } else if (*info) {
      if (g.model_file.empty()) throw std::invalid_argument("model info needs --model-file");
      const auto p = load_model(g.model_file);
      auto j = config_json(p.config);
      j["parameters"] = parameter_count(p.config);
      char fp[32];
      std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(model_fingerprint(p)));
      j["fingerprint"] = fp;
      std::cout << j.dump(2) << "\n";
    } else if (*inspect) {
      const auto recs = read_records(inspect_file);
      std::mt19937_64 rng(inspect_seed);
      std::vector<AugmentedItem> items;
      for (std::size_t i = 0; i < std::min(inspect_limit, recs.size()); ++i) items.push_back(augment(recs[i], inspect_m, rng));
      std::cout << recs.size() << " records\n";
      if (items.size() < 2) {
        std::cout << "(need at least two records to form a batch)\n";
        return 0;
      }
      for (const auto& u : unify_batch(items, rng)) {
        if (inspect_json) {
          std::cout << to_json(u).dump() << "\n";
          continue;
        }
        auto show = [](const char* role, const SegmentedSequence& s) {
          const auto& l = s.layout;
          std::cout << "  " << role << " k=" << l.k << " m=" << l.m << " t=" << l.t << " gen=[" << s.gen_begin << ","
                    << s.gen_end << ")\n    context: "
                    << tok::decode(std::span<const TokenId>(s.tokens).first(l.k)) << "\n    tail:    "
                    << tok::decode(std::span<const TokenId>(s.tokens).subspan(l.k)) << "\n";
        };
        std::cout << (u.origin == Origin::generative ? "generative" : "embedding") << "\n";
        show("query", u.query);
        if (u.origin == Origin::embedding) show("pos", u.pos);
        for (const auto& n : u.negs) show("neg", n);
      }
    } else if (*train) {
      tc.optimizer = opt_name == "adam" ? Optimizer::adam : Optimizer::sgd;
      const auto recs = read_records(train_data);
      std::ofstream trace;
      if (!train_trace.empty()) {
        trace.open(train_trace);
        trace << "step,total,gen,recons,rep\n";
        trace.precision(10);
      }
      const auto res = train_toy(recs, load_or_init(g), tc, [&](const TraceRow& r) {
        if (trace.is_open()) trace << r.step << ',' << r.total << ',' << r.gen << ',' << r.recons << ',' << r.rep << '\n';
        if (r.step % 50 == 0 || r.step + 1 == tc.steps)
          std::cerr << "step " << r.step << " total " << r.total << " gen " << r.gen << " recons " << r.recons
                    << " rep " << r.rep << "\n";
      });
      save_model(res.params, train_out);
      std::cout << "wrote " << train_out << "\n";
    } else if (*gen) {
      return run_pattern(g, Pattern::regular_gen, gen_f);
    } else if (*qe) {
      return run_pattern(g, Pattern::query_embed, qe_f);
    } else if (*de) {
      return run_pattern(g, Pattern::doc_embed, de_f);
    } else if (*comp) {
      return run_pattern(g, Pattern::doc_embed, comp_f, true);
    } else if (*rag) {
      if (rag_f.docs.empty()) std::cerr << "no --doc given, generating without memories\n";
      return run_pattern(g, Pattern::latent_rag, rag_f);
    } else if (*serve) {
      MemoryStore store(memory_dir());
      MemoryServer server(store, serve_host, serve_port);
      std::cerr << "serving " << store.root() << " on " << serve_host << ":" << server.port() << "\n";
      server.serve_forever();
    } else if (*kv) {
      std::cout << format_kvsize(kvsize(kv_layers, kv_heads, kv_hd, kv_tokens, kv_bytes, kv_m));
    } else if (*bench) {
      bo.engine = engine_config(g);
      const auto p = load_or_init(g).cast<float>();
      const auto rep = bench_latency(p, synthetic_workload(bench_queries, bench_seed), bo);
      if (bench_out.empty()) {
        std::cout << rep.csv();
      } else {
        std::ofstream(bench_out) << rep.csv();
      }
      for (auto mx : bo.max_new_tokens) std::cerr << "max_new_tokens " << mx << " speedup " << rep.speedup(mx) << "\n";
    } else if (*ev_ret) {
      const auto p = load_or_init(g).cast<float>();
      const auto set = eval_set(synthetic::retrieval_corpus(ev_docs, ev_queries, ev_seed));
      const auto r = eval_retrieval(p, set, ro);
      if (ev_per_query)
        for (std::size_t i = 0; i < r.per_query.size(); ++i)
          std::cout << set.queries[i].text << "," << r.per_query[i] << "\n";
      std::cout << "mean_ndcg@10 " << r.mean << "\nchance " << chance_ndcg(set, 200, ev_seed) << "\n";
    } else if (*ev_rec) {
      const auto p = load_or_init(g).cast<float>();
      std::vector<ChatExample> examples;
      if (ev_rec_file.empty()) {
        examples = synthetic::chat_corpus(ev_rec_n, ev_rec_seed);
      } else {
        for (const auto& r : read_records(ev_rec_file))
          if (auto* c = std::get_if<ChatExample>(&r)) examples.push_back(*c);
      }
      const auto r = eval_recon(p, examples);
      std::cout << "examples " << examples.size() << "\nexact_match " << r.mean.exact_match << "\ntoken_accuracy "
                << r.mean.token_accuracy << "\nprecision " << r.mean.precision << "\nrecall " << r.mean.recall
                << "\nf1 " << r.mean.f1 << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
