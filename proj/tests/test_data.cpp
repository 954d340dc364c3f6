#include <map>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "grc/data.hpp"

using namespace grc;

namespace {
std::string all_bytes() {
  std::string s;
  for (int b = 0; b < 256; ++b) s.push_back(char(b));
  return s;
}
}  // namespace

TEST(Tokenizer, EmptyRoundTrip) {
  EXPECT_TRUE(tok::encode("").empty());
  EXPECT_EQ(tok::decode(std::vector<TokenId>{}), "");
}

TEST(Tokenizer, EveryByteRoundTripsOutsideReservedRange) {
  const auto s = all_bytes() + "héllo\n";
  const auto ids = tok::encode(s);
  for (auto id : ids) {
    EXPECT_GE(id, tok::kNumReserved);
    EXPECT_LT(id, toy_config().vocab_size);
  }
  EXPECT_EQ(tok::decode(ids), s);
}

TEST(Prompts, EightVerbatim) {
  const auto& p = reconstruction_prompts();
  EXPECT_EQ(std::set<std::string>(p.begin(), p.end()).size(), 8u);
  EXPECT_NE(std::find(p.begin(), p.end(), "What were we discussing earlier?"), p.end());
}

TEST(AugmentGenerative, LayoutEchoesContext) {
  std::mt19937_64 rng(3);
  const ChatExample ex{"Repeat the code.", "ABCDE", "The code is ABCDE."};
  const auto s = augment_generative(ex, 4, reconstruction_prompts(), rng);
  const auto ctx = tok::chat(ex.u, ex.x, ex.y);
  EXPECT_EQ(s.layout.k, ctx.size());
  EXPECT_EQ(s.layout.m, 4u);
  EXPECT_EQ(s.layout.t, s.layout.recon_start_offset + s.layout.k);
  EXPECT_TRUE(s.layout.valid());
  EXPECT_TRUE(std::equal(s.recovered().begin(), s.recovered().end(), ctx.begin(), ctx.end()));
  EXPECT_EQ(tok::decode(s.recovered()), s.recovered_text);
  EXPECT_EQ(s.gen_end, s.layout.k);
  EXPECT_EQ(tok::decode(std::span<const TokenId>(s.tokens.data() + s.gen_begin, s.gen_end - s.gen_begin - 1)), ex.y);
}

TEST(AugmentGenerative, SeededPromptChoice) {
  const ChatExample ex{"u", "x", "y"};
  std::mt19937_64 a(11), b(11);
  EXPECT_EQ(augment_generative(ex, 2, reconstruction_prompts(), a),
            augment_generative(ex, 2, reconstruction_prompts(), b));
  std::set<std::vector<TokenId>> seen;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 r(seed);
    const auto s = augment_generative(ex, 2, reconstruction_prompts(), r);
    const auto ri = s.recon_instruction();
    seen.insert(std::vector<TokenId>(ri.begin(), ri.end()));
  }
  EXPECT_GE(seen.size(), 2u);
}

TEST(AugmentGenerative, Errors) {
  std::mt19937_64 rng(0);
  EXPECT_THROW(augment_generative(ChatExample{"u", "x", ""}, 2, reconstruction_prompts(), rng), DataError);
  EXPECT_THROW(augment_generative(ChatExample{"u", "x", "y"}, 0, reconstruction_prompts(), rng), DataError);
}

TEST(AugmentEmbedding, RoleContexts) {
  std::mt19937_64 rng(5);
  const RetrievalExample ex{"Find the fact.", "key 17", "Look for 17.", "fact 17 is blue", {"fact 3 is red"}};
  const auto e = augment_embedding(ex, 3, reconstruction_prompts(), rng);
  EXPECT_EQ(tok::decode(e.pos.recovered()), ex.d_p);
  EXPECT_EQ(e.pos.recovered_text, ex.d_p);
  const auto qctx = tok::chat(ex.u, ex.x, ex.y);
  EXPECT_TRUE(std::equal(e.query.recovered().begin(), e.query.recovered().end(), qctx.begin(), qctx.end()));
  ASSERT_EQ(e.negs.size(), 1u);
  EXPECT_EQ(tok::decode(e.negs[0].recovered()), ex.d_n[0]);
  const auto dctx = tok::chat(kDocumentInstruction, ex.d_p, kDocumentResponse);
  EXPECT_TRUE(std::equal(e.pos.context().begin(), e.pos.context().end(), dctx.begin(), dctx.end()));
}

TEST(AugmentEmbedding, NoNegativesAndMissingPositive) {
  std::mt19937_64 rng(5);
  RetrievalExample ex{"u", "x", "", "doc", {}};
  EXPECT_TRUE(augment_embedding(ex, 2, reconstruction_prompts(), rng).negs.empty());
  ex.d_p.clear();
  EXPECT_THROW(augment_embedding(ex, 2, reconstruction_prompts(), rng), DataError);
}

TEST(UnifyBatch, PairOfGenerativeExamples) {
  std::mt19937_64 rng(1);
  const auto a = augment_generative(ChatExample{"u", "aaa", "y1"}, 2, reconstruction_prompts(), rng);
  const auto b = augment_generative(ChatExample{"u", "bbb", "y2"}, 2, reconstruction_prompts(), rng);
  const auto out = unify_batch({a, b}, rng);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].query, a);
  EXPECT_EQ(out[0].pos, a);
  EXPECT_EQ(out[0].negs, std::vector<SegmentedSequence>{b});
  EXPECT_EQ(out[1].negs, std::vector<SegmentedSequence>{a});
  EXPECT_EQ(out[0].origin, Origin::generative);
}

TEST(UnifyBatch, EmbeddingPassThroughAndSingleGenerativeError) {
  std::mt19937_64 rng(1);
  const auto e = augment_embedding(RetrievalExample{"u", "q", "r", "dp", {"dn"}}, 2, reconstruction_prompts(), rng);
  const auto out = unify_batch({e}, rng);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].query, e.query);
  EXPECT_EQ(out[0].pos, e.pos);
  EXPECT_EQ(out[0].negs, e.negs);
  EXPECT_EQ(out[0].origin, Origin::embedding);
  const auto g = augment_generative(ChatExample{"u", "x", "y"}, 2, reconstruction_prompts(), rng);
  EXPECT_THROW(unify_batch({g}, rng), DataError);
}

TEST(UnifyBatch, NegativesUniformOverOtherMembers) {
  std::mt19937_64 rng(9);
  std::vector<AugmentedItem> batch;
  for (int i = 0; i < 8; ++i)
    batch.push_back(augment_generative(ChatExample{"u", "member " + std::to_string(i), "y"}, 2, reconstruction_prompts(), rng));
  std::map<std::string, int> counts;
  const int draws = 1000;
  for (int d = 0; d < draws; ++d) {
    const auto out = unify_batch(batch, rng);
    counts[out[0].negs[0].recovered_text]++;
    ASSERT_NE(out[0].negs[0], out[0].pos);
  }
  EXPECT_EQ(counts.size(), 7u);
  for (const auto& [text, c] : counts) EXPECT_NEAR(double(c) / draws, 1.0 / 7.0, 0.05) << text;
}

TEST(UnifiedExample, JsonRoundTrip) {
  std::mt19937_64 rng(2);
  std::vector<AugmentedItem> batch{
      augment_generative(ChatExample{"u", "x1", "y1"}, 3, reconstruction_prompts(), rng),
      augment_embedding(RetrievalExample{"u", "q", "None", "doc", {"n1", "n2"}}, 3, reconstruction_prompts(), rng),
  };
  for (const auto& ex : unify_batch(batch, rng)) {
    const auto text = to_json(ex).dump();
    EXPECT_EQ(unified_from_json(nlohmann::json::parse(text)), ex);
    if (ex.origin == Origin::generative) {
      EXPECT_EQ(ex.query, ex.pos);
    }
    for (const auto* s : {&ex.query, &ex.pos}) EXPECT_EQ(tok::decode(s->recovered()), s->recovered_text);
  }
}

TEST(Records, ParseAndWrite) {
  std::istringstream in(
      "{\"u\":\"a\",\"x\":\"b\",\"y\":\"c\"}\n\n"
      "{\"u\":\"a\",\"x\":\"q\",\"y\":\"None\",\"d_p\":\"p\",\"d_n\":[\"n\"]}\n");
  const auto recs = read_records(in);
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_TRUE(std::holds_alternative<ChatExample>(recs[0]));
  EXPECT_EQ(std::get<RetrievalExample>(recs[1]).d_n, std::vector<std::string>{"n"});
  std::ostringstream out;
  write_records(out, recs);
  std::istringstream back(out.str());
  const auto again = read_records(back);
  EXPECT_EQ(to_json(again[1]), to_json(recs[1]));
  std::istringstream bad("{\"u\": 1\n");
  EXPECT_THROW(read_records(bad), DataError);
}
