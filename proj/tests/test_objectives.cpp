#include <cstring>
#include <random>

#include <gtest/gtest.h>

#include "grc/train.hpp"
#include "csv.hpp"
#include "oracle.hpp"

using namespace grc;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.num_layers = 2;
  c.hidden_dim = 16;
  c.num_q_heads = 2;
  c.num_kv_heads = 1;
  c.head_dim = 8;
  c.mlp_dim = 32;
  c.num_latents = 3;
  c.embed_dim = 12;
  c.vocab_size = 300;
  c.seed = 21;
  return c;
}

ModelParameters<double> tiny_model() {
  auto p = init_model(tiny_config());
  // larger weights than the default init so gradients are not vanishingly small
  for (auto v : flat_views(p))
    for (double& x : v) x *= 10.0;
  p.layers[0].attn_norm.setConstant(1.0);
  p.layers[0].mlp_norm.setConstant(1.0);
  p.layers[1].attn_norm.setConstant(1.0);
  p.layers[1].mlp_norm.setConstant(1.0);
  p.final_norm.setConstant(1.0);
  return p;
}

Vec<double> random_unit(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Vec<double> v(d);
  for (auto& x : v) x = nd(rng);
  return v.normalized();
}

SegmentedSequence small_sequence(std::size_t m, std::uint64_t seed, const std::string& x = "abc") {
  std::mt19937_64 rng(seed);
  return augment_generative(ChatExample{"u", x, "ok"}, m, reconstruction_prompts(), rng);
}

std::vector<UnifiedExample> mixed_batch(std::size_t m) {
  std::mt19937_64 rng(4);
  std::vector<AugmentedItem> items{
      augment_generative(ChatExample{"u", "abc", "ok"}, m, reconstruction_prompts(), rng),
      augment_generative(ChatExample{"u", "xyz", "no"}, m, reconstruction_prompts(), rng),
      augment_embedding(RetrievalExample{"f", "k1", "r", "d1", {"d2"}}, m, reconstruction_prompts(), rng),
  };
  return unify_batch(items, rng);
}

}  // namespace

TEST(LossGen, UniformLogitsGiveLogVocab) {
  const auto s = small_sequence(2, 1);
  ForwardOutput<double> out;
  out.logits = Mat<double>::Zero(s.layout.n(), 512);
  EXPECT_NEAR(loss_gen(out, s), std::log(512.0), 1e-12);
  EXPECT_NEAR(std::log(512.0), 6.2383, 1e-4);
  EXPECT_NEAR(loss_recons(out, s), std::log(512.0), 1e-12);
}

TEST(LossGen, ConfidentCorrectLogitsGiveNearZero) {
  const auto s = small_sequence(2, 1);
  ForwardOutput<double> out;
  out.logits = Mat<double>::Zero(s.layout.n(), 300);
  for (std::size_t p = 1; p < s.layout.n(); ++p) out.logits(p - 1, s.token_at(p)) = 60.0;
  EXPECT_LT(loss_gen(out, s), 1e-20);
  EXPECT_LT(loss_recons(out, s), 1e-20);
}

TEST(LossGen, MatchesScalarOracle) {
  const auto s = small_sequence(3, 2);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> nd(0, 3);
  ForwardOutput<double> out;
  out.logits = Mat<double>(s.layout.n(), 300);
  for (Eigen::Index i = 0; i < out.logits.size(); ++i) out.logits.data()[i] = nd(rng);
  auto oracle_mean = [&](std::size_t b, std::size_t e) {
    long double acc = 0;
    for (std::size_t p = b; p < e; ++p) {
      std::vector<double> row(out.logits.row(p - 1).begin(), out.logits.row(p - 1).end());
      acc += oracle::nll(row, s.token_at(p));
    }
    return double(acc / (long double)(e - b));
  };
  EXPECT_NEAR(loss_gen(out, s), oracle_mean(s.gen_begin, s.gen_end), 1e-12);
  EXPECT_NEAR(loss_recons(out, s), oracle_mean(s.layout.recon_begin(), s.layout.n()), 1e-12);
}

TEST(LossGen, Errors) {
  auto s = small_sequence(2, 1);
  ForwardOutput<double> out;
  out.logits = Mat<double>::Zero(s.layout.n(), 300);
  s.gen_end = s.gen_begin;
  EXPECT_THROW(loss_gen(out, s), LossError);
  s.layout.t = 0;
  EXPECT_THROW(loss_recons(out, s), LossError);
}

TEST(LossRecons, ReconRowsOnlySeeLatentKv) {
  // Recon logits from the full masked forward equal those computed with only
  // the latent K/V as past, so segment-one inputs reach them only via latents.
  const auto p = tiny_model();
  const auto s = small_sequence(3, 6);
  const auto in = training_input(p, s);
  const auto full = forward(p, in);
  const std::size_t km = s.layout.k + s.layout.m;

  PastKv<double> latent_past;
  std::vector<KvRows<double>> rows;
  for (const auto& kv : full.new_kv)
    rows.push_back({kv.k.middleRows(s.layout.k, s.layout.m), kv.v.middleRows(s.layout.k, s.layout.m)});
  std::vector<Position> lpos(in.position_ids.begin() + s.layout.k, in.position_ids.begin() + km);
  latent_past.append(rows, lpos);

  const std::size_t m = s.layout.m, t = s.layout.t;
  ForwardInput<double> tail;
  tail.embedded = in.embedded.bottomRows(t);
  tail.position_ids.assign(in.position_ids.begin() + km, in.position_ids.end());
  std::vector<std::uint8_t> bits((m + t) * (m + t), 0);
  for (std::size_t i = 0; i < m + t; ++i)
    for (std::size_t j = 0; j <= i; ++j) bits[i * (m + t) + j] = 1;
  tail.mask = AttentionMask::from_dense(m + t, bits);
  tail.past = &latent_past;
  const auto part = forward(p, tail);
  EXPECT_LE((part.logits - full.logits.bottomRows(t)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Embed, IdenticalRowsAndZeroNorm) {
  auto p = tiny_model();
  std::mt19937_64 rng(1);
  const Vec<double> h = random_unit(16, rng);
  Mat<double> hs(3, 16);
  for (int i = 0; i < 3; ++i) hs.row(i) = h.transpose();
  const Vec<double> expect = (p.adapter_w * h + p.adapter_b).normalized();
  EXPECT_LE((embed(p, hs) - expect).cwiseAbs().maxCoeff(), 1e-12);

  ModelConfig c = tiny_config();
  c.embed_dim = c.hidden_dim;
  auto q = init_model(c);
  q.adapter_w.setIdentity();
  q.adapter_b.setZero();
  Mat<double> opposed(2, 16);
  opposed.row(0) = h.transpose();
  opposed.row(1) = -h.transpose();
  EXPECT_THROW(embed(q, opposed), LossError);
}

TEST(Embed, MatchesScalarOracleAndIsUnit) {
  const auto p = tiny_model();
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd;
  Mat<double> hs(3, 16);
  for (Eigen::Index i = 0; i < hs.size(); ++i) hs.data()[i] = nd(rng);
  std::vector<double> acc(12, 0.0);
  for (int i = 0; i < 3; ++i) {
    const auto a = oracle::matvec(p.adapter_w, std::vector<double>(hs.row(i).begin(), hs.row(i).end()));
    for (int j = 0; j < 12; ++j) acc[j] += (a[j] + p.adapter_b[j]) / 3.0;
  }
  double nrm = 0;
  for (double v : acc) nrm += v * v;
  nrm = std::sqrt(nrm);
  const auto e = embed(p, hs);
  for (int j = 0; j < 12; ++j) EXPECT_NEAR(e[j], acc[j] / nrm, 1e-12);
  EXPECT_NEAR(e.norm(), 1.0, 1e-6);
}

TEST(LossRep, EquidistantCandidatesGiveLogM) {
  Vec<double> q(3), a(3), b(3), c(3);
  q << 1, 0, 0;
  a << 0, 1, 0;
  b << 0, 0, 1;
  c << 0, -1, 0;
  EXPECT_NEAR(loss_rep(q, a, {b, c}, {}).value, std::log(3.0), 1e-15);
}

TEST(LossRep, ClosedFormMargin) {
  Vec<double> q(2), n(2);
  q << 1, 0;
  n << 0, 1;
  const double v = loss_rep(q, q, {n}, SimilarityScale{0.02}).value;
  EXPECT_NEAR(v / std::log1p(std::exp(-50.0)), 1.0, 1e-6);
  EXPECT_NEAR(v, 1.93e-22, 0.01e-22);
}

TEST(LossRep, MatchesScalarOracleAndGradient) {
  std::mt19937_64 rng(3);
  const auto q = random_unit(6, rng), pos = random_unit(6, rng);
  std::vector<Vec<double>> negs{random_unit(6, rng), random_unit(6, rng), random_unit(6, rng)};
  long double z = 0, lpos = 0;
  for (std::size_t j = 0; j < 4; ++j) {
    const Vec<double>& d = j == 0 ? pos : negs[j - 1];
    long double dot = 0;
    for (int i = 0; i < 6; ++i) dot += (long double)q[i] * d[i];
    const long double l = 50.0L * dot;
    if (j == 0) lpos = l;
    z += std::exp(l);
  }
  const double ref = double(std::log(z) - lpos);
  const auto r = loss_rep(q, pos, negs, {});
  EXPECT_NEAR(r.value, ref, 1e-10);
  EXPECT_THROW(loss_rep(q, pos, {}, {}), LossError);

  // analytic gradient w.r.t. the query vector
  Vec<double> x = q;
  std::vector<std::size_t> coords{0, 1, 2, 3, 4, 5};
  auto f = [&] { return loss_rep(x, pos, negs, {}).value; };
  const auto fd = finite_difference_check({x.data(), 6}, f, {r.d_query.data(), 6}, coords, 1e-6);
  EXPECT_LE(fd.max_rel_error, 1e-6) << fd.worst;
}

TEST(LossRep, NormalizationIdempotenceAndRankingScaleInvariance) {
  std::mt19937_64 rng(4);
  const auto q = random_unit(5, rng), pos = random_unit(5, rng);
  std::vector<Vec<double>> negs{random_unit(5, rng), random_unit(5, rng)};
  const double a = loss_rep(q, pos, negs, {}).value;
  EXPECT_NEAR(loss_rep(q.normalized(), pos.normalized(), negs, {}).value, a, 1e-12);
  auto order = [&](double s) {
    std::vector<std::pair<double, int>> v{{-s * q.dot(pos), 0}, {-s * q.dot(negs[0]), 1}, {-s * q.dot(negs[1]), 2}};
    std::sort(v.begin(), v.end());
    return std::vector<int>{v[0].second, v[1].second, v[2].second};
  };
  EXPECT_EQ(order(1.0), order(50.0));
  EXPECT_EQ(order(1.0), order(0.01));
}

TEST(TotalLoss, WeightSelectionAndOnePass) {
  const auto p = tiny_model();
  const auto batch = mixed_batch(3);
  ObjectiveOptions gen_only;
  gen_only.weights = {1, 0, 0};
  const auto g = batch_loss(p, batch, gen_only);
  EXPECT_EQ(g.total, g.gen);
  EXPECT_EQ(g.recons, 0.0);
  EXPECT_EQ(g.rep, 0.0);

  const auto before = forward_counter().load();
  const auto all = batch_loss(p, batch, {});
  // two generative sequences (query == pos, negatives reuse members' positives)
  // plus query, positive and negative of the embedding example
  EXPECT_EQ(all.sequences, 5u);
  EXPECT_EQ(forward_counter().load() - before, all.sequences);
  EXPECT_EQ(all.forward_passes, all.sequences);
  EXPECT_NEAR(all.total, all.gen + all.recons + all.rep, 1e-12);

  ObjectiveOptions bad;
  bad.weights = {0, 0, 0};
  EXPECT_THROW(batch_loss(p, batch, bad), LossError);
}

TEST(TotalLoss, SelfPositiveContrastiveBelowLogM) {
  const auto p = tiny_model();
  const auto batch = mixed_batch(3);
  ObjectiveOptions rep_only;
  rep_only.weights = {0, 0, 1};
  const auto lb = total_loss(batch[0], p, rep_only);
  EXPECT_LT(lb.total, std::log(2.0));
  EXPECT_EQ(lb.sequences, 2u);
}

TEST(TotalLoss, EqualsIndependentlyComputedTerms) {
  const auto p = tiny_model();
  const auto ex = mixed_batch(3)[2];  // embedding example: query, pos, one negative
  const auto lb = total_loss(ex, p, {});
  double gen = 0, rec = 0;
  std::vector<Vec<double>> e;
  for (const auto* s : {&ex.query, &ex.pos, &ex.negs[0]}) {
    const auto in = training_input(p, *s);
    const auto out = forward(p, in);
    gen += loss_gen(out, *s) / 3.0;
    rec += loss_recons(out, *s) / 3.0;
    e.push_back(embed(p, Mat<double>(out.last_hidden.middleRows(s->layout.k, s->layout.m))));
  }
  const double rep = loss_rep(e[0], e[1], {e[2]}, {}).value;
  EXPECT_NEAR(lb.gen, gen, 1e-12);
  EXPECT_NEAR(lb.recons, rec, 1e-12);
  EXPECT_NEAR(lb.rep, rep, 1e-12);
  EXPECT_NEAR(lb.total, gen + rec + rep, 1e-12);
}

TEST(GradCheck, QuadraticIsExact) {
  std::vector<double> x{0.3, -1.2, 2.0, 0.7};
  const std::vector<double> a{1.0, 2.0, 0.5, 3.0};
  auto f = [&] {
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += a[i] * x[i] * x[i];
    return s;
  };
  std::vector<double> g(4);
  for (std::size_t i = 0; i < 4; ++i) g[i] = 2 * a[i] * x[i];
  const std::vector<std::size_t> coords{0, 1, 2, 3};
  EXPECT_LE(finite_difference_check(x, f, g, coords).max_rel_error, 1e-8);
}

TEST(GradCheck, FullCombinedLoss) {
  const auto p = tiny_model();
  std::mt19937_64 rng(17);
  const auto r = grad_check(p, mixed_batch(3), {}, 200, rng);
  EXPECT_GE(r.coordinates, 200u);
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
}

TEST(GradCheck, ReconstructionOnly) {
  const auto p = tiny_model();
  std::mt19937_64 rng(18);
  ObjectiveOptions o;
  o.weights = {0, 1, 0};
  const auto r = grad_check(p, mixed_batch(3), o, 200, rng);
  EXPECT_GE(r.coordinates, 200u);
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
}

namespace {
std::vector<Record> toy_records() {
  return {ChatExample{"Repeat.", "ABCD", "OK ABCD"}, ChatExample{"Repeat.", "EFGH", "OK EFGH"},
          RetrievalExample{"Find.", "k1", "None", "k1 is red", {"k2 is blue"}}};
}
}  // namespace

TEST(TrainToy, ZeroLearningRateKeepsParameters) {
  TrainConfig cfg;
  cfg.steps = 2;
  cfg.lr = 0;
  cfg.micro_batch = 2;
  const auto p = tiny_model();
  const auto res = train_toy(toy_records(), p, cfg);
  EXPECT_EQ(serialize_model(res.params), serialize_model(p));
  EXPECT_EQ(res.trace.size(), 2u);
}

TEST(TrainToy, OneStepFollowsNegativeGradient) {
  TrainConfig cfg;
  cfg.steps = 1;
  cfg.lr = 1e-3;
  cfg.micro_batch = 2;
  cfg.seed = 5;
  const auto p = tiny_model();
  const auto res = train_toy(toy_records(), p, cfg);
  std::mt19937_64 rng(cfg.seed);
  const auto batch = sample_batch(toy_records(), 2, p.config.num_latents, 1, rng);
  auto grads = p.zeros_like();
  batch_loss(p, batch, cfg.objective, &grads);
  auto after = res.params;
  auto before = p;
  auto av = flat_views(after), bv = flat_views(before), gv = flat_views(grads);
  double worst = 0;
  for (std::size_t t = 0; t < av.size(); ++t)
    for (std::size_t i = 0; i < av[t].size(); ++i)
      worst = std::max(worst, std::abs((av[t][i] - bv[t][i]) + cfg.lr * gv[t][i]));
  EXPECT_LE(worst, 1e-12);
}

TEST(TrainToy, SeededRunIsBitwiseReproducible) {
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.micro_batch = 2;
  cfg.accumulation = 2;
  cfg.optimizer = Optimizer::adam;
  cfg.lr = 1e-2;
  const auto a = train_toy(toy_records(), tiny_model(), cfg);
  const auto b = train_toy(toy_records(), tiny_model(), cfg);
  EXPECT_EQ(serialize_model(a.params), serialize_model(b.params));
  for (std::size_t i = 0; i < a.trace.size(); ++i) EXPECT_EQ(a.trace[i].total, b.trace[i].total);
  std::ostringstream out;
  write_trace_csv(out, a.trace);
  const auto table = csv::parse(out.str());
  ASSERT_EQ(table.rows.size(), a.trace.size());
  for (std::size_t i = 0; i < a.trace.size(); ++i) {
    EXPECT_EQ(std::stoul(table.rows[i][table.column("step")]), a.trace[i].step);
    EXPECT_NEAR(std::stod(table.rows[i][table.column("total")]), a.trace[i].total, 1e-9 * std::abs(a.trace[i].total));
    EXPECT_NEAR(std::stod(table.rows[i][table.column("rep")]), a.trace[i].rep, 1e-9 * std::abs(a.trace[i].rep) + 1e-12);
  }
}

TEST(TrainToy, DivergenceReportsStep) {
  auto p = tiny_model();
  p.lm_head(0, 0) = std::numeric_limits<double>::quiet_NaN();
  TrainConfig cfg;
  cfg.steps = 2;
  cfg.micro_batch = 2;
  try {
    train_toy(toy_records(), p, cfg);
    FAIL() << "expected divergence";
  } catch (const TrainError& e) {
    EXPECT_EQ(e.step(), 0u);
  }
  EXPECT_THROW(train_toy({}, p, cfg), std::invalid_argument);
}

namespace {
std::vector<UnifiedExample> retrieval_batch(std::size_t m) {
  std::mt19937_64 rng(9);
  std::vector<AugmentedItem> items{
      augment_embedding(RetrievalExample{"f", "k1", "r", "d1", {"d2"}}, m, reconstruction_prompts(), rng),
      augment_embedding(RetrievalExample{"f", "k3", "r", "d3", {"d4"}}, m, reconstruction_prompts(), rng),
  };
  return unify_batch(items, rng);
}
}  // namespace

TEST(SharedNegatives, ContrastsAgainstOtherExamplesWithoutExtraPasses) {
  const auto p = tiny_model();
  const auto batch = retrieval_batch(3);
  ASSERT_EQ(batch.size(), 2u);
  ObjectiveOptions rep_only;
  rep_only.weights = {0, 0, 1};
  auto shared = rep_only;
  shared.share_negatives = true;
  const auto plain = batch_loss(p, batch, rep_only);
  const auto before = forward_counter().load();
  const auto lb = batch_loss(p, batch, shared);
  EXPECT_EQ(forward_counter().load() - before, plain.sequences);
  EXPECT_EQ(lb.sequences, plain.sequences);

  auto emb = [&](const SegmentedSequence& s) {
    const auto out = forward(p, training_input(p, s));
    return embed(p, Mat<double>(out.last_hidden.middleRows(s.layout.k, s.layout.m)));
  };
  double ref = 0;
  for (std::size_t a = 0; a < 2; ++a) {
    const auto& ex = batch[a];
    const auto& other = batch[1 - a];
    std::vector<Vec<double>> negs{emb(ex.negs[0]), emb(other.negs[0]), emb(other.pos)};
    ref += loss_rep(emb(ex.query), emb(ex.pos), negs, {}).value / 2.0;
  }
  EXPECT_NEAR(lb.rep, ref, 1e-12);
  EXPECT_GT(lb.rep, plain.rep);
}

TEST(SharedNegatives, GradientMatchesFiniteDifferences) {
  const auto p = tiny_model();
  std::mt19937_64 rng(19);
  ObjectiveOptions o;
  o.share_negatives = true;
  auto batch = retrieval_batch(3);
  const auto mixed = mixed_batch(3);
  batch.insert(batch.end(), mixed.begin(), mixed.end());
  const auto r = grad_check(p, batch, o, 200, rng);
  EXPECT_GE(r.coordinates, 200u);
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
}
