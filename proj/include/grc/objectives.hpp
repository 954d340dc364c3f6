#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "grc/data.hpp"
#include "grc/model.hpp"

namespace grc {

class LossError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Adapter + mean pooling + L2 normalization over latent hidden states.
struct EmbeddingHead {
  template <class T>
  static Vec<T> pooled(const ModelParameters<T>& p, const Mat<T>& latent_hidden) {
    if (latent_hidden.rows() == 0) throw LossError("embed: need at least one latent hidden state");
    Vec<T> acc = Vec<T>::Zero(p.config.embed_dim);
    for (Eigen::Index i = 0; i < latent_hidden.rows(); ++i)
      acc += p.adapter_w * latent_hidden.row(i).transpose() + p.adapter_b;
    return acc / T(latent_hidden.rows());
  }
};

/// normalize(mean_i A(h_i)). A zero pooled vector is an error.
template <class T>
Vec<T> embed(const ModelParameters<T>& p, const Mat<T>& latent_hidden) {
  Vec<T> pooled = EmbeddingHead::pooled(p, latent_hidden);
  const T norm = pooled.norm();
  if (!(norm > T(0)) || !std::isfinite(double(norm))) throw LossError("embed: pooled vector has zero norm");
  return pooled / norm;
}

struct LossWeights {
  double alpha = 1.0, beta = 1.0, gamma = 1.0;
  void validate() const {
    if (alpha < 0 || beta < 0 || gamma < 0) throw LossError("loss weights must be non-negative");
    if (alpha == 0 && beta == 0 && gamma == 0) throw LossError("loss weights must not all be zero");
  }
};

/// Similarity logits are cos(a, b) / temperature.
struct SimilarityScale {
  double temperature = 0.02;
  double scale() const {
    if (!(temperature > 0)) throw LossError("temperature must be positive");
    return 1.0 / temperature;
  }
};

/// Mean next-token NLL over target positions [begin, end); logits row p-1
/// predicts token_at(p). Optionally adds coeff * dL/dlogits into grad.
template <class TokenAt>
double next_token_nll(const Mat<double>& logits, TokenAt&& token_at, std::size_t begin, std::size_t end,
                      Mat<double>* grad = nullptr, double coeff = 1.0) {
  if (begin >= end) throw LossError("loss: empty target span");
  if (begin == 0) throw LossError("loss: first position has no predecessor");
  if (end > std::size_t(logits.rows())) throw LossError("loss: span exceeds sequence");
  const double inv = 1.0 / double(end - begin);
  double total = 0;
  for (std::size_t p = begin; p < end; ++p) {
    const auto row = logits.row(p - 1);
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    const TokenId target = token_at(p);
    total += lse - row(target);
    if (grad) {
      auto g = grad->row(p - 1);
      g.array() += coeff * inv * (row.array() - lse).exp();
      g(target) -= coeff * inv;
    }
  }
  return total * inv;
}

/// Generation loss over the response span of segment one.
inline double loss_gen(const ForwardOutput<double>& out, const SegmentedSequence& seq, Mat<double>* grad = nullptr,
                       double coeff = 1.0) {
  if (seq.gen_end > seq.layout.k) throw LossError("loss_gen: span leaves the context segment");
  return next_token_nll(out.logits, [&](std::size_t p) { return seq.token_at(p); }, seq.gen_begin, seq.gen_end, grad,
                        coeff);
}

/// Reconstruction loss over the recovered-context span of segment four.
inline double loss_recons(const ForwardOutput<double>& out, const SegmentedSequence& seq, Mat<double>* grad = nullptr,
                          double coeff = 1.0) {
  if (seq.layout.t == 0) throw LossError("loss_recons: no reconstruction segment");
  return next_token_nll(out.logits, [&](std::size_t p) { return seq.token_at(p); }, seq.layout.recon_begin(),
                        seq.layout.n(), grad, coeff);
}

/// InfoNCE over cosine similarities: -log softmax(s * cos(q, d))[pos],
/// with gradients w.r.t. each input vector.
struct RepLoss {
  double value = 0;
  Vec<double> d_query, d_pos;
  std::vector<Vec<double>> d_negs;
};

inline RepLoss loss_rep(const Vec<double>& e_q, const Vec<double>& e_pos, const std::vector<Vec<double>>& e_negs,
                        const SimilarityScale& scale) {
  if (e_negs.empty()) throw LossError("loss_rep: need at least two candidates");
  const double s = scale.scale();
  const std::size_t M = 1 + e_negs.size();
  std::vector<const Vec<double>*> cand{&e_pos};
  for (const auto& n : e_negs) cand.push_back(&n);
  auto cosine = [](const Vec<double>& a, const Vec<double>& b) { return a.dot(b) / (a.norm() * b.norm()); };
  std::vector<double> logit(M);
  for (std::size_t j = 0; j < M; ++j) logit[j] = s * cosine(e_q, *cand[j]);
  const std::size_t top = std::size_t(std::max_element(logit.begin(), logit.end()) - logit.begin());
  const double mx = logit[top];
  double rest = 0;
  for (std::size_t j = 0; j < M; ++j)
    if (j != top) rest += std::exp(logit[j] - mx);
  const double z = 1.0 + rest;
  RepLoss r;
  r.value = (mx - logit[0]) + std::log1p(rest);
  r.d_query = Vec<double>::Zero(e_q.size());
  std::vector<Vec<double>> dc(M);
  for (std::size_t j = 0; j < M; ++j) {
    const double p = std::exp(logit[j] - mx) / z;
    const double coeff = s * (p - (j == 0 ? 1.0 : 0.0));
    const Vec<double>& b = *cand[j];
    const double c = cosine(e_q, b);
    r.d_query += coeff * (b / (e_q.norm() * b.norm()) - c * e_q / e_q.squaredNorm());
    dc[j] = coeff * (e_q / (e_q.norm() * b.norm()) - c * b / b.squaredNorm());
  }
  r.d_pos = dc[0];
  r.d_negs.assign(dc.begin() + 1, dc.end());
  return r;
}

// ---------------------------------------------------------------------------
// Backprop through the forward pass.

namespace detail {

inline void rmsnorm_backward(const Mat<double>& x, const Vec<double>& inv, const Vec<double>& gain,
                             const Mat<double>& dy, Mat<double>& dx, Vec<double>& dgain) {
  const Eigen::Index n = x.rows(), d = x.cols();
  dx.resize(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double ir = inv[r];
    dgain.array() += dy.row(r).transpose().array() * x.row(r).transpose().array() * ir;
    const Eigen::RowVectorXd gx = dy.row(r).array() * gain.transpose().array();
    const double proj = gx.dot(x.row(r));
    dx.row(r) = ir * gx - x.row(r) * (ir * ir * ir * proj / double(d));
  }
}

}  // namespace detail

/// Accumulates parameter gradients into grads and returns d(loss)/d(input rows).
inline Mat<double> backward(const ModelParameters<double>& p, const ForwardInput<double>& in,
                            const ForwardCache<double>& cache, const Mat<double>& d_last_hidden,
                            const Mat<double>& d_logits, ModelParameters<double>& grads) {
  const ModelConfig& c = p.config;
  const std::size_t hd = c.head_dim, nq = c.num_q_heads, group = c.group_size();
  const double scale = 1.0 / std::sqrt(double(hd));

  // final norm + language head
  const Mat<double> h = [&] {
    Mat<double> y;
    rmsnorm_rows(cache.x_final, p.final_norm, y);
    return y;
  }();
  grads.lm_head.noalias() += d_logits.transpose() * h;
  Mat<double> dh = d_last_hidden;
  dh.noalias() += d_logits * p.lm_head;
  Mat<double> dx;
  detail::rmsnorm_backward(cache.x_final, cache.inv_rms_final, p.final_norm, dh, dx, grads.final_norm);

  for (std::size_t li = c.num_layers; li-- > 0;) {
    const auto& L = p.layers[li];
    const auto& C = cache.layers[li];
    auto& G = grads.layers[li];
    // MLP
    G.w_down.noalias() += dx.transpose() * C.act;
    Mat<double> d_up = dx * L.w_down;
    for (Eigen::Index i = 0; i < d_up.size(); ++i) {
      const double z = C.up.data()[i];
      const double sg = 1.0 / (1.0 + std::exp(-z));
      d_up.data()[i] *= sg * (1.0 + z * (1.0 - sg));
    }
    G.w_up.noalias() += d_up.transpose() * C.b;
    const Mat<double> d_b = d_up * L.w_up;
    Mat<double> dtmp;
    detail::rmsnorm_backward(C.x_mid, C.inv_rms2, L.mlp_norm, d_b, dtmp, G.mlp_norm);
    Mat<double> dx_mid = dx + dtmp;

    // attention
    G.wo.noalias() += dx_mid.transpose() * C.o;
    const Mat<double> d_o = dx_mid * L.wo;
    Mat<double> dq = Mat<double>::Zero(C.q.rows(), C.q.cols());
    Mat<double> dk = Mat<double>::Zero(C.k.rows(), C.k.cols());
    Mat<double> dv = Mat<double>::Zero(C.v.rows(), C.v.cols());
    for (std::size_t hq = 0; hq < nq; ++hq) {
      const std::size_t g = hq / group;
      const auto& P = C.probs[hq];
      const auto dO = d_o.middleCols(hq * hd, hd);
      const auto Vg = C.v.middleCols(g * hd, hd);
      const auto Kg = C.k.middleCols(g * hd, hd);
      const auto Qh = C.q.middleCols(hq * hd, hd);
      const Mat<double> dP = dO * Vg.transpose();
      Mat<double> dS = P.cwiseProduct(dP);
      const Vec<double> rows = dS.rowwise().sum();
      dS = P.cwiseProduct(dP.colwise() - rows);
      dq.middleCols(hq * hd, hd).noalias() += scale * dS * Kg;
      dk.middleCols(g * hd, hd).noalias() += scale * dS.transpose() * Qh;
      dv.middleCols(g * hd, hd).noalias() += P.transpose() * dO;
    }
    rope_rows(dq, nq, hd, in.position_ids, c.rope_base, /*inverse=*/true);
    rope_rows(dk, c.num_kv_heads, hd, in.position_ids, c.rope_base, /*inverse=*/true);
    G.wq.noalias() += dq.transpose() * C.a;
    G.wk.noalias() += dk.transpose() * C.a;
    G.wv.noalias() += dv.transpose() * C.a;
    Mat<double> da = dq * L.wq;
    da.noalias() += dk * L.wk;
    da.noalias() += dv * L.wv;
    detail::rmsnorm_backward(C.x_in, C.inv_rms1, L.attn_norm, da, dtmp, G.attn_norm);
    dx = dx_mid + dtmp;
  }
  return dx;
}

/// Backprop of embed(): returns d(loss)/d(latent hidden rows) and accumulates
/// adapter gradients.
inline Mat<double> embed_backward(const ModelParameters<double>& p, const Mat<double>& latent_hidden,
                                  const Vec<double>& d_embedding, ModelParameters<double>& grads) {
  const Vec<double> pooled = EmbeddingHead::pooled(p, latent_hidden);
  const double norm = pooled.norm();
  const Vec<double> e = pooled / norm;
  const Vec<double> d_pooled = (d_embedding - e * e.dot(d_embedding)) / norm;
  const double inv_m = 1.0 / double(latent_hidden.rows());
  const Vec<double> d_a = d_pooled * inv_m;
  Mat<double> dh(latent_hidden.rows(), latent_hidden.cols());
  for (Eigen::Index i = 0; i < latent_hidden.rows(); ++i) {
    grads.adapter_w.noalias() += d_a * latent_hidden.row(i);
    grads.adapter_b += d_a;
    dh.row(i) = (p.adapter_w.transpose() * d_a).transpose();
  }
  return dh;
}

// ---------------------------------------------------------------------------
// Combined objective.

struct LossBreakdown {
  double total = 0, gen = 0, recons = 0, rep = 0;
  std::size_t sequences = 0;    // distinct sequences forwarded
  std::size_t forward_passes = 0;
};

struct ObjectiveOptions {
  LossWeights weights;
  SimilarityScale similarity;
  // also contrast each query against every other example's candidates
  bool share_negatives = false;
};

inline ForwardInput<double> training_input(const ModelParameters<double>& p, const SegmentedSequence& s) {
  const Mat<double> emb = embed_tokens<double>(p, s.tokens);
  return splice_latents<double>(emb, p.latents, s.layout);
}

/// Loss over a set of unified examples with one forward per distinct
/// sequence. Generation and reconstruction terms are averaged over distinct
/// sequences, the contrastive term over examples. When grads is non-null the
/// gradient of the total is accumulated into it (scaled by grad_scale).
inline LossBreakdown batch_loss(const ModelParameters<double>& p, const std::vector<UnifiedExample>& batch,
                                const ObjectiveOptions& opt, ModelParameters<double>* grads = nullptr,
                                double grad_scale = 1.0) {
  opt.weights.validate();
  const auto& w = opt.weights;
  // distinct sequences
  std::vector<const SegmentedSequence*> seqs;
  std::map<std::vector<TokenId>, std::vector<std::size_t>> by_tokens;
  auto intern = [&](const SegmentedSequence& s) {
    auto& bucket = by_tokens[s.tokens];
    for (std::size_t idx : bucket)
      if (*seqs[idx] == s) return idx;
    bucket.push_back(seqs.size());
    seqs.push_back(&s);
    return seqs.size() - 1;
  };
  struct Roles {
    std::size_t q, pos;
    std::vector<std::size_t> negs;
  };
  std::vector<Roles> roles;
  for (const auto& ex : batch) {
    Roles r{intern(ex.query), intern(ex.pos), {}};
    for (const auto& n : ex.negs) r.negs.push_back(intern(n));
    if (w.gamma > 0 && r.negs.empty()) throw LossError("batch_loss: contrastive term needs negatives");
    roles.push_back(std::move(r));
  }
  if (opt.share_negatives && w.gamma > 0) {
    const auto own = roles;
    for (std::size_t a = 0; a < roles.size(); ++a) {
      std::set<std::size_t> have(own[a].negs.begin(), own[a].negs.end());
      have.insert(own[a].pos);
      for (std::size_t b = 0; b < own.size(); ++b) {
        if (b == a) continue;
        for (std::size_t j : own[b].negs)
          if (have.insert(j).second) roles[a].negs.push_back(j);
        if (have.insert(own[b].pos).second) roles[a].negs.push_back(own[b].pos);
      }
    }
  }

  const std::size_t S = seqs.size();
  std::vector<ForwardInput<double>> inputs(S);
  std::vector<ForwardOutput<double>> outs(S);
  std::vector<ForwardCache<double>> caches(grads ? S : 0);
  std::vector<Vec<double>> emb(S);
  std::vector<Mat<double>> d_logits(S);
  std::vector<Vec<double>> d_emb(S);

  LossBreakdown lb;
  lb.sequences = S;
  std::size_t n_gen = 0, n_rec = 0;
  for (std::size_t i = 0; i < S; ++i) {
    const auto& s = *seqs[i];
    inputs[i] = training_input(p, s);
    inputs[i].logits_rows = (w.alpha > 0 || w.beta > 0) ? LogitsRows::all : LogitsRows::none;
    outs[i] = forward(p, inputs[i], grads ? &caches[i] : nullptr);
    ++lb.forward_passes;
    if (grads) d_logits[i] = Mat<double>::Zero(outs[i].logits.rows(), outs[i].logits.cols());
    if (w.alpha > 0 && s.gen_end > s.gen_begin) ++n_gen;
    if (w.beta > 0 && s.layout.t > 0) ++n_rec;
    if (w.gamma > 0) emb[i] = embed(p, Mat<double>(outs[i].last_hidden.middleRows(s.layout.k, s.layout.m)));
  }
  for (std::size_t i = 0; i < S; ++i) {
    const auto& s = *seqs[i];
    Mat<double>* g = grads ? &d_logits[i] : nullptr;
    if (w.alpha > 0 && s.gen_end > s.gen_begin)
      lb.gen += loss_gen(outs[i], s, g, grad_scale * w.alpha / double(n_gen)) / double(n_gen);
    if (w.beta > 0 && s.layout.t > 0)
      lb.recons += loss_recons(outs[i], s, g, grad_scale * w.beta / double(n_rec)) / double(n_rec);
  }
  if (w.gamma > 0) {
    for (std::size_t i = 0; i < S; ++i) d_emb[i] = Vec<double>::Zero(p.config.embed_dim);
    for (const auto& r : roles) {
      std::vector<Vec<double>> negs;
      for (auto j : r.negs) negs.push_back(emb[j]);
      const RepLoss rl = loss_rep(emb[r.q], emb[r.pos], negs, opt.similarity);
      lb.rep += rl.value / double(roles.size());
      const double k = grad_scale * w.gamma / double(roles.size());
      d_emb[r.q] += k * rl.d_query;
      d_emb[r.pos] += k * rl.d_pos;
      for (std::size_t j = 0; j < r.negs.size(); ++j) d_emb[r.negs[j]] += k * rl.d_negs[j];
    }
  }
  lb.total = w.alpha * lb.gen + w.beta * lb.recons + w.gamma * lb.rep;

  if (grads) {
    for (std::size_t i = 0; i < S; ++i) {
      const auto& s = *seqs[i];
      Mat<double> d_hidden = Mat<double>::Zero(outs[i].last_hidden.rows(), outs[i].last_hidden.cols());
      if (w.gamma > 0)
        d_hidden.middleRows(s.layout.k, s.layout.m) =
            embed_backward(p, outs[i].last_hidden.middleRows(s.layout.k, s.layout.m), d_emb[i], *grads);
      Mat<double> dl = d_logits[i];
      if (dl.rows() == 0) dl = Mat<double>::Zero(s.layout.n(), p.config.vocab_size);
      const Mat<double> d_in = backward(p, inputs[i], caches[i], d_hidden, dl, *grads);
      for (std::size_t pos = 0; pos < s.layout.n(); ++pos) {
        if (pos >= s.layout.k && pos < s.layout.k + s.layout.m)
          grads->latents.row(pos - s.layout.k) += d_in.row(pos);
        else
          grads->tok_emb.row(s.token_at(pos)) += d_in.row(pos);
      }
      caches[i] = {};
    }
  }
  return lb;
}

/// Single-example objective: one forward per sequence, breakdown sums to total.
inline LossBreakdown total_loss(const UnifiedExample& ex, const ModelParameters<double>& p, const ObjectiveOptions& opt,
                                ModelParameters<double>* grads = nullptr) {
  return batch_loss(p, {ex}, opt, grads);
}

// ---------------------------------------------------------------------------
// Finite-difference verification.

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t coordinates = 0;
  std::string worst;
};

/// Central differences at the given flat coordinates of x against grad.
/// Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheckResult finite_difference_check(std::span<double> x, const std::function<double()>& f,
                                               std::span<const double> grad, std::span<const std::size_t> coords,
                                               double step = 1e-5, double floor = 1e-6) {
  GradCheckResult r;
  for (std::size_t idx : coords) {
    const double orig = x[idx];
    x[idx] = orig + step;
    const double fp = f();
    x[idx] = orig - step;
    const double fm = f();
    x[idx] = orig;
    const double num = (fp - fm) / (2 * step);
    const double a = grad[idx];
    const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
    if (rel > r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst = std::to_string(idx) + ": analytic " + std::to_string(a) + " numeric " + std::to_string(num);
    }
    ++r.coordinates;
  }
  return r;
}

/// Samples coordinates from every tensor (token-embedding rows restricted to
/// tokens that occur in the batch), at least min_coords in total, and checks
/// the analytic gradient of batch_loss against central differences.
template <class Rng>
GradCheckResult grad_check(ModelParameters<double> params, const std::vector<UnifiedExample>& batch,
                           const ObjectiveOptions& opt, std::size_t min_coords, Rng& rng, double step = 1e-5) {
  ModelParameters<double> grads = params.zeros_like();
  batch_loss(params, batch, opt, &grads);

  std::vector<double*> ptrs;
  std::vector<std::size_t> sizes;
  std::vector<std::string> names;
  params.for_each_tensor([&](const std::string& n, double* d, std::size_t s, Eigen::Index, Eigen::Index) {
    ptrs.push_back(d);
    sizes.push_back(s);
    names.push_back(n);
  });
  std::vector<const double*> gptrs;
  grads.for_each_tensor([&](const std::string&, const double* d, std::size_t, Eigen::Index, Eigen::Index) { gptrs.push_back(d); });

  std::vector<TokenId> used;
  for (const auto& ex : batch)
    for (const auto* s : {&ex.query, &ex.pos})
      for (auto t : s->tokens) used.push_back(t);
  std::sort(used.begin(), used.end());
  used.erase(std::unique(used.begin(), used.end()), used.end());

  const std::size_t per_tensor = (min_coords + ptrs.size() - 1) / ptrs.size();
  const std::size_t d = params.config.hidden_dim;
  GradCheckResult total;
  auto f = [&] { return batch_loss(params, batch, opt).total; };
  for (std::size_t t = 0; t < ptrs.size(); ++t) {
    std::vector<std::size_t> coords;
    for (std::size_t i = 0; i < per_tensor; ++i) {
      if (names[t] == "tok_emb") {
        std::uniform_int_distribution<std::size_t> row(0, used.size() - 1), col(0, d - 1);
        coords.push_back(used[row(rng)] * d + col(rng));
      } else {
        std::uniform_int_distribution<std::size_t> any(0, sizes[t] - 1);
        coords.push_back(any(rng));
      }
    }
    auto r = finite_difference_check({ptrs[t], sizes[t]}, f, {gptrs[t], sizes[t]}, coords, step);
    total.coordinates += r.coordinates;
    if (r.max_rel_error >= total.max_rel_error) {
      total.max_rel_error = r.max_rel_error;
      total.worst = names[t] + "[" + r.worst + "]";
    }
  }
  return total;
}

}  // namespace grc
