#pragma once

#include <cmath>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "grc/data.hpp"
#include "grc/objectives.hpp"

namespace grc {

class TrainError : public std::runtime_error {
 public:
  TrainError(std::size_t step, const std::string& what)
      : std::runtime_error("step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

enum class Optimizer { sgd, adam };

struct TrainConfig {
  std::size_t steps = 100;
  std::size_t micro_batch = 4;
  std::size_t accumulation = 1;
  std::size_t num_negatives = 1;
  double lr = 0.05;
  double momentum = 0.9;
  Optimizer optimizer = Optimizer::sgd;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double clip_norm = 0;  // 0 disables
  ObjectiveOptions objective;
  std::uint64_t seed = 1;
};

struct TraceRow {
  std::size_t step = 0;
  double total = 0, gen = 0, recons = 0, rep = 0;
};

struct TrainResult {
  ModelParameters<double> params;
  std::vector<TraceRow> trace;
};

inline std::vector<std::span<double>> flat_views(ModelParameters<double>& p) {
  std::vector<std::span<double>> out;
  p.for_each_tensor([&](const std::string&, double* d, std::size_t n, Eigen::Index, Eigen::Index) { out.emplace_back(d, n); });
  return out;
}

/// Stateful first-order optimizer over a fixed parameter layout.
class OptimizerState {
 public:
  OptimizerState(const ModelParameters<double>& like, const TrainConfig& cfg)
      : cfg_(cfg), m_(like.zeros_like()), v_(like.zeros_like()) {}

  void apply(ModelParameters<double>& p, ModelParameters<double>& g) {
    ++t_;
    auto pv = flat_views(p), gv = flat_views(g), mv = flat_views(m_), vv = flat_views(v_);
    const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_)), c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t t = 0; t < pv.size(); ++t)
      for (std::size_t i = 0; i < pv[t].size(); ++i) {
        const double gi = gv[t][i];
        if (cfg_.optimizer == Optimizer::sgd) {
          mv[t][i] = cfg_.momentum * mv[t][i] + gi;
          pv[t][i] -= cfg_.lr * mv[t][i];
        } else {
          mv[t][i] = cfg_.beta1 * mv[t][i] + (1 - cfg_.beta1) * gi;
          vv[t][i] = cfg_.beta2 * vv[t][i] + (1 - cfg_.beta2) * gi * gi;
          pv[t][i] -= cfg_.lr * (mv[t][i] / c1) / (std::sqrt(vv[t][i] / c2) + cfg_.adam_eps);
        }
      }
  }

 private:
  TrainConfig cfg_;
  ModelParameters<double> m_, v_;
  std::size_t t_ = 0;
};

inline double grad_norm(ModelParameters<double>& g) {
  double ss = 0;
  for (auto v : flat_views(g))
    for (double x : v) ss += x * x;
  return std::sqrt(ss);
}

/// Draws a micro-batch, augments and unifies it. Generative items need a
/// partner, so micro-batches are at least two records.
template <class Rng>
std::vector<UnifiedExample> sample_batch(const std::vector<Record>& data, std::size_t size, std::size_t m,
                                         std::size_t num_negatives, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::vector<AugmentedItem> items;
  for (std::size_t i = 0; i < std::max<std::size_t>(size, 2); ++i) items.push_back(augment(data[pick(rng)], m, rng));
  return unify_batch(items, rng, num_negatives);
}

/// Gradient descent on the combined objective over all parameters,
/// including latents and adapter. The trace has one row per step, recording
/// the loss before that step's update.
inline TrainResult train_toy(const std::vector<Record>& data, ModelParameters<double> params, const TrainConfig& cfg,
                             const std::function<void(const TraceRow&)>& on_step = {}) {
  if (data.empty()) throw std::invalid_argument("train_toy: empty dataset");
  if (cfg.accumulation == 0) throw std::invalid_argument("train_toy: accumulation must be >= 1");
  std::mt19937_64 rng(cfg.seed);
  OptimizerState opt(params, cfg);
  TrainResult res;
  const std::size_t m = params.config.num_latents;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    ModelParameters<double> grads = params.zeros_like();
    TraceRow row{step, 0, 0, 0, 0};
    for (std::size_t a = 0; a < cfg.accumulation; ++a) {
      const auto batch = sample_batch(data, cfg.micro_batch, m, cfg.num_negatives, rng);
      const auto lb = batch_loss(params, batch, cfg.objective, &grads, 1.0 / double(cfg.accumulation));
      const double w = 1.0 / double(cfg.accumulation);
      row.total += w * lb.total;
      row.gen += w * lb.gen;
      row.recons += w * lb.recons;
      row.rep += w * lb.rep;
    }
    if (!std::isfinite(row.total)) throw TrainError(step, "loss is not finite");
    if (cfg.clip_norm > 0) {
      const double n = grad_norm(grads);
      if (n > cfg.clip_norm)
        for (auto v : flat_views(grads))
          for (double& x : v) x *= cfg.clip_norm / n;
    }
    opt.apply(params, grads);
    res.trace.push_back(row);
    if (on_step) on_step(row);
  }
  res.params = std::move(params);
  return res;
}

inline void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& trace) {
  out << "step,total,gen,recons,rep\n";
  out.precision(10);
  for (const auto& r : trace) out << r.step << ',' << r.total << ',' << r.gen << ',' << r.recons << ',' << r.rep << '\n';
}

}  // namespace grc
