#pragma once

// Training objective and optimizer.
//
// L = L_NCE + alpha * L_CVH, where L_NCE averages symmetric InfoNCE over the
// query-video and query-narration matrices, and L_CVH is a hinge rank loss over
// cross-view hard negatives: an index is hard for row i if it is within
// lambda * sigma_i of the diagonal in either matrix. Hard-set membership and
// the sigma thresholds are computed from detached scores.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include "narvid/dataio.hpp"
#include "narvid/error.hpp"
#include "narvid/filtering.hpp"
#include "narvid/matching.hpp"
#include "narvid/model.hpp"
#include "narvid/tensor.hpp"

namespace narvid {

enum class HardLoss { rank, info_nce };

struct TrainConfig {
  double p = kDefaultNucleusP;
  double lambda = 0.7;
  double eta = 1.8;
  double alpha = 1.0;
  double tau = kDefaultTemperature;
  double lr = 1e-4;
  double warmup = 0.1;
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  std::size_t heads = 4;
  std::size_t top_k = 0;
  HardLoss hard_loss = HardLoss::rank;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(p > 0.0 && p <= 1.0)) throw ConfigError("p must lie in (0, 1]");
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (!(eta >= 0.0)) throw ConfigError("eta must be >= 0");
    if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
    if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
    if (!(lr >= 0.0)) throw ConfigError("lr must be >= 0");
    if (!(warmup >= 0.0 && warmup <= 1.0)) throw ConfigError("warmup must lie in [0, 1]");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (heads == 0) throw ConfigError("heads must be positive");
  }

  FilterOptions filter() const { return {p, tau, top_k}; }
};

// --------------------------------------------------------------- InfoNCE

// Symmetric cross-entropy of S / tau with the diagonal as targets, over rows
// and columns, scaled by 1 / 2B.
inline Tensor info_nce(const Tensor& s, double tau) {
  if (s.rows() != s.cols())
    throw ShapeError("info_nce: expected square matrix, got " + std::to_string(s.rows()) + "x" +
                     std::to_string(s.cols()));
  if (!(tau > 0.0)) throw ConfigError("info_nce: tau must be > 0");
  const std::size_t b = s.rows();
  const Tensor logits = scale(s, 1.0 / tau);
  std::vector<Tensor> diag;
  for (std::size_t i = 0; i < b; ++i) diag.push_back(element(logits, i, i));
  const Tensor trace = sum(stack_scalars(diag, b, 1));
  const Tensor total = sum(logsumexp_rows(logits)) + sum(logsumexp_rows(transpose(logits))) - scale(trace, 2.0);
  return scale(total, 1.0 / (2.0 * static_cast<double>(b)));
}

// ------------------------------------------------------------- hard sets

struct HardNegativeSets {
  std::vector<std::vector<std::size_t>> qv, qn;        // H_qv(i), H_qn(i)
  std::vector<std::vector<std::size_t>> rows;          // H_i = H_qv(i) u H_qn(i)
  std::vector<std::vector<std::size_t>> qv_t, qn_t;    // same on the transposed matrices
  std::vector<std::vector<std::size_t>> cols;          // H_i^T
  std::vector<double> sigma_qv_row, sigma_qn_row;      // population std of row i
  std::vector<double> sigma_qv_col, sigma_qn_col;      // population std of column i

  double mean_row_size() const {
    if (rows.empty()) return 0.0;
    double total = 0.0;
    for (const auto& h : rows) total += static_cast<double>(h.size());
    return total / static_cast<double>(rows.size());
  }
};

inline double population_std(std::span<const double> values) {
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  return std::sqrt(var / static_cast<double>(values.size()));
}

namespace objective_detail {

inline void one_view(const Matrix& s, double lambda, std::vector<std::vector<std::size_t>>& sets,
                     std::vector<double>& sigmas) {
  const std::size_t b = s.rows;
  sets.assign(b, {});
  sigmas.assign(b, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    sigmas[i] = population_std(s.row(i));
    for (std::size_t j = 0; j < b; ++j)
      if (j != i && s(i, i) - s(i, j) < lambda * sigmas[i]) sets[i].push_back(j);
  }
}

inline std::vector<std::vector<std::size_t>> unite(const std::vector<std::vector<std::size_t>>& a,
                                                   const std::vector<std::vector<std::size_t>>& b) {
  std::vector<std::vector<std::size_t>> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    std::set_union(a[i].begin(), a[i].end(), b[i].begin(), b[i].end(), std::back_inserter(out[i]));
  return out;
}

}  // namespace objective_detail

inline HardNegativeSets hard_sets(const Matrix& s_qv, const Matrix& s_qn, double lambda) {
  if (s_qv.rows != s_qv.cols || s_qn.rows != s_qn.cols || s_qv.rows != s_qn.rows)
    throw ShapeError("hard_sets: expected two square matrices of equal size");
  if (!(lambda >= 0.0)) throw ConfigError("hard_sets: lambda must be >= 0");
  HardNegativeSets h;
  objective_detail::one_view(s_qv, lambda, h.qv, h.sigma_qv_row);
  objective_detail::one_view(s_qn, lambda, h.qn, h.sigma_qn_row);
  objective_detail::one_view(s_qv.transposed(), lambda, h.qv_t, h.sigma_qv_col);
  objective_detail::one_view(s_qn.transposed(), lambda, h.qn_t, h.sigma_qn_col);
  h.rows = objective_detail::unite(h.qv, h.qn);
  h.cols = objective_detail::unite(h.qv_t, h.qn_t);
  return h;
}

enum class View { qv, qn };

// (1/2B) sum_i [ sum_{j in H_i} max(0, S(i,j) - S(i,i) + eta lambda sigma_row_i)
//              + sum_{j in H_i^T} max(0, S(j,i) - S(i,i) + eta lambda sigma_col_i) ]
inline Tensor hard_rank_loss(const Tensor& s, const HardNegativeSets& sets, View view, double lambda, double eta) {
  const std::size_t b = s.rows();
  if (s.cols() != b || sets.rows.size() != b) throw ShapeError("hard_rank_loss: size mismatch");
  const auto& sig_row = view == View::qv ? sets.sigma_qv_row : sets.sigma_qn_row;
  const auto& sig_col = view == View::qv ? sets.sigma_qv_col : sets.sigma_qn_col;
  std::vector<Tensor> terms;
  for (std::size_t i = 0; i < b; ++i) {
    const Tensor pos = element(s, i, i);
    for (std::size_t j : sets.rows[i])
      terms.push_back(relu(add_constant(element(s, i, j) - pos, eta * lambda * sig_row[i])));
    for (std::size_t j : sets.cols[i])
      terms.push_back(relu(add_constant(element(s, j, i) - pos, eta * lambda * sig_col[i])));
  }
  if (terms.empty()) return Tensor::scalar(0.0);
  return scale(sum(stack_scalars(terms, terms.size(), 1)), 1.0 / (2.0 * static_cast<double>(b)));
}

// InfoNCE with denominators restricted to the positive plus H_i (rows) or
// H_i^T (columns), averaged over both matrices.
inline Tensor hard_info_nce(const Tensor& s_qv, const Tensor& s_qn, const HardNegativeSets& sets, double tau) {
  const auto one = [&](const Tensor& s) {
    const std::size_t b = s.rows();
    const Tensor logits = scale(s, 1.0 / tau);
    std::vector<Tensor> terms;
    for (std::size_t i = 0; i < b; ++i) {
      const Tensor pos = element(logits, i, i);
      const auto restricted = [&](const std::vector<std::size_t>& hard, bool by_row) {
        std::vector<std::size_t> idx = hard;
        idx.insert(std::lower_bound(idx.begin(), idx.end(), i), i);
        std::vector<Tensor> entries;
        for (std::size_t j : idx) entries.push_back(by_row ? element(logits, i, j) : element(logits, j, i));
        return logsumexp_rows(stack_scalars(entries, 1, entries.size())) - pos;
      };
      terms.push_back(restricted(sets.rows[i], true));
      terms.push_back(restricted(sets.cols[i], false));
    }
    return scale(sum(stack_scalars(terms, terms.size(), 1)), 1.0 / (2.0 * static_cast<double>(b)));
  };
  return scale(one(s_qv) + one(s_qn), 0.5);
}

struct LossBreakdown {
  Tensor total;
  Tensor l_nce;
  Tensor l_cvh;
  HardNegativeSets sets;
};

// Passing `fixed_sets` reuses sets (and their sigma margins) computed
// elsewhere, e.g. at the base point of a finite-difference check.
inline LossBreakdown total_loss(const Tensor& s_qv, const Tensor& s_qn, const TrainConfig& config,
                                const HardNegativeSets* fixed_sets = nullptr) {
  LossBreakdown out;
  out.l_nce = scale(info_nce(s_qv, config.tau) + info_nce(s_qn, config.tau), 0.5);
  out.sets = fixed_sets ? *fixed_sets : hard_sets(s_qv.matrix(), s_qn.matrix(), config.lambda);
  if (config.hard_loss == HardLoss::rank)
    out.l_cvh = hard_rank_loss(s_qv, out.sets, View::qv, config.lambda, config.eta) +
                hard_rank_loss(s_qn, out.sets, View::qn, config.lambda, config.eta);
  else
    out.l_cvh = hard_info_nce(s_qv, s_qn, out.sets, config.tau);
  out.total = config.alpha == 0.0 ? out.l_nce : out.l_nce + scale(out.l_cvh, config.alpha);
  return out;
}

// -------------------------------------------------------------- optimizer

// Linear warm-up to `base` over the first round(warmup * total) steps, then
// cosine decay to zero at step `total`. Steps are 1-based.
inline double learning_rate(std::size_t step, std::size_t total, double warmup, double base) {
  const auto warm = static_cast<std::size_t>(std::llround(warmup * static_cast<double>(total)));
  if (step <= warm) return base * static_cast<double>(step) / static_cast<double>(warm);
  if (total <= warm) return base;
  const double progress = static_cast<double>(step - warm) / static_cast<double>(total - warm);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

// Adam with bias correction; beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(std::vector<Tensor> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      if (!params_[k].has_grad()) continue;
      const std::vector<double> g = params_[k].grad();
      auto& w = params_[k].mutable_data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * g[i];
        v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * g[i] * g[i];
        const double mhat = m_[k][i] / c1;
        const double vhat = v_[k][i] / c2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
      for (double x : w)
        if (!std::isfinite(x)) throw NumericError("optimizer produced a non-finite parameter");
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

struct StepResult {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double l_nce = 0.0;
  double l_cvh = 0.0;
  double hard_mean = 0.0;  // mean |H_i| over the batch
};

// One optimization step on `batch`: forward, backward, Adam update at lr(step).
inline StepResult train_step(const ModelParams& params, AdamOptimizer& opt, const Dataset& data,
                             const Batch& batch, const TrainConfig& config, std::size_t step,
                             std::size_t total_steps) {
  params.zero_grad();
  const SimilarityMatrices sims = score_batch(data, batch, config.filter(), params);
  const LossBreakdown loss = total_loss(sims.qv, sims.qn, config);
  if (!std::isfinite(loss.total.item())) throw NumericError("non-finite loss at step " + std::to_string(step));
  backward(loss.total);
  StepResult r;
  r.step = step;
  r.lr = learning_rate(step, total_steps, config.warmup, config.lr);
  r.loss = loss.total.item();
  r.l_nce = loss.l_nce.item();
  r.l_cvh = config.alpha == 0.0 ? 0.0 : loss.l_cvh.item();
  r.hard_mean = loss.sets.mean_row_size();
  opt.step(r.lr);
  return r;
}

inline std::size_t max_frames_of(const Dataset& d) {
  std::size_t k = 1;
  for (const auto& e : d.episodes) k = std::max(k, e.num_frames());
  return k;
}

// Full training run. The model seed and the shuffle seed both derive from
// config.seed, so identical inputs give bitwise-identical parameters.
inline ModelParams train(const Dataset& data, const TrainConfig& config,
                         const std::function<void(const StepResult&)>& on_step = {}) {
  config.validate();
  if (config.batch_size > data.size())
    throw UsageError("batch size " + std::to_string(config.batch_size) + " exceeds dataset size " +
                     std::to_string(data.size()));
  ModelConfig mc;
  mc.dim = data.dim;
  mc.heads = config.heads;
  mc.max_frames = std::max<std::size_t>(12, max_frames_of(data));
  ModelParams params = init_params(mc, mix_seed(config.seed, 1));
  AdamOptimizer opt(params.tensors());
  const std::size_t per_epoch = data.size() / config.batch_size;
  const std::size_t total = per_epoch * config.epochs;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch)
    for (const Batch& b : batch_iter(data.size(), config.batch_size, mix_seed(config.seed, 2), true, epoch)) {
      const StepResult r = train_step(params, opt, data, b, config, ++step, total);
      if (on_step) on_step(r);
    }
  params.zero_grad();
  return params;
}

}  // namespace narvid
