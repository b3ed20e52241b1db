#pragma once

// Query-aware nucleus filtering. Relevance of each enhanced frame/caption row
// is softmax_tau(cos(w_EOS, row)); rows are taken in descending relevance until
// the cumulative probability reaches p. The chosen index set is a forward-only
// decision: gradients flow through the pooling weights but never through the
// choice of indices.

#include <algorithm>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "narvid/error.hpp"
#include "narvid/tensor.hpp"

namespace narvid {

inline constexpr double kDefaultNucleusP = 0.4;
inline constexpr double kDefaultTemperature = 0.1;

struct FilterSelection {
  std::vector<double> raw_sims;       // cos(w_EOS, row_k), k = 0..K-1
  std::vector<double> probs;          // softmax_tau(raw_sims)
  std::vector<std::size_t> selected;  // descending prob, ties by lower index
  std::vector<double> weights;        // probs over `selected`, renormalized
};

// Descending-probability order with lower index first on ties.
inline std::vector<std::size_t> relevance_order(std::span<const double> probs) {
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  return order;
}

inline std::vector<double> renormalized(std::span<const double> probs, const std::vector<std::size_t>& selected) {
  double total = 0.0;
  for (std::size_t k : selected) total += probs[k];
  std::vector<double> w;
  w.reserve(selected.size());
  for (std::size_t k : selected) w.push_back(probs[k] / total);
  return w;
}

// Smallest prefix of the relevance order whose cumulative probability is >= p.
inline FilterSelection nucleus_select(std::span<const double> probs, double p) {
  if (!(p > 0.0 && p <= 1.0)) throw ConfigError("nucleus threshold p must lie in (0, 1], got " + std::to_string(p));
  if (probs.empty()) throw ShapeError("nucleus_select: empty distribution");
  FilterSelection sel;
  sel.probs.assign(probs.begin(), probs.end());
  const auto order = relevance_order(probs);
  double cumulative = 0.0;
  for (std::size_t k : order) {
    sel.selected.push_back(k);
    cumulative += probs[k];
    if (cumulative >= p) break;
  }
  // p = 1 keeps every row even when rounding lets a prefix reach 1.0 early.
  if (p >= 1.0) sel.selected = order;
  sel.weights = renormalized(probs, sel.selected);
  return sel;
}

// Fixed-size ablation: the k most relevant rows (k clamped to [1, K]).
inline FilterSelection topk_select(std::span<const double> probs, std::size_t k) {
  if (probs.empty()) throw ShapeError("topk_select: empty distribution");
  FilterSelection sel;
  sel.probs.assign(probs.begin(), probs.end());
  auto order = relevance_order(probs);
  order.resize(std::clamp<std::size_t>(k, 1, order.size()));
  sel.selected = order;
  sel.weights = renormalized(probs, sel.selected);
  return sel;
}

// Differentiable relevance: softmax_tau(cos(eos, rows)) as a 1 x K tensor.
inline Tensor relevance_scores(const Tensor& eos, const Tensor& features, double tau) {
  if (features.rows() == 0) throw ShapeError("relevance_scores: no feature rows");
  return softmax_rows(cosine_rows(eos, features), tau);
}

struct FilterOptions {
  double p = kDefaultNucleusP;
  double tau = kDefaultTemperature;
  std::size_t top_k = 0;  // > 0 switches to fixed top-k selection (ablation)
};

// Selection plus the differentiable pieces matching needs.
struct FilterResult {
  FilterSelection selection;
  Tensor rows;     // K' x D, the selected feature rows (z)
  Tensor weights;  // 1 x K', renormalized relevance of the selected rows
};

inline FilterResult filter_sequence(const Tensor& eos, const Tensor& features, const FilterOptions& opt) {
  const Tensor raw = cosine_rows(eos, features);
  const Tensor probs = softmax_rows(raw, opt.tau);
  FilterResult out;
  out.selection = opt.top_k > 0 ? topk_select(probs.data(), opt.top_k) : nucleus_select(probs.data(), opt.p);
  out.selection.raw_sims = raw.data();
  const Tensor chosen = gather_cols(probs, out.selection.selected);
  out.weights = div_scalar(chosen, sum(chosen));
  out.rows = gather_rows(features, out.selection.selected);
  return out;
}

struct FilterPair {
  FilterResult video;
  FilterResult narration;
};

// Filters both enhanced sequences independently against the same w_EOS.
inline FilterPair filter_pair(const Tensor& eos, const Tensor& v_check, const Tensor& n_check,
                              const FilterOptions& opt) {
  return {filter_sequence(eos, v_check, opt), filter_sequence(eos, n_check, opt)};
}

}  // namespace narvid
