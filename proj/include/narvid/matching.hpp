#pragma once

// Coarse + fine query/candidate scoring over filtered sequences.
//
//   s_coarse = cos(w_EOS, sum_k weight_k z_k)
//   M[k,l]   = cos(z_k, word_l)               (EOS row excluded from words)
//   s_w2f    = sum_k weight_k max_l M[k,l]
//   s_f2w    = sum_l a_l max_k M[k,l],   a = softmax_tau(words u + b)
//   s_final  = (s_coarse + s_w2f + s_f2w) / 2

#include <vector>

#include "narvid/dataio.hpp"
#include "narvid/filtering.hpp"
#include "narvid/model.hpp"
#include "narvid/tensor.hpp"

namespace narvid {

struct PairScore {
  Tensor s_coarse, s_w2f, s_f2w, s_fine, s_final;  // all 1 x 1

  double coarse() const { return s_coarse.item(); }
  double w2f() const { return s_w2f.item(); }
  double f2w() const { return s_f2w.item(); }
  double fine() const { return s_fine.item(); }
  double final_score() const { return s_final.item(); }
};

inline Tensor coarse_score(const Tensor& eos, const Tensor& weights, const Tensor& rows) {
  return cosine_rows(eos, matmul(weights, rows));
}

struct FineScore {
  Tensor w2f, f2w;
};

// words: L x D content words (no EOS row); rows/weights: filtered candidate.
inline FineScore fine_score(const Tensor& words, const Tensor& weights, const Tensor& rows,
                            const Tensor& word_weight, const Tensor& word_bias, double tau) {
  if (words.rows() == 0) throw UsageError("fine_score: query has no words");
  if (rows.rows() == 0) throw UsageError("fine_score: no candidate rows selected");
  const Tensor sims = cosine_rows(rows, words);                          // K' x L
  const Tensor w2f = matmul(weights, max_rows(sims));                    // 1 x 1
  const Tensor logits = add_scalar(transpose(matmul(words, word_weight)), word_bias);  // 1 x L
  const Tensor word_attention = softmax_rows(logits, tau);
  const Tensor f2w = matmul(word_attention, max_rows(transpose(sims)));  // 1 x 1
  return {w2f, f2w};
}

// Query tokens as tensors: content words and the EOS row.
struct QueryTensors {
  Tensor words;  // L x D
  Tensor eos;    // 1 x D

  static QueryTensors from(const Episode& e) {
    const Tensor all = Tensor::from_matrix(e.query_tokens);
    return {slice_rows(all, 0, e.num_words()), slice_rows(all, e.num_words(), e.num_words() + 1)};
  }
};

struct ScoredPair {
  PairScore score;
  FilterSelection selection;
};

// Filters `candidate` against the query, then scores it.
inline ScoredPair pair_score(const QueryTensors& q, const Tensor& candidate, const FilterOptions& opt,
                             const ModelParams& params) {
  const FilterResult f = filter_sequence(q.eos, candidate, opt);
  PairScore s;
  s.s_coarse = coarse_score(q.eos, f.weights, f.rows);
  const FineScore fine = fine_score(q.words, f.weights, f.rows, params.word_weight, params.word_bias, opt.tau);
  s.s_w2f = fine.w2f;
  s.s_f2w = fine.f2w;
  s.s_fine = fine.w2f + fine.f2w;
  s.s_final = scale(s.s_coarse + s.s_fine, 0.5);
  return {s, f.selection};
}

struct SimilarityMatrices {
  Tensor qv;  // B x B, row = query, column = video candidate
  Tensor qn;  // B x B, row = query, column = narration candidate
};

// S_qv(i,j) = s_qv(q_i, v_j), S_qn(i,j) = s_qn(q_i, n_j). Enhancement is done
// by the caller once per episode; filtering runs once per (query, candidate).
inline SimilarityMatrices similarity_matrices(const std::vector<QueryTensors>& queries,
                                              const std::vector<EnhancedFeatures>& candidates,
                                              const FilterOptions& opt, const ModelParams& params) {
  const std::size_t rows = queries.size(), cols = candidates.size();
  std::vector<Tensor> qv, qn;
  qv.reserve(rows * cols);
  qn.reserve(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      qv.push_back(pair_score(queries[i], candidates[j].v_check, opt, params).score.s_final);
      qn.push_back(pair_score(queries[i], candidates[j].n_check, opt, params).score.s_final);
    }
  return {stack_scalars(qv, rows, cols), stack_scalars(qn, rows, cols)};
}

// Convenience: enhance + score a whole set of episodes (queries and candidates
// drawn from the same list, diagonal = positive pairs).
inline SimilarityMatrices score_episodes(const std::vector<const Episode*>& episodes, const FilterOptions& opt,
                                         const ModelParams& params) {
  std::vector<QueryTensors> queries;
  std::vector<EnhancedFeatures> enhanced;
  queries.reserve(episodes.size());
  enhanced.reserve(episodes.size());
  for (const Episode* e : episodes) {
    queries.push_back(QueryTensors::from(*e));
    enhanced.push_back(enhance(*e, params));
  }
  return similarity_matrices(queries, enhanced, opt, params);
}

inline SimilarityMatrices score_batch(const Dataset& d, const Batch& batch, const FilterOptions& opt,
                                      const ModelParams& params) {
  std::vector<const Episode*> eps;
  for (std::size_t i : batch.indices) eps.push_back(&d.episodes.at(i));
  return score_episodes(eps, opt, params);
}

}  // namespace narvid
