#pragma once

#include <cmath>
#include <vector>

#include "narvid/narvid.hpp"
#include "oracle/oracles.hpp"

namespace testing_support {

inline oracle::Mat to_mat(const narvid::Matrix& m) {
  oracle::Mat out(m.rows);
  for (std::size_t r = 0; r < m.rows; ++r) out[r].assign(m.row(r).begin(), m.row(r).end());
  return out;
}

inline oracle::Mat to_mat(const narvid::Tensor& t) { return to_mat(t.matrix()); }

inline oracle::Vec to_vec(const narvid::Tensor& t) { return t.data(); }

inline narvid::Matrix random_matrix(narvid::Rng& rng, std::size_t rows, std::size_t cols, double lo = -1.0,
                                    double hi = 1.0) {
  narvid::Matrix m(rows, cols);
  for (double& v : m.data) v = rng.uniform(lo, hi);
  return m;
}

inline narvid::Tensor random_tensor(narvid::Rng& rng, std::size_t rows, std::size_t cols, bool grad = false) {
  return narvid::Tensor::from_matrix(random_matrix(rng, rows, cols), grad);
}

inline narvid::Episode random_episode(narvid::Rng& rng, std::size_t words, std::size_t frames, std::size_t dim,
                                      std::string id = "ep") {
  return {std::move(id), random_matrix(rng, words + 1, dim), random_matrix(rng, frames, dim),
          random_matrix(rng, frames, dim)};
}

inline oracle::Block to_block(const narvid::BlockParams& b) {
  oracle::Block o;
  o.ln1_g = b.ln_attn.gain.data();
  o.ln1_b = b.ln_attn.bias.data();
  o.ln2_g = b.ln_ff.gain.data();
  o.ln2_b = b.ln_ff.bias.data();
  o.wq = to_mat(b.attn.wq);
  o.wk = to_mat(b.attn.wk);
  o.wv = to_mat(b.attn.wv);
  o.wo = to_mat(b.attn.wo);
  o.w1 = to_mat(b.ff.w1);
  o.w2 = to_mat(b.ff.w2);
  o.b1 = b.ff.b1.data();
  o.b2 = b.ff.b2.data();
  return o;
}

// Jitters every parameter so layer-norm gains, biases and the positional table
// are not at their trivial init values.
inline void perturb(const narvid::ModelParams& p, std::uint64_t seed, double amount = 0.1) {
  narvid::Rng rng(seed);
  for (auto t : p.tensors())
    for (double& v : t.mutable_data()) v += amount * rng.uniform(-1.0, 1.0);
}

inline double max_abs_diff(const oracle::Mat& a, const oracle::Mat& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) worst = std::max(worst, std::abs(a[i][j] - b[i][j]));
  return worst;
}

}  // namespace testing_support
