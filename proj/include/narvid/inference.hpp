#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "narvid/dataio.hpp"
#include "narvid/error.hpp"
#include "narvid/matching.hpp"
#include "narvid/model.hpp"

namespace narvid {

enum class FusionMode { standardized, sum, qv_only, qn_only };
enum class Direction { t2v, v2t };

inline std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::standardized: return "standardized";
    case FusionMode::sum: return "sum";
    case FusionMode::qv_only: return "qv";
    case FusionMode::qn_only: return "qn";
  }
  return "?";
}

inline FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "standardized") return FusionMode::standardized;
  if (s == "sum") return FusionMode::sum;
  if (s == "qv") return FusionMode::qv_only;
  if (s == "qn") return FusionMode::qn_only;
  throw ConfigError("unknown fusion mode '" + s + "'");
}

inline std::string to_string(Direction d) { return d == Direction::t2v ? "t2v" : "v2t"; }

inline Direction parse_direction(const std::string& s) {
  if (s == "t2v") return Direction::t2v;
  if (s == "v2t") return Direction::v2t;
  throw ConfigError("unknown direction '" + s + "'");
}

struct FusionStats {
  double mu_qv = 0.0, sigma_qv = 0.0;
  double mu_qn = 0.0, sigma_qn = 0.0;
};

inline std::pair<double, double> mean_std(const Matrix& m) {
  double mu = 0.0;
  for (double v : m.data) mu += v;
  mu /= static_cast<double>(m.data.size());
  double residual = 0.0;
  for (double v : m.data) residual += v - mu;
  mu += residual / static_cast<double>(m.data.size());
  double var = 0.0;
  for (double v : m.data) var += (v - mu) * (v - mu);
  return {mu, std::sqrt(var / static_cast<double>(m.data.size()))};
}

inline FusionStats fusion_stats(const Matrix& s_qv, const Matrix& s_qn) {
  const auto [mq, sq] = mean_std(s_qv);
  const auto [mn, sn] = mean_std(s_qn);
  return {mq, sq, mn, sn};
}

// Matrix-level z-score; sigma below kNormEps is clamped to kNormEps.
inline Matrix standardize(const Matrix& m, double mu, double sigma) {
  Matrix out = m;
  const double denom = std::max(sigma, kNormEps);
  for (double& v : out.data) v = (v - mu) / denom;
  return out;
}

inline Matrix fuse(const Matrix& s_qv, const Matrix& s_qn, FusionMode mode) {
  if (s_qv.rows != s_qn.rows || s_qv.cols != s_qn.cols) throw ShapeError("fuse: matrices differ in shape");
  switch (mode) {
    case FusionMode::qv_only: return s_qv;
    case FusionMode::qn_only: return s_qn;
    case FusionMode::sum: {
      Matrix out = s_qv;
      for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += s_qn.data[i];
      return out;
    }
    case FusionMode::standardized: {
      const FusionStats st = fusion_stats(s_qv, s_qn);
      Matrix out = standardize(s_qv, st.mu_qv, st.sigma_qv);
      const Matrix zn = standardize(s_qn, st.mu_qn, st.sigma_qn);
      for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += zn.data[i];
      return out;
    }
  }
  throw ConfigError("fuse: unknown mode");
}

struct RetrievalReport {
  std::string direction = "t2v";
  std::string mode = "standardized";
  double r1 = 0.0, r5 = 0.0, r10 = 0.0;  // percent
  double mdr = 0.0, mnr = 0.0;
  std::size_t n = 0;

  nlohmann::ordered_json to_json() const {
    return {{"direction", direction}, {"mode", mode}, {"r1", r1}, {"r5", r5},
            {"r10", r10},             {"mdr", mdr},   {"mnr", mnr}, {"n", n}};
  }
  bool operator==(const RetrievalReport&) const = default;
};

// Rank of the ground-truth column per row; ties count against the truth.
inline std::vector<std::size_t> ground_truth_ranks(const Matrix& s, const std::vector<std::size_t>& truth) {
  std::vector<std::size_t> ranks(s.rows);
  for (std::size_t i = 0; i < s.rows; ++i) {
    const std::size_t gt = truth[i];
    std::size_t rank = 1;
    for (std::size_t j = 0; j < s.cols; ++j)
      if (j != gt && s(i, j) >= s(i, gt)) ++rank;
    ranks[i] = rank;
  }
  return ranks;
}

// R@1/5/10, median rank (mid-point for even N) and mean rank. `truth` maps
// each row to its ground-truth column; the diagonal when omitted.
inline RetrievalReport rank_metrics(const Matrix& s, std::optional<std::vector<std::size_t>> truth = std::nullopt) {
  if (s.rows == 0) throw ShapeError("rank_metrics: empty score matrix");
  std::vector<std::size_t> gt;
  if (truth) {
    gt = *truth;
    if (gt.size() != s.rows) throw ShapeError("rank_metrics: mapping length differs from row count");
  } else {
    if (s.rows != s.cols) throw ShapeError("rank_metrics: diagonal pairing needs a square matrix");
    for (std::size_t i = 0; i < s.rows; ++i) gt.push_back(i);
  }
  for (std::size_t g : gt)
    if (g >= s.cols) throw ShapeError("rank_metrics: ground-truth column out of range");

  auto ranks = ground_truth_ranks(s, gt);
  const double n = static_cast<double>(ranks.size());
  const auto recall = [&](std::size_t k) {
    return 100.0 * static_cast<double>(std::count_if(ranks.begin(), ranks.end(), [k](std::size_t r) { return r <= k; })) / n;
  };
  RetrievalReport rep;
  rep.n = ranks.size();
  rep.r1 = recall(1);
  rep.r5 = recall(5);
  rep.r10 = recall(10);
  double total = 0.0;
  for (std::size_t r : ranks) total += static_cast<double>(r);
  rep.mnr = total / n;
  std::sort(ranks.begin(), ranks.end());
  const std::size_t mid = ranks.size() / 2;
  rep.mdr = ranks.size() % 2 == 1 ? static_cast<double>(ranks[mid])
                                  : 0.5 * static_cast<double>(ranks[mid - 1] + ranks[mid]);
  return rep;
}

inline RetrievalReport report_for(const Matrix& s_qv, const Matrix& s_qn, FusionMode mode, Direction dir) {
  Matrix fused = fuse(s_qv, s_qn, mode);
  RetrievalReport rep = rank_metrics(dir == Direction::t2v ? fused : fused.transposed());
  rep.mode = to_string(mode);
  rep.direction = to_string(dir);
  return rep;
}

struct ScoreMatrices {
  Matrix qv, qn;
};

// Model scores for every (query, candidate) pair in the dataset, no graph.
inline ScoreMatrices score_dataset(const Dataset& d, const ModelParams& params, const FilterOptions& opt) {
  NoGradGuard no_grad;
  std::vector<const Episode*> eps;
  for (const auto& e : d.episodes) eps.push_back(&e);
  const SimilarityMatrices s = score_episodes(eps, opt, params);
  return {s.qv.matrix(), s.qn.matrix()};
}

// Training-free baseline: w_EOS against mean-pooled raw frames / captions.
inline ScoreMatrices zero_shot_scores(const Dataset& d) {
  const std::size_t n = d.size();
  const auto mean_rows = [](const Matrix& m) {
    std::vector<double> out(m.cols, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r)
      for (std::size_t c = 0; c < m.cols; ++c) out[c] += m(r, c) / static_cast<double>(m.rows);
    return out;
  };
  std::vector<std::vector<double>> frames, captions;
  for (const auto& e : d.episodes) {
    frames.push_back(mean_rows(e.frames));
    captions.push_back(mean_rows(e.captions));
  }
  ScoreMatrices s{Matrix(n, n), Matrix(n, n)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      s.qv(i, j) = cosine(d.episodes[i].eos(), frames[j]);
      s.qn(i, j) = cosine(d.episodes[i].eos(), captions[j]);
    }
  return s;
}

inline const std::vector<FusionMode>& all_fusion_modes() {
  static const std::vector<FusionMode> modes{FusionMode::qv_only, FusionMode::qn_only, FusionMode::sum,
                                             FusionMode::standardized};
  return modes;
}

inline std::vector<RetrievalReport> zero_shot_eval(const Dataset& d, Direction dir = Direction::t2v) {
  const ScoreMatrices s = zero_shot_scores(d);
  std::vector<RetrievalReport> out;
  for (FusionMode m : all_fusion_modes()) out.push_back(report_for(s.qv, s.qn, m, dir));
  return out;
}

}  // namespace narvid
