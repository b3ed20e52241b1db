#pragma once

// Planted synthetic episodes. Each episode owns a latent unit topic t_i:
//   words    = normalize(t_i + (1-s) g)
//   w_EOS    = normalize(mean(words))
//   frames   = normalize(s topic_k + (1-s) g), topic_k = t_i except for
//              ceil(o K) overlap frames that borrow another episode's topic
//   captions = same recipe on the frame's topic, except ceil(rho K) rows that
//              are replaced by an unrelated random direction
// with g ~ N(0, I/D) drawn fresh for every row.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "narvid/dataio.hpp"
#include "narvid/error.hpp"
#include "narvid/rng.hpp"

namespace narvid {

struct PlantSpec {
  std::size_t episodes = 64;
  std::size_t frames = 12;
  std::size_t words = 6;
  std::size_t dim = 32;
  std::uint64_t seed = 0;
  double signal = 0.6;
  double corrupt = 0.0;
  double overlap = 0.0;

  void validate() const {
    if (words < 1) throw ConfigError("words must be at least 1");
    if (frames < 1) throw ConfigError("frames must be at least 1");
    if (dim < 2) throw ConfigError("dim must be at least 2");
    const auto unit = [](double v, const char* name) {
      if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1]");
    };
    unit(signal, "signal");
    unit(corrupt, "corrupt");
    unit(overlap, "overlap");
  }

  std::size_t corrupted_rows() const { return fraction_count(corrupt); }
  std::size_t overlap_rows() const { return fraction_count(overlap); }

 private:
  std::size_t fraction_count(double f) const {
    return static_cast<std::size_t>(std::ceil(f * static_cast<double>(frames) - 1e-9));
  }
};

namespace synth_detail {

inline std::vector<double> gaussian(Rng& rng, std::size_t d, double stddev) {
  std::vector<double> v(d);
  for (double& x : v) x = stddev * rng.normal();
  return v;
}

inline void normalize(std::span<double> v) {
  const double n = norm(v);
  if (n > 0.0)
    for (double& x : v) x /= n;
}

inline std::vector<double> unit_vector(Rng& rng, std::size_t d) {
  auto v = gaussian(rng, d, 1.0);
  normalize(v);
  return v;
}

// normalize(s * topic + (1 - s) * g), g ~ N(0, I/D)
inline void noisy_row(Rng& rng, std::span<const double> topic, double s, std::span<double> out) {
  const double sd = 1.0 / std::sqrt(static_cast<double>(out.size()));
  for (std::size_t c = 0; c < out.size(); ++c) out[c] = s * topic[c] + (1.0 - s) * sd * rng.normal();
  normalize(out);
}

// `count` distinct positions in [0, k).
inline std::vector<bool> pick_rows(Rng& rng, std::size_t k, std::size_t count) {
  std::vector<std::size_t> order(k);
  for (std::size_t i = 0; i < k; ++i) order[i] = i;
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<bool> mask(k, false);
  for (std::size_t i = 0; i < count && i < k; ++i) mask[order[i]] = true;
  return mask;
}

}  // namespace synth_detail

inline std::string episode_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ep%05zu", i);
  return buf;
}

inline Dataset gen_planted(const PlantSpec& spec) {
  using namespace synth_detail;
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t n = spec.episodes, k = spec.frames, l = spec.words, d = spec.dim;
  const double s = spec.signal;

  std::vector<std::vector<double>> topics;
  for (std::size_t i = 0; i < n; ++i) topics.push_back(unit_vector(rng, d));

  Dataset out;
  out.dim = d;
  for (std::size_t i = 0; i < n; ++i) {
    Episode e;
    e.id = episode_id(i);
    e.query_tokens = Matrix(l + 1, d);
    std::vector<double> mean(d, 0.0);
    for (std::size_t w = 0; w < l; ++w) {
      auto row = e.query_tokens.row(w);
      const double sd = (1.0 - s) / std::sqrt(static_cast<double>(d));
      for (std::size_t c = 0; c < d; ++c) row[c] = topics[i][c] + sd * rng.normal();
      normalize(row);
      for (std::size_t c = 0; c < d; ++c) mean[c] += row[c];
    }
    normalize(mean);
    std::copy(mean.begin(), mean.end(), e.query_tokens.row(l).begin());

    const auto overlap = pick_rows(rng, k, spec.overlap_rows());
    std::vector<std::vector<double>> frame_topic(k, topics[i]);
    for (std::size_t f = 0; f < k; ++f) {
      if (!overlap[f]) continue;
      if (n > 1) {
        std::size_t j = static_cast<std::size_t>(rng.below(n - 1));
        if (j >= i) ++j;
        frame_topic[f] = topics[j];
      } else {
        frame_topic[f] = unit_vector(rng, d);
      }
    }
    e.frames = Matrix(k, d);
    for (std::size_t f = 0; f < k; ++f) noisy_row(rng, frame_topic[f], s, e.frames.row(f));

    const auto corrupted = pick_rows(rng, k, spec.corrupted_rows());
    e.captions = Matrix(k, d);
    for (std::size_t f = 0; f < k; ++f) {
      if (corrupted[f]) {
        const auto r = unit_vector(rng, d);
        std::copy(r.begin(), r.end(), e.captions.row(f).begin());
      } else {
        noisy_row(rng, frame_topic[f], s, e.captions.row(f));
      }
    }
    out.episodes.push_back(std::move(e));
  }
  return out;
}

}  // namespace narvid
