#pragma once

// Episode/dataset types and the NRV1 embedding container.
//
// Container layout (little-endian):
//   "NRV1" | u32 version=1 | u32 episode count N | u32 dim D
//   per episode: u16 id length | id bytes (UTF-8) | u32 L | u32 K
//                (L+1)*D f64 query rows | K*D f64 frame rows | K*D f64 caption rows
// A sidecar "<stem>.json" manifest lists id/L/K per episode; the binary file is
// authoritative and the manifest is never read back.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "narvid/error.hpp"
#include "narvid/matrix.hpp"
#include "narvid/rng.hpp"

namespace narvid {

// One retrieval unit. query_tokens holds the L word rows followed by the EOS row.
struct Episode {
  std::string id;
  Matrix query_tokens;  // (L+1) x D
  Matrix frames;        // K x D
  Matrix captions;      // K x D

  std::size_t num_words() const { return query_tokens.rows - 1; }
  std::size_t num_frames() const { return frames.rows; }
  std::size_t dim() const { return query_tokens.cols; }
  std::span<const double> eos() const { return query_tokens.row(query_tokens.rows - 1); }

  bool operator==(const Episode&) const = default;
};

struct Dataset {
  std::size_t dim = 0;
  std::vector<Episode> episodes;

  std::size_t size() const { return episodes.size(); }
  bool operator==(const Dataset&) const = default;
};

// Indices into a dataset; position i pairs query i with candidates i.
struct Batch {
  std::vector<std::size_t> indices;
  std::size_t size() const { return indices.size(); }
};

inline void validate_episode(const Episode& e, std::size_t dim) {
  const auto fail = [&](const std::string& what) {
    throw ValidationError("episode '" + e.id + "': " + what);
  };
  if (e.id.empty()) fail("empty id");
  if (e.id.size() > UINT16_MAX) fail("id longer than 65535 bytes");
  if (e.query_tokens.rows < 2) fail("need at least one word plus EOS");
  if (e.frames.rows < 1) fail("need at least one frame");
  if (e.captions.rows != e.frames.rows) fail("caption count differs from frame count");
  for (const Matrix* m : {&e.query_tokens, &e.frames, &e.captions}) {
    if (m->cols != dim) fail("row width differs from dataset dim " + std::to_string(dim));
    if (m->data.size() != m->rows * m->cols) fail("matrix storage does not match its shape");
    if (!m->all_finite()) fail("non-finite value");
  }
}

inline void validate_dataset(const Dataset& d) {
  if (d.dim < 2 && !d.episodes.empty()) throw ValidationError("dataset dim must be at least 2");
  std::set<std::string> ids;
  for (const auto& e : d.episodes) {
    validate_episode(e, d.dim);
    if (!ids.insert(e.id).second) throw ValidationError("duplicate episode id '" + e.id + "'");
  }
}

namespace io {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>(v >> 8));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline void put_matrix(std::string& out, const Matrix& m) {
  for (double v : m.data) put_f64(out, v);
}

// Bounds-checked little-endian reader over an in-memory file image.
class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  bool has(std::size_t n) const { return bytes_.size() - pos_ >= n; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  std::uint16_t u16(std::string_view what) {
    need(2, what);
    const auto b = bytes(2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  }
  std::uint32_t u32(std::string_view what) {
    need(4, what);
    const auto b = bytes(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[static_cast<std::size_t>(i)];
    return v;
  }
  double f64() {
    const auto b = bytes(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[static_cast<std::size_t>(i)];
    return std::bit_cast<double>(v);
  }
  std::string str(std::size_t n, std::string_view what) {
    need(n, what);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  Matrix matrix(std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (double& v : m.data) v = f64();
    return m;
  }

 private:
  void need(std::size_t n, std::string_view what) {
    if (!has(n)) throw CorruptionError("container truncated while reading " + std::string(what));
  }
  std::array<unsigned, 8> bytes(std::size_t n) {
    std::array<unsigned, 8> b{};
    for (std::size_t i = 0; i < n; ++i) b[i] = static_cast<unsigned char>(bytes_[pos_ + i]);
    pos_ += n;
    return b;
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

}  // namespace io

inline constexpr std::uint32_t kContainerVersion = 1;

inline std::string encode_container(const Dataset& d) {
  validate_dataset(d);
  std::string out = "NRV1";
  io::put_u32(out, kContainerVersion);
  io::put_u32(out, static_cast<std::uint32_t>(d.episodes.size()));
  io::put_u32(out, static_cast<std::uint32_t>(d.dim));
  for (const auto& e : d.episodes) {
    io::put_u16(out, static_cast<std::uint16_t>(e.id.size()));
    out += e.id;
    io::put_u32(out, static_cast<std::uint32_t>(e.num_words()));
    io::put_u32(out, static_cast<std::uint32_t>(e.num_frames()));
    io::put_matrix(out, e.query_tokens);
    io::put_matrix(out, e.frames);
    io::put_matrix(out, e.captions);
  }
  return out;
}

inline Dataset decode_container(std::string_view bytes) {
  io::Reader r(bytes);
  if (!r.has(4) || bytes.substr(0, 4) != "NRV1") throw FormatError("bad container magic (expected NRV1)");
  r.str(4, "magic");
  const auto version = r.u32("version");
  if (version != kContainerVersion)
    throw FormatError("unsupported container version " + std::to_string(version));
  const auto count = r.u32("episode count");
  Dataset d;
  d.dim = r.u32("dim");
  if (count > 0 && d.dim < 2) throw ValidationError("dataset dim must be at least 2");
  for (std::uint32_t n = 0; n < count; ++n) {
    const auto id_len = r.u16("episode id length");
    Episode e;
    e.id = r.str(id_len, "episode id");
    const std::size_t L = r.u32("word count");
    const std::size_t K = r.u32("frame count");
    if (L < 1 || K < 1) throw ValidationError("episode '" + e.id + "': L and K must be at least 1");
    const std::size_t values = ((L + 1) + 2 * K) * d.dim;
    if (r.remaining() / 8 < values)
      throw CorruptionError("episode '" + e.id + "': payload truncated (header declares L=" +
                            std::to_string(L) + ", K=" + std::to_string(K) + ")");
    e.query_tokens = r.matrix(L + 1, d.dim);
    e.frames = r.matrix(K, d.dim);
    e.captions = r.matrix(K, d.dim);
    d.episodes.push_back(std::move(e));
  }
  if (r.remaining() != 0)
    throw CorruptionError(std::to_string(r.remaining()) + " trailing bytes after last episode" +
                          (d.episodes.empty() ? std::string() : " '" + d.episodes.back().id + "'"));
  validate_dataset(d);
  return d;
}

inline std::filesystem::path manifest_path(const std::filesystem::path& container) {
  auto p = container;
  return p.replace_extension(".json");
}

inline nlohmann::json manifest_json(const Dataset& d) {
  nlohmann::json episodes = nlohmann::json::array();
  for (const auto& e : d.episodes)
    episodes.push_back({{"id", e.id}, {"L", e.num_words()}, {"K", e.num_frames()}});
  return {{"format", "NRV1"}, {"version", kContainerVersion}, {"dim", d.dim}, {"episodes", episodes}};
}

inline void write_container(const Dataset& d, const std::filesystem::path& path) {
  io::write_file(path, encode_container(d));
  io::write_file(manifest_path(path), manifest_json(d).dump(2) + "\n");
}

inline Dataset read_container(const std::filesystem::path& path) {
  return decode_container(io::read_file(path));
}

// Batches for one epoch: floor(n / batch_size) full batches, remainder dropped.
// The shuffle order depends only on (seed, epoch).
inline std::vector<Batch> batch_iter(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                     bool shuffle, std::size_t epoch = 0) {
  if (batch_size == 0) throw UsageError("batch size must be positive");
  if (batch_size > n)
    throw UsageError("batch size " + std::to_string(batch_size) + " exceeds dataset size " +
                     std::to_string(n));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle) {
    Rng rng(mix_seed(seed, epoch));
    rng.shuffle(std::span<std::size_t>(order));
  }
  std::vector<Batch> batches;
  for (std::size_t b = 0; b + batch_size <= n; b += batch_size)
    batches.push_back(Batch{{order.begin() + static_cast<std::ptrdiff_t>(b),
                             order.begin() + static_cast<std::ptrdiff_t>(b + batch_size)}});
  return batches;
}

}  // namespace narvid
