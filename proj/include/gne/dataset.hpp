#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gne/errors.hpp"
#include "gne/matrix.hpp"
#include "gne/rng.hpp"

namespace gne {

struct SourceMeta {
  std::string origin;
  std::size_t image_rows = 0; // 0 when the table is not image-shaped
  std::size_t image_cols = 0;
};

/// N×D reconstruction targets in [0,1] with optional integer labels.
struct DatasetTable {
  Matrix data;
  std::optional<std::vector<std::int64_t>> labels;
  SourceMeta meta;

  std::size_t n() const noexcept { return data.rows(); }
  std::size_t dim() const noexcept { return data.cols(); }

  /// Cell shape for image sheets: the recorded image shape, else a square when
  /// dim is a perfect square, else a single row.
  std::pair<std::size_t, std::size_t> cell_shape() const {
    if (meta.image_rows * meta.image_cols == dim() && meta.image_rows > 0) {
      return {meta.image_rows, meta.image_cols};
    }
    const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(dim()))));
    if (side * side == dim()) return {side, side};
    return {1, dim()};
  }

  void validate() const {
    for (double v : data.values()) {
      if (!(v >= 0.0 && v <= 1.0)) throw DomainError("dataset entry outside [0,1]: " + std::to_string(v));
    }
    if (labels && labels->size() != n()) {
      throw FormatError("label count " + std::to_string(labels->size()) + " does not match " +
                        std::to_string(n()) + " rows");
    }
  }

  /// Attach labels read separately; counts must agree.
  void attach_labels(std::vector<std::int64_t> l) {
    if (l.size() != n()) {
      throw FormatError("label file has " + std::to_string(l.size()) + " entries but dataset has " +
                        std::to_string(n()) + " rows");
    }
    labels = std::move(l);
  }
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

inline void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  b.push_back(static_cast<unsigned char>(v >> 24));
  b.push_back(static_cast<unsigned char>(v >> 16));
  b.push_back(static_cast<unsigned char>(v >> 8));
  b.push_back(static_cast<unsigned char>(v));
}

inline std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08X", v);
  return buf;
}

inline void check_idx_header(const std::vector<unsigned char>& b, std::uint32_t expected,
                             std::size_t header_len, const std::string& path) {
  if (b.size() < 4) throw LengthError("'" + path + "': file too short for IDX magic");
  const std::uint32_t magic = be32(b, 0);
  if (magic != expected) {
    throw FormatError("'" + path + "': bad IDX magic " + hex32(magic) + ", expected " + hex32(expected));
  }
  if (b.size() < header_len) {
    throw LengthError("'" + path + "': truncated IDX header (" + std::to_string(b.size()) +
                      " bytes, need " + std::to_string(header_len) + ")");
  }
}

} // namespace detail

/// Big-endian IDX image container → rows of pixels/255.
inline DatasetTable parse_idx_images(const std::vector<unsigned char>& b, const std::string& origin) {
  detail::check_idx_header(b, kIdxImageMagic, 16, origin);
  const std::size_t n = detail::be32(b, 4);
  const std::size_t rows = detail::be32(b, 8);
  const std::size_t cols = detail::be32(b, 12);
  const std::size_t payload = n * rows * cols;
  if (b.size() - 16 < payload) {
    throw LengthError("'" + origin + "': truncated IDX payload (" + std::to_string(b.size() - 16) +
                      " bytes, need " + std::to_string(payload) + ")");
  }
  DatasetTable t;
  t.data = Matrix(n, rows * cols);
  auto v = t.data.values();
  for (std::size_t i = 0; i < payload; ++i) v[i] = static_cast<double>(b[16 + i]) / 255.0;
  t.meta = SourceMeta{origin, rows, cols};
  return t;
}

inline DatasetTable read_idx_images(const std::string& path) {
  return parse_idx_images(detail::read_file(path), path);
}

inline std::vector<std::int64_t> parse_idx_labels(const std::vector<unsigned char>& b,
                                                  const std::string& origin) {
  detail::check_idx_header(b, kIdxLabelMagic, 8, origin);
  const std::size_t n = detail::be32(b, 4);
  if (b.size() - 8 < n) {
    throw LengthError("'" + origin + "': truncated IDX labels (" + std::to_string(b.size() - 8) +
                      " bytes, need " + std::to_string(n) + ")");
  }
  std::vector<std::int64_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = b[8 + i];
  return out;
}

inline std::vector<std::int64_t> read_idx_labels(const std::string& path) {
  return parse_idx_labels(detail::read_file(path), path);
}

/// IDX image bytes for raw pixels (n images of rows×cols). Fixture helper.
inline std::vector<unsigned char> encode_idx_images(std::size_t n, std::size_t rows, std::size_t cols,
                                                    const std::vector<unsigned char>& pixels) {
  if (pixels.size() != n * rows * cols) throw ShapeError("encode_idx_images: pixel count mismatch");
  std::vector<unsigned char> b;
  detail::put_be32(b, kIdxImageMagic);
  detail::put_be32(b, static_cast<std::uint32_t>(n));
  detail::put_be32(b, static_cast<std::uint32_t>(rows));
  detail::put_be32(b, static_cast<std::uint32_t>(cols));
  b.insert(b.end(), pixels.begin(), pixels.end());
  return b;
}

inline std::vector<unsigned char> encode_idx_labels(const std::vector<unsigned char>& labels) {
  std::vector<unsigned char> b;
  detail::put_be32(b, kIdxLabelMagic);
  detail::put_be32(b, static_cast<std::uint32_t>(labels.size()));
  b.insert(b.end(), labels.begin(), labels.end());
  return b;
}

/// Writes a table back as IDX; values are mapped to bytes by round(v·255), so
/// tables read from IDX round-trip byte-exactly.
inline void write_idx_images(const DatasetTable& t, const std::string& path) {
  auto [rows, cols] = t.cell_shape();
  std::vector<unsigned char> px(t.data.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = static_cast<unsigned char>(std::lround(t.data.values()[i] * 255.0));
  }
  detail::write_file(path, encode_idx_images(t.n(), rows, cols, px));
}

inline void write_idx_labels(const std::vector<std::int64_t>& labels, const std::string& path) {
  std::vector<unsigned char> b(labels.size());
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (labels[i] < 0 || labels[i] > 255) throw DomainError("IDX labels must fit in a byte");
    b[i] = static_cast<unsigned char>(labels[i]);
  }
  detail::write_file(path, encode_idx_labels(b));
}

// ---------------------------------------------------------------- synthetic

struct SynthSpec {
  std::size_t k = 4;
  std::size_t per_cluster = 16;
  std::size_t dim = 16;
  double spread = 0.03;
  std::uint64_t seed = 7;
};

inline SynthSpec synth_spec_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synthetic spec is not valid JSON: ") + e.what());
  }
  SynthSpec s;
  try {
    s.k = j.at("k").get<std::size_t>();
    s.per_cluster = j.at("per_cluster").get<std::size_t>();
    s.dim = j.at("dim").get<std::size_t>();
    s.spread = j.at("spread").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synthetic spec needs k, per_cluster, dim, spread, seed: ") + e.what());
  }
  return s;
}

/// k Gaussian clusters with centres in U(0.25, 0.75)^dim, clipped to [0,1].
/// Rows are ordered cluster by cluster; labels are cluster indices.
inline DatasetTable synth_blobs(const SynthSpec& s) {
  if (s.k < 1) throw DomainError("synth_blobs: k must be >= 1");
  if (s.dim < 2) throw DomainError("synth_blobs: dim must be >= 2");
  if (!(s.spread > 0.0 && s.spread < 0.5)) throw DomainError("synth_blobs: spread must lie in (0, 0.5)");
  RngStream rng(s.seed, 0x5EED);
  Matrix centres(s.k, s.dim);
  for (double& c : centres.values()) c = 0.25 + 0.5 * rng.next_unit();
  DatasetTable t;
  t.data = Matrix(s.k * s.per_cluster, s.dim);
  t.labels.emplace();
  for (std::size_t c = 0; c < s.k; ++c) {
    for (std::size_t i = 0; i < s.per_cluster; ++i) {
      auto row = t.data.row(c * s.per_cluster + i);
      for (std::size_t j = 0; j < s.dim; ++j) {
        row[j] = std::clamp(centres(c, j) + s.spread * rng.next_gaussian(), 0.0, 1.0);
      }
      t.labels->push_back(static_cast<std::int64_t>(c));
    }
  }
  std::ostringstream origin;
  origin << "synth:k=" << s.k << ",per_cluster=" << s.per_cluster << ",dim=" << s.dim
         << ",spread=" << s.spread << ",seed=" << s.seed;
  t.meta.origin = origin.str();
  return t;
}

inline DatasetTable synth_blobs(std::size_t k, std::size_t per_cluster, std::size_t dim, double spread,
                                std::uint64_t seed) {
  return synth_blobs(SynthSpec{k, per_cluster, dim, spread, seed});
}

// ---------------------------------------------------------------------- CSV

inline std::string format_g9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

/// `id,x,y,label` per row; label is left empty when absent.
inline std::string embeddings_csv(const Matrix& embed, const std::optional<std::vector<std::int64_t>>& labels) {
  if (embed.cols() != 2) throw ShapeError("embedding CSV needs N×2 embeddings, got " + embed.shape());
  if (labels && labels->size() != embed.rows()) throw ShapeError("label count does not match embeddings");
  std::string out = "id,x,y,label\n";
  for (std::size_t i = 0; i < embed.rows(); ++i) {
    out += std::to_string(i);
    out += ',';
    out += format_g9(embed(i, 0));
    out += ',';
    out += format_g9(embed(i, 1));
    out += ',';
    if (labels) out += std::to_string((*labels)[i]);
    out += '\n';
  }
  return out;
}

inline void export_embeddings_csv(const Matrix& embed,
                                  const std::optional<std::vector<std::int64_t>>& labels,
                                  const std::string& path) {
  const std::string text = embeddings_csv(embed, labels);
  detail::write_file(path, std::vector<unsigned char>(text.begin(), text.end()));
}

struct EmbeddingCsv {
  Matrix embed;
  std::vector<std::optional<std::int64_t>> labels;
};

inline EmbeddingCsv parse_embeddings_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "id,x,y,label") throw ParseError("embedding CSV: bad header");
  std::vector<double> xy;
  EmbeddingCsv out;
  std::size_t expected_id = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 4) throw ParseError("embedding CSV: expected 4 fields in '" + line + "'");
    if (std::stoull(f[0]) != expected_id++) throw ParseError("embedding CSV: ids out of order");
    xy.push_back(std::stod(f[1]));
    xy.push_back(std::stod(f[2]));
    out.labels.push_back(f[3].empty() ? std::nullopt : std::optional<std::int64_t>(std::stoll(f[3])));
  }
  const std::size_t rows = xy.size() / 2;
  out.embed = Matrix(rows, 2, std::move(xy));
  return out;
}

} // namespace gne
