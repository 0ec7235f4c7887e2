#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gne/dataset.hpp"
#include "gne/errors.hpp"
#include "gne/matrix.hpp"
#include "gne/models.hpp"

namespace gne {

struct Extent {
  double x_min = 0, x_max = 0, y_min = 0, y_max = 0;
  friend bool operator==(const Extent&, const Extent&) = default;
};

struct GridSpec {
  double x_min = -1, x_max = 1, y_min = -1, y_max = 1;
  std::size_t nx = 20, ny = 20;
  std::size_t cell_h = 1, cell_w = 1;

  void validate() const {
    if (!(x_min < x_max) || !(y_min < y_max)) throw ConfigError("grid extent must satisfy min < max");
    if (!std::isfinite(x_min) || !std::isfinite(x_max) || !std::isfinite(y_min) || !std::isfinite(y_max)) {
      throw ConfigError("grid extent must be finite");
    }
    if (nx < 1 || ny < 1) throw ConfigError("grid needs nx, ny >= 1");
    if (cell_h < 1 || cell_w < 1) throw ConfigError("grid cell dimensions must be >= 1");
  }

  /// Latent x of column j; a single column sits at the midpoint.
  double x_at(std::size_t j) const {
    if (nx == 1) return 0.5 * (x_min + x_max);
    return x_min + static_cast<double>(j) * (x_max - x_min) / static_cast<double>(nx - 1);
  }

  /// Latent y of row i; row 0 is the top of the sheet (y_max).
  double y_at(std::size_t i) const {
    if (ny == 1) return 0.5 * (y_min + y_max);
    return y_max - static_cast<double>(i) * (y_max - y_min) / static_cast<double>(ny - 1);
  }

  void set_extent(const Extent& e) {
    x_min = e.x_min;
    x_max = e.x_max;
    y_min = e.y_min;
    y_max = e.y_max;
  }
};

/// Reads the JSON keys x_min, x_max, y_min, y_max, nx, ny. Missing extent keys
/// keep the values already in `base`.
inline GridSpec grid_spec_from_json(const std::string& text, GridSpec base = {}) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("grid spec is not valid JSON: ") + e.what());
  }
  try {
    if (j.contains("x_min")) base.x_min = j["x_min"].get<double>();
    if (j.contains("x_max")) base.x_max = j["x_max"].get<double>();
    if (j.contains("y_min")) base.y_min = j["y_min"].get<double>();
    if (j.contains("y_max")) base.y_max = j["y_max"].get<double>();
    if (j.contains("nx")) base.nx = j["nx"].get<std::size_t>();
    if (j.contains("ny")) base.ny = j["ny"].get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("grid spec: ") + e.what());
  }
  return base;
}

struct ImageSheet {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels; // row-major, height·width

  ImageSheet() = default;
  ImageSheet(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w, 0) {}

  std::uint8_t& at(std::size_t r, std::size_t c) { return pixels[r * width + c]; }
  std::uint8_t at(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }

  friend bool operator==(const ImageSheet&, const ImageSheet&) = default;
};

/// [0,1] intensity → byte, half-up rounding (0.5 → 128).
inline std::uint8_t to_gray(double v) {
  const double s = std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
  return static_cast<std::uint8_t>(s);
}

namespace detail {

inline void blit(ImageSheet& sheet, std::size_t cell_i, std::size_t cell_j, std::size_t cell_h,
                 std::size_t cell_w, std::span<const double> values) {
  for (std::size_t r = 0; r < cell_h; ++r) {
    for (std::size_t c = 0; c < cell_w; ++c) {
      sheet.at(cell_i * cell_h + r, cell_j * cell_w + c) = to_gray(values[r * cell_w + c]);
    }
  }
}

} // namespace detail

/// Single cell image for an arbitrary latent point.
template <typename M>
ImageSheet decode_cell(const M& model, double x, double y, std::size_t cell_h, std::size_t cell_w) {
  if (latent_dim(model) != 2) throw ConfigError("decode cell needs a 2-D latent space");
  if (output_dim(model) != cell_h * cell_w) {
    throw ConfigError("decoder output " + std::to_string(output_dim(model)) + " does not fill a " +
                      std::to_string(cell_h) + "x" + std::to_string(cell_w) + " cell");
  }
  const double z[2] = {x, y};
  const auto out = decode_point(model, z);
  ImageSheet cell(cell_h, cell_w);
  detail::blit(cell, 0, 0, cell_h, cell_w, out);
  return cell;
}

/// Decoder outputs at every grid point, tiled into one sheet.
template <typename M>
ImageSheet decode_grid(const M& model, const GridSpec& spec) {
  spec.validate();
  if (latent_dim(model) != 2) throw ConfigError("decode grid needs a 2-D latent space");
  if (output_dim(model) != spec.cell_h * spec.cell_w) {
    throw ConfigError("decoder output " + std::to_string(output_dim(model)) + " does not fill a " +
                      std::to_string(spec.cell_h) + "x" + std::to_string(spec.cell_w) + " cell");
  }
  Matrix z(spec.nx * spec.ny, 2);
  for (std::size_t i = 0; i < spec.ny; ++i) {
    for (std::size_t j = 0; j < spec.nx; ++j) {
      z(i * spec.nx + j, 0) = spec.x_at(j);
      z(i * spec.nx + j, 1) = spec.y_at(i);
    }
  }
  const Matrix out = decode_batch(model, z);
  ImageSheet sheet(spec.ny * spec.cell_h, spec.nx * spec.cell_w);
  for (std::size_t i = 0; i < spec.ny; ++i) {
    for (std::size_t j = 0; j < spec.nx; ++j) {
      detail::blit(sheet, i, j, spec.cell_h, spec.cell_w, out.row(i * spec.nx + j));
    }
  }
  return sheet;
}

/// Index of the embedding nearest to (x, y); ties go to the lowest id.
inline std::size_t nearest_id(const Matrix& embeddings, double x, double y) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < embeddings.rows(); ++r) {
    const double dx = embeddings(r, 0) - x;
    const double dy = embeddings(r, 1) - y;
    const double d = dx * dx + dy * dy;
    if (d < best_d) {
      best_d = d;
      best = r;
    }
  }
  return best;
}

/// Ids shown in each cell of an nn_grid sheet, row-major over (ny, nx).
inline std::vector<std::size_t> nn_grid_ids(const Matrix& embeddings, const GridSpec& spec) {
  spec.validate();
  if (embeddings.rows() == 0) throw DomainError("nearest-neighbour grid needs at least one point");
  if (embeddings.cols() != 2) throw ShapeError("nearest-neighbour grid needs N×2 embeddings");
  std::vector<std::size_t> ids(spec.nx * spec.ny);
  for (std::size_t i = 0; i < spec.ny; ++i)
    for (std::size_t j = 0; j < spec.nx; ++j)
      ids[i * spec.nx + j] = nearest_id(embeddings, spec.x_at(j), spec.y_at(i));
  return ids;
}

/// Real data rows whose embeddings are nearest to each grid point.
inline ImageSheet nn_grid(const Matrix& embeddings, const DatasetTable& data, const GridSpec& spec) {
  if (data.n() == 0) throw DomainError("nearest-neighbour grid needs a non-empty dataset");
  if (embeddings.rows() != data.n()) {
    throw ShapeError("embeddings have " + std::to_string(embeddings.rows()) + " rows, dataset " +
                     std::to_string(data.n()));
  }
  if (data.dim() != spec.cell_h * spec.cell_w) {
    throw ConfigError("dataset rows of width " + std::to_string(data.dim()) + " do not fill a " +
                      std::to_string(spec.cell_h) + "x" + std::to_string(spec.cell_w) + " cell");
  }
  const auto ids = nn_grid_ids(embeddings, spec);
  ImageSheet sheet(spec.ny * spec.cell_h, spec.nx * spec.cell_w);
  for (std::size_t i = 0; i < spec.ny; ++i)
    for (std::size_t j = 0; j < spec.nx; ++j)
      detail::blit(sheet, i, j, spec.cell_h, spec.cell_w, data.data.row(ids[i * spec.nx + j]));
  return sheet;
}

/// Bounding box with a 5% margin per side; a degenerate axis becomes value ± 0.5.
inline Extent auto_extent(const Matrix& embeddings) {
  if (embeddings.rows() == 0) throw DomainError("auto_extent needs at least one point");
  if (embeddings.cols() != 2) throw ShapeError("auto_extent needs N×2 embeddings");
  if (!embeddings.all_finite()) throw DomainError("auto_extent: non-finite embedding");
  double lo[2] = {embeddings(0, 0), embeddings(0, 1)};
  double hi[2] = {lo[0], lo[1]};
  for (std::size_t r = 0; r < embeddings.rows(); ++r) {
    for (int a = 0; a < 2; ++a) {
      lo[a] = std::min(lo[a], embeddings(r, a));
      hi[a] = std::max(hi[a], embeddings(r, a));
    }
  }
  double out_lo[2], out_hi[2];
  for (int a = 0; a < 2; ++a) {
    if (hi[a] == lo[a]) {
      out_lo[a] = lo[a] - 0.5;
      out_hi[a] = hi[a] + 0.5;
    } else {
      const double m = 0.05 * (hi[a] - lo[a]);
      out_lo[a] = lo[a] - m;
      out_hi[a] = hi[a] + m;
    }
  }
  return {out_lo[0], out_hi[0], out_lo[1], out_hi[1]};
}

// ---------------------------------------------------------------------- PGM

inline std::string encode_pgm(const ImageSheet& sheet) {
  std::string out = "P5\n" + std::to_string(sheet.width) + " " + std::to_string(sheet.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(sheet.pixels.data()), sheet.pixels.size());
  return out;
}

inline void write_pgm(const ImageSheet& sheet, const std::string& path) {
  const std::string bytes = encode_pgm(sheet);
  detail::write_file(path, std::vector<unsigned char>(bytes.begin(), bytes.end()));
}

/// Parses binary PGM (P5, maxval 255) as written by encode_pgm; comments are
/// not supported.
inline ImageSheet parse_pgm(const std::string& bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw ParseError("PGM: unexpected end of header at offset " + std::to_string(pos));
    return bytes.substr(start, pos - start);
  };
  if (token() != "P5") throw ParseError("PGM: expected magic P5 at offset 0");
  const std::size_t w = std::stoul(token());
  const std::size_t h = std::stoul(token());
  if (token() != "255") throw ParseError("PGM: only maxval 255 is supported");
  ++pos; // single whitespace after maxval
  if (bytes.size() - pos != w * h) {
    throw ParseError("PGM: payload is " + std::to_string(bytes.size() - pos) + " bytes, expected " +
                     std::to_string(w * h));
  }
  ImageSheet s(h, w);
  std::copy(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end(), s.pixels.begin());
  return s;
}

inline ImageSheet read_pgm(const std::string& path) {
  const auto b = detail::read_file(path);
  return parse_pgm(std::string(b.begin(), b.end()));
}

} // namespace gne
