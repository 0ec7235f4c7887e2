#pragma once

// Binary session checkpoints.
//
// Layout (all integers little-endian, reals IEEE-754 binary64):
//   "GNE1"                 magic
//   u32 version            currently 1
//   u8  model kind         0 = GNE, 1 = VAE
//   model config           GNE: u64 n, u64 d, u64 width, u64 blocks, f64 sigma, u64 out
//                          VAE: u64 in, u64 d, u64 width, u64 blocks, f64 coeff, f64 kl
//   train config           f64 lr, u64 batch, u64 epochs, u64 seed, u8 shuffle,
//                          u64 eval_every, f64 lr_decay
//   rng                    u64 seed, u64 stream, u64 counter
//   u64 epoch
//   adam                   f64 lr, f64 beta1, f64 beta2, f64 eps, u64 t
//   pins                   u64 count, count × u64
//   history                u64 count, count × (u64 epoch, f64 mse, f64 wall, u8 has_eval, f64 eval)
//   dataset meta           str origin, u64 image_rows, u64 image_cols
//   labels                 u8 present, u64 count, count × i64
//   tensors                u32 count, count × (str name, u64 rows, u64 cols, rows·cols × f64)
// where str is u32 length + bytes. Tensors are "data", every model parameter
// in store order, then "adam.m/<name>" and "adam.v/<name>" per parameter.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "gne/dataset.hpp"
#include "gne/errors.hpp"
#include "gne/trainer.hpp"

namespace gne {

inline constexpr char kCheckpointMagic[4] = {'G', 'N', 'E', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.append(s);
  }
  void raw(std::string_view s) { out_.append(s); }
  void tensor(std::string_view name, const Matrix& m) {
    str(name);
    u64(m.rows());
    u64(m.cols());
    for (double v : m.values()) f64(v);
  }
  std::string take() { return std::move(out_); }

private:
  std::string out_;
};

class ByteReader {
public:
  explicit ByteReader(std::string_view bytes) : b_(bytes) {}

  std::size_t offset() const noexcept { return pos_; }
  bool at_end() const noexcept { return pos_ == b_.size(); }

  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(b_[pos_++]);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{static_cast<std::uint8_t>(b_[pos_++])} << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{static_cast<std::uint8_t>(b_[pos_++])} << (8 * i);
    return v;
  }
  std::int64_t i64(const char* what) { return static_cast<std::int64_t>(u64(what)); }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s(b_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string_view raw(std::size_t n, const char* what) {
    need(n, what);
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Matrix tensor(const std::string& expected_name) {
    const std::size_t at = pos_;
    const std::string name = str("tensor name");
    if (name != expected_name) {
      throw ParseError("checkpoint: expected tensor '" + expected_name + "' at offset " +
                       std::to_string(at) + ", found '" + name + "'");
    }
    const std::uint64_t rows = u64("tensor rows");
    const std::uint64_t cols = u64("tensor cols");
    if (cols != 0 && rows > (b_.size() - pos_) / 8 / cols) {
      throw ParseError("checkpoint: tensor '" + name + "' (" + std::to_string(rows) + "x" +
                       std::to_string(cols) + ") overruns the file at offset " + std::to_string(pos_));
    }
    std::vector<double> data(rows * cols);
    for (double& v : data) v = f64("tensor data");
    return Matrix(rows, cols, std::move(data));
  }
  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError("checkpoint: " + msg + " at offset " + std::to_string(pos_));
  }

private:
  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) {
      throw ParseError("checkpoint: truncated at offset " + std::to_string(pos_) + " while reading " +
                       what + " (need " + std::to_string(n) + " bytes, " +
                       std::to_string(b_.size() - pos_) + " left)");
    }
  }

  std::string_view b_;
  std::size_t pos_ = 0;
};

} // namespace detail

inline std::string serialize_checkpoint(const Session& s) {
  detail::ByteWriter w;
  w.raw(std::string_view(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  if (const auto* g = std::get_if<GneModel>(&s.model)) {
    w.u8(0);
    w.u64(g->cfg.n_points);
    w.u64(g->cfg.embed_dim);
    w.u64(g->cfg.width);
    w.u64(g->cfg.n_res_blocks);
    w.f64(g->cfg.noise_sigma);
    w.u64(g->cfg.out_dim);
  } else {
    const VaeConfig& c = s.vae().cfg;
    w.u8(1);
    w.u64(c.in_dim);
    w.u64(c.latent_dim);
    w.u64(c.width);
    w.u64(c.n_res_blocks);
    w.f64(c.noise_coeff);
    w.f64(c.kl_weight);
  }
  w.f64(s.cfg.lr);
  w.u64(s.cfg.batch_size);
  w.u64(s.cfg.epochs);
  w.u64(s.cfg.seed);
  w.u8(s.cfg.shuffle ? 1 : 0);
  w.u64(s.cfg.eval_every);
  w.f64(s.cfg.lr_decay);
  w.u64(s.rng.seed());
  w.u64(s.rng.stream());
  w.u64(s.rng.counter());
  w.u64(s.epoch);
  w.f64(s.adam.lr);
  w.f64(s.adam.beta1);
  w.f64(s.adam.beta2);
  w.f64(s.adam.eps);
  w.u64(s.adam.t);
  w.u64(s.pins.rows.size());
  for (std::size_t r : s.pins.rows) w.u64(r);
  w.u64(s.history.size());
  for (const auto& h : s.history) {
    w.u64(h.epoch);
    w.f64(h.train_mse);
    w.f64(h.wall_seconds);
    w.u8(h.eval_mse ? 1 : 0);
    w.f64(h.eval_mse.value_or(0.0));
  }
  w.str(s.dataset.meta.origin);
  w.u64(s.dataset.meta.image_rows);
  w.u64(s.dataset.meta.image_cols);
  w.u8(s.dataset.labels ? 1 : 0);
  const auto& labels = s.dataset.labels;
  w.u64(labels ? labels->size() : 0);
  if (labels) {
    for (auto l : *labels) w.i64(l);
  }
  const ParamStore& params = s.params();
  w.u32(static_cast<std::uint32_t>(1 + 3 * params.size()));
  w.tensor("data", s.dataset.data);
  for (const auto& p : params) w.tensor(p.name, p.value);
  for (std::size_t i = 0; i < params.size(); ++i) {
    w.tensor("adam.m/" + params.at(i).name, s.adam.m.at(i));
    w.tensor("adam.v/" + params.at(i).name, s.adam.v.at(i));
  }
  return w.take();
}

/// Parses a checkpoint image; nothing is returned unless the whole file is
/// well formed.
inline Session parse_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (bytes.size() < 4 || bytes.substr(0, 4) != std::string_view(kCheckpointMagic, 4)) {
    throw ParseError("checkpoint: expected magic 'GNE1' at offset 0");
  }
  r.raw(4, "magic");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw ParseError("checkpoint: unsupported version " + std::to_string(version) + " at offset 4 (expected " +
                     std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint8_t kind = r.u8("model kind");
  Session s;
  RngStream scratch(0);
  if (kind == 0) {
    GneConfig c;
    c.n_points = r.u64("n_points");
    c.embed_dim = r.u64("embed_dim");
    c.width = r.u64("width");
    c.n_res_blocks = r.u64("n_res_blocks");
    c.noise_sigma = r.f64("noise_sigma");
    c.out_dim = r.u64("out_dim");
    if (c.n_points > bytes.size() || c.out_dim > bytes.size() || c.width > bytes.size() ||
        c.n_res_blocks > bytes.size()) {
      r.fail("implausible GNE dimensions");
    }
    try {
      s.model = build_gne(c, scratch);
    } catch (const ConfigError& e) {
      r.fail(e.what());
    }
  } else if (kind == 1) {
    VaeConfig c;
    c.in_dim = r.u64("in_dim");
    c.latent_dim = r.u64("latent_dim");
    c.width = r.u64("width");
    c.n_res_blocks = r.u64("n_res_blocks");
    c.noise_coeff = r.f64("noise_coeff");
    c.kl_weight = r.f64("kl_weight");
    if (c.in_dim > bytes.size() || c.width > bytes.size() || c.n_res_blocks > bytes.size()) {
      r.fail("implausible VAE dimensions");
    }
    try {
      s.model = build_vae(c, scratch);
    } catch (const ConfigError& e) {
      r.fail(e.what());
    }
  } else {
    r.fail("unknown model kind " + std::to_string(kind));
  }
  s.cfg.lr = r.f64("lr");
  s.cfg.batch_size = r.u64("batch_size");
  s.cfg.epochs = r.u64("epochs");
  s.cfg.seed = r.u64("seed");
  s.cfg.shuffle = r.u8("shuffle") != 0;
  s.cfg.eval_every = r.u64("eval_every");
  s.cfg.lr_decay = r.f64("lr_decay");
  {
    const std::uint64_t seed = r.u64("rng seed");
    const std::uint64_t stream = r.u64("rng stream");
    const std::uint64_t counter = r.u64("rng counter");
    s.rng = RngStream(seed, stream, counter);
  }
  s.epoch = r.u64("epoch");
  s.adam.lr = r.f64("adam lr");
  s.adam.beta1 = r.f64("adam beta1");
  s.adam.beta2 = r.f64("adam beta2");
  s.adam.eps = r.f64("adam eps");
  s.adam.t = r.u64("adam t");
  const std::uint64_t n_pins = r.u64("pin count");
  if (n_pins > bytes.size()) r.fail("implausible pin count");
  for (std::uint64_t i = 0; i < n_pins; ++i) s.pins.rows.insert(r.u64("pin id"));
  const std::uint64_t n_hist = r.u64("history count");
  if (n_hist > bytes.size()) r.fail("implausible history length");
  for (std::uint64_t i = 0; i < n_hist; ++i) {
    HistoryEntry h;
    h.epoch = r.u64("history epoch");
    h.train_mse = r.f64("history mse");
    h.wall_seconds = r.f64("history wall");
    const bool has_eval = r.u8("history eval flag") != 0;
    const double ev = r.f64("history eval");
    if (has_eval) h.eval_mse = ev;
    s.history.push_back(h);
  }
  s.dataset.meta.origin = r.str("dataset origin");
  s.dataset.meta.image_rows = r.u64("image rows");
  s.dataset.meta.image_cols = r.u64("image cols");
  const bool has_labels = r.u8("labels flag") != 0;
  const std::uint64_t n_labels = r.u64("label count");
  if (n_labels > bytes.size()) r.fail("implausible label count");
  if (has_labels) {
    std::vector<std::int64_t> labels(n_labels);
    for (auto& l : labels) l = r.i64("label");
    s.dataset.labels = std::move(labels);
  }

  ParamStore& params = s.params();
  const std::uint32_t n_tensors = r.u32("tensor count");
  if (n_tensors != 1 + 3 * params.size()) {
    r.fail("tensor count " + std::to_string(n_tensors) + " does not match model (" +
           std::to_string(1 + 3 * params.size()) + ")");
  }
  s.dataset.data = r.tensor("data");
  auto check_shape = [&](const Matrix& got, const Matrix& want, const std::string& name) {
    if (!got.same_shape(want)) {
      r.fail("tensor '" + name + "' has shape " + got.shape() + ", model expects " + want.shape());
    }
  };
  for (auto& p : params) {
    Matrix v = r.tensor(p.name);
    check_shape(v, p.value, p.name);
    p.value = std::move(v);
  }
  s.adam.m.clear();
  s.adam.v.clear();
  for (const auto& p : params) {
    Matrix m = r.tensor("adam.m/" + p.name);
    check_shape(m, p.value, "adam.m/" + p.name);
    Matrix v = r.tensor("adam.v/" + p.name);
    check_shape(v, p.value, "adam.v/" + p.name);
    s.adam.m.push_back(std::move(m));
    s.adam.v.push_back(std::move(v));
  }
  if (!r.at_end()) r.fail("trailing bytes after last tensor");
  try {
    validate_session(s);
    s.dataset.validate();
  } catch (const Error& e) {
    throw ParseError(std::string("checkpoint: inconsistent session: ") + e.what());
  }
  return s;
}

inline void save_checkpoint(const Session& s, const std::string& path) {
  const std::string bytes = serialize_checkpoint(s);
  detail::write_file(path, std::vector<unsigned char>(bytes.begin(), bytes.end()));
}

inline Session load_checkpoint(const std::string& path) {
  const auto b = detail::read_file(path);
  return parse_checkpoint(std::string_view(reinterpret_cast<const char*>(b.data()), b.size()));
}

/// FNV-1a over the checkpoint image: a cheap fingerprint of the full session state.
inline std::uint64_t session_digest(const Session& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : serialize_checkpoint(s)) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

} // namespace gne
