#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "gne/adam.hpp"
#include "gne/dataset.hpp"
#include "gne/errors.hpp"
#include "gne/layers.hpp"
#include "gne/models.hpp"
#include "gne/rng.hpp"

namespace gne {

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 1024;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  bool shuffle = true;
  std::size_t eval_every = 0; // 0 disables the eval-mode MSE pass
  double lr_decay = 1.0;      // multiplicative, applied after each epoch

  void validate() const {
    if (batch_size < 1) throw ConfigError("TrainConfig.batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("TrainConfig.epochs must be >= 1");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("TrainConfig.lr must be finite and >= 0");
    if (!(lr_decay > 0.0) || !std::isfinite(lr_decay)) throw ConfigError("TrainConfig.lr_decay must be > 0");
  }
};

struct HistoryEntry {
  std::size_t epoch = 0;
  double train_mse = 0.0; // running mean of training-mode batch losses
  double wall_seconds = 0.0;
  std::optional<double> eval_mse;
};

/// Compares loss histories ignoring wall-clock time.
inline bool same_losses(const std::vector<HistoryEntry>& a, const std::vector<HistoryEntry>& b) {
  return std::equal(a.begin(), a.end(), b.begin(), b.end(), [](const auto& x, const auto& y) {
    return x.epoch == y.epoch && x.train_mse == y.train_mse && x.eval_mse == y.eval_mse;
  });
}

struct EpochReport {
  std::size_t epoch = 0;
  double mean_train_mse = 0.0;
  double wall_seconds = 0.0;
  std::size_t batches = 0;
  std::optional<double> eval_mse;
};

/// Everything needed to continue training: the unit of checkpointing.
struct Session {
  DatasetTable dataset;
  Model model;
  AdamState adam;
  PinMask pins;
  RngStream rng;
  std::size_t epoch = 0;
  std::vector<HistoryEntry> history;
  TrainConfig cfg;

  bool is_gne() const { return std::holds_alternative<GneModel>(model); }
  GneModel& gne() { return std::get<GneModel>(model); }
  const GneModel& gne() const { return std::get<GneModel>(model); }
  VaeModel& vae() { return std::get<VaeModel>(model); }
  const VaeModel& vae() const { return std::get<VaeModel>(model); }
  ParamStore& params() {
    return std::visit([](auto& m) -> ParamStore& { return m.params; }, model);
  }
  const ParamStore& params() const {
    return std::visit([](const auto& m) -> const ParamStore& { return m.params; }, model);
  }
};

// Streams split from the run seed: 0 initialises weights, 1 drives shuffling
// and training noise.
inline constexpr std::uint64_t kInitStream = 0;
inline constexpr std::uint64_t kTrainStream = 1;

inline Session make_session(DatasetTable dataset, Model model, const TrainConfig& cfg) {
  cfg.validate();
  Session s;
  s.dataset = std::move(dataset);
  s.model = std::move(model);
  s.adam = AdamState::for_params(s.params(), cfg.lr);
  s.rng = RngStream(cfg.seed, kTrainStream);
  s.cfg = cfg;
  return s;
}

/// GNE session; n_points and out_dim are taken from the dataset.
inline Session make_gne_session(DatasetTable dataset, GneConfig gcfg, const TrainConfig& cfg) {
  gcfg.n_points = dataset.n();
  gcfg.out_dim = dataset.dim();
  RngStream init(cfg.seed, kInitStream);
  GneModel m = build_gne(gcfg, init);
  return make_session(std::move(dataset), std::move(m), cfg);
}

/// VAE session; in_dim is taken from the dataset.
inline Session make_vae_session(DatasetTable dataset, VaeConfig vcfg, const TrainConfig& cfg) {
  vcfg.in_dim = dataset.dim();
  RngStream init(cfg.seed, kInitStream);
  VaeModel m = build_vae(vcfg, init);
  return make_session(std::move(dataset), std::move(m), cfg);
}

inline void validate_session(const Session& s) {
  const std::size_t n = s.dataset.n();
  const std::size_t d = s.dataset.dim();
  if (n == 0) throw StateError("session dataset is empty");
  if (const auto* g = std::get_if<GneModel>(&s.model)) {
    if (g->cfg.n_points != n || g->cfg.out_dim != d) {
      throw StateError("GNE model is " + std::to_string(g->cfg.n_points) + " points × " +
                       std::to_string(g->cfg.out_dim) + " but dataset is " + s.dataset.data.shape());
    }
  } else if (s.vae().cfg.in_dim != d) {
    throw StateError("VAE input width " + std::to_string(s.vae().cfg.in_dim) + " but dataset width " +
                     std::to_string(d));
  }
  s.adam.validate(s.params());
  if (!s.pins.empty() && *s.pins.rows.rbegin() >= n) throw StateError("pinned row out of range");
  if (s.cfg.batch_size < 1) throw StateError("session batch size is 0");
  for (std::size_t i = 1; i < s.history.size(); ++i) {
    if (s.history[i].epoch <= s.history[i - 1].epoch) throw StateError("loss history not increasing");
  }
}

inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> ids) {
  Matrix out(ids.size(), m.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) std::ranges::copy(m.row(ids[i]), out.row(i).begin());
  return out;
}

/// Eval-mode reconstruction MSE over the whole dataset (mean over rows and features).
inline double evaluate_mse(const Model& model, const DatasetTable& data, std::size_t batch = 1024) {
  double total = 0.0;
  std::vector<std::size_t> ids;
  RngStream unused;
  for (std::size_t start = 0; start < data.n(); start += batch) {
    const std::size_t end = std::min(data.n(), start + batch);
    ids.resize(end - start);
    for (std::size_t i = start; i < end; ++i) ids[i - start] = i;
    const Matrix target = gather_rows(data.data, ids);
    Matrix recon;
    if (const auto* g = std::get_if<GneModel>(&model)) {
      recon = gne_forward(*g, ids, unused, false).output();
    } else {
      recon = vae_forward(std::get<VaeModel>(model), target, unused, false).recon;
    }
    total += mse_loss(recon, target).loss * static_cast<double>(recon.size());
  }
  return total / static_cast<double>(data.n() * data.dim());
}

/// Called before every batch; the control plane drains its command queue here.
using BatchHook = std::function<void(Session&)>;

/// One pass over all ids in mini-batches (the final partial batch is kept).
inline EpochReport train_epoch(Session& s, const BatchHook& between_batches = {}) {
  validate_session(s);
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t n = s.dataset.n();
  std::vector<std::size_t> order;
  if (s.cfg.shuffle) {
    order = permutation(s.rng, n);
  } else {
    order.resize(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
  }

  double weighted = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < n; start += s.cfg.batch_size) {
    if (between_batches) between_batches(s);
    const std::size_t end = std::min(n, start + s.cfg.batch_size);
    std::span<const std::size_t> ids(order.data() + start, end - start);
    const Matrix target = gather_rows(s.dataset.data, ids);
    ParamStore& params = s.params();
    params.zero_grads();
    double loss = 0.0;
    if (s.is_gne()) {
      GneModel& g = s.gne();
      Tape tape = gne_forward(g, ids, s.rng, true);
      LossResult l = mse_loss(tape.output(), target);
      gne_backward(g, tape, l.grad);
      loss = l.loss;
    } else {
      VaeModel& v = s.vae();
      VaeForward f = vae_forward(v, target, s.rng, true);
      VaeLoss l = vae_loss(f.recon, target, f.mean, f.logvar, v.cfg.kl_weight);
      vae_backward(v, f, l);
      loss = l.mse;
    }
    adam_step(params, s.adam, s.pins);
    weighted += loss * static_cast<double>(ids.size());
    ++batches;
  }

  s.epoch += 1;
  s.adam.lr *= s.cfg.lr_decay;
  EpochReport r;
  r.epoch = s.epoch;
  r.mean_train_mse = weighted / static_cast<double>(n);
  r.batches = batches;
  if (s.cfg.eval_every > 0 && s.epoch % s.cfg.eval_every == 0) r.eval_mse = evaluate_mse(s.model, s.dataset);
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  s.history.push_back({r.epoch, r.mean_train_mse, r.wall_seconds, r.eval_mse});
  return r;
}

/// Return false to stop after the current epoch.
using EpochCallback = std::function<bool(const EpochReport&)>;

/// Runs `epochs` epochs; stops early, between epochs, when on_epoch returns false.
inline Session& run(Session& s, std::size_t epochs, const EpochCallback& on_epoch = {},
                    const BatchHook& between_batches = {}) {
  for (std::size_t e = 0; e < epochs; ++e) {
    const EpochReport r = train_epoch(s, between_batches);
    if (on_epoch && !on_epoch(r)) break;
  }
  return s;
}

/// Adopts cfg's loop settings (batch size, shuffle, eval cadence, decay) and
/// runs cfg.epochs epochs. The learning rate lives in the optimiser state.
inline Session& run(Session& s, const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  s.cfg.batch_size = cfg.batch_size;
  s.cfg.shuffle = cfg.shuffle;
  s.cfg.eval_every = cfg.eval_every;
  s.cfg.lr_decay = cfg.lr_decay;
  s.cfg.epochs = cfg.epochs;
  return run(s, cfg.epochs, on_epoch);
}

// ---------------------------------------------------------------- pinning

using PinMove = std::pair<std::size_t, std::array<double, 2>>;

/// Moves rows to new coordinates and freezes them there. All moves are
/// validated before any is applied.
inline void pin_rows(Session& s, std::span<const PinMove> moves) {
  if (!s.is_gne()) throw StateError("pinning requires a GNE session");
  GneModel& g = s.gne();
  if (g.cfg.embed_dim != 2) throw StateError("pinning requires 2-D embeddings");
  for (const auto& [id, xy] : moves) {
    if (id >= g.cfg.n_points) {
      throw IndexError("pin id " + std::to_string(id) + " out of range [0, " +
                       std::to_string(g.cfg.n_points) + ")");
    }
    if (!std::isfinite(xy[0]) || !std::isfinite(xy[1])) {
      throw DomainError("pin coordinates for id " + std::to_string(id) + " are not finite");
    }
  }
  const std::size_t embed_index = *g.params.find(kEmbedParam);
  Matrix& table = g.embeddings();
  for (const auto& [id, xy] : moves) {
    table(id, 0) = xy[0];
    table(id, 1) = xy[1];
    s.pins.rows.insert(id);
    s.adam.reset_row(embed_index, id);
  }
}

/// Releases pinned rows; ids that are not pinned are ignored.
inline void unpin_rows(Session& s, std::span<const std::size_t> ids) {
  for (std::size_t id : ids) s.pins.rows.erase(id);
}

// -------------------------------------------------------------- inference

struct InferOptions {
  std::size_t steps = 500;
  std::size_t restarts = 8;
  /// Initial Adam step size as a fraction of the restart radius.
  double lr_fraction = 0.05;
  /// The step size decays geometrically to lr·final_lr_ratio by the last step.
  double final_lr_ratio = 1e-3;
  /// Overrides the restart radius derived from the training embeddings.
  std::optional<double> radius;
};

struct InferResult {
  std::vector<double> z;
  double mse = 0.0;
};

/// Finds a latent code for unseen data with the decoder frozen: Adam on the
/// reconstruction MSE over z only, from `restarts` uniform starts in
/// [-r, r]^d where r is the largest absolute training-embedding coordinate.
/// Returns the best code visited over all restarts.
inline InferResult infer_embedding(const GneModel& model, std::span<const double> x,
                                   const InferOptions& opt, RngStream& rng) {
  if (x.size() != model.cfg.out_dim) {
    throw ShapeError("infer_embedding: input width " + std::to_string(x.size()) + ", decoder emits " +
                     std::to_string(model.cfg.out_dim));
  }
  for (double v : x) {
    if (!std::isfinite(v)) throw DomainError("infer_embedding: non-finite input");
  }
  const std::size_t d = model.cfg.embed_dim;
  double radius = opt.radius.value_or(max_abs(model.embeddings()));
  if (!(radius > 0.0)) radius = kEmbedInitHalfWidth;
  const Matrix target = Matrix::row_vector(x);

  ForwardOptions fwd;
  fwd.begin = GneModel::kDecoderBegin;
  auto loss_at = [&](const Matrix& z, Matrix* grad) {
    Tape tape = forward(model.graph, model.params, z, fwd);
    LossResult l = mse_loss(tape.output(), target);
    if (grad) *grad = backward_input(model.graph, tape, l.grad, model.params);
    return l.loss;
  };

  InferResult best;
  best.mse = std::numeric_limits<double>::infinity();
  const std::size_t restarts = std::max<std::size_t>(opt.restarts, 1);
  for (std::size_t k = 0; k < restarts; ++k) {
    Matrix z = uniform_init(rng, 1, d, radius);
    ParamStore zs;
    zs.add("z", z);
    AdamState adam = AdamState::for_params(zs, opt.lr_fraction * radius);
    const double lr0 = adam.lr;
    for (std::size_t step = 0; step <= opt.steps; ++step) {
      Matrix grad;
      const double loss = loss_at(zs.at(0).value, step < opt.steps ? &grad : nullptr);
      if (loss < best.mse) {
        best.mse = loss;
        best.z.assign(zs.at(0).value.values().begin(), zs.at(0).value.values().end());
      }
      if (step == opt.steps) break;
      zs.at(0).grad = std::move(grad);
      adam.lr = lr0 * std::pow(opt.final_lr_ratio, static_cast<double>(step) / static_cast<double>(opt.steps));
      adam_step(zs, adam);
    }
  }
  return best;
}

} // namespace gne
