#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "gne/errors.hpp"
#include "gne/graph.hpp"
#include "gne/layers.hpp"
#include "gne/matrix.hpp"
#include "gne/params.hpp"
#include "gne/rng.hpp"

namespace gne {

inline constexpr const char* kEmbedParam = "embed";
inline constexpr double kEmbedInitHalfWidth = 0.05;

struct GneConfig {
  std::size_t n_points = 0;
  std::size_t embed_dim = 2;
  std::size_t width = 64;
  std::size_t n_res_blocks = 4;
  double noise_sigma = 0.1;
  std::size_t out_dim = 0;

  void validate() const {
    if (n_points < 1) throw ConfigError("GneConfig.n_points must be >= 1");
    if (embed_dim < 1) throw ConfigError("GneConfig.embed_dim must be >= 1");
    if (width < 1) throw ConfigError("GneConfig.width must be >= 1");
    if (out_dim < 1) throw ConfigError("GneConfig.out_dim must be >= 1");
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) {
      throw ConfigError("GneConfig.noise_sigma must be finite and >= 0");
    }
  }

  /// Closed-form scalar parameter count.
  std::size_t parameter_count() const {
    const std::size_t nw = width;
    return n_points * embed_dim + (embed_dim * nw + nw) + n_res_blocks * 2 * (nw * nw + nw) +
           (nw * out_dim + out_dim);
  }
};

struct VaeConfig {
  std::size_t in_dim = 0;
  std::size_t latent_dim = 2;
  std::size_t width = 64;
  std::size_t n_res_blocks = 4;
  /// Multiplier on the reparameterisation noise: z = mean + coeff·exp(logvar/2)·ε.
  double noise_coeff = 1e-2;
  double kl_weight = 1e-3;

  void validate() const {
    if (in_dim < 1) throw ConfigError("VaeConfig.in_dim must be >= 1");
    if (latent_dim < 1) throw ConfigError("VaeConfig.latent_dim must be >= 1");
    if (width < 1) throw ConfigError("VaeConfig.width must be >= 1");
    if (!(noise_coeff >= 0.0) || !std::isfinite(noise_coeff)) {
      throw ConfigError("VaeConfig.noise_coeff must be finite and >= 0");
    }
    if (!(kl_weight >= 0.0) || !std::isfinite(kl_weight)) {
      throw ConfigError("VaeConfig.kl_weight must be finite and >= 0");
    }
  }
};

/// Embedding table plus decoder: node 0 gathers rows of "embed", nodes from
/// kDecoderBegin on are the decoder
/// [noise, Affine+Tanh, blocks × (Affine, Relu, Affine, ResidualAdd), Affine+Sigmoid].
struct GneModel {
  static constexpr std::size_t kDecoderBegin = 1;

  GneConfig cfg;
  ParamStore params;
  ModelGraph graph;

  const Matrix& embeddings() const { return params[kEmbedParam].value; }
  Matrix& embeddings() { return params[kEmbedParam].value; }
};

struct VaeModel {
  VaeConfig cfg;
  ParamStore params;
  ModelGraph encoder; // D → 2d, split into [mean | logvar]
  ModelGraph decoder; // identical layout to GneModel's decoder, noise sigma 0
};

using Model = std::variant<GneModel, VaeModel>;

namespace detail {

inline Matrix glorot(RngStream& rng, std::size_t fan_in, std::size_t fan_out) {
  const double h = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform_init(rng, fan_in, fan_out, h);
}

/// Appends an MLP trunk: Affine(in→width)+Tanh, then residual blocks.
inline void append_trunk(ModelGraph& g, ParamStore& p, RngStream& rng, const std::string& prefix,
                         std::size_t in, std::size_t width, std::size_t blocks) {
  g.add_affine(p, prefix + ".in", glorot(rng, in, width), width);
  std::size_t hidden = g.add({LayerKind::Tanh});
  for (std::size_t l = 0; l < blocks; ++l) {
    const std::string name = prefix + ".res" + std::to_string(l);
    g.add_affine(p, name + ".fc1", glorot(rng, width, width), width);
    g.add({LayerKind::Relu});
    g.add_affine(p, name + ".fc2", glorot(rng, width, width), width);
    LayerNode add{LayerKind::ResidualAdd};
    add.partner = hidden;
    hidden = g.add(add);
  }
}

inline void append_decoder(ModelGraph& g, ParamStore& p, RngStream& rng, std::size_t latent,
                           std::size_t width, std::size_t blocks, std::size_t out, double sigma) {
  LayerNode noise{LayerKind::GaussianNoise};
  noise.sigma = sigma;
  g.add(noise);
  append_trunk(g, p, rng, "dec", latent, width, blocks);
  g.add_affine(p, "dec.out", glorot(rng, width, out), out);
  g.add({LayerKind::Sigmoid});
}

} // namespace detail

inline GneModel build_gne(const GneConfig& cfg, RngStream& rng) {
  cfg.validate();
  GneModel m;
  m.cfg = cfg;
  LayerNode gather{LayerKind::EmbedGather};
  gather.weight = m.params.add(kEmbedParam,
                               uniform_init(rng, cfg.n_points, cfg.embed_dim, kEmbedInitHalfWidth));
  m.graph.add(gather);
  detail::append_decoder(m.graph, m.params, rng, cfg.embed_dim, cfg.width, cfg.n_res_blocks,
                         cfg.out_dim, cfg.noise_sigma);
  return m;
}

inline VaeModel build_vae(const VaeConfig& cfg, RngStream& rng) {
  cfg.validate();
  VaeModel m;
  m.cfg = cfg;
  detail::append_trunk(m.encoder, m.params, rng, "enc", cfg.in_dim, cfg.width, cfg.n_res_blocks);
  m.encoder.add_affine(m.params, "enc.out", detail::glorot(rng, cfg.width, 2 * cfg.latent_dim),
                       2 * cfg.latent_dim);
  detail::append_decoder(m.decoder, m.params, rng, cfg.latent_dim, cfg.width, cfg.n_res_blocks,
                         cfg.in_dim, 0.0);
  return m;
}

// ----------------------------------------------------------------------- GNE

inline Tape gne_forward(const GneModel& model, std::span<const std::size_t> ids, RngStream& rng,
                        bool training) {
  ForwardOptions opt;
  opt.training = training;
  opt.rng = &rng;
  return forward(model.graph, model.params, ids, opt);
}

inline void gne_backward(GneModel& model, const Tape& tape, const Matrix& loss_grad) {
  backward(model.graph, tape, loss_grad, model.params, false);
}

/// Eval-mode decoder over a batch of latent points (one per row).
inline Matrix decode_batch(const GneModel& model, const Matrix& z) {
  if (z.cols() != model.cfg.embed_dim) {
    throw ShapeError("decode: latent width " + std::to_string(z.cols()) + ", model expects " +
                     std::to_string(model.cfg.embed_dim));
  }
  ForwardOptions opt;
  opt.begin = GneModel::kDecoderBegin;
  return forward(model.graph, model.params, z, opt).output();
}

inline Matrix decode_batch(const VaeModel& model, const Matrix& z) {
  if (z.cols() != model.cfg.latent_dim) {
    throw ShapeError("decode: latent width " + std::to_string(z.cols()) + ", model expects " +
                     std::to_string(model.cfg.latent_dim));
  }
  return forward(model.decoder, model.params, z).output();
}

template <typename M>
std::vector<double> decode_point(const M& model, std::span<const double> z) {
  Matrix out = decode_batch(model, Matrix::row_vector(z));
  return {out.values().begin(), out.values().end()};
}

inline std::size_t latent_dim(const GneModel& m) { return m.cfg.embed_dim; }
inline std::size_t latent_dim(const VaeModel& m) { return m.cfg.latent_dim; }
inline std::size_t output_dim(const GneModel& m) { return m.cfg.out_dim; }
inline std::size_t output_dim(const VaeModel& m) { return m.cfg.in_dim; }

// ----------------------------------------------------------------------- VAE

struct VaeForward {
  Matrix recon;
  Matrix mean;
  Matrix logvar;
  Matrix eps; // standard-normal draw; empty in eval mode or with noise_coeff 0
  Matrix z;
  Tape enc_tape;
  Tape dec_tape;
};

struct VaeLoss {
  double loss = 0.0;
  double mse = 0.0;
  double kl = 0.0;
  Matrix grad_recon;
  Matrix grad_mean;   // KL contribution only
  Matrix grad_logvar; // KL contribution only
};

inline VaeForward vae_forward(const VaeModel& model, const Matrix& x, RngStream& rng,
                              bool training, const VaeForward* replay = nullptr) {
  if (x.cols() != model.cfg.in_dim) {
    throw ShapeError("vae_forward: input " + x.shape() + ", model expects width " +
                     std::to_string(model.cfg.in_dim));
  }
  const std::size_t d = model.cfg.latent_dim;
  VaeForward f;
  f.enc_tape = forward(model.encoder, model.params, x);
  const Matrix& enc = f.enc_tape.output();
  f.mean = Matrix(x.rows(), d);
  f.logvar = Matrix(x.rows(), d);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      f.mean(r, c) = enc(r, c);
      f.logvar(r, c) = enc(r, d + c);
    }
  }
  f.z = f.mean;
  const double coeff = model.cfg.noise_coeff;
  if (replay && !replay->eps.empty()) {
    f.eps = replay->eps;
  } else if (!replay && training && coeff != 0.0) {
    f.eps = gaussian(rng, x.rows(), d, 1.0);
  }
  if (!f.eps.empty()) {
    if (!f.eps.same_shape(f.mean)) throw StateError("replayed reparameterisation noise shape mismatch");
    for (std::size_t i = 0; i < f.z.size(); ++i) {
      f.z.values()[i] += coeff * std::exp(0.5 * f.logvar.values()[i]) * f.eps.values()[i];
    }
  }
  f.dec_tape = forward(model.decoder, model.params, f.z);
  f.recon = f.dec_tape.output();
  return f;
}

/// MSE + kl_weight · (1/B) Σ_batch ½ Σ_latent (mean² + e^logvar − 1 − logvar).
inline VaeLoss vae_loss(const Matrix& recon, const Matrix& target, const Matrix& mean,
                        const Matrix& logvar, double kl_weight) {
  if (!mean.same_shape(logvar) || mean.rows() != recon.rows()) {
    throw ShapeError("vae_loss: mean " + mean.shape() + ", logvar " + logvar.shape() +
                     ", recon " + recon.shape());
  }
  LossResult rec = mse_loss(recon, target);
  VaeLoss out;
  out.mse = rec.loss;
  out.grad_recon = std::move(rec.grad);
  out.grad_mean = Matrix(mean.rows(), mean.cols());
  out.grad_logvar = Matrix(mean.rows(), mean.cols());
  const double batch = static_cast<double>(std::max<std::size_t>(mean.rows(), 1));
  double kl = 0.0;
  for (std::size_t i = 0; i < mean.size(); ++i) {
    const double mu = mean.values()[i];
    const double lv = logvar.values()[i];
    const double e = std::exp(lv);
    kl += 0.5 * (mu * mu + e - 1.0 - lv);
    out.grad_mean.values()[i] = kl_weight * mu / batch;
    out.grad_logvar.values()[i] = kl_weight * 0.5 * (e - 1.0) / batch;
  }
  out.kl = kl / batch;
  out.loss = out.mse + kl_weight * out.kl;
  return out;
}

/// Chains decoder, reparameterisation and encoder gradients into model.params.
inline void vae_backward(VaeModel& model, const VaeForward& f, const VaeLoss& loss) {
  Matrix dz = backward(model.decoder, f.dec_tape, loss.grad_recon, model.params, true);
  const std::size_t d = model.cfg.latent_dim;
  const double coeff = model.cfg.noise_coeff;
  Matrix denc(f.mean.rows(), 2 * d);
  for (std::size_t r = 0; r < f.mean.rows(); ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      const double g = dz(r, c);
      double dlv = loss.grad_logvar(r, c);
      if (!f.eps.empty()) dlv += g * coeff * 0.5 * std::exp(0.5 * f.logvar(r, c)) * f.eps(r, c);
      denc(r, c) = g + loss.grad_mean(r, c);
      denc(r, d + c) = dlv;
    }
  }
  backward(model.encoder, f.enc_tape, denc, model.params, false);
}

/// Eval-mode posterior means for every row of data.
inline Matrix vae_encode_mean(const VaeModel& model, const Matrix& data) {
  RngStream unused;
  return vae_forward(model, data, unused, false).mean;
}

/// GNE whose embedding row i is the VAE posterior mean of data row i and whose
/// decoder weights are copied from the VAE decoder.
inline GneModel init_gne_from_vae(const VaeModel& vae, const Matrix& data, double noise_sigma = 0.0) {
  if (data.cols() != vae.cfg.in_dim) {
    throw ConfigError("init_gne_from_vae: data width " + std::to_string(data.cols()) +
                      " but VAE input width " + std::to_string(vae.cfg.in_dim));
  }
  if (data.rows() == 0) throw ConfigError("init_gne_from_vae: empty dataset");
  GneConfig cfg;
  cfg.n_points = data.rows();
  cfg.embed_dim = vae.cfg.latent_dim;
  cfg.width = vae.cfg.width;
  cfg.n_res_blocks = vae.cfg.n_res_blocks;
  cfg.noise_sigma = noise_sigma;
  cfg.out_dim = vae.cfg.in_dim;
  RngStream rng(0);
  GneModel gne = build_gne(cfg, rng);
  gne.embeddings() = vae_encode_mean(vae, data);
  for (auto& p : gne.params) {
    if (p.name == kEmbedParam) continue;
    const Param& src = vae.params[p.name];
    if (!src.value.same_shape(p.value)) throw ConfigError("decoder shape mismatch at " + p.name);
    p.value = src.value;
  }
  return gne;
}

} // namespace gne
