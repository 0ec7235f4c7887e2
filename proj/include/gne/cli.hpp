#pragma once

// Command-line front end: train, export, grid, infer, serve.
// Exit codes: 0 success, 1 runtime error, 2 usage error.

#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gne/checkpoint.hpp"
#include "gne/dataset.hpp"
#include "gne/server.hpp"
#include "gne/trainer.hpp"
#include "gne/viz.hpp"

namespace gne {

namespace cli {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataFlags {
  std::string data, synth, labels;
};

struct ModelFlags {
  std::string model = "gne";
  std::size_t width = 64;
  std::size_t blocks = 4;
  std::optional<double> sigma;
  double kl_weight = 1e-3;
  double lr = 1e-3;
  std::size_t batch = 1024;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;
  std::string init_from;
};

inline void add_data_flags(CLI::App* app, DataFlags& f) {
  app->add_option("--data", f.data, "IDX image file");
  app->add_option("--synth", f.synth, R"(synthetic blobs as JSON: {"k","per_cluster","dim","spread","seed"})");
  app->add_option("--labels", f.labels, "IDX label file paired with --data");
}

inline void add_model_flags(CLI::App* app, ModelFlags& f) {
  app->add_option("--model", f.model, "gne or vae")->check(CLI::IsMember({"gne", "vae"}));
  app->add_option("--width", f.width, "hidden width");
  app->add_option("--blocks", f.blocks, "residual blocks");
  app->add_option("--sigma", f.sigma, "GNE embedding noise sigma (default 0.1) or VAE noise coefficient (default 0.01)");
  app->add_option("--kl-weight", f.kl_weight, "VAE KL weight");
  app->add_option("--lr", f.lr, "Adam learning rate");
  app->add_option("--batch", f.batch, "batch size");
  app->add_option("--epochs", f.epochs, "epochs");
  app->add_option("--seed", f.seed, "run seed");
  app->add_option("--eval-every", f.eval_every, "eval-mode MSE every k epochs (0 = never)");
  app->add_option("--init-from", f.init_from, "VAE checkpoint to initialise a GNE from");
}

inline DatasetTable load_dataset(const DataFlags& f) {
  if (f.data.empty() == f.synth.empty()) throw UsageError("exactly one of --data or --synth is required");
  DatasetTable t = f.data.empty() ? synth_blobs(synth_spec_from_json(f.synth)) : read_idx_images(f.data);
  if (!f.labels.empty()) t.attach_labels(read_idx_labels(f.labels));
  t.validate();
  return t;
}

inline Session build_session(DatasetTable data, const ModelFlags& f) {
  TrainConfig cfg;
  cfg.lr = f.lr;
  cfg.batch_size = f.batch;
  cfg.epochs = f.epochs;
  cfg.seed = f.seed;
  cfg.eval_every = f.eval_every;
  if (!f.init_from.empty()) {
    if (f.model != "gne") throw UsageError("--init-from produces a GNE; use --model gne");
    const Session vae = load_checkpoint(f.init_from);
    if (vae.is_gne()) throw ConfigError("--init-from needs a VAE checkpoint");
    GneModel g = init_gne_from_vae(vae.vae(), data.data, f.sigma.value_or(0.0));
    return make_session(std::move(data), std::move(g), cfg);
  }
  if (f.model == "gne") {
    GneConfig g;
    g.width = f.width;
    g.n_res_blocks = f.blocks;
    g.noise_sigma = f.sigma.value_or(0.1);
    return make_gne_session(std::move(data), g, cfg);
  }
  VaeConfig v;
  v.width = f.width;
  v.n_res_blocks = f.blocks;
  v.noise_coeff = f.sigma.value_or(1e-2);
  v.kl_weight = f.kl_weight;
  return make_vae_session(std::move(data), v, cfg);
}

/// 2-D coordinates shown for a session: the table for GNE, posterior means for VAE.
inline Matrix session_embeddings(const Session& s) {
  return s.is_gne() ? s.gne().embeddings() : vae_encode_mean(s.vae(), s.dataset.data);
}

inline GridSpec grid_for(const Session& s, const std::string& spec_text) {
  GridSpec g;
  g.set_extent(auto_extent(session_embeddings(s)));
  if (!spec_text.empty()) {
    std::string text = spec_text;
    if (text.front() != '{') {
      const auto b = detail::read_file(spec_text);
      text.assign(b.begin(), b.end());
    }
    g = grid_spec_from_json(text, g);
  }
  std::tie(g.cell_h, g.cell_w) = s.dataset.cell_shape();
  return g;
}

} // namespace cli

/// Entry point shared by the executable and the tests.
inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  CLI::App app{"Generative neural embedding: train, export, grid, infer, serve"};
  app.require_subcommand(1);

  cli::DataFlags train_data;
  cli::ModelFlags train_model;
  std::string train_out;
  bool quiet = false;
  auto* train = app.add_subcommand("train", "train a GNE or VAE and write a checkpoint");
  cli::add_data_flags(train, train_data);
  cli::add_model_flags(train, train_model);
  train->add_option("--out", train_out, "checkpoint path")->required();
  train->add_flag("--quiet", quiet, "no per-epoch lines");

  std::string export_ckpt, export_csv;
  auto* exp = app.add_subcommand("export", "write embeddings as CSV");
  exp->add_option("--ckpt", export_ckpt, "checkpoint")->required();
  exp->add_option("--csv", export_csv, "output CSV")->required();

  std::string grid_ckpt, grid_mode = "decode", grid_spec, grid_out;
  auto* grid = app.add_subcommand("grid", "render a decode or nearest-neighbour grid as PGM");
  grid->add_option("--ckpt", grid_ckpt, "checkpoint")->required();
  grid->add_option("--mode", grid_mode, "decode or nn")->check(CLI::IsMember({"decode", "nn"}));
  grid->add_option("--spec", grid_spec, "grid spec JSON text or file (x_min, x_max, y_min, y_max, nx, ny)");
  grid->add_option("--out", grid_out, "output PGM")->required();

  std::string infer_ckpt, infer_input;
  InferOptions infer_opt;
  std::uint64_t infer_seed = 0;
  auto* infer = app.add_subcommand("infer", "fit embeddings for unseen images with the decoder frozen");
  infer->add_option("--ckpt", infer_ckpt, "GNE checkpoint")->required();
  infer->add_option("--input", infer_input, "IDX image file")->required();
  infer->add_option("--steps", infer_opt.steps, "Adam steps per restart");
  infer->add_option("--restarts", infer_opt.restarts, "random restarts");
  infer->add_option("--seed", infer_seed, "restart seed");

  cli::DataFlags serve_data;
  cli::ModelFlags serve_model;
  std::string serve_ckpt, serve_out;
  unsigned short port = 8080;
  bool paused = false;
  auto* serve_cmd = app.add_subcommand("serve", "live training service over HTTP and WebSocket");
  serve_cmd->add_option("--ckpt", serve_ckpt, "resume from checkpoint");
  cli::add_data_flags(serve_cmd, serve_data);
  cli::add_model_flags(serve_cmd, serve_model);
  serve_cmd->add_option("--port", port, "TCP port on 127.0.0.1 (0 picks one)");
  serve_cmd->add_flag("--paused", paused, "start paused");
  serve_cmd->add_option("--out", serve_out, "checkpoint written after Shutdown");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) {
      Session s = cli::build_session(cli::load_dataset(train_data), train_model);
      run(s, train_model.epochs, [&](const EpochReport& r) {
        if (!quiet) {
          out << "epoch " << r.epoch << " mse " << format_g9(r.mean_train_mse);
          if (r.eval_mse) out << " eval " << format_g9(*r.eval_mse);
          out << " " << format_g9(r.wall_seconds) << "s\n";
        }
        return true;
      });
      save_checkpoint(s, train_out);
    } else if (exp->parsed()) {
      const Session s = load_checkpoint(export_ckpt);
      export_embeddings_csv(cli::session_embeddings(s), s.dataset.labels, export_csv);
    } else if (grid->parsed()) {
      const Session s = load_checkpoint(grid_ckpt);
      const GridSpec g = cli::grid_for(s, grid_spec);
      ImageSheet sheet;
      if (grid_mode == "nn") {
        sheet = nn_grid(cli::session_embeddings(s), s.dataset, g);
      } else {
        sheet = std::visit([&](const auto& m) { return decode_grid(m, g); }, s.model);
      }
      write_pgm(sheet, grid_out);
    } else if (infer->parsed()) {
      const Session s = load_checkpoint(infer_ckpt);
      if (!s.is_gne()) throw ConfigError("infer needs a GNE checkpoint");
      const DatasetTable x = read_idx_images(infer_input);
      RngStream rng(infer_seed, 2);
      out << "id,x,y,mse\n";
      for (std::size_t i = 0; i < x.n(); ++i) {
        const InferResult r = infer_embedding(s.gne(), x.data.row(i), infer_opt, rng);
        out << i;
        for (double v : r.z) out << ',' << format_g9(v);
        out << ',' << format_g9(r.mse) << '\n';
      }
    } else if (serve_cmd->parsed()) {
      Session s;
      if (!serve_ckpt.empty()) {
        if (!serve_data.data.empty() || !serve_data.synth.empty()) {
          throw cli::UsageError("--ckpt and --data/--synth are exclusive");
        }
        s = load_checkpoint(serve_ckpt);
      } else {
        s = cli::build_session(cli::load_dataset(serve_data), serve_model);
      }
      Session final_state = serve(std::move(s), port, !paused, [&](unsigned short p) {
        out << "listening on 127.0.0.1:" << p << std::endl;
      });
      if (!serve_out.empty()) save_checkpoint(final_state, serve_out);
    }
  } catch (const cli::UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

} // namespace gne
