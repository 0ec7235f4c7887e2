// Trains a small GNE on synthetic clusters, then writes the embedding CSV,
// a decode grid and a nearest-neighbour grid.
//
//   blobs_walkthrough [output-dir]

#include <filesystem>
#include <iostream>

#include "gne/dataset.hpp"
#include "gne/trainer.hpp"
#include "gne/viz.hpp"

int main(int argc, char** argv) {
  using namespace gne;
  const std::filesystem::path dir = argc > 1 ? argv[1] : ".";
  std::filesystem::create_directories(dir);

  // 4 clusters of 36 points in 36 dims, shown as 6x6 cells.
  DatasetTable data = synth_blobs(4, 36, 36, 0.05, 7);

  GneConfig model;
  model.width = 32;
  model.n_res_blocks = 2;
  model.noise_sigma = 0.1;

  TrainConfig train;
  train.lr = 1e-2;
  train.batch_size = 16;
  train.seed = 1;

  Session s = make_gne_session(data, model, train);
  run(s, 300, [](const EpochReport& r) {
    if (r.epoch % 50 == 0) std::cout << "epoch " << r.epoch << "  train mse " << r.mean_train_mse << "\n";
    return true;
  });
  std::cout << "eval mse " << evaluate_mse(s.model, s.dataset) << "\n";

  const Matrix& e = s.gne().embeddings();
  export_embeddings_csv(e, s.dataset.labels, (dir / "embeddings.csv").string());

  GridSpec grid;
  grid.set_extent(auto_extent(e));
  grid.nx = grid.ny = 12;
  std::tie(grid.cell_h, grid.cell_w) = s.dataset.cell_shape();
  write_pgm(decode_grid(s.gne(), grid), (dir / "decode_grid.pgm").string());
  write_pgm(nn_grid(e, s.dataset, grid), (dir / "nn_grid.pgm").string());
  std::cout << "wrote embeddings.csv, decode_grid.pgm, nn_grid.pgm to " << dir.string() << "\n";
}
