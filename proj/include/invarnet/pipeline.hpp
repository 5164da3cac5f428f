#pragma once

// End-to-end runs shared by the command line, the acceptance suite and the
// Python module: split, standardize, train, evaluate.

#include "invarnet/game.hpp"

namespace invarnet::pipeline {

struct Splits {
  data::TabularDataset train;
  data::TabularDataset val;
  data::TabularDataset test;
};

// Carves a validation part off `train_full`; with `standardize`, statistics
// come from the remaining training rows only.
Splits prepare(const data::TabularDataset& train_full, const data::TabularDataset& test, double val_fraction,
               std::uint64_t seed, bool standardize);

// Holdout split of one dataset into train_full / test.
std::pair<data::TabularDataset, data::TabularDataset> holdout(const data::TabularDataset& ds,
                                                              double test_fraction, std::uint64_t seed);

// Sub-seeds derived from one run seed.
struct Seeds {
  std::uint64_t init;
  std::uint64_t shuffle;
  std::uint64_t probe;
  std::uint64_t split;
  static Seeds from(std::uint64_t seed);
};

struct Experiment {
  std::string preset = "fair";
  int d_emb = 8;
  game::TrainConfig train;  // seed is overwritten from Seeds
  eval::ProbeConfig probe;
};

struct Outcome {
  model::GameModel model;
  game::TrainHistory history;
  eval::MetricsReport metrics;
};

Outcome run(const Splits& splits, const Experiment& experiment, std::uint64_t seed);

struct SyntheticSpec {
  bool confounded = false;
  int n = 5000;
  int d = 20;
  int n_s = 2;
  int n_y = 2;
  double dependence = 0.0;
  double noise = 1.0;
  double test_fraction = 0.2;
  double val_fraction = 0.1;
  bool standardize = false;
};

data::TabularDataset generate(const SyntheticSpec& spec, std::uint64_t seed);

// generate, holdout, prepare and run in one call.
Outcome run_synthetic(const SyntheticSpec& spec, const Experiment& experiment, std::uint64_t seed);

}  // namespace invarnet::pipeline
