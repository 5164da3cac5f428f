#pragma once

// Three-player minimax training. The encoder output feeds the predictor
// directly and the discriminator through a gradient-reversal node with
// coefficient gamma, so a single backward pass of L_M + L_D gives
//   predictor:      dL_M
//   discriminator:  dL_D
//   encoder:        dL_M - gamma * dL_D
// which is simultaneous descent for (E, M) and ascent for D on
// J = L_M - gamma * L_D.

#include "invarnet/data.hpp"
#include "invarnet/eval.hpp"
#include "invarnet/models.hpp"

#include <memory>
#include <optional>

namespace invarnet::game {

struct TrainConfig {
  double gamma = 1.0;
  double lr = 1e-3;
  int batch_size = 16;
  int epochs = 50;
  std::uint64_t seed = 0;
  bool shuffle = true;
  // false trains encoder and predictor only (no discriminator term at all).
  bool adversary = true;

  void validate(const model::GameModel& model) const;
  nlohmann::json to_json() const;
};

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
};

// One bias-corrected Adam update of every parameter. Moments are allocated on
// first use.
void adam_step(std::span<Matrix* const> params, std::span<const Matrix> grads, AdamState& state,
               double lr);

struct GameLosses {
  double loss_m = 0.0;  // predictor cross-entropy
  double loss_d = 0.0;  // discriminator cross-entropy
  double objective = 0.0;  // loss_m - gamma * loss_d
};

struct GameStep {
  GameLosses losses;
  std::vector<Matrix> grads;  // aligned with GameModel::parameters()
};

// Forward and one backward pass of the game on a batch.
GameStep game_losses(model::GameModel& model, const Matrix& x, LabelSpan s, LabelSpan y, double gamma,
                     model::Mode mode = model::Mode::train, bool adversary = true);

struct EpochRecord {
  int epoch = 0;
  double loss_m = 0.0;
  double loss_d = 0.0;
  double objective = 0.0;
  double train_acc_y = 0.0;
  double val_acc_y = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;

  std::string to_csv() const;
  void write_csv(const std::string& path) const;
};

// Raised when a loss or gradient turns non-finite. Carries the model as it was
// before the failing step.
struct DivergenceError : NumericalError {
  DivergenceError(const std::string& what, model::GameModel last_good, int epoch, std::size_t batch)
      : NumericalError(what),
        last_good(std::make_shared<model::GameModel>(std::move(last_good))),
        epoch(epoch),
        batch(batch) {}

  std::shared_ptr<const model::GameModel> last_good;
  int epoch;
  std::size_t batch;
};

struct TrainResult {
  model::GameModel model;
  TrainHistory history;
};

// Shuffled mini-batches; each batch is one forward, one backward and one Adam
// step for all three players. Deterministic for a fixed config.
TrainResult train(model::GameModel model, const data::TabularDataset& train_set,
                  const data::TabularDataset& val_set, const TrainConfig& config);

struct SweepEntry {
  double gamma = 0.0;
  TrainHistory history;
  eval::MetricsReport metrics;
};

// One model per gamma, all initialized from the same InitConfig.
std::vector<SweepEntry> gamma_sweep(const data::TabularDataset& train_set,
                                    const data::TabularDataset& val_set,
                                    const data::TabularDataset& test_set,
                                    std::span<const double> gammas, const model::Architecture& arch,
                                    const model::InitConfig& init, const TrainConfig& config,
                                    const eval::ProbeConfig& probe = {});

}  // namespace invarnet::game
