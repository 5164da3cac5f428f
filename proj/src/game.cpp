#include "invarnet/game.hpp"

#include <cstdio>
#include <fstream>

namespace invarnet::game {

using nlohmann::json;

namespace {

bool has_batch_norm(const model::GameModel& m) {
  for (const auto* spec : {&m.arch.encoder, &m.arch.predictor, &m.arch.discriminator}) {
    for (const auto& l : spec->layers) {
      if (l.batch_norm) return true;
    }
  }
  return false;
}

}  // namespace

void TrainConfig::validate(const model::GameModel& model) const {
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ConfigError("train: gamma must be >= 0");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be > 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be positive");
  if (batch_size < 2 && has_batch_norm(model)) {
    throw ConfigError("train: batch_size must be >= 2 when the model has batch norm");
  }
  if (epochs < 0) throw ConfigError("train: epochs must be non-negative");
}

json TrainConfig::to_json() const {
  return json{{"gamma", gamma},     {"lr", lr},           {"batch_size", batch_size}, {"epochs", epochs},
              {"seed", seed},       {"shuffle", shuffle}, {"adversary", adversary}};
}

void adam_step(std::span<Matrix* const> params, std::span<const Matrix> grads, AdamState& state,
               double lr) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (const Matrix* p : params) {
      state.m.push_back(Matrix::Zero(p->rows(), p->cols()));
      state.v.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].rows() != params[i]->rows() || grads[i].cols() != params[i]->cols() ||
        state.m[i].rows() != params[i]->rows() || state.m[i].cols() != params[i]->cols()) {
      throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(i));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i].cwiseAbs2();
    const auto m_hat = (state.m[i].array() / c1);
    const auto v_hat = (state.v[i].array() / c2);
    params[i]->array() -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
  }
}

GameStep game_losses(model::GameModel& model, const Matrix& x, LabelSpan s, LabelSpan y, double gamma,
                     model::Mode mode, bool adversary) {
  if (x.rows() == 0) throw ShapeError("game_losses: empty batch");
  if (static_cast<Eigen::Index>(y.size()) != x.rows()) throw ShapeError("game_losses: y length mismatch");
  ad::Tape tape;
  const auto bound = model::bind(tape, model);
  ad::Var h = model::encode(model, bound, tape.constant(x), s, mode);
  auto lm = ad::softmax_cross_entropy(model::predict_logits(model, bound, h, mode), y);

  GameStep out;
  ad::Var total = lm.loss;
  out.losses.loss_m = lm.loss.value()(0, 0);
  if (adversary) {
    ad::Var reversed = ad::grad_reversal(h, gamma);
    auto ld = ad::softmax_cross_entropy(model::discriminate_logits(model, bound, reversed, mode), s);
    out.losses.loss_d = ld.loss.value()(0, 0);
    total = ad::add(lm.loss, ld.loss);
  }
  out.losses.objective = out.losses.loss_m - gamma * out.losses.loss_d;
  tape.backward(total);
  out.grads.reserve(bound.params.size());
  for (const ad::Var& p : bound.params) out.grads.push_back(tape.grad(p));
  return out;
}

std::string TrainHistory::to_csv() const {
  std::string out = "epoch,L_M,L_D,J,train_acc_y,val_acc_y\n";
  char buf[256];
  for (const auto& e : epochs) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", e.epoch, e.loss_m, e.loss_d,
                  e.objective, e.train_acc_y, e.val_acc_y);
    out += buf;
  }
  return out;
}

void TrainHistory::write_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write history " + path);
  out << to_csv();
}

TrainResult train(model::GameModel model, const data::TabularDataset& train_set,
                  const data::TabularDataset& val_set, const TrainConfig& config) {
  config.validate(model);
  train_set.validate();
  val_set.validate();
  if (train_set.size() == 0 || val_set.size() == 0) throw DataError("train: datasets must be nonempty");
  for (const auto* ds : {&train_set, &val_set}) {
    if (ds->dim() != model.arch.d_x || ds->n_s != model.arch.n_s || ds->n_y != model.arch.n_y) {
      throw DataError("train: dataset dimensions do not match the model");
    }
  }

  const bool bn = has_batch_norm(model);
  const std::size_t n = train_set.size();
  const auto bs = static_cast<std::size_t>(config.batch_size);
  Rng rng(config.seed);
  AdamState adam;
  TrainHistory history;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    if (config.shuffle) rng.shuffle(order);
    double sum_m = 0.0, sum_d = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t len = std::min(bs, n - start);
      if (bn && len < 2) break;
      Matrix x(static_cast<Eigen::Index>(len), train_set.dim());
      Labels s(len), y(len);
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t r = order[start + i];
        x.row(static_cast<Eigen::Index>(i)) = train_set.x.row(static_cast<Eigen::Index>(r));
        s[i] = train_set.s[r];
        y[i] = train_set.y[r];
      }
      model::GameModel snapshot = model;
      try {
        GameStep step = game_losses(model, x, s, y, config.gamma, model::Mode::train, config.adversary);
        auto params = model.parameters();
        adam_step(params, step.grads, adam, config.lr);
        for (const Matrix* p : params) {
          if (!all_finite(*p)) throw NumericalError("parameter update produced non-finite values");
        }
        sum_m += step.losses.loss_m;
        sum_d += step.losses.loss_d;
        ++batches;
      } catch (const NumericalError& e) {
        throw DivergenceError("train: diverged at epoch " + std::to_string(epoch) + ", batch " +
                                  std::to_string(batches) + ": " + e.what(),
                              std::move(snapshot), epoch, batches);
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    if (batches > 0) {
      rec.loss_m = sum_m / static_cast<double>(batches);
      rec.loss_d = sum_d / static_cast<double>(batches);
    }
    rec.objective = rec.loss_m - config.gamma * rec.loss_d;
    rec.train_acc_y = eval::accuracy(model::predict_labels(model, train_set.x, train_set.s), train_set.y);
    rec.val_acc_y = eval::accuracy(model::predict_labels(model, val_set.x, val_set.s), val_set.y);
    history.epochs.push_back(rec);
  }
  return TrainResult{std::move(model), std::move(history)};
}

std::vector<SweepEntry> gamma_sweep(const data::TabularDataset& train_set,
                                    const data::TabularDataset& val_set,
                                    const data::TabularDataset& test_set,
                                    std::span<const double> gammas, const model::Architecture& arch,
                                    const model::InitConfig& init, const TrainConfig& config,
                                    const eval::ProbeConfig& probe) {
  if (gammas.empty()) throw ConfigError("gamma_sweep: no gamma values");
  std::vector<SweepEntry> out;
  for (double g : gammas) {
    TrainConfig cfg = config;
    cfg.gamma = g;
    auto result = train(model::init_model(arch, init), train_set, val_set, cfg);
    SweepEntry e;
    e.gamma = g;
    e.history = std::move(result.history);
    e.metrics = eval::evaluate(result.model, train_set, test_set, g, probe);
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace invarnet::game
