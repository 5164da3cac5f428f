#include "invarnet/pipeline.hpp"

namespace invarnet::pipeline {

Seeds Seeds::from(std::uint64_t seed) {
  Rng rng(seed);
  Seeds s{};
  s.init = rng.next_u64();
  s.shuffle = rng.next_u64();
  s.probe = rng.next_u64();
  s.split = rng.next_u64();
  return s;
}

std::pair<data::TabularDataset, data::TabularDataset> holdout(const data::TabularDataset& ds,
                                                              double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("test_fraction must be in (0, 1)");
  const auto parts = data::split(ds.size(), data::SplitSpec::holdout(1.0 - test_fraction, 0.0, test_fraction, seed));
  return {ds.subset(parts[0].train), ds.subset(parts[0].test)};
}

Splits prepare(const data::TabularDataset& train_full, const data::TabularDataset& test, double val_fraction,
               std::uint64_t seed, bool standardize) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in (0, 1)");
  if (train_full.dim() != test.dim() || train_full.n_s != test.n_s || train_full.n_y != test.n_y) {
    throw DataError("train and test data disagree on dimensions or label counts");
  }
  const auto parts =
      data::split(train_full.size(), data::SplitSpec::holdout(1.0 - val_fraction, val_fraction, 0.0, seed));
  Splits out{train_full.subset(parts[0].train), train_full.subset(parts[0].val), test};
  if (standardize) {
    auto st = data::standardize(out.train, {out.val, out.test});
    out.train = std::move(st.train);
    out.val = std::move(st.others[0]);
    out.test = std::move(st.others[1]);
  }
  return out;
}

Outcome run(const Splits& splits, const Experiment& experiment, std::uint64_t seed) {
  const Seeds seeds = Seeds::from(seed);
  const auto arch = model::preset_by_name(experiment.preset, static_cast<int>(splits.train.dim()),
                                          splits.train.n_s, splits.train.n_y, experiment.d_emb);
  game::TrainConfig cfg = experiment.train;
  cfg.seed = seeds.shuffle;
  eval::ProbeConfig probe = experiment.probe;
  probe.seed = seeds.probe;
  auto trained = game::train(model::init_model(arch, {seeds.init}), splits.train, splits.val, cfg);
  auto metrics = eval::evaluate(trained.model, splits.train, splits.test, cfg.gamma, probe);
  return Outcome{std::move(trained.model), std::move(trained.history), std::move(metrics)};
}

data::TabularDataset generate(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.confounded) {
    return data::synth_confounded(spec.n, spec.d, spec.n_s, spec.n_y, spec.dependence, spec.noise, seed);
  }
  return data::synth_independent(spec.n, spec.d, spec.n_s, spec.n_y, spec.noise, seed);
}

Outcome run_synthetic(const SyntheticSpec& spec, const Experiment& experiment, std::uint64_t seed) {
  const Seeds seeds = Seeds::from(seed);
  auto [train_full, test] = holdout(generate(spec, seed), spec.test_fraction, seeds.split);
  return run(prepare(train_full, test, spec.val_fraction, seeds.split + 1, spec.standardize), experiment, seed);
}

}  // namespace invarnet::pipeline
