#include "invarnet/game.hpp"

#include "test_support.hpp"

#include <cmath>

using namespace invarnet;
using namespace testing;

namespace {

model::Architecture tiny_arch(int d_x, int n_s, int n_y) {
  model::Architecture a;
  a.d_x = d_x;
  a.n_s = n_s;
  a.n_y = n_y;
  a.d_emb = 2;
  a.encoder = {d_x + 2, {{5, model::Activation::tanh, false}}};
  a.predictor = {5, {{n_y, model::Activation::none, false}}};
  a.discriminator = {5, {{4, model::Activation::tanh, true}, {n_s, model::Activation::none, false}}};
  return a;
}

struct Batch {
  Matrix x;
  Labels s, y;
};

Batch random_batch(Rng& rng, int m, int d_x, int n_s, int n_y) {
  return {random_matrix(rng, m, d_x), random_labels(rng, static_cast<std::size_t>(m), n_s),
          random_labels(rng, static_cast<std::size_t>(m), n_y)};
}

data::TabularDataset small_synth(int n, std::uint64_t seed, double dependence = 0.0) {
  return data::synth_confounded(n, 8, 2, 2, dependence, 0.5, seed);
}

}  // namespace

TEST_SUITE("game") {

TEST_CASE("gamma 0 removes the discriminator from the encoder gradient") {
  Rng rng(1);
  for (int i = 0; i < 5; ++i) {
    auto m = model::init_model(tiny_arch(3, 2, 2), {rng.next_u64(), 0.3});
    const auto b = random_batch(rng, 6, 3, 2, 2);
    const auto joint = game::game_losses(m, b.x, b.s, b.y, 0.0);
    const auto alone = game::game_losses(m, b.x, b.s, b.y, 0.0, model::Mode::train, false);
    const auto owners = m.parameter_owners();
    for (std::size_t p = 0; p < owners.size(); ++p) {
      if (owners[p] == model::Player::discriminator) continue;
      CHECK((joint.grads[p] - alone.grads[p]).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }
}

TEST_CASE("single nuisance value gives a zero discriminator loss") {
  Rng rng(2);
  auto m = model::init_model(tiny_arch(3, 1, 2), {3});
  const auto b = random_batch(rng, 5, 3, 1, 2);
  const auto r = game::game_losses(m, b.x, b.s, b.y, 2.0);
  CHECK(r.losses.loss_d == 0.0);
  CHECK(r.losses.objective == r.losses.loss_m);
}

TEST_CASE("player gradients match finite differences of their objectives") {
  Rng rng(3);
  for (int inst = 0; inst < 4; ++inst) {
    auto m = model::init_model(tiny_arch(3, 2, 3), {rng.next_u64(), 0.5});
    const auto b = random_batch(rng, 4, 3, 2, 3);
    const double gamma = rng.uniform(0.5, 4.0);
    const auto step = game::game_losses(m, b.x, b.s, b.y, gamma);
    const auto owners = m.parameter_owners();
    auto params = m.parameters();
    double worst = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p) {
      Matrix numeric(params[p]->rows(), params[p]->cols());
      for (Eigen::Index k = 0; k < params[p]->size(); ++k) {
        auto objective = [&] {
          const auto l = game::game_losses(m, b.x, b.s, b.y, gamma).losses;
          switch (owners[p]) {
            case model::Player::encoder:
              return l.loss_m - gamma * l.loss_d;
            case model::Player::predictor:
              return l.loss_m;
            default:
              return l.loss_d;
          }
        };
        double& v = params[p]->data()[k];
        const double v0 = v;
        v = v0 + 1e-5;
        const double up = objective();
        v = v0 - 1e-5;
        const double down = objective();
        v = v0;
        numeric.data()[k] = (up - down) / 2e-5;
      }
      worst = std::max(worst, worst_relative({step.grads[p]}, {numeric}));
    }
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("adam") {
  {
    Matrix p = mat({{1.5, -2}});
    Matrix* params[] = {&p};
    const Matrix g[] = {Matrix::Zero(1, 2)};
    game::AdamState st;
    game::adam_step(params, g, st, 1e-3);
    CHECK(p == mat({{1.5, -2}}));
    CHECK(st.step == 1);
  }
  {
    Matrix p = mat({{0.0, 0.0}});
    Matrix* params[] = {&p};
    const Matrix g[] = {mat({{3.0, -0.02}})};
    game::AdamState st;
    game::adam_step(params, g, st, 1e-3);
    CHECK(p(0, 0) == doctest::Approx(-1e-3).epsilon(1e-6));
    CHECK(p(0, 1) == doctest::Approx(1e-3).epsilon(1e-5));
  }
  {
    // Scalar reference for two steps of g = 1.
    double m = 0, v = 0, x = 0.25;
    for (int t = 1; t <= 2; ++t) {
      m = 0.9 * m + 0.1 * 1.0;
      v = 0.999 * v + 0.001 * 1.0;
      const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
      x -= 0.001 * mh / (std::sqrt(vh) + 1e-8);
    }
    Matrix p = mat({{0.25}});
    Matrix* params[] = {&p};
    const Matrix g[] = {mat({{1.0}})};
    game::AdamState st;
    game::adam_step(params, g, st, 0.001);
    game::adam_step(params, g, st, 0.001);
    CHECK(std::abs(p(0, 0) - x) < 1e-12);
    CHECK((st.v[0].array() >= 0).all());
  }
  {
    Matrix p = Matrix::Zero(2, 2);
    Matrix* params[] = {&p};
    const Matrix g[] = {Matrix::Zero(1, 2)};
    game::AdamState st;
    CHECK_THROWS_AS(game::adam_step(params, g, st, 1e-3), ShapeError);
  }
}

TEST_CASE("first joint step descends each player's objective") {
  Rng rng(4);
  for (int inst = 0; inst < 10; ++inst) {
    auto m = model::init_model(tiny_arch(3, 2, 2), {rng.next_u64(), 0.5});
    const auto b = random_batch(rng, 8, 3, 2, 2);
    const double gamma = rng.uniform(0.0, 3.0);
    const auto step = game::game_losses(m, b.x, b.s, b.y, gamma);
    std::vector<Matrix> before;
    for (const Matrix* p : m.parameters()) before.push_back(*p);
    game::AdamState st;
    game::adam_step(m.parameters(), step.grads, st, 1e-3);
    const auto after = m.parameters();
    // step.grads already hold dL_D for D, dL_M for M and d(L_M - gamma L_D) for E.
    for (std::size_t p = 0; p < after.size(); ++p) {
      const double inner = (step.grads[p].array() * (after[p]->array() - before[p].array())).sum();
      if (step.grads[p].cwiseAbs().maxCoeff() > 1e-10) CHECK(inner < 0.0);
    }
  }
}

TEST_CASE("training config validation") {
  auto m = model::init_model(model::fair_preset(3, 2, 2), {1});
  game::TrainConfig c;
  c.batch_size = 1;
  CHECK_THROWS_AS(c.validate(m), ConfigError);
  c = {};
  c.lr = 0;
  CHECK_THROWS_AS(c.validate(m), ConfigError);
  c = {};
  c.gamma = -1;
  CHECK_THROWS_AS(c.validate(m), ConfigError);
  c = {};
  CHECK_NOTHROW(c.validate(m));
  auto nobn = model::init_model(tiny_arch(3, 2, 2), {1});
  for (auto& l : nobn.arch.discriminator.layers) l.batch_norm = false;
  c.batch_size = 1;
  CHECK_NOTHROW(c.validate(nobn));
}

TEST_CASE("training on separable independent data") {
  const auto ds = data::synth_independent(4000, 20, 2, 2, 1.0, 11);
  std::vector<std::size_t> train_rows(3600), val_rows(400);
  std::iota(train_rows.begin(), train_rows.end(), 0);
  std::iota(val_rows.begin(), val_rows.end(), 3600);
  const auto train_set = ds.subset(train_rows);
  const auto val_set = ds.subset(val_rows);
  game::TrainConfig cfg;
  cfg.gamma = 1.0;
  cfg.epochs = 30;
  cfg.seed = 5;
  const auto arch = model::fair_preset(20, 2, 2);
  const auto a = game::train(model::init_model(arch, {2}), train_set, val_set, cfg);
  REQUIRE(a.history.epochs.size() == 30);
  CHECK(a.history.epochs.back().val_acc_y >= 0.95);
  CHECK(std::abs(a.history.epochs.back().loss_d - std::log(2.0)) < 0.1);
  const auto b = game::train(model::init_model(arch, {2}), train_set, val_set, cfg);
  CHECK(a.history.to_csv() == b.history.to_csv());
  CHECK(a.history.to_csv().rfind("epoch,L_M,L_D,J,train_acc_y,val_acc_y\n", 0) == 0);
  for (const auto& e : a.history.epochs) CHECK(e.objective == doctest::Approx(e.loss_m - e.loss_d));
}

TEST_CASE("gamma 0 trajectory equals the two-player trainer") {
  const auto ds = small_synth(200, 3, 0.5);
  std::vector<std::size_t> tr(150), va(50);
  std::iota(tr.begin(), tr.end(), 0);
  std::iota(va.begin(), va.end(), 150);
  game::TrainConfig cfg;
  cfg.gamma = 0.0;
  cfg.epochs = 3;
  cfg.seed = 8;
  const auto init = model::init_model(model::fair_preset(8, 2, 2), {4});
  const auto joint = game::train(init, ds.subset(tr), ds.subset(va), cfg);
  cfg.adversary = false;
  const auto alone = game::train(init, ds.subset(tr), ds.subset(va), cfg);
  const auto pj = joint.model.parameters(), pa = alone.model.parameters();
  const auto owners = joint.model.parameter_owners();
  for (std::size_t i = 0; i < pj.size(); ++i) {
    if (owners[i] == model::Player::discriminator) continue;
    CHECK((*pj[i] - *pa[i]).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("a trailing batch of one is dropped when batch norm is present") {
  const auto ds = small_synth(17, 4);
  game::TrainConfig cfg;
  cfg.epochs = 2;
  CHECK_NOTHROW(game::train(model::init_model(model::fair_preset(8, 2, 2), {1}), ds, ds, cfg));
}

TEST_CASE("divergence carries the last good model") {
  auto ds = small_synth(40, 5);
  ds.x *= 1e200;
  game::TrainConfig cfg;
  cfg.epochs = 1;
  const auto init = model::init_model(model::fair_preset(8, 2, 2), {1});
  try {
    game::train(init, ds, ds, cfg);
    FAIL("expected divergence");
  } catch (const game::DivergenceError& e) {
    REQUIRE(e.last_good);
    CHECK(e.epoch == 1);
    CHECK(e.batch == 0);
    CHECK(bit_equal(*e.last_good->parameters()[1], *init.parameters()[1]));
  }
}

TEST_CASE("sweep with a single gamma equals plain training") {
  const auto ds = small_synth(300, 6, 0.8);
  std::vector<std::size_t> tr(200), va(50), te(50);
  std::iota(tr.begin(), tr.end(), 0);
  std::iota(va.begin(), va.end(), 200);
  std::iota(te.begin(), te.end(), 250);
  game::TrainConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 2;
  cfg.gamma = 0.0;
  const auto arch = model::fair_preset(8, 2, 2);
  const double gammas[] = {0.0};
  const auto sweep = game::gamma_sweep(ds.subset(tr), ds.subset(va), ds.subset(te), gammas, arch, {7}, cfg);
  auto plain = game::train(model::init_model(arch, {7}), ds.subset(tr), ds.subset(va), cfg);
  REQUIRE(sweep.size() == 1);
  CHECK(sweep[0].history.to_csv() == plain.history.to_csv());
  CHECK(sweep[0].metrics.to_json() == eval::evaluate(plain.model, ds.subset(tr), ds.subset(te), 0.0).to_json());
  CHECK_THROWS_AS(game::gamma_sweep(ds.subset(tr), ds.subset(va), ds.subset(te), {}, arch, {7}, cfg), ConfigError);
}

TEST_CASE("gamma 0 leaks the most nuisance information on confounded data") {
  // Five seeds; gamma 0 must beat the other entries on the median.
  std::vector<double> probe[3];
  const double gammas[] = {0.0, 1.0, 8.0};
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto ds = data::synth_confounded(2000, 20, 2, 2, 0.8, 1.0, seed);
    std::vector<std::size_t> tr(1400), va(200), te(400);
    std::iota(tr.begin(), tr.end(), 0);
    std::iota(va.begin(), va.end(), 1400);
    std::iota(te.begin(), te.end(), 1600);
    game::TrainConfig cfg;
    cfg.epochs = 20;
    cfg.seed = seed;
    eval::ProbeConfig pc;
    pc.seed = seed;
    const auto sweep = game::gamma_sweep(ds.subset(tr), ds.subset(va), ds.subset(te), gammas,
                                         model::fair_preset(20, 2, 2), {seed}, cfg, pc);
    for (int g = 0; g < 3; ++g) probe[g].push_back(sweep[static_cast<std::size_t>(g)].metrics.probe_acc_s);
  }
  for (auto& p : probe) std::sort(p.begin(), p.end());
  CHECK(probe[0][2] > probe[1][2]);
  CHECK(probe[0][2] > probe[2][2]);
}

}  // TEST_SUITE
