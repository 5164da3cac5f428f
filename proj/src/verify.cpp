#include "invarnet/verify.hpp"

#include <algorithm>

namespace invarnet::verify {

double max_relative_error(const Matrix& analytic, const Matrix& numeric) {
  if (analytic.rows() != numeric.rows() || analytic.cols() != numeric.cols()) {
    return std::numeric_limits<double>::infinity();
  }
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double a = analytic.data()[i], n = numeric.data()[i];
    const double denom = std::max({std::abs(a), std::abs(n), 1e-3});
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

Matrix numeric_gradient(const std::function<double(const Matrix&)>& f, const Matrix& at, double h) {
  Matrix g(at.rows(), at.cols());
  Matrix probe = at;
  for (Eigen::Index i = 0; i < at.size(); ++i) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + h;
    const double up = f(probe);
    probe.data()[i] = orig - h;
    const double down = f(probe);
    probe.data()[i] = orig;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

namespace {

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

Labels random_labels(Rng& rng, std::size_t n, int k) {
  Labels l(n);
  for (int& v : l) v = rng.uniform_int(k);
  return l;
}

using Builder = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

// Max relative error over every input of a scalar-valued tape program.
// `coeff` scales the numeric side (used for the reversal node, whose forward
// pass cannot see the backward scaling).
double check_program(const std::vector<Matrix>& inputs, const Builder& build, double h, double coeff = 1.0) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const Matrix& m : inputs) vars.push_back(tape.leaf(m));
  tape.backward(build(tape, vars));
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto f = [&](const Matrix& probe) {
      ad::Tape t;
      std::vector<ad::Var> vs;
      for (std::size_t j = 0; j < inputs.size(); ++j) vs.push_back(t.leaf(j == i ? probe : inputs[j]));
      return build(t, vs).value()(0, 0);
    };
    const Matrix numeric = coeff * numeric_gradient(f, inputs[i], h);
    worst = std::max(worst, max_relative_error(tape.grad(vars[i]), numeric));
  }
  return worst;
}

CheckResult finish(std::string name, double worst, double threshold, std::string detail = {}) {
  return CheckResult{std::move(name), worst < threshold, worst, threshold, std::move(detail)};
}

}  // namespace

std::vector<CheckResult> op_gradient_checks(std::uint64_t seed, int instances, double h) {
  Rng rng(seed);
  struct Acc {
    std::string name;
    double worst = 0.0;
  };
  std::vector<Acc> acc = {{"grad/matmul"},  {"grad/affine"},          {"grad/relu"},
                          {"grad/tanh"},    {"grad/concat_features"}, {"grad/embedding_lookup"},
                          {"grad/batch_norm_train"}, {"grad/batch_norm_eval"}, {"grad/softmax_cross_entropy"},
                          {"grad/grad_reversal"}, {"grad/add_scale_sum"}};
  auto bump = [&](std::size_t i, double v) { acc[i].worst = std::max(acc[i].worst, v); };

  for (int inst = 0; inst < instances; ++inst) {
    const int m = 2 + rng.uniform_int(4);
    const int k = 2 + rng.uniform_int(3);
    const int d = 1 + rng.uniform_int(4);
    const Labels labels = random_labels(rng, static_cast<std::size_t>(m), k);
    // Cross-entropy over k classes reduces each op output to a scalar.
    auto reduce = [labels](ad::Var out) { return ad::softmax_cross_entropy(out, labels).loss; };

    bump(0, check_program({random_matrix(rng, m, d), random_matrix(rng, d, k)},
                          [&](ad::Tape&, const auto& v) { return reduce(ad::matmul(v[0], v[1])); }, h));
    bump(1, check_program({random_matrix(rng, m, d), random_matrix(rng, d, k), random_matrix(rng, 1, k)},
                          [&](ad::Tape&, const auto& v) { return reduce(ad::affine(v[0], v[1], v[2])); }, h));

    Matrix away = random_matrix(rng, m, k);
    for (Eigen::Index i = 0; i < away.size(); ++i) {
      double& x = away.data()[i];
      if (std::abs(x) < 1e-3) x = x < 0 ? -0.5 : 0.5;
    }
    bump(2, check_program({away}, [&](ad::Tape&, const auto& v) { return reduce(ad::relu(v[0])); }, h));
    bump(3, check_program({random_matrix(rng, m, k)},
                          [&](ad::Tape&, const auto& v) { return reduce(ad::tanh_act(v[0])); }, h));

    const int k1 = 1 + rng.uniform_int(k - 1);
    bump(4, check_program({random_matrix(rng, m, k1), random_matrix(rng, m, k - k1)},
                          [&](ad::Tape&, const auto& v) { return reduce(ad::concat_features(v[0], v[1])); }, h));

    const int rows = 1 + rng.uniform_int(3);
    Labels idx = random_labels(rng, static_cast<std::size_t>(m), rows);
    idx[0] = idx.back();  // force a repeated index
    bump(5, check_program({random_matrix(rng, rows, k)},
                          [&](ad::Tape&, const auto& v) { return reduce(ad::embedding_lookup(v[0], idx)); }, h));

    const Matrix bn_x = random_matrix(rng, m, k);
    const Matrix bn_g = random_matrix(rng, 1, k), bn_b = random_matrix(rng, 1, k);
    bump(6, check_program({bn_x, bn_g, bn_b}, [&](ad::Tape&, const auto& v) {
      auto st = ad::BatchNormState::for_features(k);
      return reduce(ad::batch_norm(v[0], v[1], v[2], st));
    }, h));
    ad::BatchNormState eval_state = ad::BatchNormState::for_features(k);
    eval_state.running_mean = random_matrix(rng, 1, k).row(0);
    eval_state.running_var = random_matrix(rng, 1, k).cwiseAbs().row(0).array() + 0.1;
    eval_state.mode = ad::BatchNormState::Mode::eval;
    bump(7, check_program({bn_x, bn_g, bn_b}, [&](ad::Tape&, const auto& v) {
      auto st = eval_state;
      return reduce(ad::batch_norm(v[0], v[1], v[2], st));
    }, h));

    bump(8, check_program({random_matrix(rng, m, k, 3.0)},
                          [&](ad::Tape&, const auto& v) { return reduce(v[0]); }, h));

    const double lambda = rng.uniform(0.1, 8.0);
    bump(9, check_program({random_matrix(rng, m, k)},
                          [&](ad::Tape&, const auto& v) { return reduce(ad::grad_reversal(v[0], lambda)); }, h,
                          -lambda));

    const double c = rng.uniform(-2.0, 2.0);
    bump(10, check_program({random_matrix(rng, m, k), random_matrix(rng, m, k)}, [&](ad::Tape&, const auto& v) {
      return ad::add(ad::sum(ad::scale(ad::add(v[0], v[1]), c)), reduce(ad::add(v[0], v[0])));
    }, h));
  }
  std::vector<CheckResult> out;
  for (const auto& a : acc) out.push_back(finish(a.name, a.worst, 1e-4));
  return out;
}

CheckResult composite_gradient_check(std::uint64_t seed, int instances, const GameGradientFn& grads, double h) {
  Rng rng(seed);
  double worst = 0.0;
  for (int inst = 0; inst < instances; ++inst) {
    model::Architecture arch;
    arch.d_x = 3;
    arch.n_s = 2 + rng.uniform_int(2);
    arch.n_y = 2 + rng.uniform_int(2);
    arch.d_emb = 2;
    arch.encoder = {arch.d_x + arch.d_emb, {{5, model::Activation::relu, false}}};
    arch.predictor = {5, {{arch.n_y, model::Activation::none, false}}};
    arch.discriminator = {5, {{4, model::Activation::relu, true}, {arch.n_s, model::Activation::none, false}}};
    model::GameModel gm = model::init_model(arch, {rng.next_u64(), 0.5});
    const Matrix x = random_matrix(rng, 4, arch.d_x);
    const Labels s = random_labels(rng, 4, arch.n_s);
    const Labels y = random_labels(rng, 4, arch.n_y);
    const double gamma = rng.uniform(0.5, 3.0);

    const game::GameStep step = grads(gm, x, s, y, gamma);
    const auto owners = gm.parameter_owners();
    const auto params = gm.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Matrix saved = *params[i];
      auto f = [&](const Matrix& probe) {
        *params[i] = probe;
        const auto l = game::game_losses(gm, x, s, y, gamma).losses;
        *params[i] = saved;
        switch (owners[i]) {
          case model::Player::encoder:
            return l.loss_m - gamma * l.loss_d;
          case model::Player::predictor:
            return l.loss_m;
          case model::Player::discriminator:
            break;
        }
        return l.loss_d;
      };
      worst = std::max(worst, max_relative_error(step.grads[i], numeric_gradient(f, saved, h)));
    }
  }
  return finish("grad/three_player_composite", worst, 1e-4);
}

RandomCase random_case(Rng& rng) {
  oracle::WorldSizes sizes;
  sizes.nx = 2 + rng.uniform_int(3);
  sizes.ns = 2 + rng.uniform_int(2);
  sizes.ny = 2 + rng.uniform_int(2);
  const double dep = rng.uniform();
  RandomCase c;
  c.world = oracle::generate_world(oracle::Scenario::confounded, sizes, dep, rng.next_u64());
  const int codes = 2 + rng.uniform_int(2);
  c.encoder = oracle::encoder_from_id(sizes.nx, sizes.ns, codes, 0);
  for (int& v : c.encoder.code) v = rng.uniform_int(codes);
  return c;
}

CheckResult best_response_check(std::uint64_t seed, int worlds) {
  Rng rng(seed);
  double worst = 0.0;
  bool converged = true;
  for (int w = 0; w < worlds; ++w) {
    const auto c = random_case(rng);
    const auto joint = oracle::push_forward(c.world, c.encoder);
    const auto d = oracle::numeric_best_response(joint, oracle::Side::discriminator);
    const auto m = oracle::numeric_best_response(joint, oracle::Side::predictor);
    converged = converged && d.converged && m.converged;
    worst = std::max({worst, oracle::max_row_l1(d.table, oracle::optimal_discriminator(joint)),
                      oracle::max_row_l1(m.table, oracle::optimal_predictor(joint))});
  }
  return finish("oracle/best_response_matches_conditional", worst, 1e-3,
                converged ? "all runs converged" : "some runs hit the step budget");
}

CheckResult objective_identity_check(std::uint64_t seed, int worlds) {
  Rng rng(seed);
  double worst = 0.0;
  for (int w = 0; w < worlds; ++w) {
    const auto c = random_case(rng);
    const auto joint = oracle::push_forward(c.world, c.encoder);
    for (double gamma : {0.0, 0.5, 1.0, 2.0, 8.0}) {
      const double entropy_form = oracle::objective_value(joint, gamma);
      const double expectation = oracle::expected_objective(joint, oracle::optimal_discriminator(joint),
                                                            oracle::optimal_predictor(joint), gamma);
      worst = std::max(worst, std::abs(entropy_form - expectation));
    }
  }
  return finish("oracle/entropy_objective_identity", worst, 1e-10);
}

CheckResult marginal_check(std::uint64_t seed, int worlds) {
  Rng rng(seed);
  double worst = 0.0;
  for (int w = 0; w < worlds; ++w) {
    const auto c = random_case(rng);
    const auto a = c.world.marginal_sy();
    const auto b = oracle::push_forward(c.world, c.encoder).marginal_sy();
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  }
  return finish("oracle/push_forward_keeps_sy_marginal", worst, 1e-12);
}

namespace {

// Joint step with the reversal coefficient's sign flipped.
game::GameStep faulty_game_step(model::GameModel& gm, const Matrix& x, LabelSpan s, LabelSpan y, double gamma) {
  ad::Tape tape;
  const auto bound = model::bind(tape, gm);
  ad::Var h = model::encode(gm, bound, tape.constant(x), s, model::Mode::train);
  auto lm = ad::softmax_cross_entropy(model::predict_logits(gm, bound, h, model::Mode::train), y);
  auto ld = ad::softmax_cross_entropy(
      model::discriminate_logits(gm, bound, ad::grad_scale(h, gamma), model::Mode::train), s);
  tape.backward(ad::add(lm.loss, ld.loss));
  game::GameStep out;
  out.losses = {lm.loss.value()(0, 0), ld.loss.value()(0, 0), 0.0};
  for (const auto& p : bound.params) out.grads.push_back(tape.grad(p));
  return out;
}

}  // namespace

std::vector<CheckResult> run_all(const VerifyOptions& o) {
  auto out = op_gradient_checks(o.seed, o.gradient_instances, o.fd_step);
  GameGradientFn grads = [](model::GameModel& m, const Matrix& x, LabelSpan s, LabelSpan y, double g) {
    return game::game_losses(m, x, s, y, g);
  };
  if (o.inject_reversal_sign_error) grads = faulty_game_step;
  out.push_back(composite_gradient_check(o.seed + 1, o.gradient_instances, grads, o.fd_step));
  out.push_back(best_response_check(o.seed + 2, o.worlds));
  out.push_back(objective_identity_check(o.seed + 2, o.worlds));
  out.push_back(marginal_check(o.seed + 3, o.worlds));
  return out;
}

}  // namespace invarnet::verify
