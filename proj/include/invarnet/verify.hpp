#pragma once

// Self-test harness behind `invarnet verify`: analytic gradients against
// central finite differences, and the exact equilibrium identities on random
// finite worlds.

#include "invarnet/game.hpp"
#include "invarnet/oracle.hpp"

#include <functional>

namespace invarnet::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0.0;      // worst observed error
  double threshold = 0.0;  // pass iff value < threshold
  std::string detail;
};

// |a - n| / max(|a|, |n|, 1e-3), maximized over entries.
double max_relative_error(const Matrix& analytic, const Matrix& numeric);

// Central differences of a scalar function of one matrix.
Matrix numeric_gradient(const std::function<double(const Matrix&)>& f, const Matrix& at, double h = 1e-5);

// Source of analytic game gradients; game::game_losses by default.
using GameGradientFn = std::function<game::GameStep(model::GameModel&, const Matrix&, LabelSpan, LabelSpan, double)>;

struct VerifyOptions {
  std::uint64_t seed = 0;
  int gradient_instances = 20;
  int worlds = 10;
  double fd_step = 1e-5;
  // Flips the sign of the reversal coefficient in the composite check; used to
  // confirm the check can fail.
  bool inject_reversal_sign_error = false;
};

// Every differentiable op on `instances` random inputs.
std::vector<CheckResult> op_gradient_checks(std::uint64_t seed, int instances, double h = 1e-5);

// Encoder, predictor and discriminator gradients of the joint step against
// finite differences of L_M - gamma*L_D, L_M and L_D on a 4-sample batch.
CheckResult composite_gradient_check(std::uint64_t seed, int instances, const GameGradientFn& grads,
                                     double h = 1e-5);

// Numeric best responses against p~(s|h) and p~(y|h), per-row L1 < 1e-3.
CheckResult best_response_check(std::uint64_t seed, int worlds);

// objective_value against the expectation at the analytic best responses.
CheckResult objective_identity_check(std::uint64_t seed, int worlds);

// push_forward keeps p(s, y) for every random encoder.
CheckResult marginal_check(std::uint64_t seed, int worlds);

std::vector<CheckResult> run_all(const VerifyOptions& options);

// A random finite world with a random encoder table, as used by the checks.
struct RandomCase {
  oracle::DiscreteWorld world;
  oracle::EncoderTable encoder;
};
RandomCase random_case(Rng& rng);

}  // namespace invarnet::verify
