#pragma once

// Exact equilibrium analysis on finite domains.
//
// A deterministic encoder h = E(x, s) turns the world distribution p(x, s, y)
// into p~(h, s, y). For a fixed encoder the best discriminator and predictor
// are the conditionals p~(s | h) and p~(y | h), and the game value at those
// best responses is  -gamma * H(s | h) + H(y | h).  Everything here is a pure
// function of its inputs; entropies are in nats.

#include "invarnet/common.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>

namespace invarnet::oracle {

struct DiscreteWorld {
  int nx = 0;
  int ns = 0;
  int ny = 0;
  std::vector<double> p;  // index (x * ns + s) * ny + y

  double at(int x, int s, int y) const { return p[static_cast<std::size_t>((x * ns + s) * ny + y)]; }
  // Sizes, non-negativity, and total mass 1 within 1e-12.
  void validate() const;
  // p(s, y), index s * ny + y.
  std::vector<double> marginal_sy() const;
};

struct EncoderTable {
  int nx = 0;
  int ns = 0;
  int n_codes = 0;
  std::vector<int> code;  // index x * ns + s

  int at(int x, int s) const { return code[static_cast<std::size_t>(x * ns + s)]; }
  void validate() const;
};

struct JointTable {
  int nh = 0;
  int ns = 0;
  int ny = 0;
  std::vector<double> p;  // index (h * ns + s) * ny + y

  double at(int h, int s, int y) const { return p[static_cast<std::size_t>((h * ns + s) * ny + y)]; }
  void validate() const;
  std::vector<double> marginal_sy() const;
};

JointTable push_forward(const DiscreteWorld& world, const EncoderTable& encoder);

enum class Target { s, y };

// H(target | h) = -sum p~(h, t) ln p~(t | h), with 0 ln 0 = 0.
double conditional_entropy(const JointTable& joint, Target target);
// Marginal entropy H(target).
double marginal_entropy(const JointTable& joint, Target target);

// q(. | h) for every code with positive mass.
struct ConditionalTable {
  int n_classes = 0;
  std::vector<int> codes;
  std::vector<std::vector<double>> rows;

  const std::vector<double>* row_for(int h) const;
};

ConditionalTable optimal_discriminator(const JointTable& joint);
ConditionalTable optimal_predictor(const JointTable& joint);

enum class Side { discriminator, predictor };

struct BestResponse {
  ConditionalTable table;
  bool converged = false;
  double last_change = 0.0;  // max per-row L1 change in the final step
  std::vector<double> log_likelihood;  // E_p~[ln q] before each step and after the last
};

// Gradient ascent on E_p~[ln q(t | h)] over per-code softmax logits, starting
// from uniform. Each row's gradient is divided by p~(h), so every code moves
// at the same rate whatever its mass.
BestResponse numeric_best_response(const JointTable& joint, Side side, int steps = 5000, double lr = 1.0);

// -gamma * H(s | h) + H(y | h).
double objective_value(const JointTable& joint, double gamma);

// E_p~[gamma ln q_D(s | h) - ln q_M(y | h)] for arbitrary conditionals.
double expected_objective(const JointTable& joint, const ConditionalTable& q_d,
                          const ConditionalTable& q_m, double gamma);

// Largest per-row L1 distance between two tables over the codes of `a`.
double max_row_l1(const ConditionalTable& a, const ConditionalTable& b);

struct LandscapeEntry {
  std::uint64_t table_id = 0;
  double h_s = 0.0;
  double h_y = 0.0;
  double j = 0.0;
};

struct SearchResult {
  EncoderTable best;
  std::uint64_t best_id = 0;
  double j_star = 0.0;
  double h_s = 0.0;
  double h_y = 0.0;
  std::uint64_t tables = 0;
  std::vector<LandscapeEntry> landscape;
};

inline constexpr std::uint64_t kMaxSearchTables = 10'000'000;

// Encoder table with the given lexicographic index (first (x, s) cell most
// significant).
EncoderTable encoder_from_id(int nx, int ns, int n_codes, std::uint64_t id);

// Scores every encoder table by objective_value(push_forward(world, table)).
// Tables within 1e-12 (relative) of the best value count as ties and the
// lexicographically first one wins. Throws GuardError beyond kMaxSearchTables.
SearchResult exhaustive_encoder_search(const DiscreteWorld& world, int code_count, double gamma,
                                       bool keep_landscape = true);

enum class Scenario { independent, confounded };

struct WorldSizes {
  int nx = 4;
  int ns = 2;
  int ny = 2;
  // x = (s, y) exactly; requires nx == ns * ny.
  bool informative_x = false;
};

// Uniform latent z over max(ns, ny) values; s copies z (mod ns) with
// probability `dependence` and is uniform otherwise, likewise y. The
// independent scenario is dependence 0. p(x | s, y) is a seeded random
// stochastic table unless informative_x.
DiscreteWorld generate_world(Scenario scenario, const WorldSizes& sizes, double dependence,
                             std::uint64_t seed);

double mutual_information_sy(const DiscreteWorld& world);
double entropy_s(const DiscreteWorld& world);

nlohmann::json to_json(const DiscreteWorld& world);
nlohmann::json to_json(const EncoderTable& encoder);
DiscreteWorld world_from_json(const nlohmann::json& j);
EncoderTable encoder_from_json(const nlohmann::json& j);
std::string landscape_csv(const std::vector<LandscapeEntry>& landscape);

}  // namespace invarnet::oracle
