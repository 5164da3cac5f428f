#include "invarnet/oracle.hpp"

#include <algorithm>
#include <cstdio>

namespace invarnet::oracle {

using nlohmann::json;

namespace {

void check_distribution(const std::vector<double>& p, std::size_t expected, const char* what) {
  if (p.size() != expected) throw ShapeError(std::string(what) + ": table has the wrong size");
  double total = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw DataError(std::string(what) + ": negative or non-finite mass");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-12) {
    throw DataError(std::string(what) + ": total mass " + std::to_string(total) + " is not 1");
  }
}

// H(target | h) over a flat (h, s, y) buffer.
double cond_entropy_raw(const double* p, int nh, int ns, int ny, Target target) {
  const int nt = target == Target::s ? ns : ny;
  std::vector<double> pt(static_cast<std::size_t>(nt));
  double h_total = 0.0;
  for (int h = 0; h < nh; ++h) {
    std::fill(pt.begin(), pt.end(), 0.0);
    double ph = 0.0;
    for (int s = 0; s < ns; ++s) {
      for (int y = 0; y < ny; ++y) {
        const double v = p[(h * ns + s) * ny + y];
        pt[static_cast<std::size_t>(target == Target::s ? s : y)] += v;
        ph += v;
      }
    }
    if (ph <= 0.0) continue;
    for (double v : pt) {
      if (v > 0.0) h_total -= v * std::log(v / ph);
    }
  }
  return h_total;
}

std::vector<double> marginal_sy_raw(const std::vector<double>& p, int n_first, int ns, int ny) {
  std::vector<double> out(static_cast<std::size_t>(ns * ny), 0.0);
  for (int a = 0; a < n_first; ++a) {
    for (int i = 0; i < ns * ny; ++i) out[static_cast<std::size_t>(i)] += p[static_cast<std::size_t>(a * ns * ny + i)];
  }
  return out;
}

// Per-code conditional of the target; rows for zero-mass codes are dropped.
ConditionalTable conditional(const JointTable& joint, Target target) {
  ConditionalTable t;
  t.n_classes = target == Target::s ? joint.ns : joint.ny;
  for (int h = 0; h < joint.nh; ++h) {
    std::vector<double> row(static_cast<std::size_t>(t.n_classes), 0.0);
    double ph = 0.0;
    for (int s = 0; s < joint.ns; ++s) {
      for (int y = 0; y < joint.ny; ++y) {
        const double v = joint.at(h, s, y);
        row[static_cast<std::size_t>(target == Target::s ? s : y)] += v;
        ph += v;
      }
    }
    if (ph <= 0.0) continue;
    for (double& v : row) v /= ph;
    t.codes.push_back(h);
    t.rows.push_back(std::move(row));
  }
  return t;
}

}  // namespace

void DiscreteWorld::validate() const {
  if (nx <= 0 || ns <= 0 || ny <= 0) throw ShapeError("world: sizes must be positive");
  check_distribution(p, static_cast<std::size_t>(nx * ns * ny), "world");
}

std::vector<double> DiscreteWorld::marginal_sy() const { return marginal_sy_raw(p, nx, ns, ny); }

void EncoderTable::validate() const {
  if (nx <= 0 || ns <= 0 || n_codes <= 0) throw ShapeError("encoder table: sizes must be positive");
  if (code.size() != static_cast<std::size_t>(nx * ns)) {
    throw ShapeError("encoder table: must assign a code to every (x, s)");
  }
  for (int c : code) {
    if (c < 0 || c >= n_codes) throw RangeError("encoder table: code " + std::to_string(c) + " out of range");
  }
}

void JointTable::validate() const {
  if (nh <= 0 || ns <= 0 || ny <= 0) throw ShapeError("joint: sizes must be positive");
  check_distribution(p, static_cast<std::size_t>(nh * ns * ny), "joint");
}

std::vector<double> JointTable::marginal_sy() const { return marginal_sy_raw(p, nh, ns, ny); }

JointTable push_forward(const DiscreteWorld& world, const EncoderTable& encoder) {
  world.validate();
  encoder.validate();
  if (encoder.nx != world.nx || encoder.ns != world.ns) {
    throw ShapeError("push_forward: encoder table does not cover the world's (x, s) grid");
  }
  JointTable j;
  j.nh = encoder.n_codes;
  j.ns = world.ns;
  j.ny = world.ny;
  j.p.assign(static_cast<std::size_t>(j.nh * j.ns * j.ny), 0.0);
  for (int x = 0; x < world.nx; ++x) {
    for (int s = 0; s < world.ns; ++s) {
      const int h = encoder.at(x, s);
      for (int y = 0; y < world.ny; ++y) {
        j.p[static_cast<std::size_t>((h * j.ns + s) * j.ny + y)] += world.at(x, s, y);
      }
    }
  }
  return j;
}

double conditional_entropy(const JointTable& joint, Target target) {
  joint.validate();
  return cond_entropy_raw(joint.p.data(), joint.nh, joint.ns, joint.ny, target);
}

double marginal_entropy(const JointTable& joint, Target target) {
  joint.validate();
  const auto sy = joint.marginal_sy();
  std::vector<double> pt(static_cast<std::size_t>(target == Target::s ? joint.ns : joint.ny), 0.0);
  for (int s = 0; s < joint.ns; ++s) {
    for (int y = 0; y < joint.ny; ++y) {
      pt[static_cast<std::size_t>(target == Target::s ? s : y)] += sy[static_cast<std::size_t>(s * joint.ny + y)];
    }
  }
  double h = 0.0;
  for (double v : pt) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

const std::vector<double>* ConditionalTable::row_for(int h) const {
  auto it = std::lower_bound(codes.begin(), codes.end(), h);
  if (it == codes.end() || *it != h) return nullptr;
  return &rows[static_cast<std::size_t>(it - codes.begin())];
}

ConditionalTable optimal_discriminator(const JointTable& joint) {
  joint.validate();
  return conditional(joint, Target::s);
}

ConditionalTable optimal_predictor(const JointTable& joint) {
  joint.validate();
  return conditional(joint, Target::y);
}

BestResponse numeric_best_response(const JointTable& joint, Side side, int steps, double lr) {
  joint.validate();
  if (steps < 1) throw ConfigError("numeric_best_response: steps must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("numeric_best_response: lr must be > 0");
  const Target target = side == Side::discriminator ? Target::s : Target::y;
  // Only the mass p~(h, t) is needed; the analytic conditional is never read.
  const int k = target == Target::s ? joint.ns : joint.ny;
  std::vector<int> codes;
  std::vector<std::vector<double>> mass;
  std::vector<double> code_mass;
  for (int h = 0; h < joint.nh; ++h) {
    std::vector<double> row(static_cast<std::size_t>(k), 0.0);
    double ph = 0.0;
    for (int s = 0; s < joint.ns; ++s) {
      for (int y = 0; y < joint.ny; ++y) {
        row[static_cast<std::size_t>(target == Target::s ? s : y)] += joint.at(h, s, y);
        ph += joint.at(h, s, y);
      }
    }
    if (ph <= 0.0) continue;
    codes.push_back(h);
    mass.push_back(std::move(row));
    code_mass.push_back(ph);
  }

  const std::size_t n_rows = codes.size();
  std::vector<std::vector<double>> logits(n_rows, std::vector<double>(static_cast<std::size_t>(k), 0.0));
  std::vector<std::vector<double>> q(n_rows, std::vector<double>(static_cast<std::size_t>(k), 1.0 / k));
  auto softmax = [](const std::vector<double>& z, std::vector<double>& out) {
    const double mx = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) total += (out[i] = std::exp(z[i] - mx));
    for (double& v : out) v /= total;
  };
  auto log_likelihood = [&]() {
    double ll = 0.0;
    for (std::size_t r = 0; r < n_rows; ++r) {
      const double mx = *std::max_element(logits[r].begin(), logits[r].end());
      double lse = 0.0;
      for (double z : logits[r]) lse += std::exp(z - mx);
      lse = mx + std::log(lse);
      for (std::size_t t = 0; t < mass[r].size(); ++t) {
        if (mass[r][t] > 0.0) ll += mass[r][t] * (logits[r][t] - lse);
      }
    }
    return ll;
  };

  BestResponse out;
  out.log_likelihood.reserve(static_cast<std::size_t>(steps) + 1);
  std::vector<double> next(static_cast<std::size_t>(k));
  for (int it = 0; it < steps; ++it) {
    out.log_likelihood.push_back(log_likelihood());
    double max_change = 0.0;
    for (std::size_t r = 0; r < n_rows; ++r) {
      for (std::size_t t = 0; t < static_cast<std::size_t>(k); ++t) {
        // d/dz_t E[ln q] = p~(h, t) - p~(h) q(t | h); divided by p~(h).
        logits[r][t] += lr * (mass[r][t] / code_mass[r] - q[r][t]);
      }
      softmax(logits[r], next);
      double change = 0.0;
      for (std::size_t t = 0; t < next.size(); ++t) change += std::abs(next[t] - q[r][t]);
      max_change = std::max(max_change, change);
      q[r] = next;
    }
    out.last_change = max_change;
  }
  out.log_likelihood.push_back(log_likelihood());
  out.converged = out.last_change <= 1e-6;
  out.table.n_classes = k;
  out.table.codes = std::move(codes);
  out.table.rows = std::move(q);
  return out;
}

double objective_value(const JointTable& joint, double gamma) {
  return -gamma * conditional_entropy(joint, Target::s) + conditional_entropy(joint, Target::y);
}

double expected_objective(const JointTable& joint, const ConditionalTable& q_d, const ConditionalTable& q_m,
                          double gamma) {
  joint.validate();
  double total = 0.0;
  for (int h = 0; h < joint.nh; ++h) {
    for (int s = 0; s < joint.ns; ++s) {
      for (int y = 0; y < joint.ny; ++y) {
        const double p = joint.at(h, s, y);
        if (p <= 0.0) continue;
        const auto* rd = q_d.row_for(h);
        const auto* rm = q_m.row_for(h);
        if (!rd || !rm) throw RangeError("expected_objective: missing conditional row for code " + std::to_string(h));
        total += p * (gamma * std::log((*rd)[static_cast<std::size_t>(s)]) - std::log((*rm)[static_cast<std::size_t>(y)]));
      }
    }
  }
  return total;
}

double max_row_l1(const ConditionalTable& a, const ConditionalTable& b) {
  double worst = 0.0;
  for (std::size_t r = 0; r < a.codes.size(); ++r) {
    const auto* other = b.row_for(a.codes[r]);
    if (!other || other->size() != a.rows[r].size()) return std::numeric_limits<double>::infinity();
    double l1 = 0.0;
    for (std::size_t t = 0; t < other->size(); ++t) l1 += std::abs(a.rows[r][t] - (*other)[t]);
    worst = std::max(worst, l1);
  }
  return worst;
}

EncoderTable encoder_from_id(int nx, int ns, int n_codes, std::uint64_t id) {
  EncoderTable e;
  e.nx = nx;
  e.ns = ns;
  e.n_codes = n_codes;
  e.code.assign(static_cast<std::size_t>(nx * ns), 0);
  for (std::size_t i = e.code.size(); i-- > 0;) {
    e.code[i] = static_cast<int>(id % static_cast<std::uint64_t>(n_codes));
    id /= static_cast<std::uint64_t>(n_codes);
  }
  return e;
}

SearchResult exhaustive_encoder_search(const DiscreteWorld& world, int code_count, double gamma,
                                       bool keep_landscape) {
  world.validate();
  if (code_count < 1) throw ConfigError("exhaustive_encoder_search: code_count must be >= 1");
  const int cells = world.nx * world.ns;
  std::uint64_t tables = 1;
  for (int i = 0; i < cells; ++i) {
    if (tables > kMaxSearchTables / static_cast<std::uint64_t>(code_count)) {
      throw GuardError("exhaustive_encoder_search: " + std::to_string(code_count) + "^" +
                       std::to_string(cells) + " tables exceed the limit of " +
                       std::to_string(kMaxSearchTables));
    }
    tables *= static_cast<std::uint64_t>(code_count);
  }

  SearchResult out;
  out.tables = tables;
  if (keep_landscape) out.landscape.reserve(tables);
  const int ns = world.ns, ny = world.ny;
  std::vector<double> joint(static_cast<std::size_t>(code_count * ns * ny));
  std::vector<int> code(static_cast<std::size_t>(cells), 0);
  bool have_best = false;
  for (std::uint64_t id = 0; id < tables; ++id) {
    std::fill(joint.begin(), joint.end(), 0.0);
    for (int x = 0; x < world.nx; ++x) {
      for (int s = 0; s < ns; ++s) {
        const int h = code[static_cast<std::size_t>(x * ns + s)];
        for (int y = 0; y < ny; ++y) {
          joint[static_cast<std::size_t>((h * ns + s) * ny + y)] += world.at(x, s, y);
        }
      }
    }
    const double hs = cond_entropy_raw(joint.data(), code_count, ns, ny, Target::s);
    const double hy = cond_entropy_raw(joint.data(), code_count, ns, ny, Target::y);
    const double j = -gamma * hs + hy;
    if (keep_landscape) out.landscape.push_back({id, hs, hy, j});
    if (!have_best || j < out.j_star - 1e-12 * std::max(1.0, std::abs(out.j_star))) {
      have_best = true;
      out.j_star = j;
      out.h_s = hs;
      out.h_y = hy;
      out.best_id = id;
    }
    // Odometer increment, last cell fastest (lexicographic order).
    for (int i = cells - 1; i >= 0; --i) {
      if (++code[static_cast<std::size_t>(i)] < code_count) break;
      code[static_cast<std::size_t>(i)] = 0;
    }
  }
  out.best = encoder_from_id(world.nx, world.ns, code_count, out.best_id);
  return out;
}

DiscreteWorld generate_world(Scenario scenario, const WorldSizes& sizes, double dependence,
                             std::uint64_t seed) {
  if (sizes.nx < 2 || sizes.ns < 2 || sizes.ny < 2) throw ConfigError("generate_world: sizes must be >= 2");
  if (!(dependence >= 0.0 && dependence <= 1.0)) {
    throw ConfigError("generate_world: dependence must lie in [0, 1]");
  }
  if (sizes.informative_x && sizes.nx != sizes.ns * sizes.ny) {
    throw ConfigError("generate_world: informative x needs nx == ns * ny");
  }
  const double d = scenario == Scenario::independent ? 0.0 : dependence;
  const int ns = sizes.ns, ny = sizes.ny, nx = sizes.nx;
  const int latent = std::max(ns, ny);

  std::vector<double> psy(static_cast<std::size_t>(ns * ny), 0.0);
  for (int z = 0; z < latent; ++z) {
    for (int s = 0; s < ns; ++s) {
      for (int y = 0; y < ny; ++y) {
        const double ps = d * (z % ns == s) + (1.0 - d) / ns;
        const double py = d * (z % ny == y) + (1.0 - d) / ny;
        psy[static_cast<std::size_t>(s * ny + y)] += ps * py / latent;
      }
    }
  }

  Rng rng(seed);
  DiscreteWorld w;
  w.nx = nx;
  w.ns = ns;
  w.ny = ny;
  w.p.assign(static_cast<std::size_t>(nx * ns * ny), 0.0);
  std::vector<double> px(static_cast<std::size_t>(nx));
  for (int s = 0; s < ns; ++s) {
    for (int y = 0; y < ny; ++y) {
      if (sizes.informative_x) {
        std::fill(px.begin(), px.end(), 0.0);
        px[static_cast<std::size_t>(s * ny + y)] = 1.0;
      } else {
        // Dirichlet(1) row from normalized exponentials.
        double total = 0.0;
        for (double& v : px) {
          double u = rng.uniform();
          while (u <= 0.0) u = rng.uniform();
          total += (v = -std::log(u));
        }
        for (double& v : px) v /= total;
      }
      for (int x = 0; x < nx; ++x) {
        w.p[static_cast<std::size_t>((x * ns + s) * ny + y)] = psy[static_cast<std::size_t>(s * ny + y)] * px[static_cast<std::size_t>(x)];
      }
    }
  }
  // Renormalize away rounding so the mass check holds at 1e-12.
  double total = 0.0;
  for (double v : w.p) total += v;
  for (double& v : w.p) v /= total;
  w.validate();
  return w;
}

double mutual_information_sy(const DiscreteWorld& world) {
  world.validate();
  const auto sy = world.marginal_sy();
  std::vector<double> ps(static_cast<std::size_t>(world.ns), 0.0), py(static_cast<std::size_t>(world.ny), 0.0);
  for (int s = 0; s < world.ns; ++s) {
    for (int y = 0; y < world.ny; ++y) {
      ps[static_cast<std::size_t>(s)] += sy[static_cast<std::size_t>(s * world.ny + y)];
      py[static_cast<std::size_t>(y)] += sy[static_cast<std::size_t>(s * world.ny + y)];
    }
  }
  double mi = 0.0;
  for (int s = 0; s < world.ns; ++s) {
    for (int y = 0; y < world.ny; ++y) {
      const double v = sy[static_cast<std::size_t>(s * world.ny + y)];
      if (v > 0.0) mi += v * std::log(v / (ps[static_cast<std::size_t>(s)] * py[static_cast<std::size_t>(y)]));
    }
  }
  return mi;
}

double entropy_s(const DiscreteWorld& world) {
  world.validate();
  const auto sy = world.marginal_sy();
  double h = 0.0;
  for (int s = 0; s < world.ns; ++s) {
    double v = 0.0;
    for (int y = 0; y < world.ny; ++y) v += sy[static_cast<std::size_t>(s * world.ny + y)];
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

json to_json(const DiscreteWorld& world) {
  return json{{"nx", world.nx}, {"ns", world.ns}, {"ny", world.ny}, {"layout", "x,s,y"}, {"p", world.p}};
}

json to_json(const EncoderTable& encoder) {
  return json{{"nx", encoder.nx}, {"ns", encoder.ns}, {"n_codes", encoder.n_codes}, {"layout", "x,s"}, {"code", encoder.code}};
}

DiscreteWorld world_from_json(const json& j) {
  DiscreteWorld w;
  try {
    w.nx = j.at("nx").get<int>();
    w.ns = j.at("ns").get<int>();
    w.ny = j.at("ny").get<int>();
    w.p = j.at("p").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw DataError(std::string("world json: ") + e.what());
  }
  w.validate();
  return w;
}

EncoderTable encoder_from_json(const json& j) {
  EncoderTable e;
  try {
    e.nx = j.at("nx").get<int>();
    e.ns = j.at("ns").get<int>();
    e.n_codes = j.at("n_codes").get<int>();
    e.code = j.at("code").get<std::vector<int>>();
  } catch (const json::exception& ex) {
    throw DataError(std::string("encoder json: ") + ex.what());
  }
  e.validate();
  return e;
}

std::string landscape_csv(const std::vector<LandscapeEntry>& landscape) {
  std::string out = "table_id,H_s_given_h,H_y_given_h,J\n";
  char buf[128];
  for (const auto& e : landscape) {
    std::snprintf(buf, sizeof buf, "%llu,%.17g,%.17g,%.17g\n", static_cast<unsigned long long>(e.table_id),
                  e.h_s, e.h_y, e.j);
    out += buf;
  }
  return out;
}

}  // namespace invarnet::oracle
