#include "invarnet/cli.hpp"

#include "invarnet/pipeline.hpp"
#include "invarnet/verify.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>

namespace invarnet::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct DataOpts {
  std::string data_dir;
  std::string csv;
  std::string schema;
  std::string scenario = "independent";
  int n = 5000;
  int d = 20;
  int n_s = 2;
  int n_y = 2;
  double dependence = 0.8;
  double noise = 1.0;
  double test_fraction = 0.2;
  double val_fraction = 0.1;
  bool standardize = false;
};

struct Options {
  std::uint64_t seed = 0;
  std::string out;
  std::string config;
  DataOpts data;
  std::string preset = "fair";
  int d_emb = 8;
  game::TrainConfig train;
  int probe_epochs = 500;
  std::vector<double> gammas;
  std::string checkpoint;
  // oracle
  int nx = 0;
  int codes = 2;
  bool informative = false;
  std::string world;
  bool no_landscape = false;
  // verify
  int instances = 20;
  int worlds = 10;
  std::string inject_fault;
};

void add_synthetic_options(CLI::App* app, DataOpts& d) {
  app->add_option("--scenario", d.scenario, "independent or confounded")
      ->check(CLI::IsMember({"independent", "confounded"}));
  app->add_option("--n", d.n, "number of samples")->check(CLI::PositiveNumber);
  app->add_option("--d", d.d, "feature dimension")->check(CLI::PositiveNumber);
  app->add_option("--ns", d.n_s, "values of s")->check(CLI::Range(2, 1000));
  app->add_option("--ny", d.n_y, "values of y")->check(CLI::Range(2, 1000));
  app->add_option("--dependence", d.dependence, "s-y dependence of the confounded scenario")
      ->check(CLI::Range(0.0, 1.0));
  app->add_option("--noise", d.noise, "feature noise scale")->check(CLI::NonNegativeNumber);
  app->add_option("--test-fraction", d.test_fraction, "held-out fraction")->check(CLI::Range(0.0, 1.0));
}

void add_data_options(CLI::App* app, DataOpts& d) {
  app->add_option("--data", d.data_dir, "directory with train.csv, test.csv and schema.json")
      ->check(CLI::ExistingDirectory);
  app->add_option("--csv", d.csv, "single CSV file, split by --test-fraction")->check(CLI::ExistingFile);
  app->add_option("--schema", d.schema, "schema JSON for --csv")->check(CLI::ExistingFile);
  add_synthetic_options(app, d);
  app->add_option("--val-fraction", d.val_fraction, "validation fraction of the training part")
      ->check(CLI::Range(0.0, 1.0));
  app->add_flag("--standardize", d.standardize, "z-score features with training statistics");
}

void add_model_options(CLI::App* app, Options& o) {
  app->add_option("--preset", o.preset, "fair or image")->check(CLI::IsMember({"fair", "image"}));
  app->add_option("--d-emb", o.d_emb, "embedding width for s")->check(CLI::PositiveNumber);
  app->add_option("--probe-epochs", o.probe_epochs, "probe iterations")->check(CLI::PositiveNumber);
}

void add_train_options(CLI::App* app, Options& o) {
  app->add_option("--gamma", o.train.gamma, "adversary weight")->check(CLI::NonNegativeNumber);
  app->add_option("--lr", o.train.lr, "Adam learning rate")->check(CLI::PositiveNumber);
  app->add_option("--batch-size", o.train.batch_size)->check(CLI::PositiveNumber);
  app->add_option("--epochs", o.train.epochs)->check(CLI::NonNegativeNumber);
}

void add_common(CLI::App* app, Options& o) {
  app->add_option("--seed", o.seed, "run seed (required)");
  app->add_option("--out", o.out, "output directory");
  app->add_option("--config", o.config, "JSON config; flags given on the command line take precedence")
      ->check(CLI::ExistingFile);
}

std::string config_input(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  return v.dump();
}

// Fills options that were not given on the command line from the JSON config.
// A manifest is accepted as well: its "config" member is used.
void apply_config(CLI::App* app, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  if (j.is_object() && j.contains("config") && j.contains("command")) {
    if (j["command"] != app->get_name()) {
      throw ConfigError("config " + path + " was written by '" + j["command"].get<std::string>() + "'");
    }
    j = j["config"];
  }
  if (!j.is_object()) throw ConfigError("config " + path + ": top level must be an object");
  for (const auto& [key, value] : j.items()) {
    if (key == "config") continue;
    std::string flag = key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    CLI::Option* opt = nullptr;
    try {
      opt = app->get_option("--" + flag);
    } catch (const CLI::OptionNotFound&) {
      throw ConfigError("config " + path + ": unknown key '" + key + "'");
    }
    if (opt->count() > 0 || value.is_null()) continue;
    std::vector<std::string> inputs;
    if (value.is_array()) {
      for (const auto& v : value) inputs.push_back(config_input(v));
    } else {
      inputs.push_back(config_input(value));
    }
    for (const auto& s : inputs) opt->add_result(s);
    opt->run_callback();
  }
}

json option_value(const CLI::Option* opt) {
  std::vector<std::string> raw = opt->count() > 0 ? opt->results() : std::vector<std::string>{};
  if (raw.empty()) {
    if (opt->get_default_str().empty()) return nullptr;
    raw = {opt->get_default_str()};
  }
  auto typed = [](const std::string& s) -> json {
    if (s == "true") return true;
    if (s == "false") return false;
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (!s.empty() && end == s.c_str() + s.size()) {
      if (s.find_first_of(".eEn") == std::string::npos) return std::stoll(s);
      return v;
    }
    return s;
  };
  if (opt->get_expected_max() > 1) {
    json arr = json::array();
    for (const auto& s : raw) arr.push_back(typed(s));
    return arr;
  }
  return typed(raw.back());
}

// Every option of the subcommand with its resolved value; feeding this back
// through --config reproduces the run.
json resolved_config(const CLI::App* app) {
  json cfg = json::object();
  for (const CLI::Option* opt : app->get_options()) {
    if (opt->get_lnames().empty()) continue;
    const std::string name = opt->get_lnames().front();
    if (name == "help" || name == "config") continue;
    cfg[name] = option_value(opt);
  }
  return cfg;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void write_manifest(const fs::path& dir, const CLI::App* app, std::uint64_t seed, json outputs) {
  json m;
  m["command"] = app->get_name();
  m["seed"] = seed;
  m["config"] = resolved_config(app);
  m["outputs"] = std::move(outputs);
  m["created_utc"] = utc_timestamp();
  write_json(dir / "manifest.json", m);
}

fs::path prepare_out(const std::string& out) {
  if (out.empty()) throw ConfigError("--out is required");
  fs::path dir(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory " + out + ": " + ec.message());
  return dir;
}

pipeline::SyntheticSpec synthetic_spec(const DataOpts& d) {
  pipeline::SyntheticSpec s;
  s.confounded = d.scenario == "confounded";
  s.n = d.n;
  s.d = d.d;
  s.n_s = d.n_s;
  s.n_y = d.n_y;
  s.dependence = s.confounded ? d.dependence : 0.0;
  s.noise = d.noise;
  s.test_fraction = d.test_fraction;
  s.val_fraction = d.val_fraction;
  s.standardize = d.standardize;
  return s;
}

pipeline::Splits load_splits(const DataOpts& d, std::uint64_t seed) {
  const auto seeds = pipeline::Seeds::from(seed);
  if (!d.data_dir.empty() && !d.csv.empty()) throw ConfigError("--data and --csv are mutually exclusive");
  std::pair<data::TabularDataset, data::TabularDataset> parts;
  if (!d.data_dir.empty()) {
    const fs::path dir(d.data_dir);
    for (const char* f : {"schema.json", "train.csv", "test.csv"}) {
      if (!fs::exists(dir / f)) throw ConfigError("--data directory lacks " + std::string(f));
    }
    const auto schema = data::Schema::load((dir / "schema.json").string());
    parts = {data::load_csv((dir / "train.csv").string(), schema),
             data::load_csv((dir / "test.csv").string(), schema)};
  } else if (!d.csv.empty()) {
    if (d.schema.empty()) throw ConfigError("--csv needs --schema");
    parts = pipeline::holdout(data::load_csv(d.csv, data::Schema::load(d.schema)), d.test_fraction, seeds.split);
  } else {
    parts = pipeline::holdout(pipeline::generate(synthetic_spec(d), seed), d.test_fraction, seeds.split);
  }
  return pipeline::prepare(parts.first, parts.second, d.val_fraction, seeds.split + 1, d.standardize);
}

pipeline::Experiment experiment(const Options& o) {
  pipeline::Experiment e;
  e.preset = o.preset;
  e.d_emb = o.d_emb;
  e.train = o.train;
  e.probe.epochs = o.probe_epochs;
  return e;
}

std::string gamma_dir(double g) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "gamma_%g", g);
  return buf;
}

int cmd_gen_data(const CLI::App* app, const Options& o, std::ostream& out) {
  const fs::path dir = prepare_out(o.out);
  const auto spec = synthetic_spec(o.data);
  const auto ds = pipeline::generate(spec, o.seed);
  auto [train, test] = pipeline::holdout(ds, spec.test_fraction, pipeline::Seeds::from(o.seed).split);
  data::write_csv(train, (dir / "train.csv").string());
  data::write_csv(test, (dir / "test.csv").string());
  data::Schema::for_dataset(ds).save((dir / "schema.json").string());
  write_manifest(dir, app, o.seed,
                 {{"train", "train.csv"}, {"test", "test.csv"}, {"schema", "schema.json"},
                  {"train_rows", train.size()}, {"test_rows", test.size()}});
  out << "wrote " << train.size() << " train and " << test.size() << " test rows to " << dir.string() << "\n";
  return kOk;
}

void save_last_good(const fs::path& dir, const game::DivergenceError& e) {
  if (e.last_good) model::save_checkpoint(*e.last_good, (dir / "checkpoint_last_good.json").string());
}

int cmd_train(const CLI::App* app, const Options& o, std::ostream& out) {
  const fs::path dir = prepare_out(o.out);
  const auto splits = load_splits(o.data, o.seed);
  pipeline::Outcome result;
  try {
    result = pipeline::run(splits, experiment(o), o.seed);
  } catch (const game::DivergenceError& e) {
    save_last_good(dir, e);
    throw;
  }
  model::save_checkpoint(result.model, (dir / "checkpoint.json").string());
  result.history.write_csv((dir / "history.csv").string());
  write_json(dir / "metrics.json", result.metrics.to_json());
  write_manifest(dir, app, o.seed,
                 {{"checkpoint", "checkpoint.json"}, {"history", "history.csv"}, {"metrics", "metrics.json"}});
  out << result.metrics.to_json().dump(2) << "\n";
  return kOk;
}

int cmd_eval(const CLI::App* app, const Options& o, std::ostream& out) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  const fs::path dir = prepare_out(o.out);
  auto m = model::load_checkpoint(o.checkpoint);
  const auto splits = load_splits(o.data, o.seed);
  eval::ProbeConfig probe;
  probe.epochs = o.probe_epochs;
  probe.seed = pipeline::Seeds::from(o.seed).probe;
  const auto metrics = eval::evaluate(m, splits.train, splits.test, o.train.gamma, probe);
  write_json(dir / "metrics.json", metrics.to_json());
  write_manifest(dir, app, o.seed, {{"metrics", "metrics.json"}});
  out << metrics.to_json().dump(2) << "\n";
  return kOk;
}

int cmd_sweep(const CLI::App* app, const Options& o, std::ostream& out) {
  if (o.gammas.empty()) throw ConfigError("--gammas is required");
  const fs::path dir = prepare_out(o.out);
  const auto splits = load_splits(o.data, o.seed);
  std::string table = eval::MetricsReport::csv_header() + "\n";
  json outputs = json::array();
  for (double g : o.gammas) {
    if (!(g >= 0.0)) throw ConfigError("--gammas values must be >= 0");
    auto exp = experiment(o);
    exp.train.gamma = g;
    const fs::path sub = dir / gamma_dir(g);
    fs::create_directories(sub);
    pipeline::Outcome result;
    try {
      result = pipeline::run(splits, exp, o.seed);
    } catch (const game::DivergenceError& e) {
      save_last_good(sub, e);
      throw;
    }
    model::save_checkpoint(result.model, (sub / "checkpoint.json").string());
    result.history.write_csv((sub / "history.csv").string());
    write_json(sub / "metrics.json", result.metrics.to_json());
    table += result.metrics.csv_row() + "\n";
    outputs.push_back(gamma_dir(g));
    out << "gamma=" << g << " acc_y=" << result.metrics.acc_y << " probe_acc_s=" << result.metrics.probe_acc_s
        << " majority_s=" << result.metrics.majority_s << "\n";
  }
  write_text(dir / "sweep.csv", table);
  write_manifest(dir, app, o.seed, {{"runs", outputs}, {"summary", "sweep.csv"}});
  return kOk;
}

int cmd_oracle(const CLI::App* app, const Options& o, std::ostream& out) {
  const fs::path dir = prepare_out(o.out.empty() ? "." : o.out);
  oracle::DiscreteWorld world;
  if (!o.world.empty()) {
    std::ifstream in(o.world);
    if (!in) throw DataError("cannot read world " + o.world);
    world = oracle::world_from_json(json::parse(in));
  } else {
    oracle::WorldSizes sizes;
    sizes.ns = o.data.n_s;
    sizes.ny = o.data.n_y;
    sizes.informative_x = o.informative;
    sizes.nx = o.nx > 0 ? o.nx : (o.informative ? sizes.ns * sizes.ny : 4);
    const bool confounded = o.data.scenario == "confounded";
    world = oracle::generate_world(confounded ? oracle::Scenario::confounded : oracle::Scenario::independent,
                                   sizes, confounded ? o.data.dependence : 0.0, o.seed);
  }
  const auto result = oracle::exhaustive_encoder_search(world, o.codes, o.train.gamma, !o.no_landscape);
  const json summary = {{"gamma", o.train.gamma},
                        {"codes", o.codes},
                        {"tables", result.tables},
                        {"best_table_id", result.best_id},
                        {"H_s_given_h", result.h_s},
                        {"H_y_given_h", result.h_y},
                        {"J", result.j_star},
                        {"H_s", oracle::entropy_s(world)},
                        {"I_sy", oracle::mutual_information_sy(world)},
                        {"encoder", result.best.code}};
  write_json(dir / "summary.json", summary);
  write_json(dir / "world.json", oracle::to_json(world));
  write_json(dir / "encoder.json", oracle::to_json(result.best));
  json outputs = {{"summary", "summary.json"}, {"world", "world.json"}, {"encoder", "encoder.json"}};
  if (!o.no_landscape) {
    write_text(dir / "landscape.csv", oracle::landscape_csv(result.landscape));
    outputs["landscape"] = "landscape.csv";
  }
  write_manifest(dir, app, o.seed, outputs);
  out << summary.dump(2) << "\n";
  return kOk;
}

int cmd_verify(const Options& o, std::ostream& out) {
  verify::VerifyOptions v;
  v.seed = o.seed;
  v.gradient_instances = o.instances;
  v.worlds = o.worlds;
  v.inject_reversal_sign_error = o.inject_fault == "reversal-sign";
  const auto checks = verify::run_all(v);
  bool ok = true;
  json report = json::array();
  for (const auto& c : checks) {
    ok = ok && c.passed;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s %-42s %.3e (< %.0e)", c.passed ? "PASS" : "FAIL", c.name.c_str(), c.value,
                  c.threshold);
    out << buf;
    if (!c.detail.empty()) out << "  " << c.detail;
    out << "\n";
    report.push_back({{"name", c.name}, {"passed", c.passed}, {"value", c.value}, {"threshold", c.threshold}});
  }
  if (!o.out.empty()) write_json(prepare_out(o.out) / "verify.json", report);
  out << (ok ? "all checks passed" : "some checks failed") << "\n";
  return ok ? kOk : kFailure;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Adversarial invariant representation learning"};
  app.name("invarnet");
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  Options o;

  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset as CSV");
  add_common(gen, o);
  add_synthetic_options(gen, o.data);

  auto* train = app.add_subcommand("train", "train encoder, predictor and discriminator");
  add_common(train, o);
  add_data_options(train, o.data);
  add_model_options(train, o);
  add_train_options(train, o);

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev, o);
  ev->add_option("--checkpoint", o.checkpoint, "checkpoint JSON")->check(CLI::ExistingFile);
  add_data_options(ev, o.data);
  ev->add_option("--probe-epochs", o.probe_epochs, "probe iterations")->check(CLI::PositiveNumber);
  ev->add_option("--gamma", o.train.gamma, "gamma used for the reported objective")
      ->check(CLI::NonNegativeNumber);

  auto* sweep = app.add_subcommand("sweep", "train once per gamma on the same data");
  add_common(sweep, o);
  sweep->add_option("--gammas", o.gammas, "comma-separated gamma values")->delimiter(',');
  add_data_options(sweep, o.data);
  add_model_options(sweep, o);
  add_train_options(sweep, o);

  auto* orc = app.add_subcommand("oracle", "exhaustive encoder search on a finite world");
  add_common(orc, o);
  orc->add_option("--scenario", o.data.scenario, "independent or confounded")
      ->check(CLI::IsMember({"independent", "confounded"}));
  orc->add_option("--dependence", o.data.dependence)->check(CLI::Range(0.0, 1.0));
  orc->add_option("--nx", o.nx, "values of x (0: 4, or ns*ny with --informative)")->check(CLI::NonNegativeNumber);
  orc->add_option("--ns", o.data.n_s)->check(CLI::Range(2, 64));
  orc->add_option("--ny", o.data.n_y)->check(CLI::Range(2, 64));
  orc->add_flag("--informative", o.informative, "x encodes (s, y) exactly");
  orc->add_option("--codes", o.codes, "size of the representation alphabet")->check(CLI::PositiveNumber);
  orc->add_option("--gamma", o.train.gamma)->check(CLI::NonNegativeNumber);
  orc->add_option("--world", o.world, "world JSON instead of a generated one")->check(CLI::ExistingFile);
  orc->add_flag("--no-landscape", o.no_landscape, "skip landscape.csv");

  auto* ver = app.add_subcommand("verify", "gradient and equilibrium self-checks");
  ver->add_option("--seed", o.seed);
  ver->add_option("--out", o.out, "optional directory for verify.json");
  ver->add_option("--config", o.config)->check(CLI::ExistingFile);
  ver->add_option("--instances", o.instances)->check(CLI::PositiveNumber);
  ver->add_option("--worlds", o.worlds)->check(CLI::PositiveNumber);
  ver->add_option("--inject-fault", o.inject_fault)->check(CLI::IsMember({"", "reversal-sign"}))->group("");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
    CLI::App* sub = app.get_subcommands().front();
    if (!o.config.empty()) apply_config(sub, o.config);
    if (sub != ver && sub->get_option("--seed")->count() == 0) throw ConfigError("--seed is required");

    if (sub == gen) return cmd_gen_data(sub, o, out);
    if (sub == train) return cmd_train(sub, o, out);
    if (sub == ev) return cmd_eval(sub, o, out);
    if (sub == sweep) return cmd_sweep(sub, o, out);
    if (sub == orc) return cmd_oracle(sub, o, out);
    return cmd_verify(o, out);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const GuardError& e) {
    err << "guard exceeded: " << e.what() << "\n";
    return kGuardError;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumericalError;
  } catch (const Error& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const json::exception& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

}  // namespace invarnet::cli
