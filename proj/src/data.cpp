#include "invarnet/data.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace invarnet::data {

using nlohmann::json;

void TabularDataset::validate() const {
  const auto n = static_cast<Eigen::Index>(s.size());
  if (static_cast<Eigen::Index>(y.size()) != n || x.rows() != n) {
    throw DataError("dataset: x, s and y lengths differ");
  }
  if (static_cast<Eigen::Index>(feature_names.size()) != x.cols()) {
    throw DataError("dataset: feature_names does not match the number of columns");
  }
  if (n_s <= 0 || n_y <= 0) throw DataError("dataset: label cardinalities must be positive");
  for (int v : s) {
    if (v < 0 || v >= n_s) throw DataError("dataset: s label " + std::to_string(v) + " out of range");
  }
  for (int v : y) {
    if (v < 0 || v >= n_y) throw DataError("dataset: y label " + std::to_string(v) + " out of range");
  }
  if (!all_finite(x)) throw DataError("dataset: non-finite feature value");
}

TabularDataset TabularDataset::subset(std::span<const std::size_t> rows) const {
  TabularDataset out;
  out.x.resize(static_cast<Eigen::Index>(rows.size()), x.cols());
  out.s.reserve(rows.size());
  out.y.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= size()) throw RangeError("subset: row index out of range");
    out.x.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
    out.s.push_back(s[rows[i]]);
    out.y.push_back(y[rows[i]]);
  }
  out.feature_names = feature_names;
  out.n_s = n_s;
  out.n_y = n_y;
  return out;
}

namespace {

TabularDataset generate(int n, int d, int n_s, int n_y, double dependence, double noise,
                        std::uint64_t seed) {
  if (n <= 0 || d <= 0 || n_s <= 0 || n_y <= 0) {
    throw ConfigError("synthetic data: n, d and cardinalities must be positive");
  }
  if (!(dependence >= 0.0 && dependence <= 1.0)) {
    throw ConfigError("synthetic data: dependence must lie in [0, 1]");
  }
  if (!(noise >= 0.0)) throw ConfigError("synthetic data: noise must be non-negative");
  Rng rng(seed);
  Matrix a(d, n_y), b(d, n_s);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = rng.normal();

  const int latent = std::max(n_s, n_y);
  TabularDataset ds;
  ds.n_s = n_s;
  ds.n_y = n_y;
  ds.x.resize(n, d);
  ds.s.resize(static_cast<std::size_t>(n));
  ds.y.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int z = rng.uniform_int(latent);
    const int s = rng.uniform() < dependence ? z % n_s : rng.uniform_int(n_s);
    const int y = rng.uniform() < dependence ? z % n_y : rng.uniform_int(n_y);
    ds.s[static_cast<std::size_t>(i)] = s;
    ds.y[static_cast<std::size_t>(i)] = y;
    for (int c = 0; c < d; ++c) ds.x(i, c) = a(c, y) + b(c, s) + noise * rng.normal();
  }
  for (int c = 0; c < d; ++c) ds.feature_names.push_back("x" + std::to_string(c));
  return ds;
}

}  // namespace

TabularDataset synth_independent(int n, int d, int n_s, int n_y, double noise, std::uint64_t seed) {
  return generate(n, d, n_s, n_y, 0.0, noise, seed);
}

TabularDataset synth_confounded(int n, int d, int n_s, int n_y, double dependence, double noise,
                                std::uint64_t seed) {
  return generate(n, d, n_s, n_y, dependence, noise, seed);
}

double confounded_agreement(int n_s, int n_y, double dependence) {
  const int latent = std::max(n_s, n_y);
  double total = 0.0;
  for (int z = 0; z < latent; ++z) {
    for (int v = 0; v < std::min(n_s, n_y); ++v) {
      const double ps = dependence * (z % n_s == v) + (1.0 - dependence) / n_s;
      const double py = dependence * (z % n_y == v) + (1.0 - dependence) / n_y;
      total += ps * py / latent;
    }
  }
  return total;
}

double empirical_mutual_information(LabelSpan a, LabelSpan b, int n_a, int n_b) {
  if (a.size() != b.size()) throw ShapeError("mutual information: length mismatch");
  if (a.empty()) return 0.0;
  std::vector<double> joint(static_cast<std::size_t>(n_a * n_b), 0.0), pa(n_a, 0.0), pb(n_b, 0.0);
  const double w = 1.0 / static_cast<double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] < 0 || a[i] >= n_a || b[i] < 0 || b[i] >= n_b) {
      throw RangeError("mutual information: label out of range");
    }
    joint[static_cast<std::size_t>(a[i] * n_b + b[i])] += w;
    pa[a[i]] += w;
    pb[b[i]] += w;
  }
  double mi = 0.0;
  for (int i = 0; i < n_a; ++i) {
    for (int j = 0; j < n_b; ++j) {
      const double p = joint[static_cast<std::size_t>(i * n_b + j)];
      if (p > 0.0) mi += p * std::log(p / (pa[i] * pb[j]));
    }
  }
  return std::max(mi, 0.0);
}

void Schema::validate() const {
  if (s_column.empty() || y_column.empty()) throw ConfigError("schema: s and y columns required");
  if (s_column == y_column) throw ConfigError("schema: s and y must be different columns");
  for (const auto& f : features) {
    if (f == s_column || f == y_column) {
      throw ConfigError("schema: feature column '" + f + "' is also the s or y column");
    }
  }
  for (const auto& [col, values] : categorical) {
    if (std::find(features.begin(), features.end(), col) == features.end()) {
      throw ConfigError("schema: categorical column '" + col + "' is not a feature");
    }
    if (values.empty()) throw ConfigError("schema: categorical column '" + col + "' has no values");
  }
  auto check_map = [](const std::map<std::string, int>& m, const char* what) {
    if (m.empty()) throw ConfigError(std::string("schema: empty value map for ") + what);
    std::set<int> seen;
    for (const auto& [k, v] : m) seen.insert(v);
    if (*seen.begin() != 0 || *seen.rbegin() != static_cast<int>(seen.size()) - 1) {
      throw ConfigError(std::string("schema: ") + what + " indices must be 0..k-1");
    }
  };
  check_map(s_values, "s");
  check_map(y_values, "y");
}

json Schema::to_json() const {
  return json{{"features", features},       {"categorical", categorical}, {"s_column", s_column},
              {"y_column", y_column},       {"s_values", s_values},       {"y_values", y_values}};
}

Schema Schema::from_json(const json& j) {
  Schema s;
  try {
    s.features = j.at("features").get<std::vector<std::string>>();
    if (j.contains("categorical")) {
      s.categorical = j.at("categorical").get<std::map<std::string, std::vector<std::string>>>();
    }
    s.s_column = j.at("s_column").get<std::string>();
    s.y_column = j.at("y_column").get<std::string>();
    s.s_values = j.at("s_values").get<std::map<std::string, int>>();
    s.y_values = j.at("y_values").get<std::map<std::string, int>>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("schema: ") + e.what());
  }
  s.validate();
  return s;
}

Schema Schema::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read schema " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("schema " + path + ": " + e.what());
  }
  return from_json(j);
}

void Schema::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write schema " + path);
  out << to_json().dump(2) << '\n';
}

Schema Schema::for_dataset(const TabularDataset& ds) {
  Schema s;
  s.features = ds.feature_names;
  s.s_column = "s";
  s.y_column = "y";
  for (int i = 0; i < ds.n_s; ++i) s.s_values[std::to_string(i)] = i;
  for (int i = 0; i < ds.n_y; ++i) s.y_values[std::to_string(i)] = i;
  return s;
}

namespace {

std::string trim(std::string_view v) {
  const auto b = v.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = v.find_last_not_of(" \t\r");
  return std::string(v.substr(b, e - b + 1));
}

// One CSV record; double quotes may wrap fields and "" escapes a quote.
std::vector<std::string> parse_record(const std::string& line, std::size_t row) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false, was_quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
      was_quoted = true;
    } else if (c == ',') {
      out.push_back(was_quoted ? field : trim(field));
      field.clear();
      was_quoted = false;
    } else {
      field += c;
    }
  }
  if (quoted) throw DataError("csv row " + std::to_string(row) + ": unterminated quote");
  out.push_back(was_quoted ? field : trim(field));
  return out;
}

double parse_number(const std::string& cell, std::size_t row, const std::string& col) {
  double v = 0.0;
  const char* end = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(cell.data(), end, v);
  if (cell.empty() || ec != std::errc() || ptr != end || !std::isfinite(v)) {
    throw DataError("csv row " + std::to_string(row) + ": column '" + col +
                    "' is not a finite number: '" + cell + "'");
  }
  return v;
}

}  // namespace

TabularDataset load_csv(const std::string& path, const Schema& schema) {
  schema.validate();
  std::ifstream in(path);
  if (!in) throw DataError("cannot read csv " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("csv " + path + ": missing header row");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const auto header = parse_record(line, 1);
  auto column = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError("csv " + path + ": missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };

  struct Source {
    std::size_t col;
    const std::vector<std::string>* categories;  // null for numeric
    std::string name;
  };
  std::vector<Source> sources;
  TabularDataset ds;
  for (const auto& f : schema.features) {
    auto cat = schema.categorical.find(f);
    const std::vector<std::string>* values = cat == schema.categorical.end() ? nullptr : &cat->second;
    sources.push_back({column(f), values, f});
    if (values) {
      for (const auto& v : *values) ds.feature_names.push_back(f + "=" + v);
    } else {
      ds.feature_names.push_back(f);
    }
  }
  const std::size_t s_col = column(schema.s_column), y_col = column(schema.y_column);
  ds.n_s = static_cast<int>(schema.s_values.size());
  ds.n_y = static_cast<int>(schema.y_values.size());

  std::vector<std::vector<double>> rows;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto cells = parse_record(line, row);
    if (cells.size() != header.size()) {
      throw DataError("csv row " + std::to_string(row) + ": expected " + std::to_string(header.size()) +
                      " cells, got " + std::to_string(cells.size()));
    }
    std::vector<double> feats;
    feats.reserve(ds.feature_names.size());
    for (const Source& src : sources) {
      const std::string& cell = cells[src.col];
      if (!src.categories) {
        feats.push_back(parse_number(cell, row, src.name));
        continue;
      }
      auto hit = std::find(src.categories->begin(), src.categories->end(), cell);
      if (hit == src.categories->end()) {
        throw DataError("csv row " + std::to_string(row) + ": unmapped value '" + cell +
                        "' in categorical column '" + src.name + "'");
      }
      for (auto it = src.categories->begin(); it != src.categories->end(); ++it) {
        feats.push_back(it == hit ? 1.0 : 0.0);
      }
    }
    auto label = [&](std::size_t col, const std::map<std::string, int>& m, const char* what) {
      auto it = m.find(cells[col]);
      if (it == m.end()) {
        throw DataError("csv row " + std::to_string(row) + ": unmapped " + what + " value '" +
                        cells[col] + "'");
      }
      return it->second;
    };
    ds.s.push_back(label(s_col, schema.s_values, "s"));
    ds.y.push_back(label(y_col, schema.y_values, "y"));
    rows.push_back(std::move(feats));
  }
  ds.x.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(ds.feature_names.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      ds.x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    }
  }
  ds.validate();
  return ds;
}

void write_csv(const TabularDataset& ds, const std::string& path) {
  ds.validate();
  std::ofstream out(path);
  if (!out) throw DataError("cannot write csv " + path);
  for (const auto& name : ds.feature_names) out << name << ',';
  out << "s,y\n";
  char buf[32];
  for (Eigen::Index r = 0; r < ds.x.rows(); ++r) {
    for (Eigen::Index c = 0; c < ds.x.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", ds.x(r, c));
      out << buf << ',';
    }
    out << ds.s[static_cast<std::size_t>(r)] << ',' << ds.y[static_cast<std::size_t>(r)] << '\n';
  }
}

TabularDataset Standardizer::apply(const TabularDataset& ds) const {
  if (ds.x.cols() != mean.size()) throw ShapeError("standardize: feature count mismatch");
  TabularDataset out = ds;
  out.x = (ds.x.rowwise() - mean).array().rowwise() / stddev.array();
  return out;
}

Standardizer fit_standardizer(const TabularDataset& train) {
  if (train.size() == 0) throw DataError("standardize: empty training set");
  Standardizer st;
  st.mean = train.x.colwise().mean();
  const Matrix centered = train.x.rowwise() - st.mean;
  st.stddev = centered.array().square().colwise().mean().sqrt().matrix();
  for (Eigen::Index c = 0; c < st.stddev.size(); ++c) {
    if (st.stddev(c) < 1e-12) st.stddev(c) = 1.0;
  }
  return st;
}

Standardized standardize(const TabularDataset& train, const std::vector<TabularDataset>& others) {
  Standardized out;
  out.stats = fit_standardizer(train);
  out.train = out.stats.apply(train);
  for (const auto& ds : others) out.others.push_back(out.stats.apply(ds));
  return out;
}

SplitSpec SplitSpec::holdout(double train, double val, double test, std::uint64_t seed) {
  SplitSpec s;
  s.mode = Mode::holdout;
  s.train_fraction = train;
  s.val_fraction = val;
  s.test_fraction = test;
  s.seed = seed;
  return s;
}

SplitSpec SplitSpec::kfold(int k, std::uint64_t seed) {
  SplitSpec s;
  s.mode = Mode::kfold;
  s.k = k;
  s.seed = seed;
  return s;
}

std::vector<Partition> split(std::size_t n, const SplitSpec& spec) {
  Rng rng(spec.seed);
  if (spec.mode == SplitSpec::Mode::kfold) {
    if (spec.k < 2) throw ConfigError("split: k must be at least 2");
    const auto k = static_cast<std::size_t>(spec.k);
    if (n < k) throw DataError("split: " + std::to_string(n) + " rows cannot fill " + std::to_string(k) + " folds");
    const auto perm = rng.permutation(n);
    std::vector<std::vector<std::size_t>> folds(k);
    for (std::size_t f = 0; f < k; ++f) {
      folds[f].assign(perm.begin() + static_cast<std::ptrdiff_t>(f * n / k),
                      perm.begin() + static_cast<std::ptrdiff_t>((f + 1) * n / k));
    }
    std::vector<Partition> out(k);
    for (std::size_t i = 0; i < k; ++i) {
      out[i].test = folds[i];
      out[i].val = folds[(i + 1) % k];
      for (std::size_t f = 0; f < k; ++f) {
        if (f != i && f != (i + 1) % k) out[i].train.insert(out[i].train.end(), folds[f].begin(), folds[f].end());
      }
    }
    return out;
  }

  const double fr[3] = {spec.train_fraction, spec.val_fraction, spec.test_fraction};
  if (fr[0] < 0 || fr[1] < 0 || fr[2] < 0 || std::abs(fr[0] + fr[1] + fr[2] - 1.0) > 1e-9) {
    throw ConfigError("split: fractions must be non-negative and sum to 1");
  }
  const std::size_t nonzero = (fr[0] > 0) + (fr[1] > 0) + (fr[2] > 0);
  if (n < nonzero) throw DataError("split: too few rows for the requested partitions");
  const auto perm = rng.permutation(n);
  auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * fr[0]));
  auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * fr[1]));
  n_train = std::min(n_train, n);
  n_val = std::min(n_val, n - n_train);
  Partition p;
  p.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  p.val.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train),
               perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  p.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), perm.end());
  return {p};
}

}  // namespace invarnet::data
