#pragma once

#include "invarnet/common.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <string>

namespace invarnet::data {

struct TabularDataset {
  Matrix x;  // n x d
  Labels s;
  Labels y;
  std::vector<std::string> feature_names;
  int n_s = 0;
  int n_y = 0;

  std::size_t size() const { return s.size(); }
  Eigen::Index dim() const { return x.cols(); }
  // Throws DataError when lengths, label ranges or finiteness are violated.
  void validate() const;
  TabularDataset subset(std::span<const std::size_t> rows) const;
};

// s ~ p(s), y ~ p(y) independently; x = A onehot(y) + B onehot(s) + noise.
TabularDataset synth_independent(int n, int d, int n_s, int n_y, double noise, std::uint64_t seed);

// z uniform over max(n_s, n_y) values; s copies z (mod n_s) with probability
// `dependence` and is uniform otherwise, and likewise for y. For binary labels
// this gives P(s = z) = (1 + dependence) / 2 and P(s = y) = (1 + dependence^2) / 2.
// With dependence 0 the output equals synth_independent for the same seed.
TabularDataset synth_confounded(int n, int d, int n_s, int n_y, double dependence, double noise,
                                std::uint64_t seed);

// Exact P(s = y) of the confounded generator.
double confounded_agreement(int n_s, int n_y, double dependence);

// Plug-in estimate of I(a; b) in nats.
double empirical_mutual_information(LabelSpan a, LabelSpan b, int n_a, int n_b);

// Column mapping for CSV ingestion.
struct Schema {
  std::vector<std::string> features;  // in output order
  // Columns in `features` that are expanded one-hot, with their allowed values.
  std::map<std::string, std::vector<std::string>> categorical;
  std::string s_column;
  std::string y_column;
  std::map<std::string, int> s_values;
  std::map<std::string, int> y_values;

  void validate() const;
  nlohmann::json to_json() const;
  static Schema from_json(const nlohmann::json& j);
  static Schema load(const std::string& path);
  void save(const std::string& path) const;
  // Schema matching write_csv output for a dataset with numeric features.
  static Schema for_dataset(const TabularDataset& ds);
};

TabularDataset load_csv(const std::string& path, const Schema& schema);
// Header is the feature names followed by "s" and "y" (integer labels).
void write_csv(const TabularDataset& ds, const std::string& path);

struct Standardizer {
  RowVector mean;
  RowVector stddev;  // features with stddev < 1e-12 are only centered

  TabularDataset apply(const TabularDataset& ds) const;
};

Standardizer fit_standardizer(const TabularDataset& train);

struct Standardized {
  TabularDataset train;
  std::vector<TabularDataset> others;
  Standardizer stats;
};

// Every dataset is transformed with statistics of `train` only.
Standardized standardize(const TabularDataset& train, const std::vector<TabularDataset>& others = {});

struct SplitSpec {
  enum class Mode { holdout, kfold };
  Mode mode = Mode::holdout;
  double train_fraction = 0.8;
  double val_fraction = 0.1;
  double test_fraction = 0.1;
  int k = 5;
  std::uint64_t seed = 0;

  static SplitSpec holdout(double train, double val, double test, std::uint64_t seed);
  static SplitSpec kfold(int k, std::uint64_t seed);
};

struct Partition {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

// Seeded shuffle, then either one holdout partition or k rotating ones
// (fold i is test, fold i+1 is validation, the rest train).
std::vector<Partition> split(std::size_t n, const SplitSpec& spec);

}  // namespace invarnet::data
