#pragma once

#include "invarnet/data.hpp"
#include "invarnet/models.hpp"

#include <nlohmann/json.hpp>

namespace invarnet::eval {

struct ProbeConfig {
  int epochs = 500;
  double lr = 1.0;  // initial step; halved until the loss decreases
  double tolerance = 1e-6;  // gradient-norm stopping threshold
  std::uint64_t seed = 0;
  // Fraction held in for probe fitting when evaluate() gets a single dataset.
  double fit_fraction = 0.5;
};

// Multinomial logistic regression on internally standardized features.
struct LogisticProbe {
  Matrix weight;  // d x k
  RowVector bias;
  RowVector mean;
  RowVector scale;
  int n_classes = 0;
  bool converged = false;
  int iterations = 0;
  double final_loss = 0.0;

  Matrix logits(const Matrix& h) const;
  Labels predict(const Matrix& h) const;
  double accuracy(const Matrix& h, LabelSpan labels) const;
};

// Full-batch gradient descent on the mean cross-entropy. Stops when the
// gradient norm drops below the tolerance or the epoch budget runs out;
// `converged` records which.
LogisticProbe fit_logistic_probe(const Matrix& h, LabelSpan labels, int n_classes,
                                 const ProbeConfig& config = {});

double accuracy(LabelSpan predicted, LabelSpan truth);

// Frequency of the most common label.
double majority_baseline(LabelSpan labels);

struct BiasedCategory {
  int y = 0;
  int s = 0;  // minority s within the y group
  std::size_t count = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
};

struct BiasedCategoryResult {
  double average = 0.0;  // unweighted over non-empty categories
  std::vector<BiasedCategory> categories;
  std::vector<std::string> warnings;
};

// For every value of y, the minority s inside that group (ties to the smallest
// s) is the biased category. Reports accuracy on each and their macro average.
// Categories with no samples are skipped and noted in `warnings`.
BiasedCategoryResult biased_category_accuracy(LabelSpan pred_y, LabelSpan true_y, LabelSpan s,
                                              int n_y, int n_s);

struct MetricsReport {
  double acc_y = 0.0;
  double probe_acc_s = 0.0;
  double majority_y = 0.0;
  double majority_s = 0.0;
  double biased_category_acc = 0.0;
  std::vector<BiasedCategory> biased_categories;
  std::vector<std::string> warnings;
  double loss_m = 0.0;
  double loss_d = 0.0;
  double objective = 0.0;  // loss_m - gamma * loss_d
  double gamma = 0.0;
  bool probe_converged = false;
  std::size_t n_probe_fit = 0;
  std::size_t n_eval = 0;

  nlohmann::json to_json() const;
  static std::string csv_header();
  std::string csv_row() const;
};

// Predictor and discriminator losses on a dataset in eval mode.
struct LossComponents {
  double loss_m = 0.0;
  double loss_d = 0.0;
};
LossComponents evaluation_losses(model::GameModel& model, const data::TabularDataset& ds);

// Encoder frozen, batch norm in eval mode. The probe is fit on the
// representations of `probe_fit` and scored on those of `test`; every other
// number is measured on `test`.
MetricsReport evaluate(model::GameModel& model, const data::TabularDataset& probe_fit,
                       const data::TabularDataset& test, double gamma, const ProbeConfig& probe = {});

// Single-dataset form: a seeded split (probe.fit_fraction) supplies the fit part.
MetricsReport evaluate(model::GameModel& model, const data::TabularDataset& dataset, double gamma,
                       const ProbeConfig& probe = {});

}  // namespace invarnet::eval
