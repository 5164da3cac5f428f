#include "invarnet/eval.hpp"

#include <cstdio>

namespace invarnet::eval {

using nlohmann::json;

namespace {

double mean_cross_entropy(const Matrix& logits, LabelSpan labels, Matrix* probs_out) {
  Matrix probs = ad::softmax_rows(logits);
  double total = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    total += lse - logits(r, labels[static_cast<std::size_t>(r)]);
  }
  if (probs_out) *probs_out = std::move(probs);
  return total / static_cast<double>(logits.rows());
}

void check_labels(LabelSpan labels, int n_classes, const char* what) {
  for (int l : labels) {
    if (l < 0 || l >= n_classes) {
      throw RangeError(std::string(what) + ": label " + std::to_string(l) + " outside [0, " +
                       std::to_string(n_classes) + ")");
    }
  }
}

}  // namespace

Matrix LogisticProbe::logits(const Matrix& h) const {
  if (h.cols() != mean.size()) throw ShapeError("probe: feature count mismatch");
  const Matrix z = (h.rowwise() - mean).array().rowwise() / scale.array();
  Matrix out = z * weight;
  out.rowwise() += bias;
  return out;
}

Labels LogisticProbe::predict(const Matrix& h) const { return model::argmax_rows(logits(h)); }

double LogisticProbe::accuracy(const Matrix& h, LabelSpan labels) const {
  return eval::accuracy(predict(h), labels);
}

LogisticProbe fit_logistic_probe(const Matrix& h, LabelSpan labels, int n_classes,
                                 const ProbeConfig& config) {
  if (static_cast<Eigen::Index>(labels.size()) != h.rows()) {
    throw ShapeError("probe: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(h.rows()) + " rows");
  }
  if (h.rows() == 0) throw ShapeError("probe: empty input");
  if (n_classes <= 0) throw RangeError("probe: n_classes must be positive");
  check_labels(labels, n_classes, "probe");

  const auto n = static_cast<double>(h.rows());
  const Eigen::Index d = h.cols(), k = n_classes;
  LogisticProbe p;
  p.n_classes = n_classes;
  p.mean = h.colwise().mean();
  const Matrix centered = h.rowwise() - p.mean;
  p.scale = centered.array().square().colwise().mean().sqrt().matrix();
  for (Eigen::Index c = 0; c < d; ++c) {
    if (p.scale(c) < 1e-12) p.scale(c) = 1.0;
  }
  const Matrix z = centered.array().rowwise() / p.scale.array();
  Matrix onehot = Matrix::Zero(h.rows(), k);
  for (Eigen::Index r = 0; r < h.rows(); ++r) onehot(r, labels[static_cast<std::size_t>(r)]) = 1.0;

  Rng rng(config.seed);
  p.weight.resize(d, k);
  for (Eigen::Index i = 0; i < p.weight.size(); ++i) p.weight.data()[i] = rng.normal(0.0, 1e-3);
  p.bias = RowVector::Zero(k);

  auto loss_at = [&](const Matrix& w, const RowVector& b, Matrix* probs) {
    Matrix logits = z * w;
    logits.rowwise() += b;
    return mean_cross_entropy(logits, labels, probs);
  };

  Matrix probs;
  double loss = loss_at(p.weight, p.bias, &probs);
  double step = config.lr;
  int it = 0;
  for (; it < config.epochs; ++it) {
    const Matrix resid = (probs - onehot) / n;
    const Matrix gw = z.transpose() * resid;
    const RowVector gb = resid.colwise().sum();
    const double gnorm2 = gw.squaredNorm() + gb.squaredNorm();
    if (std::sqrt(gnorm2) < config.tolerance) {
      p.converged = true;
      break;
    }
    // Armijo backtracking keeps every accepted step a descent step.
    step = std::min(step * 2.0, config.lr);
    Matrix w_new;
    RowVector b_new;
    Matrix probs_new;
    double loss_new = loss;
    for (int tries = 0; tries < 60; ++tries) {
      w_new = p.weight - step * gw;
      b_new = p.bias - step * gb;
      loss_new = loss_at(w_new, b_new, &probs_new);
      if (loss_new <= loss - 1e-4 * step * gnorm2) break;
      step *= 0.5;
    }
    if (!(loss_new < loss)) break;  // no further progress at machine precision
    p.weight = std::move(w_new);
    p.bias = std::move(b_new);
    probs = std::move(probs_new);
    loss = loss_new;
  }
  p.iterations = it;
  p.final_loss = loss;
  if (!p.converged) {
    const Matrix resid = (probs - onehot) / n;
    const double gnorm = std::sqrt((z.transpose() * resid).squaredNorm() + resid.colwise().sum().squaredNorm());
    p.converged = gnorm < config.tolerance;
  }
  return p;
}

double accuracy(LabelSpan predicted, LabelSpan truth) {
  if (predicted.size() != truth.size()) throw ShapeError("accuracy: length mismatch");
  if (truth.empty()) throw ShapeError("accuracy: empty input");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

double majority_baseline(LabelSpan labels) {
  if (labels.empty()) throw ShapeError("majority_baseline: empty input");
  std::vector<std::size_t> counts;
  for (int l : labels) {
    if (l < 0) throw RangeError("majority_baseline: negative label");
    if (static_cast<std::size_t>(l) >= counts.size()) counts.resize(static_cast<std::size_t>(l) + 1, 0);
    ++counts[static_cast<std::size_t>(l)];
  }
  const std::size_t best = *std::max_element(counts.begin(), counts.end());
  return static_cast<double>(best) / static_cast<double>(labels.size());
}

BiasedCategoryResult biased_category_accuracy(LabelSpan pred_y, LabelSpan true_y, LabelSpan s,
                                              int n_y, int n_s) {
  if (pred_y.size() != true_y.size() || s.size() != true_y.size()) {
    throw ShapeError("biased_category_accuracy: length mismatch");
  }
  check_labels(true_y, n_y, "biased_category_accuracy (y)");
  check_labels(s, n_s, "biased_category_accuracy (s)");
  std::vector<std::size_t> count(static_cast<std::size_t>(n_y * n_s), 0), correct(count.size(), 0);
  std::vector<std::size_t> group(static_cast<std::size_t>(n_y), 0);
  for (std::size_t i = 0; i < true_y.size(); ++i) {
    const auto cell = static_cast<std::size_t>(true_y[i] * n_s + s[i]);
    ++count[cell];
    correct[cell] += pred_y[i] == true_y[i];
    ++group[static_cast<std::size_t>(true_y[i])];
  }
  BiasedCategoryResult out;
  double total = 0.0;
  for (int y = 0; y < n_y; ++y) {
    if (group[static_cast<std::size_t>(y)] == 0) {
      out.warnings.push_back("y=" + std::to_string(y) + " has no samples");
      continue;
    }
    int minority = 0;
    for (int sv = 1; sv < n_s; ++sv) {
      if (count[static_cast<std::size_t>(y * n_s + sv)] < count[static_cast<std::size_t>(y * n_s + minority)]) {
        minority = sv;
      }
    }
    const auto cell = static_cast<std::size_t>(y * n_s + minority);
    if (count[cell] == 0) {
      out.warnings.push_back("biased category (y=" + std::to_string(y) + ", s=" +
                             std::to_string(minority) + ") is empty; excluded from the average");
      continue;
    }
    BiasedCategory c;
    c.y = y;
    c.s = minority;
    c.count = count[cell];
    c.correct = correct[cell];
    c.accuracy = static_cast<double>(c.correct) / static_cast<double>(c.count);
    total += c.accuracy;
    out.categories.push_back(c);
  }
  out.average = out.categories.empty() ? 0.0 : total / static_cast<double>(out.categories.size());
  return out;
}

json MetricsReport::to_json() const {
  json cats = json::array();
  for (const auto& c : biased_categories) {
    cats.push_back({{"y", c.y}, {"s", c.s}, {"count", c.count}, {"correct", c.correct}, {"accuracy", c.accuracy}});
  }
  return json{{"acc_y", acc_y},
              {"probe_acc_s", probe_acc_s},
              {"majority_y", majority_y},
              {"majority_s", majority_s},
              {"biased_category_acc", biased_category_acc},
              {"biased_categories", std::move(cats)},
              {"warnings", warnings},
              {"loss_m", loss_m},
              {"loss_d", loss_d},
              {"objective", objective},
              {"gamma", gamma},
              {"probe_converged", probe_converged},
              {"n_probe_fit", n_probe_fit},
              {"n_eval", n_eval}};
}

std::string MetricsReport::csv_header() {
  return "gamma,acc_y,probe_acc_s,majority_y,majority_s,biased_category_acc,loss_m,loss_d,objective";
}

std::string MetricsReport::csv_row() const {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", gamma, acc_y,
                probe_acc_s, majority_y, majority_s, biased_category_acc, loss_m, loss_d, objective);
  return buf;
}

LossComponents evaluation_losses(model::GameModel& model, const data::TabularDataset& ds) {
  ad::Tape tape;
  const auto bound = model::bind(tape, model);
  ad::Var h = model::encode(model, bound, tape.constant(ds.x), ds.s, model::Mode::eval);
  auto lm = ad::softmax_cross_entropy(model::predict_logits(model, bound, h, model::Mode::eval), ds.y);
  auto ld = ad::softmax_cross_entropy(model::discriminate_logits(model, bound, h, model::Mode::eval), ds.s);
  return {lm.loss.value()(0, 0), ld.loss.value()(0, 0)};
}

MetricsReport evaluate(model::GameModel& model, const data::TabularDataset& probe_fit,
                       const data::TabularDataset& test, double gamma, const ProbeConfig& probe) {
  probe_fit.validate();
  test.validate();
  const auto& arch = model.arch;
  for (const auto* ds : {&probe_fit, &test}) {
    if (ds->dim() != arch.d_x || ds->n_s != arch.n_s || ds->n_y != arch.n_y) {
      throw ShapeError("evaluate: dataset dimensions do not match the model");
    }
  }
  if (test.size() == 0 || probe_fit.size() == 0) throw ShapeError("evaluate: empty dataset");

  MetricsReport r;
  r.gamma = gamma;
  r.n_eval = test.size();
  r.n_probe_fit = probe_fit.size();

  const Matrix h_test = model::encode(model, test.x, test.s);
  const Labels pred = model::argmax_rows(model::predict_logits(model, h_test));
  r.acc_y = accuracy(pred, test.y);
  r.majority_y = majority_baseline(test.y);
  r.majority_s = majority_baseline(test.s);

  const Matrix h_fit = model::encode(model, probe_fit.x, probe_fit.s);
  const LogisticProbe lp = fit_logistic_probe(h_fit, probe_fit.s, arch.n_s, probe);
  r.probe_acc_s = lp.accuracy(h_test, test.s);
  r.probe_converged = lp.converged;

  const auto bias = biased_category_accuracy(pred, test.y, test.s, arch.n_y, arch.n_s);
  r.biased_category_acc = bias.average;
  r.biased_categories = bias.categories;
  r.warnings = bias.warnings;

  const auto losses = evaluation_losses(model, test);
  r.loss_m = losses.loss_m;
  r.loss_d = losses.loss_d;
  r.objective = losses.loss_m - gamma * losses.loss_d;
  return r;
}

MetricsReport evaluate(model::GameModel& model, const data::TabularDataset& dataset, double gamma,
                       const ProbeConfig& probe) {
  const double f = probe.fit_fraction;
  if (!(f > 0.0 && f < 1.0)) throw ConfigError("evaluate: fit_fraction must lie in (0, 1)");
  const auto parts = data::split(dataset.size(), data::SplitSpec::holdout(f, 0.0, 1.0 - f, probe.seed));
  return evaluate(model, dataset.subset(parts[0].train), dataset.subset(parts[0].test), gamma, probe);
}

}  // namespace invarnet::eval
