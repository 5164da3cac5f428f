#include "invarnet/eval.hpp"

#include "test_support.hpp"

#include <algorithm>
#include <numeric>

using namespace invarnet;
using namespace invarnet::eval;
using testing::Rng;

namespace {

// The constructed instance: y=0 group has s counts {90, 10} with 6 of the 10
// minority samples correct; y=1 group has {20, 80} with 10 of the 20 correct.
struct Instance {
  Labels pred, y, s;
};

Instance biased_instance() {
  Instance in;
  auto add = [&](int y, int s, int count, int correct) {
    for (int i = 0; i < count; ++i) {
      in.y.push_back(y);
      in.s.push_back(s);
      in.pred.push_back(i < correct ? y : 1 - y);
    }
  };
  add(0, 0, 90, 90);
  add(0, 1, 10, 6);
  add(1, 0, 20, 10);
  add(1, 1, 80, 80);
  return in;
}

Labels permuted(const Labels& v, const std::vector<std::size_t>& order) {
  Labels out;
  for (auto i : order) out.push_back(v[i]);
  return out;
}

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("probe on separable data") {
  Rng rng(1);
  Matrix h = testing::random_matrix(rng, 200, 3);
  Labels s(200);
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    const bool pos = h(i, 0) + 0.5 * h(i, 2) > 0;
    s[static_cast<std::size_t>(i)] = pos;
    h(i, 0) += pos ? 0.5 : -0.5;  // margin
  }
  const auto probe = fit_logistic_probe(h, s, 2, {.epochs = 3000});
  CHECK(probe.accuracy(h, s) == 1.0);
  CHECK(probe.iterations > 0);
}

TEST_CASE("probe on random labels stays near majority") {
  std::vector<double> gaps;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(100 + seed);
    const Matrix h = testing::random_matrix(rng, 2000, 8);
    const Labels s = testing::random_labels(rng, 2000, 2);
    const Matrix fit = h.topRows(1000), held = h.bottomRows(1000);
    const Labels sf(s.begin(), s.begin() + 1000), sh(s.begin() + 1000, s.end());
    const auto probe = fit_logistic_probe(fit, sf, 2);
    gaps.push_back(std::abs(probe.accuracy(held, sh) - majority_baseline(sh)));
  }
  std::sort(gaps.begin(), gaps.end());
  CHECK(gaps[2] <= 0.05);
}

TEST_CASE("probe is invariant to duplicating every row") {
  Rng rng(2);
  const Matrix h = testing::random_matrix(rng, 60, 3);
  const Labels s = testing::random_labels(rng, 60, 3);
  Matrix h2(120, 3);
  h2 << h, h;
  Labels s2 = s;
  s2.insert(s2.end(), s.begin(), s.end());
  const ProbeConfig cfg{.epochs = 200};
  const auto a = fit_logistic_probe(h, s, 3, cfg), b = fit_logistic_probe(h2, s2, 3, cfg);
  CHECK((a.weight - b.weight).cwiseAbs().maxCoeff() <= 1e-10);
  CHECK((a.bias - b.bias).cwiseAbs().maxCoeff() <= 1e-10);
  CHECK_THROWS_AS(fit_logistic_probe(h, Labels(5, 0), 3), ShapeError);
}

TEST_CASE("majority baseline") {
  Labels seven_three(10, 0);
  std::fill(seven_three.begin() + 7, seven_three.end(), 1);
  CHECK(majority_baseline(seven_three) == 0.7);
  CHECK(majority_baseline(Labels(5, 2)) == 1.0);
  CHECK(majority_baseline(Labels{0, 1, 2, 3, 3, 2, 1, 0}) == 0.25);
  CHECK_THROWS(majority_baseline(Labels{}));
}

TEST_CASE("biased category accuracy") {
  const auto in = biased_instance();
  const auto r = biased_category_accuracy(in.pred, in.y, in.s, 2, 2);
  CHECK(r.average == 0.55);
  REQUIRE(r.categories.size() == 2);
  CHECK(r.categories[0].s == 1);
  CHECK(r.categories[0].accuracy == 0.6);
  CHECK(r.categories[1].s == 0);
  CHECK(r.categories[1].accuracy == 0.5);

  CHECK(biased_category_accuracy(in.y, in.y, in.s, 2, 2).average == 1.0);

  // Tie within the group: s=0 is the biased category.
  const Labels y{0, 0, 0, 0}, s{1, 0, 1, 0}, pred{0, 1, 0, 1};
  const auto tie = biased_category_accuracy(pred, y, s, 1, 2);
  CHECK(tie.categories[0].s == 0);
  CHECK(tie.average == 0.0);

  // y=1 has only s=0 samples, so its biased category s=1 is empty.
  const auto empty = biased_category_accuracy(Labels{0, 0, 1}, Labels{0, 0, 1}, Labels{0, 1, 0}, 2, 2);
  CHECK(empty.categories.size() == 1);
  CHECK(empty.warnings.size() == 1);
  CHECK(empty.average == 1.0);
}

TEST_CASE("property: biased category accuracy ignores order and s relabeling") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 20 + static_cast<std::size_t>(rng.uniform_int(200));
    const int ny = 2 + rng.uniform_int(2), ns = 2 + rng.uniform_int(2);
    Labels y = testing::random_labels(rng, n, ny), s(n), pred = testing::random_labels(rng, n, ny);
    // Skew s so that the minority in each group is unique with high probability.
    for (std::size_t i = 0; i < n; ++i) s[i] = rng.uniform() < 0.6 ? 0 : 1 + rng.uniform_int(ns - 1);
    const auto base = biased_category_accuracy(pred, y, s, ny, ns);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i) + 1))]);
    const auto shuffled = biased_category_accuracy(permuted(pred, order), permuted(y, order), permuted(s, order), ny, ns);
    CHECK(shuffled.average == base.average);

    // Relabel s by a cyclic shift; compare only when no group has a tied minority.
    bool ties = false;
    for (int g = 0; g < ny; ++g) {
      std::vector<int> counts(static_cast<std::size_t>(ns), 0);
      for (std::size_t i = 0; i < n; ++i) {
        if (y[i] == g) ++counts[static_cast<std::size_t>(s[i])];
      }
      const int low = *std::min_element(counts.begin(), counts.end());
      ties |= std::count(counts.begin(), counts.end(), low) > 1;
    }
    if (ties) continue;
    Labels s2 = s;
    for (auto& v : s2) v = (v + 1) % ns;
    CHECK(biased_category_accuracy(pred, y, s2, ny, ns).average == base.average);
  }
}

TEST_CASE("evaluate degenerate models") {
  const auto ds = data::synth_independent(300, 5, 2, 3, 1.0, 4);
  auto model = model::init_model(model::fair_preset(5, 2, 3), {.seed = 4});
  const auto params = model.parameters();
  const auto owners = model.parameter_owners();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (owners[i] == model::Player::predictor) params[i]->setZero();
  }
  const auto r = evaluate(model, ds, ds, 1.0);
  // Uniform logits: every prediction is class 0.
  Labels zeros(ds.size(), 0);
  CHECK(r.acc_y == accuracy(zeros, ds.y));
  CHECK(r.loss_m == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  CHECK(r.objective == doctest::Approx(r.loss_m - r.loss_d).epsilon(1e-12));

  const auto one = data::synth_independent(200, 4, 1, 2, 1.0, 5);
  auto m1 = model::init_model(model::fair_preset(4, 1, 2), {.seed = 5});
  const auto r1 = evaluate(m1, one, 1.0);
  CHECK(r1.probe_acc_s == 1.0);
  CHECK(r1.majority_s == 1.0);
  CHECK(r1.loss_d == 0.0);
}

TEST_CASE("metrics report formats") {
  MetricsReport r;
  r.acc_y = 0.9;
  r.warnings = {"w"};
  const auto j = r.to_json();
  CHECK(j.at("acc_y") == 0.9);
  CHECK(j.at("warnings").size() == 1);
  const auto header = MetricsReport::csv_header(), row = r.csv_row();
  CHECK(std::count(header.begin(), header.end(), ',') == std::count(row.begin(), row.end(), ','));
}

}  // TEST_SUITE
