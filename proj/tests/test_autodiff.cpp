#include "test_support.hpp"

#include <cmath>

using namespace invarnet;
using namespace testing;
namespace ad = invarnet::ad;

TEST_SUITE("autodiff") {

TEST_CASE("matmul values and gradient") {
  ad::Tape t;
  const Matrix a = mat({{1, 2}, {3, 4}});
  CHECK(t.value(ad::matmul(t.constant(Matrix::Identity(2, 2)), t.constant(a))) == a);
  CHECK(t.value(ad::matmul(t.constant(a), t.constant(mat({{0, 1}, {1, 0}})))) == mat({{2, 1}, {4, 3}}));
  CHECK_THROWS_AS(ad::matmul(t.constant(a), t.constant(Matrix::Ones(3, 1))), ShapeError);

  Rng rng(1);
  const Program sum_ab = [](ad::Tape&, const auto& v) { return ad::sum(ad::matmul(v[0], v[1])); };
  CHECK(fd_error({random_matrix(rng, 3, 4), random_matrix(rng, 4, 2)}, sum_ab) < 1e-6);
}

TEST_CASE("affine values and gradient") {
  ad::Tape t;
  CHECK(t.value(ad::affine(t.constant(Matrix::Ones(3, 2)), t.constant(Matrix::Zero(2, 4)),
                           t.constant(Matrix::Zero(1, 4))))
            .isZero());
  CHECK(t.value(ad::affine(t.constant(mat({{1, 1}})), t.constant(mat({{1}, {2}})), t.constant(mat({{3}}))))(0, 0) ==
        6.0);
  CHECK_THROWS_AS(ad::affine(t.constant(Matrix::Ones(3, 2)), t.constant(Matrix::Ones(2, 4)),
                             t.constant(Matrix::Ones(1, 3))),
                  ShapeError);
  Rng rng(2);
  const Program p = [](ad::Tape&, const auto& v) {
    return ad::sum(ad::tanh_act(ad::affine(v[0], v[1], v[2])));
  };
  CHECK(fd_error({random_matrix(rng, 5, 3), random_matrix(rng, 3, 2), random_matrix(rng, 1, 2)}, p) < 1e-6);
}

TEST_CASE("relu and tanh") {
  ad::Tape t;
  auto x = t.leaf(mat({{-1, 0, 2}}));
  auto r = ad::relu(x);
  CHECK(t.value(r) == mat({{0, 0, 2}}));
  t.backward(ad::sum(r));
  CHECK(t.grad(x) == mat({{0, 0, 1}}));  // subgradient 0 at the kink

  ad::Tape t2;
  auto z = t2.leaf(Matrix::Zero(1, 1));
  auto th = ad::tanh_act(z);
  CHECK(t2.value(th)(0, 0) == 0.0);
  t2.backward(ad::sum(th));
  CHECK(t2.grad(z)(0, 0) == 1.0);

  Rng rng(3);
  for (int i = 0; i < 10; ++i) {
    Matrix m = random_matrix(rng, 4, 3);
    for (Eigen::Index k = 0; k < m.size(); ++k) {
      if (std::abs(m.data()[k]) < 1e-3) m.data()[k] = 0.5;
    }
    const Labels l = random_labels(rng, 4, 3);
    CHECK(fd_error({m}, [&](ad::Tape&, const auto& v) { return ad::softmax_cross_entropy(ad::relu(v[0]), l).loss; }) <
          1e-6);
    CHECK(fd_error({m}, [&](ad::Tape&, const auto& v) {
            return ad::softmax_cross_entropy(ad::tanh_act(v[0]), l).loss;
          }) < 1e-6);
  }
}

TEST_CASE("concat_features") {
  ad::Tape t;
  CHECK(t.value(ad::concat_features(t.constant(mat({{1}})), t.constant(mat({{2}})))) == mat({{1, 2}}));
  const Matrix a = mat({{1, 2}, {3, 4}});
  CHECK(t.value(ad::concat_features(t.constant(a), t.constant(Matrix(2, 0)))) == a);
  CHECK_THROWS_AS(ad::concat_features(t.constant(a), t.constant(Matrix::Ones(3, 1))), ShapeError);

  Rng rng(4);
  const Labels l = random_labels(rng, 3, 5);
  CHECK(fd_error({random_matrix(rng, 3, 2), random_matrix(rng, 3, 3)}, [&](ad::Tape&, const auto& v) {
          return ad::softmax_cross_entropy(ad::concat_features(v[0], v[1]), l).loss;
        }) < 1e-6);
}

TEST_CASE("embedding_lookup") {
  ad::Tape t;
  const Labels idx3 = {0, 0, 0};
  CHECK(t.value(ad::embedding_lookup(t.constant(mat({{5, 6}})), idx3)) == mat({{5, 6}, {5, 6}, {5, 6}}));
  const Labels perm = {1, 0};
  CHECK(t.value(ad::embedding_lookup(t.constant(mat({{1.5}, {-2}})), perm)) == mat({{-2}, {1.5}}));
  const Labels bad = {2};
  CHECK_THROWS_AS(ad::embedding_lookup(t.constant(mat({{1}, {2}})), bad), RangeError);
  const Labels neg = {-1};
  CHECK_THROWS_AS(ad::embedding_lookup(t.constant(mat({{1}, {2}})), neg), RangeError);

  ad::Tape t2;
  auto table = t2.leaf(Matrix::Zero(2, 2));
  const Labels rep = {0, 0};
  auto rows = ad::embedding_lookup(table, rep);
  // Upstream rows are 3*[1, 2] and 5*[1, 2]; both land in table row 0.
  auto weighted = ad::matmul(ad::matmul(t2.constant(mat({{3, 5}})), rows), t2.constant(mat({{1}, {2}})));
  t2.backward(ad::sum(weighted));
  CHECK(t2.grad(table) == mat({{8, 16}, {0, 0}}));
}

TEST_CASE("batch_norm") {
  {
    ad::Tape t;
    auto st = ad::BatchNormState::for_features(2);
    auto out = ad::batch_norm(t.constant(mat({{3, -1}, {3, -1}, {3, -1}})), t.constant(mat({{2, 3}})),
                              t.constant(mat({{0.5, -4}})), st);
    CHECK(t.value(out) == mat({{0.5, -4}, {0.5, -4}, {0.5, -4}}));
  }
  {
    ad::Tape t;
    auto st = ad::BatchNormState::for_features(1);
    auto out = ad::batch_norm(t.constant(mat({{-1}, {1}})), t.constant(mat({{1}})), t.constant(mat({{0}})), st);
    const double v = 1.0 / std::sqrt(1.0 + 1e-5);
    CHECK(t.value(out)(0, 0) == doctest::Approx(-v).epsilon(1e-15));
    CHECK(t.value(out)(1, 0) == doctest::Approx(v).epsilon(1e-15));
    // running stats: momentum 0.9 toward batch mean 0 and biased variance 1
    CHECK(st.running_mean(0) == doctest::Approx(0.0));
    CHECK(st.running_var(0) == doctest::Approx(1.0));
  }
  {
    ad::Tape t;
    auto st = ad::BatchNormState::for_features(1);
    ad::batch_norm(t.constant(mat({{1}, {3}})), t.constant(mat({{1}})), t.constant(mat({{0}})), st);
    CHECK(st.running_mean(0) == doctest::Approx(0.1 * 2.0));
    CHECK(st.running_var(0) == doctest::Approx(0.9 * 1.0 + 0.1 * 1.0));
    st.mode = ad::BatchNormState::Mode::eval;
    auto out = ad::batch_norm(t.constant(mat({{0.2}})), t.constant(mat({{2}})), t.constant(mat({{1}})), st);
    CHECK(t.value(out)(0, 0) == doctest::Approx(1.0));
  }
  {
    ad::Tape t;
    auto st = ad::BatchNormState::for_features(1);
    CHECK_THROWS_AS(ad::batch_norm(t.constant(mat({{1}})), t.constant(mat({{1}})), t.constant(mat({{0}})), st),
                    ShapeError);
    st.mode = ad::BatchNormState::Mode::eval;
    CHECK_NOTHROW(ad::batch_norm(t.constant(mat({{1}})), t.constant(mat({{1}})), t.constant(mat({{0}})), st));
  }
  Rng rng(5);
  for (int i = 0; i < 5; ++i) {
    const Labels l = random_labels(rng, 6, 3);
    CHECK(fd_error({random_matrix(rng, 6, 3), random_matrix(rng, 1, 3), random_matrix(rng, 1, 3)},
                   [&](ad::Tape&, const auto& v) {
                     auto st = ad::BatchNormState::for_features(3);
                     return ad::softmax_cross_entropy(ad::batch_norm(v[0], v[1], v[2], st), l).loss;
                   }) < 1e-5);
  }
}

TEST_CASE("softmax_cross_entropy") {
  ad::Tape t;
  const Labels zero = {0};
  const Labels two = {2};
  CHECK(t.value(ad::softmax_cross_entropy(t.constant(Matrix::Zero(1, 4)), zero).loss)(0, 0) ==
        doctest::Approx(std::log(4.0)).epsilon(1e-15));
  CHECK(t.value(ad::softmax_cross_entropy(t.constant(mat({{0, 0, 30}})), two).loss)(0, 0) < 1e-9);
  CHECK(t.value(ad::softmax_cross_entropy(t.constant(mat({{1, 2}})), zero).loss)(0, 0) ==
        doctest::Approx(1.313261687518223).epsilon(1e-12));
  CHECK_THROWS_AS(ad::softmax_cross_entropy(t.constant(mat({{1, 2}})), two), RangeError);
  const Labels short_labels = {0};
  CHECK_THROWS_AS(ad::softmax_cross_entropy(t.constant(Matrix::Zero(2, 2)), short_labels), ShapeError);

  ad::Tape t2;
  auto logits = t2.leaf(mat({{1, 2, 3}, {0, 0, 0}}));
  const Labels l = {0, 2};
  auto ce = ad::softmax_cross_entropy(logits, l);
  t2.backward(ce.loss);
  Matrix expected = ce.probs;
  expected(0, 0) -= 1;
  expected(1, 2) -= 1;
  CHECK((t2.grad(logits) - expected / 2.0).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("grad_reversal") {
  ad::Tape t;
  Rng rng(6);
  const Matrix x = random_matrix(rng, 3, 2);
  auto in = t.leaf(x);
  CHECK(bit_equal(t.value(ad::grad_reversal(in, 3.0)), x));

  auto check_upstream = [](double lambda, const Matrix& upstream, const Matrix& expected) {
    ad::Tape tp;
    auto v = tp.leaf(Matrix::Zero(upstream.rows(), upstream.cols()));
    auto r = ad::grad_reversal(v, lambda);
    // sum(r * upstream^T) has gradient `upstream` with respect to r.
    tp.backward(ad::sum(ad::matmul(r, tp.constant(upstream.transpose()))));
    CHECK(tp.grad(v) == expected);
  };
  check_upstream(1.0, mat({{0.5, -0.2}}), mat({{-0.5, 0.2}}));
  check_upstream(8.0, mat({{0.25}}), mat({{-2.0}}));
  CHECK_THROWS_AS(ad::grad_reversal(in, -1.0), RangeError);
}

TEST_CASE("backward") {
  ad::Tape t;
  auto x = t.leaf(Matrix::Constant(2, 3, 0.7));
  t.backward(ad::sum(x));
  CHECK(t.grad(x) == Matrix::Ones(2, 3));
  t.backward(ad::sum(ad::add(x, x)));
  CHECK(t.grad(x) == Matrix::Constant(2, 3, 2.0));
  CHECK_THROWS_AS(t.backward(x), ShapeError);

  auto unused = t.leaf(Matrix::Ones(1, 2));
  t.backward(ad::sum(x));
  CHECK(t.grad(unused) == Matrix::Zero(1, 2));
  auto c = t.constant(Matrix::Ones(1, 1));
  CHECK_FALSE(t.requires_grad(c));
}

TEST_CASE("non-finite values are rejected") {
  ad::Tape t;
  Matrix bad = Matrix::Zero(1, 2);
  bad(0, 1) = std::nan("");
  CHECK_THROWS_AS(t.leaf(bad), NumericalError);
  auto big = t.leaf(Matrix::Constant(1, 1, 1e308));
  CHECK_THROWS_AS(ad::scale(big, 10.0), NumericalError);
}

TEST_CASE("property: softmax rows sum to one and loss is shift invariant") {
  Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    const int m = 1 + rng.uniform_int(5), k = 1 + rng.uniform_int(6);
    const Matrix logits = random_matrix(rng, m, k, 5.0);
    const Labels l = random_labels(rng, static_cast<std::size_t>(m), k);
    ad::Tape t;
    auto ce = ad::softmax_cross_entropy(t.constant(logits), l);
    CHECK((ce.probs.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
    Matrix shifted = logits;
    for (Eigen::Index r = 0; r < m; ++r) shifted.row(r).array() += rng.uniform(-50, 50);
    auto ce2 = ad::softmax_cross_entropy(t.constant(shifted), l);
    CHECK(std::abs(t.value(ce.loss)(0, 0) - t.value(ce2.loss)(0, 0)) < 1e-9);
  }
}

TEST_CASE("property: grad_reversal backward is exactly -lambda times upstream") {
  Rng rng(8);
  for (int i = 0; i < 30; ++i) {
    const double lambda = rng.uniform(0, 10);
    const Matrix x = random_matrix(rng, 3, 4);
    const Matrix w = random_matrix(rng, 4, 1);
    ad::Tape plain, reversed;
    auto a = plain.leaf(x);
    plain.backward(ad::sum(ad::matmul(a, plain.constant(w))));
    auto b = reversed.leaf(x);
    reversed.backward(ad::sum(ad::matmul(ad::grad_reversal(b, lambda), reversed.constant(w))));
    CHECK(bit_equal(reversed.grad(b), Matrix(-lambda * plain.grad(a))));
  }
}

TEST_CASE("property: gradient accumulation does not depend on recording order") {
  Rng rng(9);
  for (int i = 0; i < 20; ++i) {
    const Matrix x = random_matrix(rng, 4, 3), w1 = random_matrix(rng, 3, 2), w2 = random_matrix(rng, 3, 2);
    auto branch = [](ad::Var in, ad::Var w) { return ad::sum(ad::tanh_act(ad::matmul(in, w))); };
    ad::Tape t1, t2;
    auto x1 = t1.leaf(x);
    auto first = branch(x1, t1.constant(w1));
    auto second = branch(x1, t1.constant(w2));
    t1.backward(ad::add(first, second));
    auto x2 = t2.leaf(x);
    auto second2 = branch(x2, t2.constant(w2));
    auto first2 = branch(x2, t2.constant(w1));
    t2.backward(ad::add(first2, second2));
    CHECK((t1.grad(x1) - t2.grad(x2)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("property: random compositions match finite differences") {
  Rng rng(10);
  for (int inst = 0; inst < 20; ++inst) {
    const int m = 2 + rng.uniform_int(4), d = 1 + rng.uniform_int(4), k = 2 + rng.uniform_int(3);
    const Labels l = random_labels(rng, static_cast<std::size_t>(m), k);
    const Labels idx = random_labels(rng, static_cast<std::size_t>(m), 3);
    const Program p = [&](ad::Tape&, const auto& v) {
      auto emb = ad::embedding_lookup(v[3], idx);
      auto h = ad::tanh_act(ad::affine(ad::concat_features(v[0], emb), v[1], v[2]));
      auto st = ad::BatchNormState::for_features(k);
      auto z = ad::batch_norm(h, v[4], v[5], st);
      return ad::add(ad::softmax_cross_entropy(z, l).loss, ad::scale(ad::sum(ad::grad_scale(h, 1.0)), 0.1));
    };
    std::vector<Matrix> in = {random_matrix(rng, m, d), random_matrix(rng, d + 2, k), random_matrix(rng, 1, k),
                              random_matrix(rng, 3, 2), random_matrix(rng, 1, k), random_matrix(rng, 1, k)};
    CHECK(fd_error(in, p) < 1e-4);
  }
}

}  // TEST_SUITE
