#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "hygen/numcore/adam.hpp"
#include "hygen/numcore/grad_check.hpp"
#include "hygen/numcore/tape.hpp"

using namespace hygen;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Matrix rowvec(std::initializer_list<double> xs) {
  Matrix m(1, static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) m(0, i++) = x;
  return m;
}

}  // namespace

TEST_CASE("matmul values and shape errors") {
  Tape t;
  Matrix b(2, 2);
  b << 3, 4, 5, 6;
  Var prod = ad::matmul(t.constant(Matrix::Identity(2, 2)), t.constant(b));
  CHECK(prod.value() == b);

  Matrix a1(1, 2);
  a1 << 1, 2;
  Matrix b1(2, 1);
  b1 << 3, 4;
  CHECK(ad::matmul(t.constant(a1), t.constant(b1)).scalar() == 11.0);

  try {
    ad::matmul(t.constant(Matrix::Zero(2, 3)), t.constant(Matrix::Zero(2, 3)));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches central differences") {
  Rng rng(7);
  ParamBundle p;
  p.add("a", random_matrix(3, 3, rng));
  p.add("b", random_matrix(3, 3, rng));
  auto loss = [](Tape& t, const ParamBundle& ps) {
    return ad::sum(ad::matmul(t.param(ps, "a"), t.param(ps, "b")));
  };
  // Independent check: d sum(AB)/dA_ij = sum_k B_jk.
  Tape t;
  Var l = loss(t, p);
  t.backward(l);
  const ParamBundle g = t.gradients(p);
  const Matrix& bm = p.at("b");
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) CHECK(g.at("a")(i, j) == doctest::Approx(bm.row(j).sum()).epsilon(1e-12));
  }
  CHECK(grad_check(loss, p, 1e-5).max_rel_error < 1e-6);
}

TEST_CASE("softmax examples") {
  CHECK(softmax(rowvec({0, 0}))(0, 0) == doctest::Approx(0.5));
  for (double c : {-3.0, 0.0, 11.5}) {
    Matrix s = softmax(rowvec({c, c + std::log(3.0)}));
    CHECK(s(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(s(0, 1) == doctest::Approx(0.75).epsilon(1e-12));
  }
  Matrix big = softmax(rowvec({1000, 0}));
  CHECK(big.allFinite());
  CHECK(big(0, 0) == doctest::Approx(1.0));
  CHECK(big(0, 1) < 1e-300);

  Matrix cols(2, 2);
  cols << 0, 1, 0, 1;
  Matrix sc = softmax(cols, 0);
  CHECK(sc(0, 0) == doctest::Approx(0.5));
  CHECK(sc(1, 1) == doctest::Approx(0.5));
}

TEST_CASE("logsumexp examples") {
  CHECK(logsumexp(rowvec({0, 0}))(0, 0) == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(logsumexp(rowvec({-2.5}))(0, 0) == -2.5);
  CHECK(logsumexp(rowvec({5, 5, 5, 5}))(0, 0) == doctest::Approx(6.386294).epsilon(1e-6));
}

TEST_CASE("kl_categorical examples") {
  Vector half(2);
  half << 0.5, 0.5;
  CHECK(kl_categorical(half, half) == 0.0);
  Vector onehot(2);
  onehot << 1, 0;
  CHECK(kl_categorical(onehot, half) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Vector p(4);
  p << 0.7, 0.1, 0.1, 0.1;
  Vector u = Vector::Constant(4, 0.25);
  double oracle = 0;  // direct summation of p * ln(p / q)
  for (int i = 0; i < 4; ++i) oracle += p(i) * std::log(p(i) / u(i));
  CHECK(oracle == doctest::Approx(0.445846).epsilon(1e-6));
  CHECK(kl_categorical(p, u) == doctest::Approx(oracle).epsilon(1e-12));

  Vector q0(2);
  q0 << 1.0, 0.0;
  CHECK_THROWS_AS(kl_categorical(half, q0), DomainError);
}

TEST_CASE("softmax, logsumexp and kl properties on random inputs") {
  Rng rng(11);
  std::uniform_real_distribution<double> shift(-50, 50);
  for (int trial = 0; trial < 200; ++trial) {
    Matrix x = random_matrix(3, 7, rng, 5.0);
    Matrix s = softmax(x);
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      CHECK(std::abs(s.row(r).sum() - 1.0) < 1e-9);
      CHECK((s.row(r).array() >= 0).all());
    }
    const double c = shift(rng);
    Matrix lhs = logsumexp((x.array() + c).matrix());
    Matrix rhs = logsumexp(x).array() + c;
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-9);

    Vector p = softmax(x.row(0)).transpose();
    Vector q = softmax(x.row(1)).transpose();
    CHECK(std::abs(kl_categorical(p, p)) < 1e-15);
    CHECK(kl_categorical(p, q) >= -1e-12);
  }
}

TEST_CASE("tape ops match their closed forms under grad_check") {
  Rng rng(3);
  ParamBundle p;
  p.add("x", random_matrix(4, 5, rng));
  p.add("y", random_matrix(4, 5, rng));
  p.add("b", random_matrix(1, 5, rng));
  p.add("c", random_matrix(4, 1, rng));
  BoolMatrix mask = BoolMatrix::Constant(4, 5, true);
  mask(0, 1) = false;
  mask(2, 4) = false;
  mask(3, 0) = false;
  auto loss = [&mask](Tape& t, const ParamBundle& ps) {
    Var x = t.param(ps, "x");
    Var y = t.param(ps, "y");
    Var b = t.param(ps, "b");
    Var c = t.param(ps, "c");
    Var h = ad::elu(ad::add_rowvec(ad::mul(x, ad::sigmoid(y)), b));
    Var s = ad::softmax(ad::tanh(h), 1);
    Var lsm = ad::masked_log_softmax_rows(ad::mul_colvec(h, c), mask);
    const std::vector<int> idx{0, 2, 1, 3};
    Var picked = ad::pick(lsm, idx);
    Var lse = ad::logsumexp(ad::abs(ad::sub(x, y)), 1);
    Var l0 = ad::logsumexp(x, 0);
    ad::RowLists lists;
    lists.push(std::vector<int>{0, 2});
    lists.push(std::vector<int>{});
    lists.push(std::vector<int>{1, 3, 3});
    Var pooled = ad::pool_mean(s, lists);
    Var summed = ad::pool_sum(ad::square(y), lists);
    std::vector<Var> cols{ad::slice_cols(h, 1, 2), ad::slice_cols(s, 0, 3)};
    Var cat = ad::concat_cols(cols);
    std::vector<Var> rows{ad::slice_rows(cat, 0, 2), ad::gather_rows(cat, std::vector<int>{3, 3})};
    Var cat2 = ad::concat_rows(rows);
    Var parts[] = {ad::sum(picked), ad::sum(lse), ad::mean(pooled), ad::sum(summed),
                   ad::sum(ad::rowwise_dot(cat2, cat2)), ad::sum(l0),
                   ad::sum(ad::log(ad::add_scalar(ad::exp(ad::scale(x, 0.1)), 1.0))),
                   ad::sum(ad::matmul(ad::transpose(x), ad::relu(y)))};
    Var total = parts[0];
    for (std::size_t i = 1; i < std::size(parts); ++i) total = ad::add(total, parts[i]);
    return total;
  };
  CHECK(grad_check(loss, p).max_rel_error < 1e-6);
}

TEST_CASE("grouped attention and slot scores gradients") {
  Rng rng(5);
  ParamBundle p;
  p.add("q", random_matrix(7, 3, rng));
  p.add("k", random_matrix(7, 3, rng));
  p.add("v", random_matrix(7, 2, rng));
  p.add("keys", random_matrix(4, 3, rng));
  const std::vector<std::pair<int, int>> groups{{0, 3}, {3, 1}, {4, 3}};
  IndexMatrix slots(7, 3);
  slots << 0, 1, -1, 2, -1, 3, -1, -1, -1, 3, 3, 0, 1, 2, 3, 0, 0, 0, -1, 2, 1;
  auto loss = [&](Tape& t, const ParamBundle& ps) {
    Var att = ad::grouped_attention(t.param(ps, "q"), t.param(ps, "k"), t.param(ps, "v"), groups);
    Var sc = ad::slot_scores(t.param(ps, "q"), t.param(ps, "keys"), slots);
    return ad::add(ad::sum(ad::square(att)), ad::sum(ad::tanh(sc)));
  };
  CHECK(grad_check(loss, p).max_rel_error < 1e-6);
}

TEST_CASE("gru cell gradients, including a two-step unroll") {
  Rng rng(13);
  ParamBundle p;
  p.add("x1", random_matrix(3, 4, rng));
  p.add("x2", random_matrix(2, 4, rng));
  p.add("h0", random_matrix(3, 5, rng));
  p.add("wx", random_matrix(4, 15, rng));
  p.add("wh", random_matrix(5, 15, rng));
  p.add("bx", random_matrix(1, 15, rng));
  p.add("bh", random_matrix(1, 15, rng));
  auto loss = [](Tape& t, const ParamBundle& ps) {
    Var wx = t.param(ps, "wx"), wh = t.param(ps, "wh"), bx = t.param(ps, "bx"), bh = t.param(ps, "bh");
    Var h1 = ad::gru_cell(t.param(ps, "x1"), t.param(ps, "h0"), wx, wh, bx, bh);
    Var h2 = ad::gru_cell(t.param(ps, "x2"), ad::slice_rows(h1, 0, 2), wx, wh, bx, bh);
    return ad::add(ad::sum(ad::square(h1)), ad::sum(ad::tanh(h2)));
  };
  // Entries near 1e-4 sit at the round-off floor of the default step; a larger step is tighter.
  CHECK(grad_check(loss, p).max_rel_error < 1e-5);
  CHECK(grad_check(loss, p, 1e-4).max_rel_error < 1e-6);

  // Closed form against the composed gate equations.
  Tape t;
  Var h = ad::gru_cell(t.param(p, "x1"), t.param(p, "h0"), t.param(p, "wx"), t.param(p, "wh"), t.param(p, "bx"),
                       t.param(p, "bh"));
  Matrix gx = p.at("x1") * p.at("wx");
  gx.rowwise() += p.at("bx").row(0);
  Matrix gh = p.at("h0") * p.at("wh");
  gh.rowwise() += p.at("bh").row(0);
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 5; ++j) {
      const double r = sig(gx(i, j) + gh(i, j));
      const double u = sig(gx(i, 5 + j) + gh(i, 5 + j));
      const double c = std::tanh(gx(i, 10 + j) + r * gh(i, 10 + j));
      CHECK(h.value()(i, j) == doctest::Approx((1 - u) * c + u * p.at("h0")(i, j)).epsilon(1e-14));
    }
  }
  CHECK_THROWS_AS(ad::gru_cell(t.param(p, "x2"), t.param(p, "h0"), t.param(p, "wx"), t.param(p, "wh"),
                               t.param(p, "bx"), t.param(p, "bh")),
                  DimensionError);
}

TEST_CASE("grad_check examples") {
  Rng rng(21);
  SUBCASE("linear loss") {
    ParamBundle p;
    p.add("w", random_matrix(6, 1, rng));
    const Matrix x = random_matrix(1, 6, rng);
    auto loss = [x](Tape& t, const ParamBundle& ps) {
      return ad::matmul(t.constant(x), t.param(ps, "w"));
    };
    CHECK(grad_check(loss, p).max_rel_error < 1e-9);
  }
  SUBCASE("softmax cross entropy") {
    ParamBundle p;
    p.add("logits", random_matrix(5, 4, rng, 2.0));
    const std::vector<int> labels{0, 3, 1, 1, 2};
    auto loss = [labels](Tape& t, const ParamBundle& ps) {
      return ad::scale(ad::mean(ad::pick(ad::log_softmax_rows(t.param(ps, "logits")), labels)), -1.0);
    };
    CHECK(grad_check(loss, p).max_rel_error < 1e-5);
  }
  SUBCASE("two layer relu mlp") {
    ParamBundle p;
    init_linear(p, "l1", 4, 8, rng);
    init_linear(p, "l2", 8, 1, rng);
    const Matrix x = random_matrix(6, 4, rng);
    auto loss = [x](Tape& t, const ParamBundle& ps) {
      Var h = ad::relu(ad::add_rowvec(ad::matmul(t.constant(x), t.param(ps, "l1.w")), t.param(ps, "l1.b")));
      Var y = ad::add_rowvec(ad::matmul(h, t.param(ps, "l2.w")), t.param(ps, "l2.b"));
      return ad::mean(ad::square(y));
    };
    CHECK(grad_check(loss, p).max_rel_error < 1e-4);
  }
  SUBCASE("non-finite loss") {
    ParamBundle p;
    p.add("w", Matrix::Constant(1, 1, -1.0));
    auto loss = [](Tape& t, const ParamBundle& ps) { return ad::log(t.param(ps, "w")); };
    CHECK_THROWS_AS(grad_check(loss, p), ValidityError);
  }
}

TEST_CASE("backward contract") {
  Tape t;
  ParamBundle p;
  p.add("w", Matrix::Constant(2, 2, 0.5));
  p.add("unused", Matrix::Ones(3, 1));
  Var w = t.param(p, "w");
  Var h = ad::tanh(w);
  const Matrix before = h.value();
  Var l = ad::sum(h);
  t.backward(l);
  CHECK(h.value() == before);
  CHECK_THROWS_AS(t.backward(l), ContractError);
  const ParamBundle g = t.gradients(p);
  CHECK(g.at("unused") == Matrix::Zero(3, 1));
  CHECK(g.at("w")(0, 0) == doctest::Approx(1 - std::tanh(0.5) * std::tanh(0.5)));
}

TEST_CASE("non-trainable leaves receive no gradient") {
  Tape t;
  ParamBundle p;
  p.add("frozen", Matrix::Constant(1, 1, 2.0));
  p.add("live", Matrix::Constant(1, 1, 3.0));
  Var l = ad::mul(t.param(p, "frozen", false), t.param(p, "live"));
  t.backward(l);
  const ParamBundle g = t.bound_gradients(p);
  CHECK_FALSE(g.contains("frozen"));
  CHECK(g.at("live")(0, 0) == 2.0);
}

TEST_CASE("adam examples") {
  AdamConfig cfg;
  cfg.lr = 0.001;
  SUBCASE("first step is lr * sign(g)") {
    ParamBundle p;
    p.add("w", Matrix::Zero(1, 3));
    ParamBundle g;
    Matrix gm(1, 3);
    gm << 2.5, -0.3, 7.0;
    g.add("w", gm);
    AdamState s;
    adam_step(p, g, s, cfg);
    CHECK(s.t == 1);
    CHECK(p.at("w")(0, 0) == doctest::Approx(-0.001).epsilon(1e-6));
    CHECK(p.at("w")(0, 1) == doctest::Approx(0.001).epsilon(1e-6));
    CHECK(p.at("w")(0, 2) == doctest::Approx(-0.001).epsilon(1e-6));
  }
  SUBCASE("zero gradient leaves parameters unchanged") {
    ParamBundle p;
    p.add("w", Matrix::Constant(2, 2, 1.25));
    const ParamBundle before = p;
    AdamState s;
    adam_step(p, p.zeros_like(), s, cfg);
    CHECK(p == before);
    CHECK(s.t == 1);
  }
  SUBCASE("two steps match scalar reference") {
    // Scalar reference implementation.
    double w = 0, m = 0, v = 0;
    for (int t = 1; t <= 2; ++t) {
      const double g = 1.0;
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mh = m / (1 - std::pow(0.9, t));
      const double vh = v / (1 - std::pow(0.999, t));
      w -= 0.001 * mh / (std::sqrt(vh) + 1e-8);
    }
    ParamBundle p;
    p.add("w", Matrix::Zero(1, 1));
    ParamBundle g;
    g.add("w", Matrix::Ones(1, 1));
    AdamState s;
    adam_step(p, g, s, cfg);
    adam_step(p, g, s, cfg);
    CHECK(std::abs(p.at("w")(0, 0) - w) < 1e-12);
  }
  SUBCASE("shape mismatch") {
    ParamBundle p;
    p.add("w", Matrix::Zero(2, 2));
    ParamBundle g;
    g.add("w", Matrix::Zero(1, 2));
    AdamState s;
    CHECK_THROWS_AS(adam_step(p, g, s, cfg), DimensionError);
  }
}

TEST_CASE("parameter bundles round-trip through NDJSON") {
  Rng rng(99);
  ParamBundle p;
  init_linear(p, "enc.l1", 3, 5, rng);
  p.add("odd", Matrix::Constant(1, 1, 0.1 + 0.2));
  std::stringstream ss;
  write_params(p, ss);
  ParamBundle back = read_params(ss);
  CHECK(back == p);
  CHECK(fingerprint(back) == fingerprint(p));
  CHECK(fingerprint(p, "enc.") != fingerprint(p, "odd"));
}
