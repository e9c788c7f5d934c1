#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "scmil/grad_check.hpp"
#include "scmil/rng.hpp"
#include "scmil/tape.hpp"

using namespace scmil;

namespace {

Tensor random_tensor(std::vector<size_t> shape, Rng& rng, double lo = -2.0,
                     double hi = 2.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values) v = rng.uniform(lo, hi);
  return t;
}

// Keeps relu inputs away from the kink so central differences stay valid.
Tensor random_tensor_away_from_zero(std::vector<size_t> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values) {
    double x = rng.uniform(0.05, 2.0);
    v = rng.uniform() < 0.5 ? -x : x;
  }
  return t;
}

}  // namespace

TEST_CASE("softmax of a constant vector is uniform") {
  Tape tape;
  NodeId x = tape.input(Tensor::vec({0.0, 0.0, 0.0}));
  const Tensor& y = tape.value(tape.softmax(x, 0));
  for (double v : y.values) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("softmax rows are positive and sum to one") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tape tape;
    NodeId x = tape.input(random_tensor({4, 7}, rng, -30.0, 30.0));
    const Tensor& y = tape.value(tape.softmax(x, 1));
    for (size_t i = 0; i < 4; ++i) {
      double sum = 0.0;
      for (size_t j = 0; j < 7; ++j) {
        CHECK(y.at(i, j) > 0.0);
        sum += y.at(i, j);
      }
      CHECK(std::abs(sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("matmul by identity returns the input") {
  Rng rng(3);
  Tensor eye({3, 3});
  for (size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  Tensor a = random_tensor({3, 5}, rng);
  Tape tape;
  NodeId out = tape.matmul(tape.input(eye), tape.input(a));
  for (size_t i = 0; i < a.numel(); ++i) {
    CHECK(tape.value(out).values[i] == a.values[i]);
  }
}

TEST_CASE("l2_normalize on a 3-4-5 triangle") {
  Tape tape;
  const Tensor& y = tape.value(tape.l2_normalize(tape.input(Tensor::vec({3.0, 4.0})), 0));
  CHECK(y.values[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(y.values[1] == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("shape mismatches name the op and shapes") {
  Tape tape;
  NodeId a = tape.input(Tensor({2, 3}));
  NodeId b = tape.input(Tensor({2, 3}));
  CHECK_THROWS_WITH_AS(tape.matmul(a, b), doctest::Contains("matmul"), ShapeError);
  NodeId v = tape.input(Tensor({4}));
  CHECK_THROWS_AS(tape.add(a, v), ShapeError);
  CHECK_THROWS_AS(tape.dot(a, v), ShapeError);
  CHECK_THROWS_AS(tape.softmax(v, 1), ShapeError);
  CHECK_THROWS_AS(tape.gather(v, {0}), ShapeError);
}

TEST_CASE("non-finite forward outputs raise") {
  Tape tape;
  NodeId neg = tape.input(Tensor::vec({-1.0}));
  CHECK_THROWS_AS(tape.log(neg), NumericError);
  NodeId big = tape.input(Tensor::vec({1000.0}));
  CHECK_THROWS_AS(tape.exp(big), NumericError);  // exp(1000) overflows
}

TEST_CASE("backward of sum is ones") {
  Tape tape;
  NodeId x = tape.input(Tensor::vec({1.0, -2.0, 7.0, 0.5}));
  GradMap grads = tape.backward(tape.reduce_sum(x));
  for (double g : grads.at(x).values) CHECK(g == 1.0);
}

TEST_CASE("backward of dot(x, x) is 2x") {
  Tape tape;
  NodeId x = tape.input(Tensor::vec({1.0, 2.0}));
  GradMap grads = tape.backward(tape.dot(x, x));
  CHECK(grads.at(x).values[0] == doctest::Approx(2.0));
  CHECK(grads.at(x).values[1] == doctest::Approx(4.0));
}

TEST_CASE("gradient of loss w.r.t. itself is one") {
  Tape tape;
  NodeId x = tape.input(Tensor::vec({1.0, 2.0}));
  NodeId loss = tape.reduce_sum(x);
  CHECK(tape.backward(loss).at(loss).values[0] == 1.0);
}

TEST_CASE("backward rejects non-scalar losses") {
  Tape tape;
  NodeId x = tape.input(Tensor::vec({1.0, 2.0}));
  CHECK_THROWS_AS(tape.backward(x), ShapeError);
}

TEST_CASE("two-layer tanh network matches central differences") {
  Rng rng(17);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Tensor> params = {
        random_tensor({4, 6}, rng, -0.7, 0.7), random_tensor({6}, rng, -0.5, 0.5),
        random_tensor({6, 3}, rng, -0.7, 0.7), random_tensor({3}, rng, -0.5, 0.5)};
    Tensor x = random_tensor({5, 4}, rng);
    auto f = [&x](Tape& tape, const std::vector<NodeId>& p) {
      NodeId in = tape.input(x);
      NodeId h = tape.tanh(tape.add(tape.matmul(in, p[0]), p[1]));
      NodeId out = tape.tanh(tape.add(tape.matmul(h, p[2]), p[3]));
      return tape.reduce_sum(out);
    };
    CHECK(finite_diff_check(f, params, 1e-5) < 1e-4);
  }
}

TEST_CASE("finite_diff_check on x squared is tight") {
  auto f = [](Tape& tape, const std::vector<NodeId>& p) { return tape.dot(p[0], p[0]); };
  CHECK(finite_diff_check(f, {Tensor::vec({3.0})}, 1e-5) < 1e-8);
}

TEST_CASE("sum of softmax is constant so its gradient vanishes") {
  Rng rng(23);
  auto f = [](Tape& tape, const std::vector<NodeId>& p) {
    return tape.reduce_sum(tape.softmax(p[0], 0));
  };
  Tensor x = random_tensor({6}, rng);
  CHECK(finite_diff_check(f, {x}, 1e-5) < 1e-8);

  Tape tape;
  NodeId p = tape.input(x);
  GradMap grads = tape.backward(tape.reduce_sum(tape.softmax(p, 0)));
  for (double g : grads.at(p).values) CHECK(std::abs(g) < 1e-12);
}

TEST_CASE("every op matches central differences on random inputs") {
  Rng rng(29);
  double eps = 1e-5;

  auto check = [&](const char* name, const ScalarGraphFn& f,
                   std::vector<Tensor> params) {
    INFO(name);
    CHECK(finite_diff_check(f, params, eps) < 1e-4);
  };

  for (int trial = 0; trial < 3; ++trial) {
    check("matmul",
          [](Tape& t, const std::vector<NodeId>& p) {
            return t.reduce_sum(t.tanh(t.matmul(p[0], p[1])));
          },
          {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)});
    check("add_bias",
          [](Tape& t, const std::vector<NodeId>& p) {
            return t.reduce_sum(t.tanh(t.add(p[0], p[1])));
          },
          {random_tensor({3, 4}, rng), random_tensor({4}, rng)});
    check("mul",
          [](Tape& t, const std::vector<NodeId>& p) {
            return t.reduce_sum(t.mul(p[0], p[1]));
          },
          {random_tensor({2, 5}, rng), random_tensor({2, 5}, rng)});
    check("scale",
          [](Tape& t, const std::vector<NodeId>& p) {
            return t.reduce_mean(t.scale(p[0], -1.7));
          },
          {random_tensor({7}, rng)});
    check("relu",
          [](Tape& t, const std::vector<NodeId>& p) {
            return t.reduce_sum(t.relu(p[0]));
          },
          {random_tensor_away_from_zero({3, 3}, rng)});
    check("exp_log",
          [](Tape& t, const std::vector<NodeId>& p) {
            return t.reduce_sum(t.log(t.exp(p[0])));
          },
          {random_tensor({4}, rng)});
    check("log",
          [](Tape& t, const std::vector<NodeId>& p) {
            return t.reduce_sum(t.log(p[0]));
          },
          {random_tensor({5}, rng, 0.5, 2.5)});
    check("softmax_weighted",
          [](Tape& t, const std::vector<NodeId>& p) {
            return t.dot(t.softmax(p[0], 0), p[1]);
          },
          {random_tensor({6}, rng), random_tensor({6}, rng)});
    check("log_softmax_rows",
          [](Tape& t, const std::vector<NodeId>& p) {
            return t.reduce_sum(t.mul(t.log_softmax(p[0], 1), p[1]));
          },
          {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)});
    check("l2_normalize_rows",
          [](Tape& t, const std::vector<NodeId>& p) {
            return t.reduce_sum(t.mul(t.l2_normalize(p[0], 1), p[1]));
          },
          {random_tensor({3, 4}, rng, 0.5, 2.0), random_tensor({3, 4}, rng)});
    check("dot",
          [](Tape& t, const std::vector<NodeId>& p) { return t.dot(p[0], p[1]); },
          {random_tensor({6}, rng), random_tensor({6}, rng)});
    check("transpose",
          [](Tape& t, const std::vector<NodeId>& p) {
            return t.reduce_sum(t.tanh(t.matmul(t.transpose(p[0]), p[1])));
          },
          {random_tensor({4, 3}, rng), random_tensor({4, 2}, rng)});
    check("reshape_gather_stack",
          [](Tape& t, const std::vector<NodeId>& p) {
            NodeId m = t.stack_rows({p[0], p[1]});
            return t.reduce_sum(t.gather(t.reshape(m, {4, 2}), {1, 0, 1, 0}));
          },
          {random_tensor({4}, rng), random_tensor({4}, rng)});
  }
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(31);
  Tensor x = random_tensor({5}, rng);
  double a = 0.37, b = -1.25;

  Tape tape;
  NodeId p = tape.input(x);
  NodeId l1 = tape.dot(p, p);
  NodeId l2 = tape.reduce_sum(tape.tanh(p));
  NodeId combined = tape.add(tape.scale(l1, a), tape.scale(l2, b));
  GradMap g_comb = tape.backward(combined);
  GradMap g1 = tape.backward(l1);
  GradMap g2 = tape.backward(l2);
  for (size_t i = 0; i < x.numel(); ++i) {
    double expected = a * g1.at(p).values[i] + b * g2.at(p).values[i];
    CHECK(std::abs(g_comb.at(p).values[i] - expected) < 1e-10);
  }
}

TEST_CASE("nodes with no path to the loss get zero gradients") {
  Tape tape;
  NodeId x = tape.input(Tensor::vec({1.0, 2.0}));
  NodeId unused = tape.input(Tensor::vec({5.0}));
  GradMap grads = tape.backward(tape.reduce_sum(x));
  CHECK(grads.at(unused).values[0] == 0.0);
}

TEST_CASE("finite_diff_check validates its inputs") {
  auto f = [](Tape& tape, const std::vector<NodeId>& p) { return tape.reduce_sum(p[0]); };
  CHECK_THROWS_AS(finite_diff_check(f, {Tensor::vec({1.0})}, 0.0), NumericError);
  auto bad = [](Tape& tape, const std::vector<NodeId>& p) { return p[0]; };
  CHECK_THROWS_AS(finite_diff_check(bad, {Tensor::vec({1.0, 2.0})}, 1e-5), ShapeError);
}
