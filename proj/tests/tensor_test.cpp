#include "lcap/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace lcap;
using lcap_test::finite_difference;
using lcap_test::max_rel_error;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor::rand_uniform(std::move(shape), rng, lo, hi);
}

// loss = sum(out * probe) with a fixed random probe, so every output element
// contributes a distinct weight to the scalar.
double probed_loss(const Tensor& out, const Tensor& probe) {
  return sum_all(mul(out, probe)).item();
}

void check_unary_gradient(const char* name, const std::function<Tensor(const Tensor&)>& op,
                          double lo, double hi, double tol = 1e-6) {
  Rng rng(1234);
  Tensor x = random_tensor({2, 3}, rng, lo, hi).set_requires_grad(true);
  Tensor first = op(x);
  Tensor probe = random_tensor(first.shape(), rng);

  Tensor loss = sum_all(mul(first, probe));
  loss.backward();

  auto eval = [&]() {
    NoGradGuard ng;
    return probed_loss(op(x), probe);
  };
  auto fd = finite_difference(eval, x);
  EXPECT_LT(max_rel_error(x.grad(), fd), tol) << name;
}

}  // namespace

TEST(Matmul, IdentityCase) {
  Tensor a = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::from_data({2, 2}, {2, 3, 4, 5});
  Tensor c = matmul(a, b);
  EXPECT_EQ(c.data(), std::vector<double>({2, 3, 4, 5}));
}

TEST(Matmul, RowTimesColumn) {
  Tensor a = Tensor::from_data({1, 2}, {1, 2});
  Tensor b = Tensor::from_data({2, 1}, {3, 4});
  Tensor c = matmul(a, b);
  ASSERT_EQ(c.numel(), 1);
  EXPECT_DOUBLE_EQ(c.data()[0], 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tensor a = Tensor::zeros({3, 4});
  Tensor b = Tensor::zeros({5, 2});
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[3,4]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[5,2]"), std::string::npos) << msg;
  }
}

// Gradient of sum(a.b) w.r.t. a is the row-sums of b, and must also match
// finite differences.
TEST(Matmul, GradientOfSumIsRowSums) {
  Rng rng(7);
  Tensor a = random_tensor({3, 4}, rng).set_requires_grad(true);
  Tensor b = random_tensor({4, 2}, rng);

  Tensor loss = sum_all(matmul(a, b));
  loss.backward();

  for (std::int64_t i = 0; i < 3; ++i) {
    for (std::int64_t k = 0; k < 4; ++k) {
      double row_sum = b.at({k, 0}) + b.at({k, 1});
      EXPECT_NEAR(a.grad()[static_cast<std::size_t>(i * 4 + k)], row_sum, 1e-12);
    }
  }

  auto eval = [&]() {
    NoGradGuard ng;
    return sum_all(matmul(a, b)).item();
  };
  auto fd = finite_difference(eval, a);
  EXPECT_LT(max_rel_error(a.grad(), fd), 1e-6);
}

TEST(Matmul, BatchedAndSharedOperandGradients) {
  Rng rng(21);
  Tensor a = random_tensor({2, 3, 4}, rng).set_requires_grad(true);
  Tensor w = random_tensor({4, 5}, rng).set_requires_grad(true);
  Tensor probe = random_tensor({2, 3, 5}, rng);

  Tensor loss = sum_all(mul(matmul(a, w), probe));
  loss.backward();

  auto eval = [&]() {
    NoGradGuard ng;
    return probed_loss(matmul(a, w), probe);
  };
  EXPECT_LT(max_rel_error(a.grad(), finite_difference(eval, a)), 1e-6);
  EXPECT_LT(max_rel_error(w.grad(), finite_difference(eval, w)), 1e-6);
}

TEST(Softmax, UniformOnEqualInputs) {
  Tensor x = Tensor::from_data({3}, {0, 0, 0});
  Tensor y = softmax(x, 0);
  for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, StabilizedAgainstLargeInputs) {
  Tensor x = Tensor::from_data({2}, {1000, 0});
  Tensor y = softmax(x, 0);
  EXPECT_NEAR(y.data()[0], 1.0, 1e-12);
  EXPECT_NEAR(y.data()[1], 0.0, 1e-12);
}

TEST(Softmax, HandComputedValues) {
  Tensor x = Tensor::from_data({3}, {1, 2, 3});
  Tensor y = softmax(x, 0);
  EXPECT_NEAR(y.data()[0], 0.09003057, 1e-7);
  EXPECT_NEAR(y.data()[1], 0.24472847, 1e-7);
  EXPECT_NEAR(y.data()[2], 0.66524096, 1e-7);
}

TEST(Softmax, SumsToOneOnRandomAxes) {
  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor x = random_tensor({3, 4, 5}, rng, -30.0, 30.0);
    const std::int64_t axis = rng.uniform_int(0, 3);
    Tensor y = softmax(x, axis);
    Tensor s = sum(y, axis);
    for (double v : s.data()) EXPECT_LT(std::abs(v - 1.0), 1e-12);
  }
}

TEST(Softmax, NonFiniteInputRaises) {
  Tensor x = Tensor::from_data({2}, {1.0, std::nan("")});
  EXPECT_THROW(softmax(x, 0), NumericError);
}

TEST(Backward, SumGivesOnes) {
  Tensor p = Tensor::from_data({2, 2}, {1, 2, 3, 4}).set_requires_grad(true);
  sum_all(p).backward();
  for (double g : p.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, SumOfSquaresGivesTwiceInput) {
  Tensor p = Tensor::from_data({3}, {1, -2, 0.5}).set_requires_grad(true);
  sum_all(mul(p, p)).backward();
  EXPECT_DOUBLE_EQ(p.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(p.grad()[1], -4.0);
  EXPECT_DOUBLE_EQ(p.grad()[2], 1.0);
}

TEST(Backward, NonScalarLossRaises) {
  Tensor p = Tensor::zeros({2}).set_requires_grad(true);
  Tensor y = mul(p, p);
  EXPECT_THROW(y.backward(), ContractError);
}

TEST(Backward, RepeatedCallsAccumulate) {
  Tensor p = Tensor::from_data({2}, {1, 2}).set_requires_grad(true);
  Tensor loss = sum_all(p);
  loss.backward();
  loss.backward();
  EXPECT_DOUBLE_EQ(p.grad()[0], 2.0);
  p.zero_grad();
  loss.backward();
  EXPECT_DOUBLE_EQ(p.grad()[0], 1.0);
}

// A node consumed by two paths must contribute once per path and be visited
// exactly once; a double visit would double the downstream gradient.
TEST(Backward, DiamondGraphVisitedOnce) {
  Tensor a = Tensor::from_data({2}, {3, 5}).set_requires_grad(true);
  int visits = 0;
  Tensor probe = detail::make_unary_custom(
      a, "probe", [](double x) { return x; }, [&visits](double, double) {
        ++visits;
        return 1.0;
      });
  Tensor loss = sum_all(add(mul(probe, probe), probe));  // x^2 + x
  loss.backward();
  EXPECT_EQ(visits, 2);  // once per element, in a single backward_fn call
  EXPECT_DOUBLE_EQ(a.grad()[0], 2.0 * 3 + 1);
  EXPECT_DOUBLE_EQ(a.grad()[1], 2.0 * 5 + 1);
}

TEST(Broadcast, AddVectorToMatrixForwardAndBackward) {
  Tensor m = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}).set_requires_grad(true);
  Tensor v = Tensor::from_data({3}, {10, 20, 30}).set_requires_grad(true);
  Tensor out = add(m, v);
  EXPECT_DOUBLE_EQ(out.at({0, 0}), 11);
  EXPECT_DOUBLE_EQ(out.at({1, 2}), 36);
  sum_all(out).backward();
  for (double g : m.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
  for (double g : v.grad()) EXPECT_DOUBLE_EQ(g, 2.0);  // reduced over rows
}

TEST(Broadcast, ScalarAgainstTensor) {
  Tensor s = Tensor::scalar(3.0).set_requires_grad(true);
  Tensor x = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor out = mul(s, x);
  sum_all(out).backward();
  EXPECT_DOUBLE_EQ(s.grad()[0], 10.0);
}

TEST(Broadcast, IncompatibleShapesRaise) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 4});
  EXPECT_THROW(add(a, b), ShapeError);
}

TEST(Gradients, ElementwiseUnaryOpsMatchFiniteDifferences) {
  check_unary_gradient("exp", [](const Tensor& x) { return exp(x); }, -1.0, 1.0);
  check_unary_gradient("log", [](const Tensor& x) { return log(x); }, 0.3, 2.0);
  check_unary_gradient("sqrt", [](const Tensor& x) { return sqrt(x); }, 0.3, 2.0);
  check_unary_gradient("square", [](const Tensor& x) { return square(x); }, -1.0, 1.0);
  check_unary_gradient("relu", [](const Tensor& x) { return relu(x); }, 0.2, 1.5);
  check_unary_gradient("sigmoid", [](const Tensor& x) { return sigmoid(x); }, -2.0, 2.0);
  check_unary_gradient("log_sigmoid", [](const Tensor& x) { return log_sigmoid(x); }, -2.0, 2.0);
  check_unary_gradient("clamp_min", [](const Tensor& x) { return clamp_min(x, 0.1); }, 0.3, 1.5);
  check_unary_gradient("neg", [](const Tensor& x) { return neg(x); }, -1.0, 1.0);
  check_unary_gradient("softmax", [](const Tensor& x) { return softmax(x, -1); }, -2.0, 2.0);
  check_unary_gradient("log_softmax", [](const Tensor& x) { return log_softmax(x, 0); }, -2.0, 2.0);
  check_unary_gradient("sum_keepdims", [](const Tensor& x) { return sum(x, 1, true); }, -1.0, 1.0);
  check_unary_gradient("transpose", [](const Tensor& x) { return transpose(x, 0, 1); }, -1.0, 1.0);
  check_unary_gradient("reshape", [](const Tensor& x) { return reshape(x, {3, 2}); }, -1.0, 1.0);
  check_unary_gradient("slice", [](const Tensor& x) { return slice(x, 1, 1, 2); }, -1.0, 1.0);
}

TEST(Gradients, BinaryOpsWithBroadcastMatchFiniteDifferences) {
  Rng rng(99);
  Tensor a = random_tensor({2, 1, 3}, rng, 0.5, 1.5).set_requires_grad(true);
  Tensor b = random_tensor({4, 3}, rng, 0.5, 1.5).set_requires_grad(true);
  Tensor probe = random_tensor({2, 4, 3}, rng);

  for (auto op : {0, 1, 2, 3}) {
    a.zero_grad();
    b.zero_grad();
    auto apply = [op](const Tensor& x, const Tensor& y) {
      switch (op) {
        case 0: return add(x, y);
        case 1: return sub(x, y);
        case 2: return mul(x, y);
        default: return div(x, y);
      }
    };
    sum_all(mul(apply(a, b), probe)).backward();
    auto eval = [&]() {
      NoGradGuard ng;
      return probed_loss(apply(a, b), probe);
    };
    EXPECT_LT(max_rel_error(a.grad(), finite_difference(eval, a)), 1e-6) << "op " << op;
    EXPECT_LT(max_rel_error(b.grad(), finite_difference(eval, b)), 1e-6) << "op " << op;
  }
}

TEST(Gradients, ConcatAndSliceMatchFiniteDifferences) {
  Rng rng(5);
  Tensor a = random_tensor({2, 2}, rng).set_requires_grad(true);
  Tensor b = random_tensor({2, 3}, rng).set_requires_grad(true);
  Tensor probe = random_tensor({2, 4}, rng);

  auto forward = [&]() { return slice(concat({a, b}, 1), 1, 1, 4); };
  sum_all(mul(forward(), probe)).backward();
  auto eval = [&]() {
    NoGradGuard ng;
    return probed_loss(forward(), probe);
  };
  EXPECT_LT(max_rel_error(a.grad(), finite_difference(eval, a)), 1e-6);
  EXPECT_LT(max_rel_error(b.grad(), finite_difference(eval, b)), 1e-6);
}

TEST(Gradients, EmbeddingAndGatherMatchFiniteDifferences) {
  Rng rng(11);
  Tensor table = random_tensor({5, 3}, rng).set_requires_grad(true);
  IntMatrix ids(2, 4);
  for (auto& v : ids.values) v = rng.uniform_int(0, 5);

  Tensor probe = random_tensor({2, 4, 3}, rng);
  sum_all(mul(embedding(table, ids), probe)).backward();
  auto eval = [&]() {
    NoGradGuard ng;
    return probed_loss(embedding(table, ids), probe);
  };
  EXPECT_LT(max_rel_error(table.grad(), finite_difference(eval, table)), 1e-6);

  // gather picks one vocab entry per position out of a softmax.
  table.zero_grad();
  IntMatrix picks(2, 4);
  for (auto& v : picks.values) v = rng.uniform_int(0, 3);
  auto forward2 = [&]() { return gather_index(log_softmax(embedding(table, ids), -1), picks); };
  Tensor probe2 = random_tensor({2, 4}, rng);
  sum_all(mul(forward2(), probe2)).backward();
  auto eval2 = [&]() {
    NoGradGuard ng;
    return probed_loss(forward2(), probe2);
  };
  EXPECT_LT(max_rel_error(table.grad(), finite_difference(eval2, table)), 1e-6);
}

TEST(Embedding, OutOfRangeTokenRaises) {
  Tensor table = Tensor::zeros({4, 2});
  IntMatrix ids(1, 1);
  ids.at(0, 0) = 4;
  EXPECT_THROW(embedding(table, ids), ContractError);
}

TEST(Shapes, InvariantProductMatchesData) {
  Rng rng(2);
  Tensor t = random_tensor({3, 1, 5}, rng);
  EXPECT_EQ(shape_numel(t.shape()), static_cast<std::int64_t>(t.data().size()));
  Tensor r = reshape(t, {5, 3});
  EXPECT_EQ(shape_numel(r.shape()), r.numel());
  EXPECT_THROW(reshape(t, {4, 4}), ShapeError);
}

TEST(NoGrad, SkipsGraphConstruction) {
  Tensor a = Tensor::ones({2}).set_requires_grad(true);
  NoGradGuard ng;
  Tensor y = mul(a, a);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Rng, DeterministicStreams) {
  Rng r1(42), r2(42);
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(r1.next_u64(), r2.next_u64());
  }
  Rng n1(7), n2(7);
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(n1.normal(), n2.normal());
  }
  EXPECT_NE(derive_seed(1, "train"), derive_seed(1, "eval"));
  EXPECT_NE(derive_seed(1, "train"), derive_seed(2, "train"));
}
