#include <doctest.h>

#include <functional>
#include <random>

#include "levda/tape.hpp"

using namespace levda::ad;

namespace {

using Builder = std::function<VarD(TapeD&, const std::vector<VarD>&)>;

ArrayD random_array(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  ArrayD a(r, c);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = n(rng);
  return a;
}

// Scalar loss <probe, f(inputs)> so that every output entry contributes.
double evaluate(const Builder& f, const std::vector<ArrayD>& inputs, const ArrayD& probe,
                std::vector<ArrayD>* grads) {
  TapeD tape;
  std::vector<VarD> leaves;
  for (const auto& x : inputs) leaves.push_back(tape.leaf(x));
  const VarD y = f(tape, leaves);
  REQUIRE(y.rows() == probe.rows());
  REQUIRE(y.cols() == probe.cols());
  const VarD loss = sum(cwise_product(y, tape.constant(probe)));
  if (grads) {
    const GradientD g = tape.backward(loss);
    grads->clear();
    for (const auto& l : leaves) grads->push_back(g.wrt(l));
  }
  return loss.value()(0, 0);
}

double max_fd_error(const Builder& f, const std::vector<ArrayD>& inputs, const ArrayD& probe) {
  std::vector<ArrayD> grads;
  evaluate(f, inputs, probe, &grads);
  double worst = 0.0;
  const double h = 1e-6;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (Eigen::Index k = 0; k < inputs[i].size(); ++k) {
      auto plus = inputs;
      auto minus = inputs;
      plus[i].data()[k] += h;
      minus[i].data()[k] -= h;
      const double fd = (evaluate(f, plus, probe, nullptr) - evaluate(f, minus, probe, nullptr)) / (2 * h);
      const double an = grads[i].data()[k];
      worst = std::max(worst, std::abs(fd - an) / std::max(1.0, std::abs(fd)));
    }
  }
  return worst;
}

struct OpCase {
  const char* name;
  // Builds random input shapes and the op under test.
  std::function<std::vector<ArrayD>(std::mt19937_64&)> inputs;
  Builder build;
};

std::vector<OpCase> op_cases() {
  auto dims = [](std::mt19937_64& rng) {
    std::uniform_int_distribution<int> d(1, 4);
    return std::pair<int, int>{d(rng), d(rng)};
  };
  return {
      {"add", [=](auto& r) { auto [a, b] = dims(r); return std::vector{random_array(r, a, b), random_array(r, a, b)}; },
       [](TapeD&, const auto& v) { return v[0] + v[1]; }},
      {"subtract",
       [=](auto& r) { auto [a, b] = dims(r); return std::vector{random_array(r, a, b), random_array(r, a, b)}; },
       [](TapeD&, const auto& v) { return v[0] - v[1]; }},
      {"scale", [=](auto& r) { auto [a, b] = dims(r); return std::vector{random_array(r, a, b)}; },
       [](TapeD&, const auto& v) { return -1.7 * v[0]; }},
      {"scale_by",
       [=](auto& r) { auto [a, b] = dims(r); return std::vector{random_array(r, 1, 1), random_array(r, a, b)}; },
       [](TapeD&, const auto& v) { return scale_by(v[0], v[1]); }},
      {"multiply",
       [=](auto& r) { auto [a, b] = dims(r); return std::vector{random_array(r, a, b), random_array(r, a, b)}; },
       [](TapeD&, const auto& v) { return cwise_product(v[0], v[1]); }},
      {"matmul",
       [=](auto& r) {
         auto [a, b] = dims(r);
         auto [c, d] = dims(r);
         (void)d;
         return std::vector{random_array(r, a, b), random_array(r, b, c)};
       },
       [](TapeD&, const auto& v) { return matmul(v[0], v[1]); }},
      {"affine",
       [=](auto& r) {
         auto [a, b] = dims(r);
         auto [c, d] = dims(r);
         (void)d;
         return std::vector{random_array(r, a, b), random_array(r, b, c), random_array(r, a, 1)};
       },
       [](TapeD&, const auto& v) { return affine(v[0], v[1], v[2]); }},
      {"tanh", [=](auto& r) { auto [a, b] = dims(r); return std::vector{random_array(r, a, b)}; },
       [](TapeD&, const auto& v) { return tanh(v[0]); }},
      {"sin", [=](auto& r) { auto [a, b] = dims(r); return std::vector{random_array(r, a, b)}; },
       [](TapeD&, const auto& v) { return sin(v[0]); }},
      {"exp", [=](auto& r) { auto [a, b] = dims(r); return std::vector{random_array(r, a, b, 0.5)}; },
       [](TapeD&, const auto& v) { return exp(v[0]); }},
      {"sum", [=](auto& r) { auto [a, b] = dims(r); return std::vector{random_array(r, a, b)}; },
       [](TapeD&, const auto& v) { return sum(v[0]); }},
      {"squared_norm", [=](auto& r) { auto [a, b] = dims(r); return std::vector{random_array(r, a, b)}; },
       [](TapeD&, const auto& v) { return squared_norm(v[0]); }},
      {"concat",
       [=](auto& r) {
         auto [a, b] = dims(r);
         auto [c, d] = dims(r);
         (void)d;
         return std::vector{random_array(r, a, b), random_array(r, c, b)};
       },
       [](TapeD&, const auto& v) { return concat({v[0], v[1], v[0]}); }},
      {"slice", [=](auto& r) { auto [a, b] = dims(r); return std::vector{random_array(r, a + 2, b)}; },
       [](TapeD&, const auto& v) { return slice(v[0], 1, v[0].rows() - 2); }},
      {"reshape", [=](auto& r) { auto [a, b] = dims(r); return std::vector{random_array(r, a, 2 * b)}; },
       [](TapeD&, const auto& v) { return reshape(v[0], 2 * v[0].rows(), v[0].cols() / 2); }},
      {"constant-mixing",
       [=](auto& r) { auto [a, b] = dims(r); return std::vector{random_array(r, a, b)}; },
       [](TapeD& t, const auto& v) {
         const VarD c = t.constant(ArrayD::Constant(v[0].rows(), v[0].cols(), 0.3));
         return tanh(v[0] + c) - cwise_product(c, v[0]);
       }},
  };
}

}  // namespace

TEST_CASE("every op matches central finite differences on random inputs") {
  std::mt19937_64 rng(11);
  for (const auto& op : op_cases()) {
    CAPTURE(op.name);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const auto inputs = op.inputs(rng);
      TapeD probe_tape;
      std::vector<VarD> leaves;
      for (const auto& x : inputs) leaves.push_back(probe_tape.leaf(x));
      const VarD y = op.build(probe_tape, leaves);
      const ArrayD probe = random_array(rng, y.rows(), y.cols());
      worst = std::max(worst, max_fd_error(op.build, inputs, probe));
    }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("composed expression with reuse accumulates gradients") {
  TapeD t;
  const VarD x = t.leaf(ArrayD::Constant(1, 1, 0.7));
  const VarD y = cwise_product(x, x) + tanh(x) + 3.0 * x;
  const GradientD g = t.backward(y);
  CHECK(g.wrt(x)(0, 0) == doctest::Approx(2 * 0.7 + (1 - std::pow(std::tanh(0.7), 2)) + 3.0).epsilon(1e-14));
}

TEST_CASE("shape mismatches name both shapes") {
  TapeD t;
  const VarD a = t.leaf(ArrayD::Zero(2, 1));
  const VarD b = t.leaf(ArrayD::Zero(3, 1));
  try {
    (void)(a + b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x1") != std::string::npos);
    CHECK(msg.find("3x1") != std::string::npos);
  }
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
  CHECK_THROWS_AS(slice(a, 1, 2), ShapeError);
  CHECK_THROWS_AS(reshape(a, 3, 1), ShapeError);
}

TEST_CASE("backward needs a scalar output") {
  TapeD t;
  const VarD a = t.leaf(ArrayD::Zero(2, 1));
  CHECK_THROWS_AS(t.backward(a), std::invalid_argument);
}

TEST_CASE("constants receive no gradient and unreached leaves read as zero") {
  TapeD t;
  const VarD a = t.leaf(ArrayD::Constant(2, 2, 1.0));
  const VarD unused = t.leaf(ArrayD::Constant(3, 1, 1.0));
  const VarD c = t.constant(ArrayD::Constant(2, 2, 2.0));
  const GradientD g = t.backward(sum(cwise_product(a, c)));
  CHECK(g.contains(a));
  CHECK_FALSE(g.contains(unused));
  CHECK(g.wrt(unused).isZero());
  CHECK(g.wrt(a).isApprox(ArrayD::Constant(2, 2, 2.0)));
  CHECK_FALSE(g.contains(c));
}

TEST_CASE("gradient of a constant-only expression is empty") {
  TapeD t;
  const VarD c = t.constant(ArrayD::Constant(1, 1, 2.0));
  CHECK(t.backward(squared_norm(c)).empty());
}

TEST_CASE("op names are stable") {
  CHECK(std::string(op_name(OpKind::affine)) == "affine");
  CHECK(std::string(op_name(OpKind::squared_norm)) == "squared_norm");
}
