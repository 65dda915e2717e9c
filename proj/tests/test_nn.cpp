#include <doctest.h>

#include <cmath>
#include <random>

#include "support.hpp"
#include "tasam/error.hpp"
#include "tasam/nn.hpp"

using namespace tasam;
using namespace tasam::nn;

namespace {

// Layer-by-layer recomputation with plain loops, independent of Eigen products.
std::vector<double> loop_forward(const MlpParams& p, std::vector<double> a) {
  for (std::size_t l = 0; l < p.num_layers(); ++l) {
    const auto& W = p.weights[l];
    std::vector<double> z(static_cast<std::size_t>(W.rows()));
    for (Eigen::Index r = 0; r < W.rows(); ++r) {
      double s = p.biases[l](r);
      for (Eigen::Index c = 0; c < W.cols(); ++c) s += W(r, c) * a[static_cast<std::size_t>(c)];
      const bool last = l + 1 == p.num_layers();
      const Activation act = last ? p.output_activation : p.hidden_activation;
      if (act == Activation::tanh) s = std::tanh(s);
      if (act == Activation::sigmoid) s = 1.0 / (1.0 + std::exp(-s));
      z[static_cast<std::size_t>(r)] = s;
    }
    a = z;
  }
  return a;
}

}  // namespace

TEST_CASE("forward of an all-zero network") {
  auto p = make_zero_mlp({3, 4, 2}, Activation::tanh, Activation::identity);
  CHECK(forward(p, Eigen::Vector3d(1, -2, 3)).isZero(0.0));
  p.output_activation = Activation::sigmoid;
  Eigen::VectorXd y = forward(p, Eigen::Vector3d(1, -2, 3));
  CHECK(y(0) == 0.5);
  CHECK(y(1) == 0.5);
}

TEST_CASE("forward matches a loop oracle on a 2-3-1 net") {
  std::mt19937_64 rng(11);
  auto p = make_mlp({2, 3, 1}, Activation::tanh, Activation::identity, rng);
  Eigen::Vector2d x(0.3, -1.7);
  auto want = loop_forward(p, {0.3, -1.7});
  CHECK(std::abs(forward(p, x)(0) - want[0]) < 1e-12);

  p.output_activation = Activation::sigmoid;
  want = loop_forward(p, {0.3, -1.7});
  double got = forward(p, x)(0);
  CHECK(std::abs(got - want[0]) < 1e-12);
  CHECK(got > 0.0);
  CHECK(got < 1.0);
}

TEST_CASE("forward rejects a wrong input size") {
  std::mt19937_64 rng(1);
  auto p = make_mlp({3, 2}, Activation::tanh, Activation::identity, rng);
  CHECK_THROWS_AS(forward(p, Eigen::Vector2d(1, 2)), ConfigError);
}

TEST_CASE("forward is deterministic") {
  std::mt19937_64 rng(5);
  auto p = make_mlp({4, 6, 3}, Activation::tanh, Activation::sigmoid, rng);
  Eigen::Vector4d x(0.1, 0.2, -0.3, 0.4);
  CHECK(forward(p, x) == forward(p, x));
}

TEST_CASE("batched forward equals per-sample forward") {
  std::mt19937_64 rng(6);
  auto p = make_mlp({3, 5, 2}, Activation::tanh, Activation::identity, rng);
  Eigen::MatrixXd X = tsupport::random_matrix(3, 4, rng);
  auto tape = forward_batch(p, X);
  for (int j = 0; j < 4; ++j) CHECK((tape.output().col(j) - forward(p, X.col(j))).norm() < 1e-14);
}

TEST_CASE("backward of a linear 1-1 net") {
  auto p = make_zero_mlp({1, 1}, Activation::tanh, Activation::identity);
  p.weights[0](0, 0) = 2.5;
  GradientSet g = backward(p, Eigen::VectorXd::Constant(1, 0.7), Eigen::VectorXd::Constant(1, 1.0));
  CHECK(g.weights[0](0, 0) == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(g.biases[0](0) == doctest::Approx(1.0));
}

TEST_CASE("backward with zero upstream is zero") {
  std::mt19937_64 rng(2);
  auto p = make_mlp({3, 4, 2}, Activation::tanh, Activation::sigmoid, rng);
  GradientSet g = backward(p, Eigen::Vector3d(1, 2, 3), Eigen::Vector2d::Zero());
  CHECK(grad_norm(g) == 0.0);
}

TEST_CASE("backward rejects a wrong upstream size") {
  std::mt19937_64 rng(2);
  auto p = make_mlp({3, 2}, Activation::tanh, Activation::identity, rng);
  CHECK_THROWS_AS(backward(p, Eigen::Vector3d(1, 2, 3), Eigen::Vector3d(1, 1, 1)), ConfigError);
}

TEST_CASE("backward matches finite differences on a random 4-8-2 net") {
  std::mt19937_64 rng(3);
  auto p = make_mlp({4, 8, 2}, Activation::tanh, Activation::identity, rng);
  Eigen::VectorXd x = tsupport::random_vector(4, rng);
  Eigen::VectorXd up = tsupport::random_vector(2, rng);
  auto f = [&](const MlpParams& q) { return forward(q, x).dot(up); };
  Eigen::VectorXd analytic = flatten(backward(p, x, up));
  CHECK(tsupport::mismatches(analytic, tsupport::fd_gradient(f, p)) == 0);
}

TEST_CASE("gradient property: 100 random small nets") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> size(1, 5), depth(0, 2), act(0, 2);
  int bad = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> sizes{size(rng)};
    for (int d = depth(rng); d >= 0; --d) sizes.push_back(size(rng));
    sizes.push_back(size(rng));
    auto p = make_mlp(sizes, act(rng) == 0 ? Activation::sigmoid : Activation::tanh,
                      static_cast<Activation>(act(rng)), rng);
    Eigen::VectorXd x = tsupport::random_vector(sizes.front(), rng);
    Eigen::VectorXd up = tsupport::random_vector(sizes.back(), rng);
    auto f = [&](const MlpParams& q) { return forward(q, x).dot(up); };
    bad += tsupport::mismatches(flatten(backward(p, x, up)), tsupport::fd_gradient(f, p));
  }
  CHECK(bad == 0);
}

TEST_CASE("batched backward sums per-sample gradients and returns input gradients") {
  std::mt19937_64 rng(8);
  auto p = make_mlp({3, 4, 2}, Activation::tanh, Activation::identity, rng);
  Eigen::MatrixXd X = tsupport::random_matrix(3, 5, rng);
  Eigen::MatrixXd U = tsupport::random_matrix(2, 5, rng);
  auto bp = backward_batch(p, forward_batch(p, X), U);
  GradientSet sum = p.zeros_like();
  for (int j = 0; j < 5; ++j) sum += backward(p, X.col(j), U.col(j));
  CHECK((flatten(bp.grads) - flatten(sum)).norm() < 1e-12);
  for (int j = 0; j < 5; ++j) {
    for (int i = 0; i < 3; ++i) {
      Eigen::VectorXd xp = X.col(j), xm = X.col(j);
      xp(i) += 1e-6;
      xm(i) -= 1e-6;
      double fd = (forward(p, xp).dot(U.col(j)) - forward(p, xm).dot(U.col(j))) / 2e-6;
      CHECK(bp.input_grad(i, j) == doctest::Approx(fd).epsilon(1e-6));
    }
  }
}

TEST_CASE("adam with zero gradients is a fixed point") {
  std::mt19937_64 rng(4);
  auto p = make_mlp({3, 4, 2}, Activation::tanh, Activation::identity, rng);
  auto s = make_adam_state(p);
  auto [q, s2] = adam_step(p, p.zeros_like(), s);
  CHECK(q == p);
  CHECK(s2.step_count == 1);
}

TEST_CASE("adam one step on a scalar matches the hand formula") {
  auto p = make_zero_mlp({1, 1}, Activation::tanh, Activation::identity);
  p.weights[0](0, 0) = 1.0;
  auto s = make_adam_state(p, 0.1);
  GradientSet g = p.zeros_like();
  g.weights[0](0, 0) = 2.0;
  auto [q, s2] = adam_step(p, g, s);
  const double m = (1 - 0.9) * 2.0, v = (1 - 0.999) * 4.0;
  const double mhat = m / (1 - 0.9), vhat = v / (1 - 0.999);
  const double want = 1.0 - 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
  CHECK(std::abs(q.weights[0](0, 0) - want) < 1e-12);
  CHECK(s2.step_count == 1);
}

TEST_CASE("adam decreases a parameter monotonically under a constant positive gradient") {
  auto p = make_zero_mlp({1, 1}, Activation::tanh, Activation::identity);
  auto s = make_adam_state(p, 0.01);
  GradientSet g = p.zeros_like();
  g.weights[0](0, 0) = 0.3;
  double prev = p.weights[0](0, 0);
  for (int i = 0; i < 200; ++i) {
    adam_step_inplace(p, g, s);
    CHECK(p.weights[0](0, 0) < prev);
    prev = p.weights[0](0, 0);
  }
}

TEST_CASE("adam rejects a NaN gradient and names the layer") {
  std::mt19937_64 rng(4);
  auto p = make_mlp({2, 3, 1}, Activation::tanh, Activation::identity, rng);
  auto s = make_adam_state(p);
  GradientSet g = p.zeros_like();
  g.weights[1](0, 1) = std::nan("");
  try {
    adam_step_inplace(p, g, s);
    FAIL("expected a NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
  }
}

TEST_CASE("param_axpy identities") {
  std::mt19937_64 rng(9);
  auto p = make_mlp({3, 4, 2}, Activation::tanh, Activation::identity, rng);
  GradientSet d = unflatten_like(p, tsupport::random_vector(static_cast<int>(p.num_entries()), rng));
  CHECK(param_axpy(p, d, 0.0) == p);
  auto z = make_zero_mlp({3, 4, 2}, Activation::tanh, Activation::identity);
  CHECK((flatten(param_axpy(z, d, 1.0)) - flatten(d)).norm() == 0.0);
  auto back = param_axpy(param_axpy(p, d, 0.37), d, -0.37);
  CHECK((flatten(back) - flatten(p)).lpNorm<Eigen::Infinity>() < 1e-12);
}

TEST_CASE("param_axpy rejects mismatched shapes") {
  std::mt19937_64 rng(9);
  auto p = make_mlp({3, 4, 2}, Activation::tanh, Activation::identity, rng);
  auto q = make_mlp({3, 5, 2}, Activation::tanh, Activation::identity, rng);
  CHECK_THROWS_AS(param_axpy(p, q.zeros_like(), 1.0), ConfigError);
}

TEST_CASE("grad_norm") {
  auto p = make_zero_mlp({1, 1, 1}, Activation::tanh, Activation::identity);
  GradientSet g = p.zeros_like();
  CHECK(grad_norm(g) == 0.0);
  g.weights[0](0, 0) = 3.0;
  g.biases[1](0) = 4.0;
  CHECK(grad_norm(g) == 5.0);

  std::mt19937_64 rng(10);
  auto q = make_mlp({4, 6, 3}, Activation::tanh, Activation::identity, rng);
  GradientSet r = unflatten_like(q, tsupport::random_vector(static_cast<int>(q.num_entries()), rng));
  double sq = 0.0;
  for (std::size_t l = 0; l < r.num_layers(); ++l) {
    for (Eigen::Index i = 0; i < r.weights[l].size(); ++i) sq += r.weights[l].data()[i] * r.weights[l].data()[i];
    for (Eigen::Index i = 0; i < r.biases[l].size(); ++i) sq += r.biases[l](i) * r.biases[l](i);
  }
  CHECK(std::abs(grad_norm(r) - std::sqrt(sq)) < 1e-12);
}

TEST_CASE("init stays inside the fan-in bound") {
  std::mt19937_64 rng(12);
  auto p = make_mlp({9, 16, 4}, Activation::tanh, Activation::identity, rng);
  CHECK(p.weights[0].cwiseAbs().maxCoeff() <= 1.0 / 3.0);
  CHECK(p.weights[1].cwiseAbs().maxCoeff() <= 0.25);
  CHECK(p.biases[1].cwiseAbs().maxCoeff() <= 0.25);
}

TEST_CASE("checkpoint records round-trip exactly") {
  std::mt19937_64 rng(13);
  auto p = make_mlp({3, 5, 2}, Activation::tanh, Activation::sigmoid, rng);
  auto s = make_adam_state(p, 3e-4);
  GradientSet g = unflatten_like(p, tsupport::random_vector(static_cast<int>(p.num_entries()), rng));
  adam_step_inplace(p, g, s);
  auto p2 = mlp_from_json(nlohmann::json::parse(to_json(p).dump()));
  CHECK(p2 == p);
  auto s2 = adam_from_json(nlohmann::json::parse(to_json(s).dump()), p2);
  CHECK(s2.step_count == s.step_count);
  CHECK(s2.learning_rate == s.learning_rate);
  CHECK(s2.first_moment == s.first_moment);
  CHECK(s2.second_moment == s.second_moment);
}

TEST_CASE("validate catches broken shapes") {
  std::mt19937_64 rng(14);
  auto p = make_mlp({3, 5, 2}, Activation::tanh, Activation::identity, rng);
  p.weights[1] = Eigen::MatrixXd::Zero(2, 4);
  CHECK_THROWS_AS(p.validate(), ConfigError);
}
