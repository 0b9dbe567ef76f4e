#include "doctest.h"

#include <cmath>

#include "klbp/oracle.hpp"
#include "klbp/posterior.hpp"
#include "klbp/random.hpp"
#include "support.hpp"

using namespace klbp;
using klbp::testing::rel_err;

namespace {

// z = theta0 * x on the grid {0, 1} with a uniform prior.
PosteriorModel linear_model(OutputFactor lik) {
  PosteriorModel m;
  m.inputs.push_back({{0.0, 1.0},
                      DistVec::uniform(2),
                      CompGraphBuilder().input("x").input("theta0").binary("z", Op::Mul, "theta0", "x").build("z")});
  m.theta = {0.3};
  m.likelihood = lik;
  return m;
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("closed-form posterior gradient") {
  const auto m = linear_model(ExpScale{1.0});
  // log Z = log(1/2 + e^theta / 2), so the gradient is sigmoid(theta).
  CHECK(log_marginal_likelihood_enum(m, m.theta) == doctest::Approx(std::log(0.5 + 0.5 * std::exp(0.3))).epsilon(1e-14));
  const auto g = posterior_grad_enum(m, m.theta);
  CHECK(g.gradient[0] == doctest::Approx(logistic(0.3)).epsilon(1e-14));
  CHECK(g.posterior_mass == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(posterior_grad_bp(m, m.theta)[0] == doctest::Approx(logistic(0.3)).epsilon(1e-14));
  CHECK(marginal_likelihood(m, m.theta) == doctest::Approx(0.5 + 0.5 * std::exp(0.3)).epsilon(1e-14));

  CHECK_THROWS_AS(posterior_grad_bp(linear_model(NegLossTemp{LossKind::Squared, 0.0, 1.0}), m.theta), DomainError);
  const std::vector<double> none;
  CHECK_THROWS_AS(posterior_grad_enum(m, none), ShapeError);
}

TEST_CASE("posterior gradient is the derivative of the log marginal likelihood") {
  Rng rng(61);
  for (int t = 0; t < 50; ++t) {
    const auto m = random_posterior(rng);
    const auto g = posterior_grad_enum(m, m.theta);
    CHECK(g.posterior_mass == doctest::Approx(1.0).epsilon(1e-12));
    const auto fd = finite_diff_grad([&](std::span<const double> th) { return log_marginal_likelihood_enum(m, th); },
                                     m.theta);
    for (std::size_t k = 0; k < fd.size(); ++k) CHECK(rel_err(g.gradient[k], fd[k]) <= 1e-6);
  }
}

TEST_CASE("factorized BP gradient matches enumeration for exponential likelihoods") {
  Rng rng(63);
  PosteriorGenOptions opt;
  opt.exp_only = true;
  for (int t = 0; t < 50; ++t) {
    const auto m = random_posterior(rng, opt);
    const auto enumerated = posterior_grad_enum(m, m.theta).gradient;
    const auto bp = posterior_grad_bp(m, m.theta);
    for (std::size_t k = 0; k < bp.size(); ++k) CHECK(std::abs(bp[k] - enumerated[k]) <= 1e-10);
    CHECK(std::abs(log_marginal_likelihood_factorized(m, m.theta) - log_marginal_likelihood_enum(m, m.theta)) <= 1e-10);
  }
}

TEST_CASE("point-mass priors reduce to seeded adjoints") {
  Rng rng(65);
  for (int t = 0; t < 50; ++t) {
    const auto m = random_posterior(rng);
    std::vector<double> x_star;
    for (const auto& in : m.inputs) x_star.push_back(in.grid[uniform_int(rng, 0, in.grid.size() - 1)]);
    const auto [left, right] = dirac_limit_check(m, m.theta, x_star);
    for (std::size_t k = 0; k < left.size(); ++k) CHECK(std::abs(left[k] - right[k]) <= 1e-10);
  }
  const auto m = linear_model(ExpScale{1.0});
  const std::vector<double> off{0.5};
  CHECK_THROWS_AS(dirac_model(m, off), DomainError);
  const std::vector<double> two{0.0, 1.0};
  CHECK_THROWS_AS(dirac_model(m, two), ShapeError);
}
