#include <cmath>
#include <vector>

#include "doctest.h"

#include "ipl/approx.hpp"
#include "ipl/errors.hpp"

using namespace ipl;

namespace {

// Central-difference check of d(u . f(x))/d(params) along every coordinate.
double max_fd_error(MlpFn& net, const std::vector<double>& x, const std::vector<double>& u) {
  std::vector<double> grad(net.params().size(), 0.0);
  net.backward(x, u, grad);
  auto f = [&] {
    const auto y = net.forward(x);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += u[i] * y[i];
    return s;
  };
  double worst = 0.0;
  const double h = 1e-5;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    double& p = net.params().values[i];
    const double saved = p;
    p = saved + h;
    const double up = f();
    p = saved - h;
    const double down = f();
    p = saved;
    const double fd = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-6}));
  }
  return worst;
}

}  // namespace

TEST_CASE("forward") {
  SUBCASE("zero MLP outputs zero") {
    const MlpFn net({3, 8, 8, 2}, Role::q);
    for (double y : net.forward(std::vector<double>{0.3, -1.0, 2.0})) CHECK(y == 0.0);
  }
  SUBCASE("tabular returns the stored cell") {
    Approximator q = Approximator::tabular(InputKind::state_action, 3, 2, 1, Role::q);
    q.params().values[3] = 1.25;
    CHECK(q.scalar(1, 1) == 1.25);
    CHECK(q.scalar(0, 0) == 0.0);
  }
  SUBCASE("one hidden unit by hand") {
    MlpFn net({1, 1, 1}, Role::v);
    net.params().values = {1.0, 0.0, 2.0, 0.0};
    for (double x : {-2.0, -0.5, 0.0, 0.7, 3.0})
      CHECK(net.forward(std::vector<double>{x})[0] == doctest::Approx(2.0 * std::tanh(x)).epsilon(1e-15));
  }
  SUBCASE("out of range inputs are evaluation errors") {
    const Approximator q = Approximator::tabular(InputKind::state_action, 3, 2, 1, Role::q);
    CHECK_THROWS_AS(q.scalar(3, 0), EvaluationError);
    CHECK_THROWS_AS(q.scalar(0, 2), EvaluationError);
    const MlpFn net({2, 1}, Role::q);
    CHECK_THROWS_AS(net.forward(std::vector<double>{1.0}), EvaluationError);
  }
}

TEST_CASE("backward") {
  SUBCASE("tabular gradient is one-hot") {
    const Approximator q = Approximator::tabular(InputKind::state_action, 3, 2, 1, Role::q);
    std::vector<double> grad(6, 0.0);
    q.backward_scalar(2, 1, 1.5, grad);
    for (std::size_t i = 0; i < 6; ++i) CHECK(grad[i] == (i == 5 ? 1.5 : 0.0));
  }
  SUBCASE("linear network gradient is the feature vector") {
    Rng rng(2);
    Approximator q = Approximator::mlp(InputKind::state_action, 3, 2, 1, Role::q, {{}, std::nullopt}, rng);
    std::vector<double> grad(q.param_count(), 0.0);
    q.backward_scalar(1, 0, 1.0, grad);
    const auto feats = q.features(1, 0);
    REQUIRE(grad.size() == feats.size() + 1);
    for (std::size_t i = 0; i < feats.size(); ++i) CHECK(grad[i] == feats[i]);
    CHECK(grad.back() == 1.0);
  }
  SUBCASE("finite differences on random networks") {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<std::size_t> layers{1 + rng.below(5)};
      for (std::size_t l = 0, depth = rng.below(3); l < depth; ++l) layers.push_back(1 + rng.below(6));
      layers.push_back(1 + rng.below(3));
      MlpFn net(layers, Role::q);
      net.init_uniform(rng);
      std::vector<double> x(layers.front()), u(layers.back());
      for (double& v : x) v = rng.uniform(-2.0, 2.0);
      for (double& v : u) v = rng.uniform(-1.0, 1.0);
      CHECK(max_fd_error(net, x, u) <= 1e-5);
    }
  }
}

TEST_CASE("featurizer is one-hot state and action") {
  Rng rng(4);
  const Approximator q = Approximator::mlp(InputKind::state_action, 3, 2, 1, Role::q, {{4}, std::nullopt}, rng);
  CHECK(q.features(2, 1) == std::vector<double>{0, 0, 1, 0, 1});
  const Approximator v = Approximator::mlp(InputKind::state, 3, 2, 1, Role::v, {{4}, std::nullopt}, rng);
  CHECK(v.features(1) == std::vector<double>{0, 1, 0});
}

TEST_CASE("Adam") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    Optimizer opt({OptimizerKind::adam, 1e-2}, 3);
    std::vector<double> p{1.0, -2.0, 3.0};
    const auto before = p;
    opt.step(p, std::vector<double>(3, 0.0));
    CHECK(p == before);
  }
  SUBCASE("constant gradient steps approach lr") {
    const double lr = 1e-3;
    Optimizer opt({OptimizerKind::adam, lr}, 2);
    std::vector<double> p{0.0, 0.0};
    const std::vector<double> g{0.37, -250.0};
    double last0 = 0.0, last1 = 0.0;
    for (int i = 0; i < 2000; ++i) {
      last0 = p[0];
      last1 = p[1];
      opt.step(p, g);
    }
    CHECK(last0 - p[0] == doctest::Approx(lr).epsilon(1e-6));
    CHECK(p[1] - last1 == doctest::Approx(lr).epsilon(1e-6));
  }
  SUBCASE("first step has magnitude lr") {
    Optimizer opt({OptimizerKind::adam, 0.1}, 1);
    std::vector<double> p{0.0};
    opt.step(p, std::vector<double>{5.0});
    CHECK(p[0] == doctest::Approx(-0.1).epsilon(1e-8));
  }
  SUBCASE("identical runs are identical") {
    Rng a(5), b(5);
    Optimizer oa({OptimizerKind::adam, 1e-2}, 4), ob({OptimizerKind::adam, 1e-2}, 4);
    std::vector<double> pa(4, 0.5), pb(4, 0.5);
    for (int i = 0; i < 100; ++i) {
      std::vector<double> ga(4), gb(4);
      for (int j = 0; j < 4; ++j) {
        ga[j] = a.uniform(-1, 1);
        gb[j] = b.uniform(-1, 1);
      }
      oa.step(pa, ga);
      ob.step(pb, gb);
    }
    CHECK(pa == pb);
  }
  SUBCASE("non-finite gradients are surfaced") {
    Optimizer opt({OptimizerKind::adam, 1e-2}, 2);
    std::vector<double> p{1.0, 1.0};
    CHECK_THROWS_AS(opt.step(p, std::vector<double>{1.0, std::nan("")}), OptimizerError);
    CHECK(p == std::vector<double>{1.0, 1.0});
    Optimizer sgd({OptimizerKind::sgd, 1e-2}, 1);
    std::vector<double> q{0.0};
    CHECK_THROWS_AS(sgd.step(q, std::vector<double>{INFINITY}), OptimizerError);
  }
  SUBCASE("SGD") {
    Optimizer opt({OptimizerKind::sgd, 0.5}, 2);
    std::vector<double> p{1.0, 1.0};
    opt.step(p, std::vector<double>{2.0, -1.0});
    CHECK(p == std::vector<double>{0.0, 1.5});
  }
}

TEST_CASE("parameter counts") {
  Rng rng(6);
  for (std::size_t d : {1u, 4u, 9u}) {
    const std::vector<std::size_t> layers{d, 64, 64, 1};
    CHECK(MlpFn::count_for(layers) == (d + 1) * 64 + 65 * 64 + 65);
    CHECK(MlpFn(layers, Role::q).params().size() == (d + 1) * 64 + 65 * 64 + 65);
  }
  CHECK(Approximator::tabular(InputKind::state_action, 5, 3, 1, Role::q).param_count() == 15);
  CHECK(Approximator::tabular(InputKind::state, 5, 3, 1, Role::v).param_count() == 5);
  const Approximator q = Approximator::mlp(InputKind::state_action, 5, 3, 1, Role::q, {{64, 64}, std::nullopt}, rng);
  CHECK(q.param_count() == 9 * 64 + 65 * 64 + 65);
}

TEST_CASE("checkpoint round-trip") {
  Rng rng(7);
  Approximator q = Approximator::mlp(InputKind::state_action, 4, 3, 1, Role::q, {{5, 6}, std::nullopt}, rng);
  const Approximator back = Approximator::from_checkpoint(nlohmann::json::parse(q.to_checkpoint().dump()));
  CHECK(back.param_count() == q.param_count());
  CHECK(back.params().values == q.params().values);
  CHECK(back.role() == Role::q);
  CHECK(back.table() == q.table());

  Approximator r = Approximator::tabular(InputKind::state_action, 3, 2, 1, Role::reward);
  for (double& x : r.params().values) x = rng.uniform(-1, 1);
  const Approximator r2 = Approximator::from_checkpoint(nlohmann::json::parse(r.to_checkpoint().dump()));
  CHECK(r2.role() == Role::reward);
  CHECK(r2.params().values == r.params().values);
  CHECK_THROWS_AS(Approximator::from_checkpoint(nlohmann::json::parse("{\"kind\":1}")), ParseError);
}

TEST_CASE("parameter block validation") {
  ParamBlock b{{1.0, 2.0, 3.0}, {2, 2}, Role::v};
  CHECK_THROWS_AS(b.validate(), ConfigError);
  b.shape = {3};
  CHECK_NOTHROW(b.validate());
  b.values[1] = std::nan("");
  CHECK_THROWS_AS(b.validate(), ConfigError);
}

TEST_CASE("Polyak averaging") {
  ParamBlock target{{0.0, 4.0}, {2}, Role::q};
  const ParamBlock source{{1.0, 0.0}, {2}, Role::q};
  polyak_update(target, source, 0.25);
  CHECK(target.values == std::vector<double>{0.25, 3.0});
}

TEST_CASE("softmax policy from logits") {
  Approximator logits = Approximator::tabular(InputKind::state, 2, 3, 3, Role::policy);
  logits.params().values = {0.0, std::log(2.0), 0.0, 5.0, 5.0, 5.0};
  const Policy pi = logits.softmax_policy();
  CHECK(pi(0, 1) == doctest::Approx(0.5));
  CHECK(pi(1, 2) == doctest::Approx(1.0 / 3.0));
}
