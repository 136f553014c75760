#include <doctest.h>

#include <cmath>

#include "ctnet/autodiff.hpp"
#include "ctnet/gradcheck.hpp"
#include "test_util.hpp"

using namespace ctnet;
using test::random_tensor;

TEST_SUITE("gradcheck") {
  TEST_CASE("quadratic analytic gradient agrees to 1e-9") {
    Rng rng(101);
    ParamMap params;
    params["x"] = random_tensor({7}, rng, -2, 2);
    const Tensor a = random_tensor({7}, rng, 0.5, 3.0);

    GradCheckProblem problem;
    problem.eval = [&](const ParamMap& p) {
      double acc = 0.0;
      const Tensor& x = p.at("x");
      for (int i = 0; i < 7; ++i) acc += a[i] * x[i] * x[i];
      return acc;
    };
    problem.grad = [&](const ParamMap& p) {
      ParamMap g;
      Tensor gx({7});
      for (int i = 0; i < 7; ++i) gx[i] = 2.0 * a[i] * p.at("x")[i];
      g.emplace("x", std::move(gx));
      return g;
    };

    const auto report = finite_diff_check(problem, params, all_coordinates(params));
    CHECK(report.skipped == 0);
    CHECK(report.max_rel_err < 1e-9);
  }

  TEST_CASE("relu coordinate sitting exactly at zero is skipped") {
    ParamMap params;
    params["x"] = Tensor::from_data({3}, {-1.0, 0.0, 2.0});

    GradCheckProblem problem;
    problem.eval = [](const ParamMap& p) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < p.at("x").size(); ++i)
        acc += std::max(0.0, p.at("x")[i]);
      return acc;
    };
    problem.grad = [](const ParamMap& p) {
      ParamMap g;
      Tensor gx(p.at("x").shape());
      for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] = p.at("x")[i] > 0.0 ? 1.0 : 0.0;
      g.emplace("x", std::move(gx));
      return g;
    };

    const auto report = finite_diff_check(problem, params, all_coordinates(params));
    CHECK(report.skipped == 1);
    CHECK(report.entries[1].skipped);  // the x == 0 coordinate
    CHECK(report.checked == 2);
    CHECK(report.max_rel_err < 1e-9);
  }

  TEST_CASE("random two-layer conv net passes at 1e-5") {
    Rng rng(103);
    ParamMap params;
    params["w1"] = random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
    params["b1"] = random_tensor({3}, rng, -0.1, 0.1);
    params["w2"] = random_tensor({1, 3, 3, 3}, rng, -0.5, 0.5);
    params["b2"] = random_tensor({1}, rng, -0.1, 0.1);
    const Tensor x = random_tensor({1, 2, 5, 5}, rng);

    auto forward = [&x](Graph& g, const VarMap& p) {
      Var h = g.relu(g.conv2d(g.leaf(x), p.at("w1"), p.at("b1")));
      Var out = g.conv2d(h, p.at("w2"), p.at("b2"));
      return g.scale(g.reduce_sum(g.square(out)), 0.5);
    };

    GradCheckProblem problem;
    problem.eval = [&](const ParamMap& p) {
      Graph g(false);
      return forward(g, bind_params(g, p, false)).val()[0];
    };
    problem.grad = [&](const ParamMap& p) {
      Graph g;
      VarMap bound = bind_params(g, p, true);
      g.backward(forward(g, bound));
      ParamMap out;
      for (const auto& [name, var] : bound) out.emplace(name, var.grad());
      return out;
    };

    const auto report = finite_diff_check(problem, params, all_coordinates(params));
    CHECK(report.checked > 0);
    CHECK(report.max_rel_err < 1e-5);
  }

  TEST_CASE("coordinate sampling is in range and unique while possible") {
    Rng rng(107);
    ParamMap params;
    params["a"] = Tensor({3});
    params["b"] = Tensor({2, 2});
    auto coords = sample_coordinates(params, 7, rng);
    CHECK(coords.size() == 7);
    for (const auto& c : coords) {
      CHECK(params.count(c.param) == 1);
      CHECK(c.index >= 0);
      CHECK(c.index < params.at(c.param).size());
    }
  }
}
