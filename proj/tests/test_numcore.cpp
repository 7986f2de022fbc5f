#include "doctest.h"

#include "robomal/adam.hpp"
#include "robomal/graph.hpp"
#include "support/gradcheck.hpp"
#include "support/op_cases.hpp"

#include <cmath>

using namespace robomal;
using robomal::testing::check_op_case;
using robomal::testing::make_op_case;

namespace {

Tensor mat(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor(Shape{r, c}, std::move(v)); }

}  // namespace

TEST_CASE("sigmoid and tanh at zero") {
  Graph g;
  auto x = g.constant(Tensor::scalar(0.0));
  auto s = g.sigmoid(x);
  auto t = g.tanh(x);
  evaluate(g);
  CHECK(g.value(s).item() == 0.5);
  CHECK(g.value(t).item() == 0.0);
}

TEST_CASE("matmul with identity") {
  Graph g;
  auto a = g.constant(mat(2, 2, {1, 2, 3, 4}));
  auto i = g.constant(mat(2, 2, {1, 0, 0, 1}));
  auto out = evaluate(g, {}, g.matmul(a, i));
  CHECK(out == mat(2, 2, {1, 2, 3, 4}));
}

TEST_CASE("gradient of x*x at 3 is 6") {
  Graph g;
  auto x = g.parameter("x", Tensor::scalar(3.0));
  auto y = g.mul(x, x);
  evaluate(g);
  CHECK(gradients(g, y).at("x").item() == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("gradient of sigmoid at 0 is 0.25") {
  Graph g;
  auto x = g.parameter("x", Tensor::scalar(0.0));
  auto y = g.sigmoid(x);
  evaluate(g);
  CHECK(gradients(g, y).at("x").item() == 0.25);
}

TEST_CASE("evaluate errors") {
  SUBCASE("shape mismatch names the node") {
    Graph g;
    auto a = g.constant(Tensor(Shape{2, 3}));
    auto b = g.constant(Tensor(Shape{2, 3}));
    g.matmul(a, b);
    CHECK_THROWS_WITH_AS(evaluate(g), doctest::Contains("node 2 (matmul)"), GraphError);
  }
  SUBCASE("unbound input") {
    Graph g;
    g.sigmoid(g.input("x"));
    CHECK_THROWS_WITH_AS(evaluate(g), doctest::Contains("'x'"), GraphError);
    CHECK_NOTHROW(evaluate(g, {{"x", Tensor::scalar(1.0)}}));
  }
  SUBCASE("embedding id outside vocabulary") {
    Graph g;
    g.embedding(g.constant(Tensor(Shape{3, 2})), {0, 3}, Shape{2});
    CHECK_THROWS_AS(evaluate(g), GraphError);
  }
  SUBCASE("bce label outside {0,1}") {
    Graph g;
    g.bce_with_logits(g.constant(Tensor(Shape{2})), g.constant(Tensor(Shape{2}, {0.0, 2.0})));
    CHECK_THROWS_AS(evaluate(g), GraphError);
  }
}

TEST_CASE("gradients errors") {
  Graph g;
  auto x = g.parameter("x", Tensor(Shape{2}, {1.0, 2.0}));
  auto y = g.sigmoid(x);
  CHECK_THROWS_AS(gradients(g, y), GraphError);  // not evaluated
  evaluate(g);
  CHECK_THROWS_WITH_AS(gradients(g, y), doctest::Contains("scalar"), GraphError);
}

TEST_CASE("parameter used through two paths accumulates") {
  Graph g;
  auto x = g.parameter("x", Tensor::scalar(2.0));
  auto y = g.add(g.mul(x, x), x);  // x^2 + x
  evaluate(g);
  CHECK(gradients(g, y).at("x").item() == 5.0);
}

TEST_CASE("non-trainable parameters receive no gradient") {
  Graph g;
  auto w = g.parameter("w", Tensor::scalar(2.0));
  auto c = g.parameter("c", Tensor::scalar(5.0), false);
  auto y = g.mul(w, c);
  evaluate(g);
  auto grads = gradients(g, y);
  CHECK(grads.size() == 1);
  CHECK(grads.at("w").item() == 5.0);
}

TEST_CASE("adaptive max pool bins cover the input") {
  // length 5 into 3 bins: [0,2) [1,4) [3,5)
  Graph g;
  auto x = g.constant(Tensor(Shape{1, 5, 1}, {5, 1, 2, 9, 0}));
  auto out = evaluate(g, {}, g.adaptive_max_pool(x, 3));
  CHECK(out == Tensor(Shape{1, 3, 1}, {5, 9, 9}));

  // shorter than the output: bins repeat elements
  Graph h;
  auto y = h.constant(Tensor(Shape{1, 2, 1}, {3, 4}));
  CHECK(evaluate(h, {}, h.adaptive_max_pool(y, 4)) == Tensor(Shape{1, 4, 1}, {3, 3, 4, 4}));
}

TEST_CASE("max pool drops the remainder") {
  Graph g;
  auto x = g.constant(Tensor(Shape{1, 5, 1}, {1, 3, 2, 0, 7}));
  CHECK(evaluate(g, {}, g.max_pool(x, 2)) == Tensor(Shape{1, 2, 1}, {3, 2}));
}

TEST_CASE("dropout eval mode is the identity; train mode is inverted and seeded") {
  Rng rng(3);
  const Tensor x = robomal::testing::random_tensor(rng, {4, 50});
  Graph g;
  auto id = g.dropout(g.constant(x), 0.3, Mode::Eval, 1);
  CHECK(evaluate(g, {}, id) == x);

  auto run = [&](std::uint64_t seed) {
    Graph h;
    return evaluate(h, {}, h.dropout(h.constant(x), 0.3, Mode::Train, seed));
  };
  const Tensor a = run(11);
  CHECK(a == run(11));
  CHECK(!(a == run(12)));
  std::size_t dropped = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (a[i] == 0.0) {
      ++dropped;
    } else {
      CHECK(a[i] == doctest::Approx(x[i] / 0.7).epsilon(1e-15));
    }
  }
  CHECK(dropped > 20);
  CHECK(dropped < 100);
}

TEST_CASE("batch norm eval uses running statistics") {
  Graph g;
  auto x = g.constant(Tensor(Shape{2, 1}, {1.0, 3.0}));
  auto gamma = g.parameter("g", Tensor(Shape{1}, {2.0}));
  auto beta = g.parameter("b", Tensor(Shape{1}, {0.5}));
  auto rm = g.parameter("rm", Tensor(Shape{1}, {1.0}), false);
  auto rv = g.parameter("rv", Tensor(Shape{1}, {4.0}), false);
  auto y = evaluate(g, {}, g.batch_norm(x, gamma, beta, rm, rv, Mode::Eval));
  const double s = 1.0 / std::sqrt(4.0 + 1e-5);
  CHECK(y[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(y[1] == doctest::Approx(2.0 * 2.0 * s + 0.5).epsilon(1e-15));
  CHECK(g.running_stat_updates().empty());
}

TEST_CASE("batch norm train mode reports momentum-blended running stats") {
  Graph g;
  auto x = g.constant(Tensor(Shape{4, 1}, {1.0, 2.0, 3.0, 6.0}));
  auto gamma = g.parameter("g", Tensor(Shape{1}, {1.0}));
  auto beta = g.parameter("b", Tensor(Shape{1}, {0.0}));
  auto rm = g.parameter("rm", Tensor(Shape{1}, {0.0}), false);
  auto rv = g.parameter("rv", Tensor(Shape{1}, {1.0}), false);
  auto y = evaluate(g, {}, g.batch_norm(x, gamma, beta, rm, rv, Mode::Train));
  CHECK(y.array().sum() == doctest::Approx(0.0).epsilon(1e-12));
  auto upd = g.running_stat_updates();
  // mean 3, unbiased variance 14/3
  CHECK(upd.at("rm")[0] == doctest::Approx(0.3).epsilon(1e-14));
  CHECK(upd.at("rv")[0] == doctest::Approx(0.9 + 0.1 * 14.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("bce with logits values") {
  auto bce = [](double z, double y) {
    Graph g;
    return evaluate(g, {}, g.bce_with_logits(g.constant(Tensor(Shape{1}, {z})), g.constant(Tensor(Shape{1}, {y}))))
        .item();
  };
  CHECK(bce(0.0, 1.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(bce(0.0, 0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(bce(10.0, 1.0) == doctest::Approx(std::log1p(std::exp(-10.0))).epsilon(1e-15));
  CHECK(std::isfinite(bce(-800.0, 1.0)));
}

TEST_CASE("evaluate is deterministic") {
  Rng rng(5);
  auto c = make_op_case(OpKind::Dropout, rng);
  Graph a, b;
  auto oa = c.build(a, c.params);
  auto ob = c.build(b, c.params);
  CHECK(evaluate(a, {}, oa) == evaluate(b, {}, ob));
}

TEST_CASE("every op kind matches central finite differences on 100 random instances") {
  for (OpKind kind : robomal::testing::differentiable_ops()) {
    Rng rng(derive_seed(1234, static_cast<std::uint64_t>(kind)));
    double worst = 0.0;
    std::string where;
    for (int trial = 0; trial < 100; ++trial) {
      auto c = make_op_case(kind, rng);
      auto r = check_op_case(c, rng.next());
      if (!(r.max_error <= worst)) {
        worst = r.max_error;
        where = c.label + ": " + r.worst;
      }
    }
    INFO(where);
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("adam first step moves by lr") {
  TensorMap params{{"w", Tensor::scalar(0.5)}};
  TensorMap grads{{"w", Tensor::scalar(1.0)}};
  AdamState st;
  adam_step(params, grads, st);
  CHECK(st.t == 1);
  CHECK(std::abs((0.5 - params.at("w").item()) - 0.001) < 1e-9);
}

TEST_CASE("adam with zero gradient and no decay is the identity") {
  Rng rng(9);
  TensorMap params{{"a", robomal::testing::random_tensor(rng, {3, 2})}, {"b", Tensor::scalar(-2.0)}};
  const TensorMap before = params;
  TensorMap grads{{"a", Tensor(Shape{3, 2})}, {"b", Tensor::scalar(0.0)}};
  AdamState st;
  for (int i = 0; i < 5; ++i) adam_step(params, grads, st);
  CHECK(params == before);
  CHECK(st.t == 5);
}

TEST_CASE("adam decoupled weight decay") {
  TensorMap params{{"w", Tensor::scalar(1.0)}};
  TensorMap grads{{"w", Tensor::scalar(0.0)}};
  AdamState st;
  st.weight_decay = 0.003;
  adam_step(params, grads, st);
  adam_step(params, grads, st);
  const double expected = (1.0 - 3e-6) * (1.0 - 3e-6);
  CHECK(params.at("w").item() == doctest::Approx(expected).epsilon(1e-15));
}

TEST_CASE("adam rejects mismatched gradients") {
  TensorMap params{{"w", Tensor(Shape{2})}};
  AdamState st;
  TensorMap wrong_name{{"v", Tensor(Shape{2})}};
  TensorMap wrong_shape{{"w", Tensor(Shape{3})}};
  CHECK_THROWS_AS(adam_step(params, wrong_name, st), std::invalid_argument);
  CHECK_THROWS_AS(adam_step(params, wrong_shape, st), std::invalid_argument);
  CHECK(st.t == 0);
}
