#include <gtest/gtest.h>

#include "latent_atlas/battery.hpp"
#include "oracles.hpp"

using namespace latent_atlas;
using ad::Graph;
using ad::Var;

namespace {

Var leaf(Graph& g, const std::string& name, Tensor t, bool trainable = true) {
  Var v = g.input(name, t.shape(), trainable);
  g.bind(name, std::move(t));
  return v;
}

}  // namespace

TEST(Forward, MatmulByIdentityReturnsInput) {
  Rng rng(1);
  Graph g;
  const Tensor a = gaussian_tensor(rng, {3, 3});
  Tensor eye(Shape{3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  g.matmul(g.constant(eye), g.constant(a));
  EXPECT_EQ(g.forward(), a);
}

TEST(Forward, LeakyReluDefinition) {
  Graph g;
  g.leaky_relu(g.constant(Tensor::vector({-1.0, 2.0})), 0.2);
  const Tensor& y = g.forward();
  EXPECT_DOUBLE_EQ(y[0], -0.2);
  EXPECT_DOUBLE_EQ(y[1], 2.0);
}

TEST(Forward, ShapeMismatchNamesOperationAndShapes) {
  Graph g;
  Var a = g.constant(Tensor(Shape{2, 3}));
  Var b = g.constant(Tensor(Shape{2, 3}));
  try {
    g.matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("(2, 3)"), std::string::npos);
  }
  try {
    g.add(a, g.constant(Tensor(Shape{3})));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("(2, 3)"), std::string::npos);
    EXPECT_NE(msg.find("(3)"), std::string::npos);
  }
}

TEST(Forward, UnboundInputIsError) {
  Graph g;
  g.sum(g.input("x", {3}, true));
  EXPECT_THROW(g.forward(), ConfigError);
}

TEST(Forward, GeneratorForwardIsBitIdenticalAcrossRuns) {
  const GeneratorBundle bundle = init_generator(battery_generator_config(3));
  Rng rng(9);
  const Tensor z = gaussian_tensor(rng, {bundle.config().latent_dim});
  EXPECT_EQ(generate(bundle, z).tensor(), generate(bundle, z).tensor());
}

TEST(Backward, SumGivesOnes) {
  Graph g;
  g.sum(leaf(g, "x", Tensor::vector({1, -2, 3})));
  g.forward();
  EXPECT_EQ(g.backward().at("x"), Tensor::filled({3}, 1.0));
}

TEST(Backward, MseAtMinimumIsZero) {
  Rng rng(2);
  const Tensor x0 = gaussian_tensor(rng, {6});
  Graph g;
  g.mse(leaf(g, "x", x0), g.constant(x0));
  g.forward();
  EXPECT_EQ(g.backward().at("x"), Tensor(Shape{6}));
}

TEST(Backward, BeforeForwardIsError) {
  Graph g;
  g.sum(leaf(g, "x", Tensor::vector({1, 2})));
  EXPECT_THROW(g.backward(), ConfigError);
}

TEST(Backward, NonTrainableLeavesAreOmitted) {
  Graph g;
  g.mul(leaf(g, "a", Tensor::vector({1, 2})), leaf(g, "b", Tensor::vector({3, 4}), false));
  g.forward();
  const auto grads = g.backward();
  EXPECT_EQ(grads.count("a"), 1u);
  EXPECT_EQ(grads.count("b"), 0u);
}

TEST(Backward, UnusedNodesHaveZeroAdjoint) {
  Graph g;
  Var x = leaf(g, "x", Tensor::vector({1, 2, 3}));
  Var unused = g.scale(x, 4.0);
  Var out = g.sum(g.mul(x, x));
  g.set_output(out);
  g.forward();
  g.backward();
  EXPECT_EQ(g.gradient(unused), Tensor(Shape{3}));
}

TEST(Backward, AdjointsAreLinearInOutputs) {
  Rng rng(4);
  const Tensor x0 = gaussian_tensor(rng, {5});
  const Tensor w0 = gaussian_tensor(rng, {3, 5});
  auto grad_of = [&](int which) {
    Graph g;
    Var x = leaf(g, "x", x0);
    Var y1 = g.sum(g.leaky_relu(g.matmul(g.constant(w0), x)));
    Var y2 = g.sum(g.mul(x, x));
    if (which == 0) g.set_output(y1);
    if (which == 1) g.set_output(y2);
    if (which == 2) g.set_output(g.add(y1, y2));
    g.forward();
    return g.backward().at("x");
  };
  const Tensor g1 = grad_of(0), g2 = grad_of(1), g12 = grad_of(2);
  for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(g12[j], g1[j] + g2[j], 1e-14);
}

// Every primitive on seeded random inputs against the test-local central
// difference oracle (h = 1e-5), 20 seeds.
TEST(Backward, EveryPrimitiveMatchesFiniteDifferences) {
  std::size_t checked = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (const auto& pc : detail::primitive_cases(false)) {
      Rng rng(derive_seed(seed, hash_name(pc.name)));
      Graph g;
      pc.build(g, rng);
      detail::weight_output(g, rng);
      g.forward();
      const auto analytic = g.backward();
      for (const auto& [name, grad] : analytic) {
        const Tensor numeric = oracle::fd_gradient(g, name);
        EXPECT_LT(oracle::rel_error(grad, numeric), 1e-4) << pc.name << " seed " << seed << " leaf " << name;
        ++checked;
      }
    }
  }
  EXPECT_GT(checked, 20u * 22u);
}

TEST(Backward, GeneratorTapIsDifferentiable) {
  const GeneratorBundle bundle = init_generator(battery_generator_config(5));
  Rng rng(6);
  Graph g;
  GeneratorGraph gen(g, bundle);
  Var z = leaf(g, "z", sample_sphere(rng, bundle.config().latent_dim));
  auto m = gen.mapping(z);
  std::vector<Var> styles;
  for (std::size_t i = 0; i + 1 < bundle.config().split_layer; ++i) styles.push_back(gen.style(i, m.w));
  Var f = gen.tap(styles);
  g.mse(f, g.constant(gaussian_tensor(rng, g.shape(f))));
  EXPECT_TRUE(ad::gradcheck(g, 1e-4).passed);
}

TEST(Gradcheck, LinearLayerPasses) {
  Rng rng(7);
  Graph g;
  g.sum(g.add(g.matmul(leaf(g, "W", gaussian_tensor(rng, {4, 3})), leaf(g, "x", gaussian_tensor(rng, {3}))),
              leaf(g, "b", gaussian_tensor(rng, {4}))));
  const auto report = ad::gradcheck(g, 1e-4);
  EXPECT_TRUE(report.passed);
  EXPECT_EQ(report.leaves.size(), 3u);
  EXPECT_LT(report.max_rel_error(), 1e-8);
}

TEST(Gradcheck, WrongHandCodedGradientFails) {
  Rng rng(8);
  Graph g;
  g.sum(g.custom(detail::cube_op({5}, true), {leaf(g, "x", uniform_tensor(rng, {5}, 0.5, 1.5))}));
  const auto report = ad::gradcheck(g, 1e-4);
  EXPECT_FALSE(report.passed);
  EXPECT_GT(report.max_rel_error(), 0.1);
}

TEST(Gradcheck, EmptyTrainableSetPassesWithEmptyReport) {
  Graph g;
  g.sum(g.constant(Tensor::vector({1, 2})));
  const auto report = ad::gradcheck(g, 1e-4);
  EXPECT_TRUE(report.passed);
  EXPECT_TRUE(report.leaves.empty());
}

TEST(Gradcheck, ProbeAcrossKinkIsSkippedNotFailed) {
  // One coordinate sits within h of the leaky-relu kink; the others are far.
  Graph g;
  g.sum(g.leaky_relu(leaf(g, "x", Tensor::vector({1e-9, 1.0, -1.0, 2.0, -2.0}))));
  const auto report = ad::gradcheck(g, 1e-4);
  ASSERT_EQ(report.leaves.size(), 1u);
  EXPECT_EQ(report.leaves[0].skipped, 1u);
  EXPECT_TRUE(report.passed);
}

TEST(Gradcheck, BatterySmokeOneSeed) {
  BatteryOptions opt;
  opt.seeds = 1;
  const BatteryReport r = run_gradcheck_battery(opt);
  EXPECT_TRUE(r.passed);
  // 22 primitives, 9 spaces plus regularized W, W+ and F/W+, and the tuning objective.
  EXPECT_EQ(r.lines.size(), 22u + 12u + 1u);
}

TEST(Gradcheck, BatteryDetectsInjectedFault) {
  BatteryOptions opt;
  opt.seeds = 1;
  opt.end_to_end = false;
  opt.pti = false;
  opt.inject_fault = true;
  const BatteryReport r = run_gradcheck_battery(opt);
  EXPECT_FALSE(r.passed);
  std::size_t failed = 0;
  for (const auto& l : r.lines) {
    if (!l.report.passed) {
      ++failed;
      EXPECT_EQ(l.graph, "primitive/custom_faulty");
    }
  }
  EXPECT_EQ(failed, 1u);
}
