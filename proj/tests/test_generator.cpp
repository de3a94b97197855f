#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "latent_atlas/battery.hpp"
#include "oracles.hpp"

using namespace latent_atlas;

namespace {

GeneratorConfig small_config(std::uint64_t seed = 0) {
  GeneratorConfig c;
  c.latent_dim = 8;
  c.mapping_layers = 2;
  c.synthesis_layers = 4;
  c.split_layer = 2;
  c.base_resolution = 4;
  c.output_resolution = 16;
  c.channels = {8, 8, 4};
  c.seed = seed;
  return c;
}

std::vector<Tensor> styles_from_w(const GeneratorBundle& b, const Tensor& w) {
  std::vector<Tensor> s;
  for (std::size_t i = 0; i < b.config().synthesis_layers; ++i) s.push_back(style_of(b, i, w));
  return s;
}

}  // namespace

TEST(GeneratorConfig, DefaultsAreDeskScale) {
  const GeneratorConfig c;
  EXPECT_EQ(c.latent_dim, 64u);
  EXPECT_EQ(c.mapping_layers, 4u);
  EXPECT_EQ(c.synthesis_layers, 8u);
  EXPECT_EQ(c.split_layer, 4u);
  EXPECT_EQ(c.base_resolution, 4u);
  EXPECT_EQ(c.output_resolution, 32u);
  EXPECT_NO_THROW(c.validate());
}

TEST(GeneratorConfig, SplitAboveLayerCountIsRejected) {
  GeneratorConfig c;
  c.split_layer = c.synthesis_layers + 1;
  try {
    init_generator(c);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("1 < M <= N"), std::string::npos);
  }
}

TEST(GeneratorConfig, AllViolationsListed) {
  GeneratorConfig c;
  c.latent_dim = 1;
  c.split_layer = 1;
  c.output_resolution = 64;
  EXPECT_EQ(c.violations().size(), 3u);
}

TEST(GeneratorConfig, MinimalConfigIsValid) {
  GeneratorConfig c;
  c.latent_dim = 2;
  c.synthesis_layers = 4;
  c.split_layer = 2;
  c.channels = {4, 4};
  c.output_resolution = 8;
  const GeneratorBundle b = init_generator(c);
  Rng rng(1);
  const Image img = generate(b, sample_sphere(rng, 2));
  EXPECT_EQ(img.tensor().shape(), (Shape{3, 8, 8}));
}

TEST(InitGenerator, SameSeedGivesByteIdenticalWeights) {
  GeneratorConfig c;
  c.seed = 7;
  EXPECT_EQ(serialize_weights(init_generator(c)), serialize_weights(init_generator(c)));
  GeneratorConfig other = c;
  other.seed = 8;
  EXPECT_NE(serialize_weights(init_generator(c)), serialize_weights(init_generator(other)));
}

TEST(InitGenerator, WeightsAreFloat32Representable) {
  const GeneratorBundle b = init_generator(small_config(3));
  for (std::size_t k = 0; k < b.parameter_count(); ++k) {
    for (double v : b.parameter(k)->data()) EXPECT_EQ(v, static_cast<double>(static_cast<float>(v)));
  }
}

TEST(Map, WIsLeakyReluOfP) {
  const GeneratorBundle b = init_generator(small_config(1));
  Rng rng(2);
  for (int k = 0; k < 20; ++k) {
    const MapResult m = map_latent(b, sample_sphere(rng, 8));
    for (std::size_t j = 0; j < 8; ++j) {
      const double p = m.p[j];
      EXPECT_EQ(m.w[j], p >= 0 ? p : 0.2 * p);
    }
  }
}

TEST(Map, ZeroWeightsGiveActivatedBias) {
  GeneratorBundle b = init_generator(small_config(1));
  for (std::size_t l = 0; l < 2; ++l) b.set_parameter("map." + std::to_string(l) + ".weight", Tensor(Shape{8, 8}));
  const Tensor& bias = *b.parameter("map.1.bias");
  Rng rng(3);
  const MapResult m = map_latent(b, sample_sphere(rng, 8));
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(m.w[j], bias[j] >= 0 ? bias[j] : 0.2 * bias[j]);
}

TEST(Map, DistinctLatentsGiveDistinctW) {
  const GeneratorBundle b = init_generator(GeneratorConfig{});
  Rng rng(4);
  for (int k = 0; k < 100; ++k) {
    const Tensor w1 = map_latent(b, sample_sphere(rng, 64)).w;
    const Tensor w2 = map_latent(b, sample_sphere(rng, 64)).w;
    EXPECT_NE(w1, w2);
  }
}

TEST(Map, WrongDimensionIsShapeError) {
  const GeneratorBundle b = init_generator(small_config());
  EXPECT_THROW(map_latent(b, Tensor(Shape{5})), ShapeError);
}

TEST(Synthesize, OverrideWithOwnTapReproducesForward) {
  const GeneratorBundle b = init_generator(GeneratorConfig{});
  Rng rng(5);
  const std::size_t m = b.config().split_index();
  for (int k = 0; k < 20; ++k) {
    const Tensor z = sample_sphere(rng, 64);
    const auto styles = styles_of(b, z);
    const Image plain = synthesize(b, styles);
    EXPECT_EQ(plain, generate(b, z));
    const std::vector<Tensor> detail(styles.begin() + static_cast<std::ptrdiff_t>(m), styles.end());
    EXPECT_EQ(synthesize(b, detail, tap_feature(b, styles)), plain);
    EXPECT_EQ(tap_feature(b, z), tap_feature(b, styles));
  }
}

TEST(Synthesize, ZeroConvWeightsAndOverrideGiveSigmoidOfOutputBias) {
  GeneratorBundle b = init_generator(small_config(2));
  const GeneratorConfig& c = b.config();
  for (std::size_t i = c.split_index(); i < c.synthesis_layers; ++i) {
    const std::string p = "conv." + std::to_string(i);
    b.set_parameter(p + ".weight", Tensor(b.parameter(p + ".weight")->shape()));
    b.set_parameter(p + ".bias", Tensor(b.parameter(p + ".bias")->shape()));
  }
  const Tensor bias = Tensor::vector({0.3, -0.7, 1.1});
  b.set_parameter("rgb.bias", bias);
  Rng rng(6);
  const auto styles = styles_from_w(b, map_latent(b, sample_sphere(rng, 8)).w);
  const std::vector<Tensor> detail(styles.begin() + 1, styles.end());
  const Image img = synthesize(b, detail, Tensor(c.feature_shape()));
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t y = 0; y < img.height(); ++y)
      for (std::size_t x = 0; x < img.width(); ++x) EXPECT_DOUBLE_EQ(img.at(ch, y, x), 1.0 / (1.0 + std::exp(-bias[ch])));
}

TEST(Synthesize, DifferentOverridesGiveDifferentImages) {
  const GeneratorBundle b = init_generator(GeneratorConfig{});
  Rng rng(7);
  const auto styles = styles_of(b, sample_sphere(rng, 64));
  const std::vector<Tensor> detail(styles.begin() + 3, styles.end());
  const Image a = synthesize(b, detail, gaussian_tensor(rng, b.config().feature_shape()));
  const Image c = synthesize(b, detail, gaussian_tensor(rng, b.config().feature_shape()));
  EXPECT_GT(oracle::loop_mse(a, c), 0.0);
}

TEST(Synthesize, WrongStyleCountOrOverrideShapeIsError) {
  const GeneratorBundle b = init_generator(small_config());
  Rng rng(8);
  auto styles = styles_of(b, sample_sphere(rng, 8));
  styles.pop_back();
  EXPECT_THROW(synthesize(b, styles), ShapeError);
  const std::vector<Tensor> detail(styles.begin() + 1, styles.end());
  EXPECT_THROW(synthesize(b, styles_of(b, sample_sphere(rng, 8)), Tensor(Shape{1, 2, 2})), ShapeError);
}

TEST(TapFeature, ShapeMatchesConfiguredLayer) {
  const GeneratorBundle b = init_generator(GeneratorConfig{});
  Rng rng(9);
  const Tensor f = tap_feature(b, sample_sphere(rng, 64));
  const GeneratorConfig& c = b.config();
  EXPECT_EQ(f.shape(), (Shape{c.in_channels(c.split_index()), c.resolution(c.split_index()), c.resolution(c.split_index())}));
  EXPECT_EQ(f.shape(), c.feature_shape());
}

TEST(Generator, PixelsInUnitRange) {
  const GeneratorBundle b = init_generator(GeneratorConfig{});
  Rng rng(10);
  for (int k = 0; k < 10; ++k) {
    const Image img = generate(b, sample_sphere(rng, 64));
    for (double v : img.tensor().data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Generator, ImageLossIsDifferentiableInZ) {
  const GeneratorBundle b = init_generator(battery_generator_config(4));
  Rng rng(11);
  ad::Graph g;
  GeneratorGraph gen(g, b);
  ad::Var z = g.input("z", {4}, true);
  g.bind("z", sample_sphere(rng, 4));
  auto m = gen.mapping(z);
  std::vector<ad::Var> styles;
  for (std::size_t i = 0; i < 4; ++i) styles.push_back(gen.style(i, m.w));
  g.mse(gen.synthesis(styles), g.constant(uniform_tensor(rng, {3, 8, 8}, 0, 1)));
  g.forward();
  const Tensor analytic = g.backward().at("z");
  EXPECT_LT(oracle::rel_error(analytic, oracle::fd_gradient(g, "z")), 1e-4);
}

TEST(WeightsFile, RoundTripIsBitExact) {
  const GeneratorBundle b = init_generator(small_config(5));
  const std::string bytes = serialize_weights(b);
  EXPECT_EQ(bytes.substr(0, 4), "SGZ1");
  const GeneratorBundle back = deserialize_weights(bytes);
  EXPECT_TRUE(back.same_values(b));
  EXPECT_EQ(serialize_weights(back), bytes);
}

TEST(WeightsFile, SidecarCarriesConfig) {
  const auto dir = std::filesystem::temp_directory_path() / "la_weights_test";
  std::filesystem::create_directories(dir);
  const GeneratorBundle b = init_generator(small_config(6));
  save_weights((dir / "g.sgz").string(), b);
  const auto j = nlohmann::json::parse(read_file((dir / "g.sgz.json").string()));
  EXPECT_EQ(config_from_json(j), b.config());
  EXPECT_TRUE(load_weights((dir / "g.sgz").string()).same_values(b));
  std::filesystem::remove_all(dir);
}

TEST(WeightsFile, TruncatedOrBadMagicIsRejected) {
  const std::string bytes = serialize_weights(init_generator(small_config()));
  EXPECT_ANY_THROW(deserialize_weights(bytes.substr(0, bytes.size() - 3)));
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_ANY_THROW(deserialize_weights(bad));
}
