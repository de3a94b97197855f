#include <gtest/gtest.h>

#include <limits>

#include "latent_atlas/random.hpp"
#include "latent_atlas/tensor.hpp"

using namespace latent_atlas;

TEST(Tensor, SizeMatchesShapeProduct) {
  Tensor t(Shape{2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_EQ(shape_size(t.shape()), t.values().size());
  for (double v : t.data()) EXPECT_EQ(v, 0.0);
}

TEST(Tensor, ScalarHasRankZero) {
  const Tensor s = Tensor::scalar(2.5);
  EXPECT_EQ(s.rank(), 0u);
  EXPECT_EQ(s.size(), 1u);
  EXPECT_EQ(s.item(), 2.5);
}

TEST(Tensor, DataLengthMismatchIsShapeError) {
  EXPECT_THROW(Tensor(Shape{2, 2}, {1.0, 2.0, 3.0}), ShapeError);
}

TEST(Tensor, ZeroDimensionIsShapeError) { EXPECT_THROW(Tensor(Shape{3, 0}), ShapeError); }

TEST(Tensor, NonFiniteConstructionIsRejected) {
  EXPECT_THROW(Tensor(Shape{2}, {1.0, std::numeric_limits<double>::quiet_NaN()}), NumericalError);
  EXPECT_THROW(Tensor(Shape{1}, {std::numeric_limits<double>::infinity()}), NumericalError);
}

TEST(Tensor, ReshapeKeepsRowMajorData) {
  const Tensor t(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor r = t.reshaped({3, 2});
  EXPECT_EQ(r.shape(), (Shape{3, 2}));
  EXPECT_EQ(r.values(), t.values());
  EXPECT_THROW(t.reshaped({4, 2}), ShapeError);
}

TEST(Tensor, ItemOnMultiElementThrows) { EXPECT_THROW(Tensor(Shape{2}).item(), ShapeError); }

TEST(Tensor, NormAndDot) {
  const Tensor t = Tensor::vector({3.0, 4.0});
  EXPECT_DOUBLE_EQ(t.norm(), 5.0);
  EXPECT_DOUBLE_EQ(dot(t.data(), t.data()), 25.0);
  EXPECT_EQ(max_abs_diff(t, Tensor::vector({3.0, 3.5})), 0.5);
}

TEST(Tensor, ShapeStringIsReadable) { EXPECT_EQ(shape_str({3, 8, 8}), "(3, 8, 8)"); }

TEST(Random, SeededStreamsAreReproducible) {
  Rng a(derive_seed(5, 1)), b(derive_seed(5, 1)), c(derive_seed(5, 2));
  const Tensor ta = gaussian_tensor(a, {16}), tb = gaussian_tensor(b, {16}), tc = gaussian_tensor(c, {16});
  EXPECT_EQ(ta, tb);
  EXPECT_NE(ta, tc);
}

TEST(Random, HashNameIsFnv1a) {
  // Published FNV-1a 64-bit test vectors.
  EXPECT_EQ(hash_name(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(hash_name("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(hash_name("foobar"), 0x85944171f73967e8ULL);
}
