#include <gtest/gtest.h>

#include "support.hpp"

using namespace backx;

TEST(Tensor, ShapeAndDataMustAgree) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  Tensor t({2, 3}, std::vector<double>{0, 1, 2, 3, 4, 5});
  EXPECT_EQ(t.stride0(), 3u);
  EXPECT_EQ(t.slice(1, 2)[0], 3.0);
  EXPECT_THROW(t.reshaped({4}), ShapeError);
}

TEST(Tensor, StackAndConcat) {
  Tensor a({2}, std::vector<double>{1, 2}), b({2}, std::vector<double>{3, 4});
  Tensor s = stack(std::vector<Tensor>{a, b});
  EXPECT_EQ(s.shape(), (Shape{2, 2}));
  EXPECT_EQ(s[3], 4.0);
  Tensor c = concat(std::vector<Tensor>{s, s});
  EXPECT_EQ(c.shape(), (Shape{4, 2}));
  EXPECT_EQ(c[6], 3.0);
}

TEST(Tensor, BilinearHalfPixel) {
  // 2x2 -> 4x4 with half-pixel centres: output x = 1 samples source 0.25.
  std::vector<double> src{0, 1, 2, 3};
  auto up = bilinear_resize(src, 2, 2, 4, 4);
  EXPECT_DOUBLE_EQ(up[0], 0.0);
  EXPECT_DOUBLE_EQ(up[1], 0.25);
  EXPECT_DOUBLE_EQ(up[2], 0.75);
  EXPECT_DOUBLE_EQ(up[3], 1.0);
  EXPECT_DOUBLE_EQ(up[4], 0.5);   // row 1: source y 0.25
  EXPECT_DOUBLE_EQ(up[5], 0.75);  // 0.5 + 0.25
  auto same = bilinear_resize(src, 2, 2, 2, 2);
  EXPECT_EQ(same, src);
  auto one = bilinear_resize(std::vector<double>{7.5}, 1, 1, 3, 3);
  for (double v : one) EXPECT_DOUBLE_EQ(v, 7.5);
}

TEST(Random, Fnv1aPublishedVectors) {
  EXPECT_EQ(Fnv1a().digest(), 0xcbf29ce484222325ULL);
  EXPECT_EQ(Fnv1a().update(std::string_view("a")).digest(), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(Fnv1a().update(std::string_view("foobar")).digest(), 0x85944171f73967e8ULL);
}

TEST(Random, DerivedSeedsDiffer) {
  EXPECT_NE(derive_seed(1, 2), derive_seed(1, 3));
  EXPECT_EQ(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
}

TEST(Conv2d, HandComputedValid) {
  nn::Conv2d conv(1, 1, 2, 0);
  conv.weight() = Tensor({1, 1, 2, 2}, std::vector<double>{1, 0, 0, -1});
  conv.bias_values()[0] = 0.5;
  Tensor x({1, 1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor y = conv.forward(x);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  // x[i][j] - x[i+1][j+1] + 0.5 = -4 + 0.5 everywhere
  for (double v : y.storage()) EXPECT_DOUBLE_EQ(v, -3.5);
}

TEST(Conv2d, PaddedOutputShape) {
  nn::Conv2d conv(3, 5, 3, 1);
  EXPECT_EQ(conv.output_shape({2, 3, 8, 8}), (Shape{2, 5, 8, 8}));
}

TEST(MaxPool, FirstMaximumWinsOnTies) {
  nn::MaxPool2d pool(2);
  Tensor x({1, 1, 2, 2}, std::vector<double>{1, 1, 1, 1});
  Tensor y = pool.forward(x);
  EXPECT_EQ(y[0], 1.0);
  Tensor g = pool.backward(Tensor({1, 1, 1, 1}, 1.0));
  EXPECT_EQ(g.storage(), (std::vector<double>{1, 0, 0, 0}));
}

namespace {

// Checks d(sum(out * r))/d(in) for a layer against central differences.
void check_layer_gradient(nn::Layer& layer, const Tensor& x, std::uint64_t seed) {
  Tensor out = layer.forward(x);
  Tensor r = support::random_pixels(out.shape(), seed, -1, 1);
  Tensor g = layer.backward(r);
  auto objective = [&](const Tensor& in) {
    Tensor o = layer.forward(in);
    double s = 0;
    for (std::size_t i = 0; i < o.size(); ++i) s += o[i] * r[i];
    return s;
  };
  for (std::size_t i = 0; i < x.size(); i += std::max<std::size_t>(1, x.size() / 37)) {
    Tensor a = x, b = x;
    a[i] += 1e-5;
    b[i] -= 1e-5;
    const double fd = (objective(a) - objective(b)) / 2e-5;
    EXPECT_NEAR(g[i], fd, 1e-6 * std::max(1.0, std::abs(fd))) << layer.type() << " coordinate " << i;
  }
}

}  // namespace

TEST(Layers, BackwardMatchesFiniteDifferences) {
  Rng rng(4);
  nn::Conv2d conv(2, 3, 3, 1);
  conv.init_he(rng);
  conv.bias_values()[1] = 0.3;
  check_layer_gradient(conv, support::random_pixels({2, 2, 5, 5}, 1), 2);
  nn::Linear lin(6, 4);
  lin.init_he(rng);
  check_layer_gradient(lin, support::random_pixels({3, 6}, 3), 4);
  nn::Normalize norm({0.5, 0.2}, {0.25, 2.0});
  check_layer_gradient(norm, support::random_pixels({2, 2, 3, 3}, 5), 6);
  nn::ReLU relu;
  check_layer_gradient(relu, support::random_pixels({2, 7}, 7, -1, 1), 8);
  nn::MaxPool2d pool(2);
  check_layer_gradient(pool, support::random_pixels({1, 2, 4, 4}, 9), 10);
}

TEST(Layers, ConvWeightGradientMatchesFiniteDifferences) {
  Rng rng(12);
  nn::Conv2d conv(2, 2, 3, 1);
  conv.init_he(rng);
  Tensor x = support::random_pixels({2, 2, 4, 4}, 13);
  Tensor out = conv.forward(x);
  Tensor r = support::random_pixels(out.shape(), 14, -1, 1);
  for (auto* p : conv.params()) std::fill(p->grad.storage().begin(), p->grad.storage().end(), 0.0);
  conv.backward(r);
  auto objective = [&] {
    Tensor o = conv.forward(x);
    double s = 0;
    for (std::size_t i = 0; i < o.size(); ++i) s += o[i] * r[i];
    return s;
  };
  for (auto* p : conv.params()) {
    for (std::size_t i = 0; i < p->value.size(); i += 5) {
      const double keep = p->value[i];
      p->value[i] = keep + 1e-5;
      const double fa = objective();
      p->value[i] = keep - 1e-5;
      const double fb = objective();
      p->value[i] = keep;
      EXPECT_NEAR(p->grad[i], (fa - fb) / 2e-5, 1e-6) << p->name << " " << i;
    }
  }
}

TEST(Network, DuplicateNamesAndLookup) {
  nn::Network net;
  net.add("a", std::make_unique<nn::ReLU>());
  EXPECT_THROW(net.add("a", std::make_unique<nn::ReLU>()), DomainError);
  EXPECT_EQ(net.index_of("a"), 0u);
  EXPECT_THROW(net.index_of("b"), LookupError);
}

TEST(Network, CopyIsDeep) {
  auto m = make_desk_cnn({3, 8, 8}, 3, Normalization::identity(3), 1);
  nn::Network copy = m.network;
  auto* p = copy.params()[0];
  p->value[0] += 1.0;
  EXPECT_NE(m.network.params()[0]->value[0], p->value[0]);
}

TEST(Network, SpecRoundTripPreservesArchitecture) {
  auto m = make_desk_cnn({3, 8, 8}, 3, Normalization::identity(3), 1);
  nn::Network rebuilt = nn::Network::from_spec(m.network.spec());
  ASSERT_EQ(rebuilt.size(), m.network.size());
  for (std::size_t i = 0; i < rebuilt.size(); ++i) {
    EXPECT_EQ(rebuilt.name(i), m.network.name(i));
    EXPECT_EQ(rebuilt.layer(i).type(), m.network.layer(i).type());
  }
}
