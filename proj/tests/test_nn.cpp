#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "d3gzsl/checkpoint.hpp"
#include "d3gzsl/nn.hpp"
#include "gradcheck.hpp"

using namespace d3gzsl;

namespace {

Linear make_linear(Tensor w, Tensor b, Activation a) { return Linear{std::move(w), std::move(b), a}; }

}  // namespace

TEST(Mlp, IdentityLayerPassesInputThrough) {
  Mlp net("I", {make_linear(Tensor::identity(3), Tensor::zeros({3}), Activation::identity)});
  Tensor x = Tensor::matrix({{1, -2, 3}, {0.5, 0, -1}});
  EXPECT_EQ(net(x).to_vector(), x.to_vector());
}

TEST(Mlp, ReluLayerExample) {
  Mlp net("R", {make_linear(Tensor::matrix({{-1}}), Tensor::vector({0}), Activation::relu)});
  EXPECT_EQ(net(Tensor::matrix({{2}})).item(), 0.0);
}

TEST(Mlp, DimensionMismatchIsShapeError) {
  Rng rng(1);
  Mlp net("M", {4, 3}, {Activation::relu}, rng);
  EXPECT_THROW(net(Tensor::zeros({2, 5})), ShapeError);
}

TEST(Mlp, ParameterGradientsMatchFiniteDifferences) {
  Rng rng(2);
  for (auto act : {Activation::leaky_relu, Activation::relu, Activation::sigmoid, Activation::identity}) {
    for (int p = 0; p < 10; ++p) {
      Mlp net("G", {4, 6, 3}, {act, Activation::identity}, rng);
      Tensor x = Tensor::randn({5, 4}, rng);
      auto r = gradcheck::check(
          [&](const std::vector<Tensor>&) { return reduce_sum(net(x)); }, net.parameters());
      EXPECT_LT(r.rel_error, 1e-4) << "activation " << static_cast<int>(act);
    }
  }
}

TEST(Mlp, InputGradientMatchesFiniteDifferencesAndIsDifferentiable) {
  Rng rng(3);
  for (int p = 0; p < 10; ++p) {
    Mlp net("D", {5, 7, 1}, {Activation::leaky_relu, Activation::identity}, rng);
    Tensor x = Tensor::randn({4, 5}, rng);
    Tensor g;
    {
      NoGradGuard no_grad;
      g = input_gradient(net, x);
    }
    auto fd = gradcheck::check([&](const std::vector<Tensor>& v) { return reduce_sum(net(v[0])); }, {x.clone()});
    EXPECT_LT(fd.rel_error, 1e-4);
    Tensor xl = x.clone();
    tape().reset();
    xl.set_requires_grad(true);
    backward(reduce_sum(net(xl)));
    for (std::size_t i = 0; i < g.numel(); ++i) EXPECT_NEAR(g.data()[i], xl.grad()[i], 1e-12);
    tape().reset();
    // penalty-style objective on the input gradient w.r.t. the parameters
    auto r = gradcheck::check(
        [&](const std::vector<Tensor>&) { return reduce_mean(square(add_scalar(sqrt(reduce_sum(square(input_gradient(net, x)), 1)), -1.0))); },
        net.parameters());
    EXPECT_LT(r.rel_error, 1e-4);
  }
}

TEST(Mlp, HeUniformKeepsVarianceInBand) {
  Rng rng(4);
  Tensor x = Tensor::randn({2000, 64}, rng);
  for (std::size_t depth = 1; depth <= 4; ++depth) {
    std::vector<std::size_t> dims(depth + 1, 64);
    Mlp net("V", dims, std::vector<Activation>(depth, Activation::relu), rng);
    Tensor y = net(x);
    double mean = 0.0, var = 0.0;
    for (double v : y.data()) mean += v;
    mean /= static_cast<double>(y.numel());
    for (double v : y.data()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(y.numel());
    EXPECT_GE(var, 0.25) << "depth " << depth;
    EXPECT_LE(var, 4.0) << "depth " << depth;
  }
}

TEST(Mlp, SameSeedSameParameters) {
  Rng a(77), b(77);
  Mlp na("N", {8, 16, 4}, {Activation::leaky_relu, Activation::identity}, a);
  Mlp nb("N", {8, 16, 4}, {Activation::leaky_relu, Activation::identity}, b);
  EXPECT_EQ(parameter_hash(na), parameter_hash(nb));
  Rng c(78);
  Mlp nc("N", {8, 16, 4}, {Activation::leaky_relu, Activation::identity}, c);
  EXPECT_NE(parameter_hash(na), parameter_hash(nc));
}

TEST(Freeze, FrozenNetKeepsParametersAndGetsNoGradients) {
  Rng rng(5);
  Mlp net("T", {3, 4, 2}, {Activation::leaky_relu, Activation::identity}, rng);
  net.freeze();
  net.freeze();
  EXPECT_TRUE(net.frozen());
  const auto before = parameter_hash(net);
  Tensor x = Tensor::randn({6, 3}, rng).set_requires_grad(true);
  Adam opt(net.parameters(), {});
  for (int i = 0; i < 10; ++i) {
    tape().reset();
    Tensor y = net(x);
    EXPECT_EQ(y.shape(), (Shape{6, 2}));
    backward(reduce_sum(square(y)));
    opt.step();
  }
  tape().reset();
  EXPECT_EQ(parameter_hash(net), before);
  for (const auto& p : net.parameters()) EXPECT_FALSE(p.has_grad());
  EXPECT_TRUE(x.has_grad());
}

TEST(Adam, ZeroGradientIsFixedPoint) {
  Tensor w = Tensor::vector({1.5, -2.0}).set_requires_grad(true);
  tape().reset();
  backward(reduce_sum(scale(w, 0.0)));
  Adam opt({w}, {});
  for (int i = 0; i < 5; ++i) opt.step();
  EXPECT_EQ(w.to_vector(), (std::vector<double>{1.5, -2.0}));
  tape().reset();
}

TEST(Adam, FirstStepMovesByLearningRate) {
  for (double g : {3.0, -0.01}) {
    Tensor w = Tensor::scalar(0.0).set_requires_grad(true);
    tape().reset();
    backward(scale(w, g));
    Adam opt({w}, {1e-3, 0.9, 0.999, 1e-8});
    opt.step();
    EXPECT_NEAR(w.item(), -1e-3 * (g > 0 ? 1.0 : -1.0), 1e-8);
    EXPECT_EQ(opt.state().step, 1u);
    EXPECT_TRUE(w.has_grad());
    tape().reset();
  }
}

TEST(Adam, ConvergesOnQuadratic) {
  Tensor x = Tensor::scalar(1.0).set_requires_grad(true);
  Adam opt({x}, {1e-2, 0.9, 0.999, 1e-8});
  for (int i = 0; i < 500; ++i) {
    tape().reset();
    opt.zero_grad();
    backward(square(x));
    adam_step(opt);
  }
  tape().reset();
  EXPECT_LT(std::abs(x.item()), 1e-2);
}

TEST(Adam, MissingGradientIsStateError) {
  Tensor x = Tensor::scalar(1.0).set_requires_grad(true);
  Adam opt({x}, {});
  EXPECT_THROW(opt.step(), StateError);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  Rng rng(6);
  Mlp net("E", {3, 5, 2}, {Activation::leaky_relu, Activation::identity}, rng);
  auto path = (std::filesystem::temp_directory_path() / "d3gzsl_ckpt_test.bin").string();
  save_checkpoint(path, net.named_parameters());
  auto loaded = load_checkpoint(path);
  ASSERT_EQ(loaded.size(), 4u);
  Rng other(99);
  Mlp copy("E", {3, 5, 2}, {Activation::leaky_relu, Activation::identity}, other);
  load_parameters(copy, loaded);
  EXPECT_EQ(parameter_hash(copy), parameter_hash(net));

  // truncation is detected
  auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 3);
  EXPECT_THROW(load_checkpoint(path), ParseError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, BadMagicRejected) {
  auto path = (std::filesystem::temp_directory_path() / "d3gzsl_ckpt_bad.bin").string();
  std::ofstream(path) << "not a checkpoint\n{}\n";
  EXPECT_THROW(load_checkpoint(path), ParseError);
  std::filesystem::remove(path);
}
