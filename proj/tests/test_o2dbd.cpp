#include <gtest/gtest.h>

#include <cmath>

#include "d3gzsl/o2dbd.hpp"
#include "gradcheck.hpp"

using namespace d3gzsl;

namespace {

double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(OodScore, MspExamples) {
  OodScorer msp{OodMethod::msp, 1.0};
  EXPECT_NEAR(ood_score(msp, Tensor::zeros({1, 4})).item(), 0.25, 1e-12);
  EXPECT_NEAR(ood_score(msp, Tensor::matrix({{std::log(3.0), 0.0}})).item(), 0.75, 1e-12);
}

TEST(OodScore, EnergyExamples) {
  OodScorer energy{OodMethod::energy, 1.0};
  EXPECT_NEAR(ood_score(energy, Tensor::matrix({{0, 0}})).item(), -std::log(2.0), 1e-12);
  EXPECT_NEAR(ood_score(energy, Tensor::matrix({{1, 0}})).item(), -std::log1p(std::exp(1.0)), 1e-12);
  EXPECT_NEAR(ood_score(energy, Tensor::matrix({{1, 0}})).item(), -1.3133, 1e-4);
}

TEST(OodScore, AnalyticBounds) {
  Rng rng(1);
  const std::size_t S = 6;
  for (double T : {0.5, 1.0, 3.0}) {
    Tensor f = Tensor::randn({50, S}, rng, 3.0);
    Tensor msp = ood_score({OodMethod::msp, T}, f);
    Tensor e = ood_score({OodMethod::energy, T}, f);
    EXPECT_EQ(msp.shape(), (Shape{50}));
    for (std::size_t i = 0; i < 50; ++i) {
      double mx = -1e300;
      for (std::size_t k = 0; k < S; ++k) mx = std::max(mx, f.at(i, k));
      EXPECT_GE(msp[i], 1.0 / S - 1e-12);
      EXPECT_LE(msp[i], 1.0 + 1e-12);
      EXPECT_GE(e[i], -mx - T * std::log(static_cast<double>(S)) - 1e-9);
      EXPECT_LE(e[i], -mx + 1e-9);
    }
  }
}

TEST(OodScore, IdScoreIsLargerForConfidentRows) {
  Tensor f = Tensor::matrix({{5, 0, 0}, {0.1, 0, 0}});
  for (auto m : {OodMethod::msp, OodMethod::energy}) {
    Tensor s = id_score({m, 1.0}, f);
    EXPECT_GT(s[0], s[1]) << to_string(m);
  }
}

TEST(OodScore, NonPositiveTemperatureRejected) {
  EXPECT_THROW(ood_score({OodMethod::energy, 0.0}, Tensor::zeros({1, 2})), ParameterError);
  EXPECT_THROW(parse_ood_method("mahalanobis"), ParameterError);
}

TEST(Confidence, Examples) {
  LearnableSigmoid eps(1.0, 0.0);
  Tensor h = confidence(eps, Tensor::vector({0.0, 2.0, 60.0}));
  EXPECT_EQ(h.shape(), (Shape{3, 2}));
  EXPECT_NEAR(h.at(0, 0), 0.5, 1e-12);
  EXPECT_NEAR(h.at(0, 1), 0.5, 1e-12);
  EXPECT_NEAR(h.at(1, 0), 0.8808, 1e-4);
  EXPECT_NEAR(h.at(2, 0), 1.0, 1e-12);
  EXPECT_NEAR(eps.alpha_value(), 1.0, 1e-12);
}

TEST(Confidence, PairSumsToOneAndIsMonotone) {
  Rng rng(2);
  for (int t = 0; t < 10; ++t) {
    LearnableSigmoid eps(rng.uniform(0.1, 5.0), rng.uniform(-2.0, 2.0));
    std::vector<double> s(40);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = -4.0 + 0.2 * static_cast<double>(i);
    Tensor h = confidence(eps, Tensor::from_data({s.size()}, s));
    for (std::size_t i = 0; i < s.size(); ++i) {
      EXPECT_EQ(h.at(i, 0) + h.at(i, 1), 1.0);
      EXPECT_GT(h.at(i, 0), 0.0);
      EXPECT_LT(h.at(i, 0), 1.0);
      if (i > 0) {
        EXPECT_GT(h.at(i, 0), h.at(i - 1, 0));
      }
    }
  }
  EXPECT_THROW(LearnableSigmoid(0.0, 0.0), ParameterError);
}

TEST(Projector, RowsOnSimplexAndZeroInitIsUniform) {
  Rng rng(3);
  OodProjector H(7, 16, rng);
  Tensor logits = Tensor::randn({9, 7}, rng, 2.0);
  Tensor h = project_student(H, logits);
  EXPECT_EQ(h.shape(), (Shape{9, 2}));
  for (std::size_t i = 0; i < 9; ++i) {
    EXPECT_NEAR(h.at(i, 0) + h.at(i, 1), 1.0, 1e-12);
    EXPECT_GT(h.at(i, 0), 0.0);
    EXPECT_LT(h.at(i, 0), 1.0);
  }
  H.zero_final_layer();
  Tensor u = project_student(H, logits);
  for (double v : u.data()) EXPECT_DOUBLE_EQ(v, 0.5);
  EXPECT_THROW(project_student(H, Tensor::zeros({2, 6})), ShapeError);
}

TEST(LossOd, Examples) {
  Tensor half = Tensor::matrix({{0.5, 0.5}, {0.5, 0.5}});
  const double expected = -0.25 * (2.0 * std::log(sigmoid_d(1.0)) + 2.0 * std::log(1.0 - sigmoid_d(1.0)));
  EXPECT_NEAR(loss_od(half, half, {0, 1}).item(), expected, 1e-12);
  EXPECT_NEAR(loss_od(half, half, {0, 1}).item(), 0.8133, 1e-4);
  Tensor one_h = Tensor::matrix({{0.3, 0.7}});
  Tensor one_t = Tensor::matrix({{0.9, 0.1}});
  const double b = (0.3 * 0.9 + 0.7 * 0.1) / (std::hypot(0.3, 0.7) * std::hypot(0.9, 0.1));
  EXPECT_NEAR(loss_od(one_h, one_t, {3}).item(), -std::log(sigmoid_d(b)), 1e-12);
}

TEST(LossOd, DecreasesWithAlignmentForOneClass) {
  Tensor target = Tensor::matrix({{0.9, 0.1}, {0.9, 0.1}, {0.9, 0.1}});
  std::vector<ClassId> y{2, 2, 2};
  double prev = 1e9;
  for (double c : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    Tensor h = Tensor::matrix({{c, 1 - c}, {c, 1 - c}, {c, 1 - c}});
    const double l = loss_od(h, target, y).item();
    EXPECT_LT(l, prev);
    EXPECT_GE(l, 0.0);
    prev = l;
  }
}

TEST(CompositeGradients, LossOdThroughStudentProjectorAndSigmoid) {
  Rng rng(4);
  for (int p = 0; p < 10; ++p) {
    OodProjector H(5, 6, rng);
    LearnableSigmoid eps(rng.uniform(0.5, 2.0), rng.uniform(-1.0, 1.0));
    Tensor teacher_logits = Tensor::randn({6, 3}, rng);
    std::vector<ClassId> labels{0, 1, 1, 2, 3, 4};
    for (auto method : {OodMethod::msp, OodMethod::energy}) {
      OodScorer scorer{method, 1.5};
      std::vector<Tensor> leaves{Tensor::randn({6, 5}, rng)};
      for (const auto& t : H.parameters()) leaves.push_back(t);
      for (const auto& t : eps.parameters()) leaves.push_back(t);
      auto r = gradcheck::check(
          [&](const auto& x) {
            Tensor h_hat = project_student(H, x[0]);
            Tensor h_tilde = confidence(eps, id_score(scorer, teacher_logits));
            return loss_od(h_hat, h_tilde, labels);
          },
          leaves);
      EXPECT_LT(r.rel_error, 1e-4) << to_string(method);
    }
  }
}

TEST(LossOd, TeacherLogitsGetNoGradient) {
  Rng rng(5);
  OodProjector H(4, 5, rng);
  LearnableSigmoid eps;
  Tensor teacher_logits = Tensor::randn({3, 2}, rng).set_requires_grad(true);
  Tensor student_logits = Tensor::randn({3, 4}, rng).set_requires_grad(true);
  tape().reset();
  Tensor l = loss_od(project_student(H, student_logits), confidence(eps, id_score({}, teacher_logits)), {0, 1, 3});
  backward(l);
  tape().reset();
  EXPECT_FALSE(teacher_logits.has_grad());
  EXPECT_TRUE(student_logits.has_grad());
  for (const auto& p : eps.parameters()) EXPECT_TRUE(p.has_grad());
  for (const auto& p : H.parameters()) EXPECT_TRUE(p.has_grad());
}
