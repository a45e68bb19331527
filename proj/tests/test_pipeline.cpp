#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "d3gzsl/pipeline.hpp"

using namespace d3gzsl;

namespace {

SyntheticSpec small_spec(double sigma = 0.3) {
  SyntheticSpec s;
  s.seen_classes = 4;
  s.unseen_classes = 2;
  s.feature_dim = 8;
  s.attribute_dim = 4;
  s.train_per_class = 30;
  s.seen_test_per_class = 10;
  s.unseen_test_per_class = 10;
  s.noise_sigma = sigma;
  return s;
}

TrainConfig small_config(RunMode mode) {
  TrainConfig c;
  c.mode = mode;
  c.epochs = 3;
  c.teacher_epochs = 10;
  c.batch_size = 32;
  c.syn_per_class = 5;
  c.hidden_dim = 32;
  c.embed_dim = 16;
  c.projector_hidden = 8;
  c.wgan.generator_hidden = 16;
  c.wgan.critic_hidden = 16;
  c.wgan.n_critic = 2;
  return c;
}

std::shared_ptr<TeacherModel> pretrained_teacher(const TrainConfig& cfg, const GzslDataset& ds, std::uint64_t seed) {
  Rng init(seed), batches(seed + 1);
  auto t = std::make_shared<TeacherModel>(cfg.network(ds.feature_dim()), ds.seen_classes, cfg.tau_o, init);
  pretrain_teacher(*t, select_rows(ds.features, ds.train_index), labels_of(ds, ds.train_index), cfg.teacher_epochs,
                   cfg.batch_size, cfg.teacher_optim, batches);
  return t;
}

}  // namespace

TEST(Infer, ArgmaxOverAllClassesWithShiftAndTemperatureInvariance) {
  Tensor v = Tensor::from_data({2, 4}, {0.1, 2.0, -1.0, 0.3, -0.5, -0.2, -0.9, -0.1});
  EXPECT_EQ(argmax_rows(v), (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(argmax_rows(add_scalar(v, 7.5)), argmax_rows(v));
  EXPECT_EQ(argmax_rows(scale(v, 0.01)), argmax_rows(v));

  Rng rng(1);
  StudentModel student({6, 12, 5}, 7, {0, 2, 4}, 1.0, rng);
  Tensor x = Tensor::randn({20, 6}, rng);
  auto pred = infer(student, x);
  EXPECT_EQ(tape().size(), 0u);
  EXPECT_EQ(pred, argmax_rows(student.logits(x)));
  for (auto p : pred) EXPECT_LT(p, 7u);
  tape().reset();
}

TEST(Metrics, ReferencePairAndHarmonicInvariants) {
  EXPECT_NEAR(gzsl_metrics(52.3, 61.5).harmonic, 56.5, 0.1);
  EXPECT_DOUBLE_EQ(gzsl_metrics(0.0, 80.0).harmonic, 0.0);
  EXPECT_DOUBLE_EQ(gzsl_metrics(0.0, 0.0).harmonic, 0.0);
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.uniform(0.01, 100.0), s = rng.uniform(0.01, 100.0);
    const double h = harmonic_mean(u, s);
    EXPECT_NEAR(h, 2 * u * s / (u + s), 1e-9);
    EXPECT_LE(std::min(u, s), h + 1e-12);
    EXPECT_LE(h, std::sqrt(u * s) + 1e-12);
    EXPECT_NEAR(harmonic_mean(u, u), u, 1e-12);
  }
}

TEST(Metrics, PerClassMeanAndEmptyPartition) {
  auto ds = make_synthetic(small_spec());
  auto truth = labels_of(ds, ds.test_index);
  auto m = evaluate_predictions(ds, truth);
  EXPECT_DOUBLE_EQ(m.unseen, 100.0);
  EXPECT_DOUBLE_EQ(m.seen, 100.0);

  // all unseen rows of the first unseen class wrong: U drops by 1/U_count
  auto pred = truth;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (truth[i] == ds.unseen_classes[0]) pred[i] = ds.seen_classes[0];
  m = evaluate_predictions(ds, pred);
  EXPECT_DOUBLE_EQ(m.unseen, 50.0);
  EXPECT_DOUBLE_EQ(m.seen, 100.0);
  EXPECT_NEAR(m.harmonic, 2 * 50.0 * 100.0 / 150.0, 1e-9);

  EXPECT_THROW(evaluate_predictions(ds, {0, 1}), ShapeError);
  auto seen_only = ds;
  seen_only.test_index.resize(ds.seen_classes.size() * 10);
  EXPECT_THROW(evaluate_predictions(seen_only, labels_of(seen_only, seen_only.test_index)), ValidationError);
}

TEST(Config, Validation) {
  TrainConfig c;
  c.lambda = -1.0;
  EXPECT_THROW(c.validate(), ParameterError);
  c = TrainConfig{};
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ParameterError);
  EXPECT_THROW(parse_run_mode("fancy"), ParameterError);
  for (auto m : {RunMode::d3gzsl, RunMode::baseline, RunMode::ts, RunMode::iv_ts}) EXPECT_EQ(parse_run_mode(to_string(m)), m);
  c = TrainConfig{};
  c.mode = RunMode::baseline;
  auto r = c.resolved();
  EXPECT_EQ(r.lambda, 0.0);
  EXPECT_FALSE(r.use_id2sd);
  EXPECT_FALSE(r.use_o2dbd);
}

TEST(JointTraining, ZeroWeightWithFlagsOffMatchesBaseline) {
  auto ds = make_synthetic(small_spec());
  for (auto variant : {GeneratorVariant::gaussian_oracle, GeneratorVariant::wgan_gp}) {
    auto base = small_config(RunMode::baseline);
    base.fg_variant = variant;
    auto d3 = base;
    d3.mode = RunMode::d3gzsl;
    d3.lambda = 0.0;
    d3.use_id2sd = false;
    d3.use_o2dbd = false;
    auto a = run_single(base, ds), b = run_single(d3, ds);
    EXPECT_EQ(a.report.metrics.harmonic, b.report.metrics.harmonic);
    EXPECT_EQ(a.report.metrics.unseen, b.report.metrics.unseen);
    EXPECT_EQ(parameter_hash(a.joint->student.parameters()), parameter_hash(b.joint->student.parameters()));
    if (variant == GeneratorVariant::wgan_gp) {
      EXPECT_EQ(parameter_hash(a.generator->generator_net()), parameter_hash(b.generator->generator_net()));
    }
  }
}

TEST(JointTraining, TeacherUntouchedAndLossesFinite) {
  auto ds = make_synthetic(small_spec());
  for (auto method : {OodMethod::msp, OodMethod::energy}) {
    auto cfg = small_config(RunMode::d3gzsl);
    cfg.fg_variant = GeneratorVariant::wgan_gp;
    cfg.ood.method = method;
    cfg.lambda = 0.5;
    auto teacher = pretrained_teacher(cfg, ds, 3);
    const auto before = teacher->hash();
    Rng fg_init(4);
    auto g = CondGenerator::wgan_gp(ds.attribute_dim(), ds.feature_dim(), cfg.wgan, fg_init);
    std::vector<EpochTrace> trace;
    auto m = train_d3gzsl(cfg, ds, *teacher, g, RunStreams(5), trace);
    EXPECT_EQ(teacher->hash(), before);
    for (const auto& p : teacher->parameters()) EXPECT_FALSE(p.has_grad());
    ASSERT_EQ(trace.size(), cfg.epochs);
    for (const auto& t : trace) {
      for (double v : {t.critic, t.wasserstein, t.gradient_penalty, t.generator, t.be, t.kl, t.cls, t.od})
        EXPECT_TRUE(std::isfinite(v));
      EXPECT_GE(t.gradient_penalty, 0.0);
      EXPECT_GE(t.be, 0.0);
      EXPECT_GE(t.kl, -1e-12);
      EXPECT_GE(t.cls, 0.0);
      EXPECT_GE(t.od, 0.0);
    }
    auto metrics = evaluate_gzsl(m.student, ds);
    EXPECT_NEAR(metrics.harmonic, harmonic_mean(metrics.unseen, metrics.seen), 1e-6);
  }
}

TEST(JointTraining, UnfrozenTeacherIsRejected) {
  auto ds = make_synthetic(small_spec());
  auto cfg = small_config(RunMode::d3gzsl);
  Rng init(6);
  TeacherModel teacher(cfg.network(ds.feature_dim()), ds.seen_classes, 1.0, init);
  auto g = CondGenerator::gaussian_oracle(*ds.truth);
  std::vector<EpochTrace> trace;
  EXPECT_THROW(train_d3gzsl(cfg, ds, teacher, g, RunStreams(1), trace), StateError);
}

TEST(RunSingle, DeterministicGivenSeed) {
  auto ds = make_synthetic(small_spec());
  for (auto mode : {RunMode::d3gzsl, RunMode::ts}) {
    auto cfg = small_config(mode);
    cfg.fg_variant = GeneratorVariant::wgan_gp;
    auto a = run_single(cfg, ds).report, b = run_single(cfg, ds).report;
    EXPECT_EQ(a.metrics.unseen, b.metrics.unseen);
    EXPECT_EQ(a.metrics.seen, b.metrics.seen);
    EXPECT_EQ(a.metrics.harmonic, b.metrics.harmonic);
    ASSERT_EQ(a.trace.size(), b.trace.size());
    for (std::size_t i = 0; i < a.trace.size(); ++i) EXPECT_EQ(a.trace[i].generator, b.trace[i].generator);
  }
}

TEST(RunSingle, OracleNeedsGroundTruth) {
  auto ds = make_synthetic(small_spec());
  ds.truth.reset();
  EXPECT_THROW(run_single(small_config(RunMode::d3gzsl), ds), StateError);
}

TEST(TwoStage, ThresholdSelection) {
  auto [gamma, acc] = select_threshold({0.9, 0.8, 0.95, 0.7}, {0.1, 0.3, 0.2}, 256);
  EXPECT_DOUBLE_EQ(acc, 1.0);
  EXPECT_GT(gamma, 0.3);
  EXPECT_LE(gamma, 0.7);
  auto [g2, acc2] = select_threshold({0.5, 0.5}, {0.5, 0.5}, 16);
  EXPECT_DOUBLE_EQ(acc2, 0.5);
  EXPECT_DOUBLE_EQ(g2, 0.5);
  auto [g3, acc3] = select_threshold({0.2, 0.6}, {0.4, 0.8}, 64);
  EXPECT_DOUBLE_EQ(acc3, 0.5);
  EXPECT_TRUE(std::isfinite(g3));
  EXPECT_THROW(select_threshold({}, {0.1}, 8), StateError);
}

TEST(TwoStage, IdealizedOnNearNoiselessDataIsPerfect) {
  auto ds = make_synthetic(small_spec(1e-3));
  auto cfg = small_config(RunMode::iv_ts);
  cfg.epochs = 30;
  cfg.syn_per_class = 50;
  auto r = run_single(cfg, ds).report;
  EXPECT_GE(r.metrics.unseen, 99.0);
  EXPECT_GE(r.metrics.seen, 99.0);
  EXPECT_NEAR(r.metrics.harmonic, 100.0, 1.0);
  EXPECT_FALSE(r.ts_threshold.has_value());
}

TEST(TwoStage, PerfectDetectorMakesTsEqualIvTs) {
  auto ds = make_synthetic(small_spec());
  auto cfg = small_config(RunMode::ts);
  auto teacher = pretrained_teacher(cfg, ds, 7);
  auto g = CondGenerator::gaussian_oracle(*ds.truth);
  auto ts = train_two_stage(cfg, ds, *teacher, g, ds.train_index, {}, true, RunStreams(8)).model;

  // keep the test rows on which a median threshold classifies seen/unseen
  // correctly, so the detector is exact there by construction
  Tensor all = select_rows(ds.features, ds.test_index);
  auto scores = id_score(ts.scorer, teacher->logits(all)).to_vector();
  tape().reset();
  auto sorted = scores;
  std::sort(sorted.begin(), sorted.end());
  ts.threshold = sorted[sorted.size() / 2];
  std::vector<std::size_t> keep;
  std::vector<bool> truth_seen;
  std::size_t n_seen = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool seen = ds.is_seen(ds.labels[ds.test_index[i]]);
    if (seen != (scores[i] >= ts.threshold)) continue;
    keep.push_back(i);
    truth_seen.push_back(seen);
    n_seen += seen;
  }
  ASSERT_GT(n_seen, 0u);
  ASSERT_LT(n_seen, keep.size());
  Tensor x = select_rows(all, keep);
  EXPECT_EQ(ts.route(x), truth_seen);
  EXPECT_EQ(ts.predict(x), ts.predict_routed(x, truth_seen));

  // and a detector that is always wrong sends every row to the other expert
  std::vector<bool> flipped;
  for (bool b : truth_seen) flipped.push_back(!b);
  EXPECT_NE(ts.predict_routed(x, flipped), ts.predict_routed(x, truth_seen));
}

TEST(TwoStage, ReportsThresholdAndRejectsEmptyGeneration) {
  auto ds = make_synthetic(small_spec());
  auto cfg = small_config(RunMode::ts);
  auto r = run_single(cfg, ds).report;
  ASSERT_TRUE(r.ts_threshold.has_value());
  EXPECT_TRUE(std::isfinite(*r.ts_threshold));
  ASSERT_TRUE(r.ts_detector_accuracy.has_value());
  EXPECT_GE(*r.ts_detector_accuracy, 0.5);
  EXPECT_NEAR(r.metrics.harmonic, harmonic_mean(r.metrics.unseen, r.metrics.seen), 1e-6);

  cfg.syn_per_class = 0;
  auto teacher = pretrained_teacher(cfg, ds, 9);
  auto g = CondGenerator::gaussian_oracle(*ds.truth);
  EXPECT_THROW(train_two_stage(cfg, ds, *teacher, g, ds.train_index, {0}, false, RunStreams(1)), StateError);
}
