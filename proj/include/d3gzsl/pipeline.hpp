#pragma once

// Training and evaluation drivers:
//   - joint training of FG + student + projector (d3gzsl / baseline),
//   - unified-classifier inference and U/S/H evaluation,
//   - the two-stage OOD-routing baselines (ts / iv_ts).

#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "d3gzsl/data.hpp"
#include "d3gzsl/error.hpp"
#include "d3gzsl/feature_gen.hpp"
#include "d3gzsl/id2sd.hpp"
#include "d3gzsl/metrics.hpp"
#include "d3gzsl/nn.hpp"
#include "d3gzsl/o2dbd.hpp"
#include "d3gzsl/tensor.hpp"

namespace d3gzsl {

enum class RunMode { d3gzsl, baseline, ts, iv_ts };

inline std::string to_string(RunMode m) {
  switch (m) {
    case RunMode::d3gzsl: return "d3gzsl";
    case RunMode::baseline: return "baseline";
    case RunMode::ts: return "ts";
    case RunMode::iv_ts: return "iv_ts";
  }
  return "?";
}

inline RunMode parse_run_mode(const std::string& s) {
  if (s == "d3gzsl") return RunMode::d3gzsl;
  if (s == "baseline") return RunMode::baseline;
  if (s == "ts") return RunMode::ts;
  if (s == "iv_ts") return RunMode::iv_ts;
  throw ParameterError("unknown mode '" + s + "' (expected d3gzsl, baseline, ts or iv_ts)");
}

struct TrainConfig {
  RunMode mode = RunMode::d3gzsl;
  double lambda = 1e-4;
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  int syn_per_class = 10;
  bool use_id2sd = true;
  bool use_o2dbd = true;
  OodScorer ood;
  double tau_o = 1.0;
  double tau_s = 1.0;
  std::uint64_t seed = 1;

  std::size_t hidden_dim = 512;
  std::size_t embed_dim = 64;
  std::size_t projector_hidden = 16;

  std::size_t teacher_epochs = 20;
  AdamOptions teacher_optim{1e-3, 0.9, 0.999, 1e-8};
  AdamOptions student_optim{1e-3, 0.9, 0.999, 1e-8};
  AdamOptions projector_optim{1e-3, 0.9, 0.999, 1e-8};

  GeneratorVariant fg_variant = GeneratorVariant::gaussian_oracle;
  WganOptions wgan;
  std::size_t fg_warmup_epochs = 0;

  double ts_validation_fraction = 0.2;
  std::size_t ts_quantiles = 256;

  void validate() const {
    if (!(lambda >= 0.0)) throw ParameterError("lambda must be >= 0");
    if (epochs < 1) throw ParameterError("epochs must be >= 1");
    if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
    if (syn_per_class < 0) throw ParameterError("syn_per_class must be >= 0");
    if (!(tau_o > 0.0) || !(tau_s > 0.0)) throw ParameterError("temperatures must be > 0");
    if (!(ts_validation_fraction > 0.0 && ts_validation_fraction < 1.0))
      throw ParameterError("ts validation fraction must be in (0, 1)");
    if (ts_quantiles < 2) throw ParameterError("ts quantile count must be >= 2");
    ood.validate();
  }

  // Baseline: FG + classification loss only, no distillation feedback.
  TrainConfig resolved() const {
    TrainConfig c = *this;
    if (c.mode == RunMode::baseline) {
      c.lambda = 0.0;
      c.use_id2sd = false;
      c.use_o2dbd = false;
    }
    return c;
  }

  NetworkShape network(std::size_t feature_dim) const { return {feature_dim, hidden_dim, embed_dim}; }
};

struct EpochTrace {
  std::size_t epoch = 0;
  double critic = 0.0;        // includes the (signed) Wasserstein term
  double wasserstein = 0.0;
  double gradient_penalty = 0.0;
  double generator = 0.0;
  double be = 0.0;
  double kl = 0.0;
  double cls = 0.0;
  double od = 0.0;
};

struct RunReport {
  RunMode mode = RunMode::d3gzsl;
  std::uint64_t seed = 0;
  double lambda = 0.0;
  OodMethod ood_method = OodMethod::msp;
  bool use_id2sd = false;
  bool use_o2dbd = false;
  GzslMetrics metrics;
  std::size_t epochs = 0;
  double wall_ms = 0.0;
  double teacher_train_accuracy = 0.0;
  std::optional<double> ts_threshold;
  std::optional<double> ts_detector_accuracy;  // balanced, on the validation mix
  std::vector<EpochTrace> trace;
  std::string config_echo;
};

// Named random streams so that modes sharing a seed share every stream they
// have in common.
struct RunStreams {
  explicit RunStreams(std::uint64_t seed) : root(seed) {}
  Rng root;
  Rng stream(const char* tag) const { return root.derive(tag); }
};

inline std::vector<ClassId> infer(const StudentModel& student, const Tensor& x) {
  NoGradGuard no_grad;
  return argmax_rows(student.logits(x));
}

inline GzslMetrics evaluate_gzsl(const StudentModel& student, const GzslDataset& ds) {
  return evaluate_predictions(ds, infer(student, select_rows(ds.features, ds.test_index)));
}

inline void check_finite(double v, std::size_t epoch, const char* what) {
  if (!std::isfinite(v)) throw DivergenceError(epoch, what);
}

// Cross-entropy training of a classifier over its own class list. `epoch_data`
// supplies (features, labels) for each epoch. Frozen on return.
inline void train_classifier(TeacherModel& model, const std::function<std::pair<Tensor, std::vector<ClassId>>()>& epoch_data,
                             std::size_t epochs, std::size_t batch_size, const AdamOptions& optim, Rng& rng) {
  SeenClassifier cls = model.as_classifier();
  Adam opt(model.parameters(), optim);
  for (std::size_t e = 0; e < epochs; ++e) {
    auto [x, y] = epoch_data();
    auto cols = cls.columns_of(y);
    std::vector<std::size_t> rows(y.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    for (const auto& b : epoch_batches(rows, batch_size, rng)) {
      tape().reset();
      opt.zero_grad();
      std::vector<std::size_t> bc;
      for (auto r : b) bc.push_back(cols[r]);
      Tensor loss = cross_entropy(model.logits(select_rows(x, b)), bc, model.temperature());
      check_finite(loss.item(), e, "expert cross-entropy");
      backward(loss);
      opt.step();
    }
    tape().reset();
  }
  opt.zero_grad();
  model.freeze();
}

// FG warm-up: epochs of fg_train_step over the given seen rows.
inline void train_generator(CondGenerator& g, const GzslDataset& ds, const std::vector<std::size_t>& rows, const SeenClassifier& cls,
                            std::size_t epochs, std::size_t batch_size, Rng& batch_rng, Rng& noise_rng,
                            std::vector<EpochTrace>* trace = nullptr) {
  if (g.variant() != GeneratorVariant::wgan_gp) return;
  for (std::size_t e = 0; e < epochs; ++e) {
    EpochTrace t;
    t.epoch = e;
    std::size_t nb = 0;
    for (const auto& b : epoch_batches(rows, batch_size, batch_rng)) {
      auto rep = fg_train_step(g, select_rows(ds.features, b), labels_of(ds, b), ds.attributes, &cls, noise_rng);
      check_finite(rep.generator_loss, e, "generator loss");
      check_finite(rep.critic.loss, e, "critic loss");
      t.critic += rep.critic.loss;
      t.wasserstein += rep.critic.wasserstein;
      t.gradient_penalty += rep.critic.gradient_penalty;
      t.generator += rep.generator_loss;
      ++nb;
    }
    if (trace != nullptr && nb > 0) {
      t.critic /= static_cast<double>(nb);
      t.wasserstein /= static_cast<double>(nb);
      t.gradient_penalty /= static_cast<double>(nb);
      t.generator /= static_cast<double>(nb);
      trace->push_back(t);
    }
  }
}

struct JointModels {
  StudentModel student;
  OodProjector projector;
  LearnableSigmoid sigmoid;
};

// Joint training. Per batch: n_critic critic updates, then a single backward
// of  L_gen(G) + (L_id + L_od)  where the generated features reach the
// student through scale_gradient(x'', lambda). The generator therefore sees
// L_gen + lambda (L_id + L_od) while the student, H and the sigmoid see
// L_id + L_od. Ablation flags drop L_be + L_kl (use_id2sd) and L_od
// (use_o2dbd); L_cls is always on.
inline JointModels train_d3gzsl(const TrainConfig& cfg_in, const GzslDataset& ds, const TeacherModel& teacher, CondGenerator& g,
                                const RunStreams& streams, std::vector<EpochTrace>& trace) {
  const TrainConfig cfg = cfg_in.resolved();
  cfg.validate();
  if (!teacher.frozen()) throw StateError("train_d3gzsl: teacher must be pretrained and frozen");

  Rng student_init = streams.stream("student.init");
  Rng projector_init = streams.stream("projector.init");
  Rng batch_rng = streams.stream("joint.batches");
  Rng noise_rng = streams.stream("joint.noise");

  JointModels m{StudentModel(cfg.network(ds.feature_dim()), ds.num_classes(), ds.seen_classes, cfg.tau_s, student_init),
                OodProjector(ds.num_classes(), cfg.projector_hidden, projector_init), LearnableSigmoid(1.0, 0.0)};
  Adam student_opt(m.student.parameters(), cfg.student_optim);
  Adam projector_opt(concat_parameters({m.projector.parameters(), m.sigmoid.parameters()}), cfg.projector_optim);
  SeenClassifier cls = teacher.as_classifier();
  const bool wgan = g.variant() == GeneratorVariant::wgan_gp;

  auto [unseen_attrs, unseen_labels] = repeat_class_attributes(ds, ds.unseen_classes, static_cast<std::size_t>(cfg.syn_per_class));

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    EpochTrace t;
    t.epoch = e;
    std::size_t nb = 0;
    for (const auto& rows : epoch_batches(ds.train_index, cfg.batch_size, batch_rng)) {
      Tensor real = select_rows(ds.features, rows);
      std::vector<ClassId> seen_labels = labels_of(ds, rows);

      if (wgan) {
        std::vector<std::size_t> attr_rows(seen_labels.begin(), seen_labels.end());
        Tensor real_attrs = select_rows(ds.attributes, attr_rows);
        for (std::size_t k = 0; k < cfg.wgan.n_critic; ++k) {
          auto cr = g.critic_step(real, real_attrs, noise_rng);
          t.critic += cr.loss / static_cast<double>(cfg.wgan.n_critic);
          t.wasserstein += cr.wasserstein / static_cast<double>(cfg.wgan.n_critic);
          t.gradient_penalty += cr.gradient_penalty / static_cast<double>(cfg.wgan.n_critic);
        }
      }

      tape().reset();
      m.student.zero_grad();
      projector_opt.zero_grad();
      if (wgan) g.generator_net().zero_grad();

      Tensor total = Tensor::scalar(0.0);
      if (wgan) {
        std::vector<std::size_t> attr_rows(seen_labels.begin(), seen_labels.end());
        auto gl = g.generator_loss(select_rows(ds.attributes, attr_rows), seen_labels, &cls, noise_rng);
        total = gl.loss;
        t.generator += gl.loss.item();
      }

      Tensor generated = unseen_labels.empty() ? Tensor::zeros({0, ds.feature_dim()}) : g.generate(unseen_attrs, noise_rng);
      if (wgan && !unseen_labels.empty()) generated = scale_gradient(generated, cfg.lambda);
      Tensor x = unseen_labels.empty() ? real : concat_rows({real, generated});
      std::vector<ClassId> labels = seen_labels;
      labels.insert(labels.end(), unseen_labels.begin(), unseen_labels.end());

      auto s = m.student.forward(x);
      TeacherOutputs tout;
      Tensor teacher_logits_all;
      {
        NoGradGuard no_grad;
        tout.embedding = teacher.embedding(real);
        tout.logits = teacher.logits(real);
        if (cfg.use_o2dbd) teacher_logits_all = teacher.logits(x.detach());
      }
      IdLoss id = loss_id(s, m.student, tout, labels, rows.size(), cfg.use_id2sd);
      Tensor distill = id.total;
      if (cfg.use_o2dbd) {
        Tensor h_tilde = confidence(m.sigmoid, id_score(cfg.ood, teacher_logits_all));
        Tensor h_hat = project_student(m.projector, s.logits);
        Tensor od = loss_od(h_hat, h_tilde, labels);
        t.od += od.item();
        distill = add(distill, od);
      }
      total = add(total, distill);
      check_finite(total.item(), e, "joint objective");
      t.be += id.be.item();
      t.kl += id.kl.item();
      t.cls += id.cls.item();

      backward(total);
      student_opt.step();
      if (cfg.use_o2dbd) projector_opt.step();
      if (wgan) {
        g.generator_optimizer().step();
        g.generator_net().zero_grad();
        g.critic_net().zero_grad();
      }
      tape().reset();
      ++nb;
    }
    const double inv = nb ? 1.0 / static_cast<double>(nb) : 0.0;
    for (double* v : {&t.critic, &t.wasserstein, &t.gradient_penalty, &t.generator, &t.be, &t.kl, &t.cls, &t.od}) *v *= inv;
    trace.push_back(t);
  }
  m.student.zero_grad();
  projector_opt.zero_grad();
  return m;
}

// Stage one routes by the teacher's in-distribution score (>= threshold:
// seen); stage two applies the matching expert.
struct TwoStageModel {
  const TeacherModel* detector = nullptr;
  OodScorer scorer;
  double threshold = 0.0;
  std::shared_ptr<TeacherModel> seen_expert;
  std::shared_ptr<TeacherModel> unseen_expert;

  std::vector<bool> route(const Tensor& x) const {
    NoGradGuard no_grad;
    Tensor s = id_score(scorer, detector->logits(x));
    std::vector<bool> seen(x.rows());
    for (std::size_t i = 0; i < seen.size(); ++i) seen[i] = s[i] >= threshold;
    return seen;
  }

  std::vector<ClassId> predict_routed(const Tensor& x, const std::vector<bool>& to_seen) const {
    NoGradGuard no_grad;
    auto ps = argmax_rows(seen_expert->logits(x));
    auto pu = argmax_rows(unseen_expert->logits(x));
    std::vector<ClassId> out(x.rows());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = to_seen[i] ? seen_expert->classes()[ps[i]] : unseen_expert->classes()[pu[i]];
    return out;
  }

  std::vector<ClassId> predict(const Tensor& x) const { return predict_routed(x, route(x)); }
};

// Threshold maximizing balanced detection accuracy, swept over evenly spaced
// quantiles of the pooled validation scores.
inline std::pair<double, double> select_threshold(const std::vector<double>& seen_scores, const std::vector<double>& unseen_scores,
                                                  std::size_t quantiles) {
  if (seen_scores.empty() || unseen_scores.empty()) throw StateError("select_threshold: empty validation partition");
  std::vector<double> pooled = seen_scores;
  pooled.insert(pooled.end(), unseen_scores.begin(), unseen_scores.end());
  std::sort(pooled.begin(), pooled.end());
  double best_gamma = pooled.front(), best_acc = -1.0;
  for (std::size_t q = 0; q < quantiles; ++q) {
    const double pos = static_cast<double>(q) / static_cast<double>(quantiles - 1) * static_cast<double>(pooled.size() - 1);
    const double gamma = pooled[static_cast<std::size_t>(std::llround(pos))];
    std::size_t tp = 0, tn = 0;
    for (double s : seen_scores) tp += s >= gamma;
    for (double s : unseen_scores) tn += s < gamma;
    const double acc = 0.5 * (static_cast<double>(tp) / static_cast<double>(seen_scores.size()) +
                              static_cast<double>(tn) / static_cast<double>(unseen_scores.size()));
    if (acc > best_acc) {
      best_acc = acc;
      best_gamma = gamma;
    }
  }
  return {best_gamma, best_acc};
}

struct TwoStageResult {
  TwoStageModel model;
  std::optional<double> detector_accuracy;
};

// Trains the seen expert on real rows `fit_rows` and the unseen expert on
// generated features. For the non-idealized variant the threshold is picked
// on `validation_rows` plus an equal number of generated unseen rows.
inline TwoStageResult train_two_stage(const TrainConfig& cfg, const GzslDataset& ds, const TeacherModel& teacher,
                                      const CondGenerator& g, const std::vector<std::size_t>& fit_rows,
                                      const std::vector<std::size_t>& validation_rows, bool idealized, const RunStreams& streams) {
  cfg.validate();
  if (!teacher.frozen()) throw StateError("train_two_stage: detector must be pretrained and frozen");
  if (cfg.syn_per_class < 1) throw StateError("train_two_stage: no generated data (syn_per_class = 0)");

  Rng seen_init = streams.stream("expert.seen.init");
  Rng unseen_init = streams.stream("expert.unseen.init");
  Rng batch_rng = streams.stream("expert.batches");
  Rng noise_rng = streams.stream("expert.noise");
  const NetworkShape shape = cfg.network(ds.feature_dim());

  TwoStageResult out;
  out.model.detector = &teacher;
  out.model.scorer = cfg.ood;
  out.model.seen_expert = std::make_shared<TeacherModel>(shape, ds.seen_classes, cfg.tau_s, seen_init);
  out.model.unseen_expert = std::make_shared<TeacherModel>(shape, ds.unseen_classes, cfg.tau_s, unseen_init);

  Tensor fit_x = select_rows(ds.features, fit_rows);
  auto fit_y = labels_of(ds, fit_rows);
  train_classifier(*out.model.seen_expert, [&] { return std::make_pair(fit_x, fit_y); }, cfg.epochs, cfg.batch_size,
                   cfg.student_optim, batch_rng);

  // Same number of generated rows per epoch as the joint student sees.
  const std::size_t batches = (fit_rows.size() + cfg.batch_size - 1) / cfg.batch_size;
  auto [pool_attrs, pool_labels] =
      repeat_class_attributes(ds, ds.unseen_classes, static_cast<std::size_t>(cfg.syn_per_class) * batches);
  train_classifier(
      *out.model.unseen_expert,
      [&] {
        NoGradGuard no_grad;
        return std::make_pair(g.generate(pool_attrs, noise_rng), pool_labels);
      },
      cfg.epochs, cfg.batch_size, cfg.student_optim, batch_rng);

  if (!idealized) {
    if (validation_rows.empty()) throw StateError("train_two_stage: empty validation split");
    const std::size_t U = ds.unseen_classes.size();
    const std::size_t per_class = (validation_rows.size() + U - 1) / U;
    auto [va, vl] = repeat_class_attributes(ds, ds.unseen_classes, per_class);
    NoGradGuard no_grad;
    Tensor gen = slice_rows(g.generate(va, noise_rng), 0, validation_rows.size());
    Tensor s_seen = id_score(cfg.ood, teacher.logits(select_rows(ds.features, validation_rows)));
    Tensor s_unseen = id_score(cfg.ood, teacher.logits(gen));
    auto [gamma, acc] = select_threshold(s_seen.to_vector(), s_unseen.to_vector(), cfg.ts_quantiles);
    out.model.threshold = gamma;
    out.detector_accuracy = acc;
  }
  return out;
}

struct RunOutput {
  RunReport report;
  std::shared_ptr<TeacherModel> teacher;
  std::shared_ptr<CondGenerator> generator;
  std::optional<JointModels> joint;
  std::optional<TwoStageModel> two_stage;
};

// One complete run: teacher pretraining, FG set-up (and warm-up for
// wgan_gp), then the configured mode, then U/S/H on the test split.
inline RunOutput run_single(const TrainConfig& cfg_in, const GzslDataset& ds) {
  const auto t0 = std::chrono::steady_clock::now();
  const TrainConfig cfg = cfg_in.resolved();
  cfg.validate();
  ds.validate();
  if (cfg.fg_variant == GeneratorVariant::gaussian_oracle && !ds.truth)
    throw StateError("gaussian_oracle generator needs a synthetic dataset with known ground truth");
  RunStreams streams(cfg.seed);

  RunOutput out;
  RunReport& rep = out.report;
  rep.mode = cfg.mode;
  rep.seed = cfg.seed;
  rep.lambda = cfg.lambda;
  rep.ood_method = cfg.ood.method;
  rep.use_id2sd = cfg.use_id2sd;
  rep.use_o2dbd = cfg.use_o2dbd;
  rep.epochs = cfg.epochs;

  // TS holds out part of the seen training rows for threshold selection.
  std::vector<std::size_t> fit_rows = ds.train_index, validation_rows;
  if (cfg.mode == RunMode::ts) {
    Rng split_rng = streams.stream("ts.split");
    auto rows = ds.train_index;
    split_rng.shuffle(rows);
    const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.ts_validation_fraction * static_cast<double>(rows.size()))));
    validation_rows.assign(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_val));
    fit_rows.assign(rows.begin() + static_cast<std::ptrdiff_t>(n_val), rows.end());
    std::sort(validation_rows.begin(), validation_rows.end());
    std::sort(fit_rows.begin(), fit_rows.end());
  }

  Rng teacher_init = streams.stream("teacher.init");
  Rng teacher_batches = streams.stream("teacher.batches");
  out.teacher = std::make_shared<TeacherModel>(cfg.network(ds.feature_dim()), ds.seen_classes, cfg.tau_o, teacher_init);
  auto trep = pretrain_teacher(*out.teacher, select_rows(ds.features, fit_rows), labels_of(ds, fit_rows), cfg.teacher_epochs,
                               cfg.batch_size, cfg.teacher_optim, teacher_batches);
  rep.teacher_train_accuracy = trep.train_accuracy;

  Rng fg_init = streams.stream("fg.init");
  out.generator = std::make_shared<CondGenerator>(
      cfg.fg_variant == GeneratorVariant::wgan_gp
          ? CondGenerator::wgan_gp(ds.attribute_dim(), ds.feature_dim(), cfg.wgan, fg_init)
          : CondGenerator::gaussian_oracle(*ds.truth));
  SeenClassifier cls = out.teacher->as_classifier();
  {
    Rng fg_batches = streams.stream("fg.batches");
    Rng fg_noise = streams.stream("fg.noise");
    std::size_t warmup = cfg.fg_warmup_epochs;
    // Two-stage modes get as many FG epochs as the joint modes.
    if (cfg.mode == RunMode::ts || cfg.mode == RunMode::iv_ts) warmup += cfg.epochs;
    train_generator(*out.generator, ds, fit_rows, cls, warmup, cfg.batch_size, fg_batches, fg_noise, &rep.trace);
  }

  Tensor test_x = select_rows(ds.features, ds.test_index);
  if (cfg.mode == RunMode::d3gzsl || cfg.mode == RunMode::baseline) {
    out.joint = train_d3gzsl(cfg, ds, *out.teacher, *out.generator, streams, rep.trace);
    rep.metrics = evaluate_gzsl(out.joint->student, ds);
  } else {
    const bool idealized = cfg.mode == RunMode::iv_ts;
    auto ts = train_two_stage(cfg, ds, *out.teacher, *out.generator, fit_rows, validation_rows, idealized, streams);
    std::vector<ClassId> pred;
    if (idealized) {
      std::vector<bool> truth_seen;
      for (auto r : ds.test_index) truth_seen.push_back(ds.is_seen(ds.labels[r]));
      pred = ts.model.predict_routed(test_x, truth_seen);
    } else {
      pred = ts.model.predict(test_x);
      rep.ts_threshold = ts.model.threshold;
      rep.ts_detector_accuracy = ts.detector_accuracy;
    }
    rep.metrics = evaluate_predictions(ds, pred);
    out.two_stage = std::move(ts.model);
  }
  rep.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace d3gzsl
