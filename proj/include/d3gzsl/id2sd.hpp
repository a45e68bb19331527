#pragma once

// In-distribution dual-space distillation: a frozen seen-class teacher and a
// unified (seen + unseen) student, aligned in embedding space (batch-wise
// cosine identity loss) and label space (KL between L2-normalized logit
// distributions), plus the student's classification loss.

#include <algorithm>
#include <cmath>
#include <vector>

#include "d3gzsl/data.hpp"
#include "d3gzsl/error.hpp"
#include "d3gzsl/feature_gen.hpp"
#include "d3gzsl/nn.hpp"
#include "d3gzsl/tensor.hpp"

namespace d3gzsl {

struct NetworkShape {
  std::size_t feature_dim = 32;
  std::size_t hidden_dim = 512;
  std::size_t embed_dim = 64;
};

// phi = C_o . E_o over seen classes; logit column k is seen_classes[k].
class TeacherModel {
 public:
  TeacherModel() = default;
  TeacherModel(const NetworkShape& shape, std::vector<ClassId> seen_classes, double temperature, Rng& rng)
      : embed_("E_o", {shape.feature_dim, shape.hidden_dim, shape.embed_dim}, {Activation::leaky_relu, Activation::identity}, rng),
        classify_("C_o", {shape.embed_dim, seen_classes.size()}, {Activation::identity}, rng),
        classes_(std::move(seen_classes)),
        temperature_(temperature) {
    if (!(temperature > 0.0)) throw ParameterError("teacher temperature must be > 0");
  }

  Tensor embedding(const Tensor& x) const { return embed_(x); }
  Tensor logits(const Tensor& x) const { return classify_(embed_(x)); }

  const std::vector<ClassId>& classes() const { return classes_; }
  double temperature() const { return temperature_; }
  std::size_t num_outputs() const { return classify_.out_dim(); }

  void freeze() {
    embed_.freeze();
    classify_.freeze();
  }
  bool frozen() const { return embed_.frozen() && classify_.frozen(); }

  std::vector<Tensor> parameters() const { return concat_parameters({embed_.parameters(), classify_.parameters()}); }
  std::vector<NamedTensor> named_parameters() const {
    auto out = embed_.named_parameters();
    auto c = classify_.named_parameters();
    out.insert(out.end(), c.begin(), c.end());
    return out;
  }
  std::uint64_t hash() const { return parameter_hash(parameters()); }

  SeenClassifier as_classifier() const {
    return {[this](const Tensor& x) { return logits(x); }, classes_};
  }

  Mlp& embed_net() { return embed_; }
  Mlp& classify_net() { return classify_; }

 private:
  Mlp embed_;
  Mlp classify_;
  std::vector<ClassId> classes_;
  double temperature_ = 1.0;
};

// psi = C_s . E_s over all S+U classes; logit column k is class id k.
class StudentModel {
 public:
  StudentModel() = default;
  StudentModel(const NetworkShape& shape, std::size_t num_classes, std::vector<ClassId> seen_columns, double temperature,
               Rng& rng)
      : embed_("E_s", {shape.feature_dim, shape.hidden_dim, shape.embed_dim}, {Activation::leaky_relu, Activation::identity}, rng),
        classify_("C_s", {shape.embed_dim, num_classes}, {Activation::identity}, rng),
        seen_columns_(std::move(seen_columns)),
        temperature_(temperature) {
    if (!(temperature > 0.0)) throw ParameterError("student temperature must be > 0");
    if (seen_columns_.size() > num_classes) throw ParameterError("more seen columns than classes");
    for (auto c : seen_columns_)
      if (c >= num_classes) throw ParameterError("seen column " + std::to_string(c) + " out of range");
  }

  struct Outputs {
    Tensor embedding;  // z-hat
    Tensor logits;     // v-hat
  };

  Outputs forward(const Tensor& x) const {
    Tensor z = embed_(x);
    return {z, classify_(z)};
  }
  Tensor logits(const Tensor& x) const { return forward(x).logits; }

  // v-double-dot: the seen-class columns of v-hat, in teacher column order.
  Tensor seen_logits(const Tensor& logits) const { return select_columns(logits, seen_columns_); }

  const std::vector<ClassId>& seen_columns() const { return seen_columns_; }
  double temperature() const { return temperature_; }
  std::size_t num_classes() const { return classify_.out_dim(); }

  std::vector<Tensor> parameters() const { return concat_parameters({embed_.parameters(), classify_.parameters()}); }
  std::vector<NamedTensor> named_parameters() const {
    auto out = embed_.named_parameters();
    auto c = classify_.named_parameters();
    out.insert(out.end(), c.begin(), c.end());
    return out;
  }
  void zero_grad() {
    embed_.zero_grad();
    classify_.zero_grad();
  }

  Mlp& embed_net() { return embed_; }
  Mlp& classify_net() { return classify_; }

 private:
  Mlp embed_;
  Mlp classify_;
  std::vector<ClassId> seen_columns_;
  double temperature_ = 1.0;
};

// -1/(n m) sum_ij [ 1{y_i = y'_j} log sigma(s_ij) + 1{y_i != y'_j} log(1 - sigma(s_ij)) ]
// for a similarity matrix s of shape [n, m]. Shared by the embedding and
// OOD-representation batch losses.
inline Tensor pairwise_identity_loss(const Tensor& similarity, const std::vector<ClassId>& row_labels,
                                     const std::vector<ClassId>& col_labels) {
  const std::size_t n = similarity.rows(), m = similarity.cols();
  if (row_labels.size() != n || col_labels.size() != m)
    throw ShapeError("pairwise_identity_loss: labels do not match " + shape_str(similarity.shape()));
  std::vector<double> same(n * m), diff(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const bool eq = row_labels[i] == col_labels[j];
      same[i * m + j] = eq ? 1.0 : 0.0;
      diff[i * m + j] = eq ? 0.0 : 1.0;
    }
  // -log sigma(s) = softplus(-s); -log(1 - sigma(s)) = softplus(s)
  Tensor pos = mul(Tensor::from_data({n, m}, std::move(same)), softplus(scale(similarity, -1.0)));
  Tensor neg = mul(Tensor::from_data({n, m}, std::move(diff)), softplus(similarity));
  return reduce_mean(add(pos, neg));
}

// Batch-wise embedding identity loss over real seen rows: a_ij = cos(z-hat_i, z-tilde_j).
inline Tensor loss_be(const Tensor& student_embedding, const Tensor& teacher_embedding, const std::vector<ClassId>& labels) {
  if (student_embedding.rows() == 0) throw ShapeError("loss_be: empty batch");
  if (student_embedding.shape() != teacher_embedding.shape())
    throw ShapeError("loss_be: " + shape_str(student_embedding.shape()) + " vs " + shape_str(teacher_embedding.shape()));
  Tensor a = cosine_similarity_matrix(student_embedding, teacher_embedding.detach());
  return pairwise_identity_loss(a, labels, labels);
}

// mean over rows of sum_k exp(ref_k) (ref_k - model_k), with log-probabilities in.
inline Tensor kl_from_log_probs(const Tensor& log_p_ref, const Tensor& log_p_model) {
  if (log_p_ref.shape() != log_p_model.shape())
    throw ShapeError("kl: " + shape_str(log_p_ref.shape()) + " vs " + shape_str(log_p_model.shape()));
  Tensor p = exp(log_p_ref);
  return scale(reduce_sum(mul(p, sub(log_p_ref, log_p_model))), 1.0 / static_cast<double>(log_p_ref.rows()));
}

// D_KL(p_o || p_s) between softmaxes of the L2-normalized teacher logits and
// the L2-normalized seen-class student logits. Teacher side is detached.
inline Tensor loss_kl(const Tensor& student_seen_logits, const Tensor& teacher_logits) {
  if (student_seen_logits.shape() != teacher_logits.shape())
    throw ShapeError("loss_kl: " + shape_str(student_seen_logits.shape()) + " vs " + shape_str(teacher_logits.shape()));
  Tensor log_po = log_softmax_rows(l2_normalize_rows(teacher_logits.detach()));
  Tensor log_ps = log_softmax_rows(l2_normalize_rows(student_seen_logits));
  return kl_from_log_probs(log_po.detach(), log_ps);
}

// Mean cross-entropy of softmax(v / tau) against class columns.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& columns, double temperature) {
  if (columns.size() != logits.rows()) throw ShapeError("cross_entropy: one label per row required");
  for (std::size_t i = 0; i < columns.size(); ++i)
    if (columns[i] >= logits.cols())
      throw ValidationError("label " + std::to_string(columns[i]) + " out of range [0, " + std::to_string(logits.cols()) + ")");
  return scale(reduce_mean(pick(log_softmax_rows(logits, temperature), columns)), -1.0);
}

inline Tensor loss_cls(const Tensor& student_logits, const std::vector<ClassId>& labels, double temperature) {
  return cross_entropy(student_logits, labels, temperature);
}

struct IdLoss {
  Tensor be, kl, cls, total;
};

struct TeacherOutputs {
  Tensor embedding;  // z-tilde (seen rows)
  Tensor logits;     // v-tilde (seen rows)
};

// Seen rows feed L_be and L_kl; every row feeds L_cls. With distill = false
// L_be and L_kl are reported as zero and excluded from the total.
inline IdLoss loss_id(const StudentModel::Outputs& student_out, const StudentModel& student, const TeacherOutputs& teacher_out,
                      const std::vector<ClassId>& labels, std::size_t n_seen, bool distill = true) {
  if (student_out.logits.rows() != labels.size()) throw ShapeError("loss_id: one label per row required");
  if (n_seen > labels.size()) throw ShapeError("loss_id: more seen rows than rows");
  IdLoss out;
  out.cls = loss_cls(student_out.logits, labels, student.temperature());
  if (distill && n_seen > 0) {
    std::vector<ClassId> seen_labels(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n_seen));
    out.be = loss_be(slice_rows(student_out.embedding, 0, n_seen), teacher_out.embedding, seen_labels);
    out.kl = loss_kl(student.seen_logits(slice_rows(student_out.logits, 0, n_seen)), teacher_out.logits);
    out.total = add(add(out.be, out.kl), out.cls);
  } else {
    out.be = Tensor::scalar(0.0);
    out.kl = Tensor::scalar(0.0);
    out.total = out.cls;
  }
  return out;
}

inline IdLoss loss_id(const Batch& batch, const TeacherModel& teacher, const StudentModel& student) {
  if (!teacher.frozen()) throw StateError("loss_id: teacher must be frozen");
  Tensor x = batch.features();
  auto s = student.forward(x);
  TeacherOutputs t{teacher.embedding(batch.seen_features).detach(), teacher.logits(batch.seen_features).detach()};
  return loss_id(s, student, t, batch.labels(), batch.n_a());
}

struct TeacherReport {
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;  // fraction in [0, 1]
};

// Cross-entropy pretraining of the teacher on real seen rows; the teacher is
// frozen on return.
inline TeacherReport pretrain_teacher(TeacherModel& teacher, const Tensor& features, const std::vector<ClassId>& labels,
                                      std::size_t epochs, std::size_t batch_size, const AdamOptions& optim, Rng& rng) {
  if (teacher.frozen()) throw StateError("pretrain_teacher: teacher is already frozen");
  SeenClassifier cls = teacher.as_classifier();
  std::vector<std::size_t> columns = cls.columns_of(labels);

  Adam opt(teacher.parameters(), optim);
  std::vector<std::size_t> rows(labels.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  TeacherReport report;
  for (std::size_t e = 0; e < epochs; ++e) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& b : epoch_batches(rows, batch_size, rng)) {
      tape().reset();
      opt.zero_grad();
      std::vector<std::size_t> cols;
      for (auto r : b) cols.push_back(columns[r]);
      Tensor loss = cross_entropy(teacher.logits(select_rows(features, b)), cols, teacher.temperature());
      backward(loss);
      opt.step();
      total += loss.item() * static_cast<double>(b.size());
      count += b.size();
    }
    tape().reset();
    report.epoch_loss.push_back(total / static_cast<double>(count));
  }
  opt.zero_grad();
  teacher.freeze();

  NoGradGuard no_grad;
  auto pred = argmax_rows(teacher.logits(features));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == columns[i];
  report.train_accuracy = static_cast<double>(correct) / static_cast<double>(pred.size());
  return report;
}

inline TeacherReport pretrain_teacher(TeacherModel& teacher, const GzslDataset& ds, std::size_t epochs, std::size_t batch_size,
                                      const AdamOptions& optim, Rng& rng) {
  for (auto r : ds.train_index)
    if (!ds.is_seen(ds.labels[r]))
      throw ValidationError("pretrain_teacher: train row " + std::to_string(r) + " has unseen class " + std::to_string(ds.labels[r]));
  return pretrain_teacher(teacher, select_rows(ds.features, ds.train_index), labels_of(ds, ds.train_index), epochs, batch_size,
                          optim, rng);
}

}  // namespace d3gzsl
