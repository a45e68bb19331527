#pragma once

// Gradient cases shared by the unit tests and the acceptance report: every
// differentiable op, then the composite losses.

#include <functional>
#include <string>
#include <vector>

#include "d3gzsl/feature_gen.hpp"
#include "d3gzsl/id2sd.hpp"
#include "d3gzsl/o2dbd.hpp"
#include "gradcheck.hpp"

namespace gradcheck {

using namespace d3gzsl;

struct OpCase {
  std::string name;
  std::vector<Shape> shapes;
  std::function<Tensor(const std::vector<Tensor>&)> op;
  double lo = -2.0, hi = 2.0, min_abs = 0.0;
};

std::vector<OpCase> op_cases() {
  return {
      {"add", {{3, 4}, {3, 4}}, [](const auto& x) { return add(x[0], x[1]); }},
      {"add_row_broadcast", {{3, 4}, {1, 4}}, [](const auto& x) { return add(x[0], x[1]); }},
      {"add_col_broadcast", {{3, 4}, {3, 1}}, [](const auto& x) { return add(x[0], x[1]); }},
      {"add_scalar_tensor", {{3, 4}, {}}, [](const auto& x) { return add(x[0], x[1]); }},
      {"sub", {{3, 4}, {3, 4}}, [](const auto& x) { return sub(x[0], x[1]); }},
      {"sub_broadcast", {{1, 4}, {3, 4}}, [](const auto& x) { return sub(x[0], x[1]); }},
      {"mul", {{3, 4}, {3, 4}}, [](const auto& x) { return mul(x[0], x[1]); }},
      {"mul_broadcast", {{3, 4}, {3, 1}}, [](const auto& x) { return mul(x[0], x[1]); }},
      {"div", {{3, 4}, {3, 4}}, [](const auto& x) { return div(x[0], x[1]); }, 0.5, 2.0},
      {"scale", {{3, 4}}, [](const auto& x) { return scale(x[0], -1.7); }},
      {"add_scalar", {{3, 4}}, [](const auto& x) { return add_scalar(x[0], 0.3); }},
      {"exp", {{3, 4}}, [](const auto& x) { return exp(x[0]); }},
      {"log", {{3, 4}}, [](const auto& x) { return log(x[0]); }, 0.2, 3.0},
      {"sqrt", {{3, 4}}, [](const auto& x) { return sqrt(x[0]); }, 0.2, 3.0},
      {"square", {{3, 4}}, [](const auto& x) { return square(x[0]); }},
      {"sigmoid", {{3, 4}}, [](const auto& x) { return sigmoid(x[0]); }, -4.0, 4.0},
      {"softplus", {{3, 4}}, [](const auto& x) { return softplus(x[0]); }, -4.0, 4.0},
      {"relu", {{3, 4}}, [](const auto& x) { return relu(x[0]); }, -2.0, 2.0, 0.05},
      {"leaky_relu", {{3, 4}}, [](const auto& x) { return leaky_relu(x[0]); }, -2.0, 2.0, 0.05},
      {"scale_gradient_identity", {{3, 4}}, [](const auto& x) { return scale_gradient(x[0], 1.0); }},
      {"reduce_sum", {{3, 4}}, [](const auto& x) { return reduce_sum(x[0]); }},
      {"reduce_mean", {{3, 4}}, [](const auto& x) { return reduce_mean(x[0]); }},
      {"reduce_sum_axis0", {{3, 4}}, [](const auto& x) { return reduce_sum(x[0], 0); }},
      {"reduce_sum_axis1", {{3, 4}}, [](const auto& x) { return reduce_sum(x[0], 1); }},
      {"reduce_mean_axis0", {{3, 4}}, [](const auto& x) { return reduce_mean(x[0], 0); }},
      {"matmul", {{3, 4}, {4, 2}}, [](const auto& x) { return matmul(x[0], x[1]); }},
      {"transpose", {{3, 4}}, [](const auto& x) { return transpose(x[0]); }},
      {"reshape", {{3, 4}}, [](const auto& x) { return reshape(x[0], {2, 6}); }},
      {"concat_rows", {{2, 3}, {4, 3}}, [](const auto& x) { return concat_rows({x[0], x[1]}); }},
      {"concat_cols", {{3, 2}, {3, 1}}, [](const auto& x) { return concat_cols({x[0], x[1]}); }},
      {"slice_columns", {{3, 5}}, [](const auto& x) { return slice_columns(x[0], 1, 4); }},
      {"select_columns", {{3, 5}}, [](const auto& x) { return select_columns(x[0], {4, 0, 4}); }},
      {"slice_rows", {{5, 3}}, [](const auto& x) { return slice_rows(x[0], 1, 3); }},
      {"select_rows", {{5, 3}}, [](const auto& x) { return select_rows(x[0], {2, 2, 0}); }},
      {"pick", {{3, 4}}, [](const auto& x) { return pick(x[0], {1, 3, 0}); }},
      {"softmax_rows", {{3, 4}}, [](const auto& x) { return softmax_rows(x[0]); }},
      {"softmax_rows_tau", {{3, 4}}, [](const auto& x) { return softmax_rows(x[0], 0.5); }},
      {"log_softmax_rows", {{3, 4}}, [](const auto& x) { return log_softmax_rows(x[0], 2.0); }},
      {"logsumexp_rows", {{3, 4}}, [](const auto& x) { return logsumexp_rows(x[0]); }},
      {"max_rows", {{3, 4}}, [](const auto& x) { return max_rows(x[0]); }},
      {"l2_normalize_rows", {{3, 4}}, [](const auto& x) { return l2_normalize_rows(x[0]); }, -2.0, 2.0, 0.1},
      {"cosine_similarity_matrix", {{3, 4}, {5, 4}}, [](const auto& x) { return cosine_similarity_matrix(x[0], x[1]); }, -2.0, 2.0, 0.1},
  };
}

// One random point of an op case: leaves and output weights drawn from `rng`.
inline Result check_op(const OpCase& c, Rng& rng) {
  std::vector<Tensor> leaves;
  for (const auto& s : c.shapes) leaves.push_back(random_tensor(s, rng, c.lo, c.hi, c.min_abs));
  Tensor w;
  {
    NoGradGuard no_grad;
    w = Tensor::uniform(c.op(leaves).shape(), rng, -1.0, 1.0);
  }
  return check([&](const std::vector<Tensor>& x) { return weighted_sum(c.op(x), w); }, leaves);
}

struct CompositeCase {
  std::string name;
  std::function<Result(Rng&)> point;  // draws one random point and checks it
};

inline std::vector<ClassId> random_labels(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<ClassId> y(n);
  for (auto& v : y) v = rng.uniform_index(k);
  return y;
}

inline Result check_loss_od(Rng& rng, OodMethod method) {
  OodProjector H(5, 6, rng);
  LearnableSigmoid eps(rng.uniform(0.5, 2.0), rng.uniform(-1.0, 1.0));
  Tensor teacher_logits = Tensor::randn({6, 3}, rng);
  std::vector<ClassId> labels{0, 1, 1, 2, 3, 4};
  OodScorer scorer{method, 1.5};
  std::vector<Tensor> leaves{Tensor::randn({6, 5}, rng)};
  for (const auto& t : H.parameters()) leaves.push_back(t);
  for (const auto& t : eps.parameters()) leaves.push_back(t);
  return check(
      [&](const auto& x) {
        Tensor h_hat = project_student(H, x[0]);
        Tensor h_tilde = confidence(eps, id_score(scorer, teacher_logits));
        return loss_od(h_hat, h_tilde, labels);
      },
      leaves);
}

inline std::vector<CompositeCase> composite_cases() {
  return {
      {"loss_be",
       [](Rng& rng) {
         auto y = random_labels(5, 2, rng);
         Tensor zt = Tensor::randn({5, 3}, rng);
         return check([&](const auto& x) { return loss_be(x[0], zt, y); }, {Tensor::randn({5, 3}, rng)});
       }},
      {"loss_kl",
       [](Rng& rng) {
         Tensor o = Tensor::randn({4, 3}, rng);
         return check([&](const auto& x) { return loss_kl(x[0], o); }, {Tensor::randn({4, 3}, rng)});
       }},
      {"loss_cls",
       [](Rng& rng) {
         auto y = random_labels(4, 5, rng);
         return check([&](const auto& x) { return loss_cls(x[0], y, 0.7); }, {Tensor::randn({4, 5}, rng)});
       }},
      {"loss_id",
       [](Rng& rng) {
         const NetworkShape shape{6, 8, 4};
         const std::vector<ClassId> seen{0, 2, 3};
         TeacherModel teacher(shape, seen, 1.0, rng);
         teacher.freeze();
         StudentModel student(shape, 5, seen, 1.0, rng);
         Tensor x = Tensor::randn({7, 6}, rng);
         std::vector<ClassId> labels{0, 2, 3, 0, 1, 4, 4};
         Tensor real = slice_rows(x, 0, 4);
         TeacherOutputs t{teacher.embedding(real), teacher.logits(real)};
         return check([&](const auto&) { return loss_id(student.forward(x), student, t, labels, 4).total; }, student.parameters());
       }},
      {"loss_od_msp", [](Rng& rng) { return check_loss_od(rng, OodMethod::msp); }},
      {"loss_od_energy", [](Rng& rng) { return check_loss_od(rng, OodMethod::energy); }},
      {"wgan_critic_loss",
       [](Rng& rng) {
         auto g = CondGenerator::wgan_gp(3, 4, {8, 8, 10.0, 5, 0.01, {}, {}}, rng);
         Tensor real = Tensor::randn({5, 4}, rng), a = Tensor::randn({5, 3}, rng);
         const auto noise_seed = rng.engine()();
         return check(
             [&](const auto&) {
               Rng fixed(noise_seed);
               return g.critic_loss(real, a, fixed).loss;
             },
             g.critic_net().parameters());
       }},
      {"wgan_generator_loss",
       [](Rng& rng) {
         auto g = CondGenerator::wgan_gp(3, 4, {8, 8, 10.0, 5, 0.5, {}, {}}, rng);
         TeacherModel cls_net({4, 6, 3}, {0, 2}, 1.0, rng);
         cls_net.freeze();
         SeenClassifier cls = cls_net.as_classifier();
         Tensor a = Tensor::randn({5, 3}, rng);
         std::vector<ClassId> labels{0, 2, 2, 0, 0};
         const auto noise_seed = rng.engine()();
         return check(
             [&](const auto&) {
               Rng fixed(noise_seed);
               return g.generator_loss(a, labels, &cls, fixed).loss;
             },
             g.generator_net().parameters());
       }},
  };
}

}  // namespace gradcheck
